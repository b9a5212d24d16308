"""Estimator-style wrappers: fit/transform/predict over the quantizers.

These classes follow the scikit-learn conventions — constructor arguments are
hyperparameters, ``fit`` learns state into trailing-underscore attributes and
returns ``self``, ``get_params``/``set_params`` come from ``BaseEstimator`` —
so the bottlenecks compose with pipelines and grid search. Rows of ``X`` are
samples; internally everything runs column-major against a (F, K) codebook.

``transform`` is the gradient-free path. Code that differentiates through a
bottleneck uses ``quantize`` with an explicit tape, which returns the full
``QuantizeResult``.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .autodiff import Node, Tape
from .datasets import write_scqd
from .linalg import Rng
from .quantizers import (
    Codebook,
    QuantizeResult,
    gumbel_quantize,
    rq_quantize,
    vq_assign,
    vq_quantize_ste,
)
from .scq import ScqConfig, scq_exact_quantize, scq_fast
from .trainer import TrainConfig, evaluate, read_checkpoint, train
from .validation import as_image_batch, as_matrix


class _CodebookQuantizer(TransformerMixin, BaseEstimator):
    """Shared fit/transform plumbing; subclasses provide the tape-level op."""

    def __init__(self, n_codes=64, random_state=0):
        self.n_codes = n_codes
        self.random_state = random_state

    def fit(self, X, y=None):
        """Learn a codebook by sampling rows of ``X`` (with replacement)."""
        X = as_matrix(X, "X")
        self.codebook_ = Codebook.from_samples(
            X.T, self.n_codes, Rng(self.random_state, 0)
        )
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self, X):
        if not hasattr(self, "codebook_"):
            raise NotFittedError(
                f"{type(self).__name__} must be fitted before calling this method"
            )
        X = as_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, fit saw {self.n_features_in_}"
            )
        return X

    def quantize(
        self,
        tape: Tape,
        z_node: Node,
        c_node: Node | None = None,
        rng: Rng | None = None,
        training: bool = True,
    ) -> QuantizeResult:
        """Tape-level bottleneck application (columns of ``z_node`` are samples)."""
        raise NotImplementedError

    def transform(self, X):
        """Quantize rows of ``X``; returns the reconstructed rows."""
        X = self._check_fitted(X)
        tape = Tape()
        z_node = tape.leaf(X.T)
        c_node = tape.leaf(self.codebook_.vectors)
        result = self.quantize(tape, z_node, c_node, rng=None, training=False)
        return result.quantized.value.T.copy()

    def predict(self, X):
        """Index of the dominant code per row."""
        X = self._check_fitted(X)
        indices, _ = vq_assign(X.T, self.codebook_.vectors)
        return indices


class VectorQuantizer(_CodebookQuantizer):
    """Nearest-code quantization with straight-through training gradients."""

    def __init__(self, n_codes=64, beta=0.25, random_state=0):
        super().__init__(n_codes=n_codes, random_state=random_state)
        self.beta = beta

    def quantize(self, tape, z_node, c_node=None, rng=None, training=True):
        if c_node is None:
            c_node = tape.leaf(self.codebook_.vectors)
        return vq_quantize_ste(z_node, c_node, self.beta)


class GumbelQuantizer(_CodebookQuantizer):
    """Stochastic quantization via Gumbel-perturbed distance logits.

    ``transform`` is deterministic (noise-free nearest code); ``sample`` draws
    the stochastic soft assignment used during training.
    """

    def __init__(self, n_codes=64, tau=1.0, random_state=0):
        super().__init__(n_codes=n_codes, random_state=random_state)
        self.tau = tau

    def quantize(self, tape, z_node, c_node=None, rng=None, training=True):
        if c_node is None:
            c_node = tape.leaf(self.codebook_.vectors)
        return gumbel_quantize(z_node, c_node, self.tau, rng, training=training)

    def sample(self, X, rng: Rng):
        X = self._check_fitted(X)
        tape = Tape()
        result = self.quantize(tape, tape.leaf(X.T), rng=rng, training=True)
        return result.quantized.value.T.copy()


class ResidualVectorQuantizer(_CodebookQuantizer):
    """Multi-depth quantization of successive residuals with a shared codebook."""

    def __init__(self, n_codes=64, depth=2, beta=0.25, random_state=0):
        super().__init__(n_codes=n_codes, random_state=random_state)
        self.depth = depth
        self.beta = beta

    def quantize(self, tape, z_node, c_node=None, rng=None, training=True):
        if c_node is None:
            c_node = tape.leaf(self.codebook_.vectors)
        return rq_quantize(z_node, c_node, self.depth, self.beta)


class SoftConvexQuantizer(_CodebookQuantizer):
    """Convex-combination quantization (simplex-constrained least squares).

    ``mode="fast"`` runs the fixed-iteration relaxation; ``mode="exact"``
    solves each column to optimality and differentiates implicitly.
    """

    def __init__(
        self,
        n_codes=64,
        lam=0.1,
        projection_steps=20,
        mode="fast",
        final_clamp=False,
        random_state=0,
    ):
        super().__init__(n_codes=n_codes, random_state=random_state)
        self.lam = lam
        self.projection_steps = projection_steps
        self.mode = mode
        self.final_clamp = final_clamp

    def quantize(self, tape, z_node, c_node=None, rng=None, training=True):
        if self.mode not in ("fast", "exact"):
            raise ValueError(f"mode must be 'fast' or 'exact', got {self.mode!r}")
        if c_node is None:
            c_node = tape.leaf(self.codebook_.vectors)
        if self.mode == "exact":
            return scq_exact_quantize(z_node, c_node, self.lam)
        cfg = ScqConfig(
            lam=self.lam,
            projection_steps=self.projection_steps,
            final_clamp=self.final_clamp,
        )
        return scq_fast(z_node, c_node, cfg)

    def predict(self, X):
        """Index of the largest convex weight per row."""
        X = self._check_fitted(X)
        tape = Tape()
        result = self.quantize(tape, tape.leaf(X.T), training=False)
        return np.argmax(result.assignment.weights, axis=0)

    def weights(self, X):
        """The (n_samples, n_codes) convex-combination weights."""
        X = self._check_fitted(X)
        tape = Tape()
        result = self.quantize(tape, tape.leaf(X.T), training=False)
        return result.assignment.weights.T.copy()


class QuantizedAutoencoder(BaseEstimator):
    """End-to-end trained autoencoder with a quantized bottleneck.

    ``fit`` accepts an (N, C, H, W) image batch in [0, 1], runs the full
    training loop, and keeps the resulting model; ``transform`` returns
    reconstructions and ``score`` the negative test MSE (bigger is better, as
    scikit-learn expects).
    """

    def __init__(
        self,
        quantizer="scq_fast",
        n_codes=64,
        latent_dim=8,
        epochs=1,
        batch_size=32,
        learning_rate=2e-4,
        lam=0.1,
        projection_steps=20,
        beta=0.25,
        depth=2,
        tau=1.0,
        conv_channels=32,
        residual_channels=16,
        n_residual_blocks=2,
        seed=0,
        out_dir=None,
    ):
        self.quantizer = quantizer
        self.n_codes = n_codes
        self.latent_dim = latent_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lam = lam
        self.projection_steps = projection_steps
        self.beta = beta
        self.depth = depth
        self.tau = tau
        self.conv_channels = conv_channels
        self.residual_channels = residual_channels
        self.n_residual_blocks = n_residual_blocks
        self.seed = seed
        self.out_dir = out_dir

    def fit(self, X, y=None):
        X = as_image_batch(X, "X")
        out_dir = self.out_dir or tempfile.mkdtemp(prefix="scquant-")
        os.makedirs(out_dir, exist_ok=True)
        dataset = os.path.join(out_dir, "fit.scqd")
        write_scqd(dataset, X)
        config = TrainConfig(
            quantizer=self.quantizer,
            seed=self.seed,
            dataset=dataset,
            out_dir=out_dir,
            codebook_size=self.n_codes,
            latent_dim=self.latent_dim,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lam=self.lam,
            projection_steps=self.projection_steps,
            beta=self.beta,
            depth=self.depth,
            tau=self.tau,
            conv_channels=self.conv_channels,
            residual_channels=self.residual_channels,
            n_residual_blocks=self.n_residual_blocks,
        )
        self.result_ = train(config)
        self.config_, self.params_, self.codebook_ = read_checkpoint(
            self.result_.final_checkpoint
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("QuantizedAutoencoder must be fitted first")

    def transform(self, X):
        """Reconstruct images through the quantized bottleneck."""
        from .models import decoder_forward, encoder_forward, unflatten_latents
        from .trainer import quantize_batch

        self._check_fitted()
        X = as_image_batch(X, "X")
        tape = Tape()
        leaves = self.params_.enter(tape)
        c_node = tape.leaf(self.codebook_.vectors)
        latent = encoder_forward(tape.leaf(X), leaves, self.params_)
        result = quantize_batch(
            self.config_.quantizer, latent.flat, c_node, self.config_, None, False
        )
        z_q = unflatten_latents(result.decoder_input, latent.grid_shape)
        return decoder_forward(z_q, leaves, self.params_).value

    def reconstruct(self, X):
        return self.transform(X)

    def score(self, X, y=None):
        """Negative reconstruction MSE over ``X``."""
        self._check_fitted()
        X = as_image_batch(X, "X")
        recon = self.transform(X)
        return -float(np.mean((recon - X) ** 2))
