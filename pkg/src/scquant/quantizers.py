"""Quantization bottlenecks and their shared metrics.

Hard vector quantization with straight-through gradients, the Gumbel
relaxation, residual (multi-depth) quantization, usage-based code
replacement, perplexity, and top-S restriction. Encoder outputs are handled
column-wise: a latent batch is a (F, M) matrix whose M columns are the
embedding vectors to quantize against a (F, K) codebook.

Gradient conventions:
  * hard quantizers feed the decoder a straight-through composite (forward
    hard codes, backward identity to the encoder output), while the raw code
    combination stays differentiable w.r.t. the codebook so commitment terms
    can train it;
  * soft quantizers feed the decoder the differentiable combination itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ShapeMismatchError
from .linalg import Rng
from .validation import as_matrix, check_positive_int

ONE_HOT = "one_hot"
SOFT = "soft"


@dataclass
class Codebook:
    """K learnable code vectors (columns) plus per-code staleness counters.

    ``stale_steps[k]`` counts consecutive recorded steps in which code ``k``
    received no assignment; it resets to zero on use or replacement.
    """

    vectors: np.ndarray
    stale_steps: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.vectors = as_matrix(self.vectors, "codebook")
        if self.vectors.shape[0] < 1 or self.vectors.shape[1] < 1:
            raise ShapeMismatchError("codebook needs at least one row and one column")
        if self.stale_steps is None:
            self.stale_steps = np.zeros(self.n_codes, dtype=np.int64)
        else:
            self.stale_steps = np.asarray(self.stale_steps, dtype=np.int64)
            if self.stale_steps.shape != (self.n_codes,):
                raise ShapeMismatchError("staleness counter length must equal K")

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_codes(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def random_init(cls, dim: int, n_codes: int, rng: Rng, scale: float = 0.1) -> "Codebook":
        dim = check_positive_int(dim, "dim")
        n_codes = check_positive_int(n_codes, "n_codes")
        return cls(vectors=rng.normal((dim, n_codes), scale=scale))

    @classmethod
    def from_samples(cls, samples: np.ndarray, n_codes: int, rng: Rng) -> "Codebook":
        """Initialize codes by drawing columns of ``samples`` (F, n) with replacement."""
        samples = as_matrix(samples, "samples")
        n_codes = check_positive_int(n_codes, "n_codes")
        picks = rng.integers(0, samples.shape[1], (n_codes,))
        return cls(vectors=samples[:, picks].copy())

    def note_usage(self, indices) -> None:
        """Record one step of assignments; untouched codes grow staler."""
        self.stale_steps += 1
        used = np.unique(np.asarray(indices))
        if used.size:
            if used.min() < 0 or used.max() >= self.n_codes:
                raise IndexError("usage index out of range")
            self.stale_steps[used] = 0


@dataclass
class Assignment:
    """Columns of weight over codes; one-hot for hard quantizers, soft otherwise."""

    weights: np.ndarray
    kind: str

    def __post_init__(self):
        self.weights = as_matrix(self.weights, "assignment weights")
        if self.kind not in (ONE_HOT, SOFT):
            raise ValueError(f"unknown assignment kind {self.kind!r}")

    @property
    def n_codes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_columns(self) -> int:
        return self.weights.shape[1]

    def validate(self, atol: float = 1e-9) -> None:
        """Check the structural invariant of this kind; raises on violation."""
        w = self.weights
        if self.kind == ONE_HOT:
            if not np.all((w == 0.0) | (w == 1.0)) or not np.all(w.sum(axis=0) == 1.0):
                raise ValueError("one-hot assignment must have exactly one unit entry per column")
        else:
            gap = np.max(np.abs(w.sum(axis=0) - 1.0)) if w.size else 0.0
            if gap > atol:
                raise ValueError(f"soft assignment columns must sum to 1 (off by {gap:.3e})")


@dataclass
class QuantizeResult:
    """Everything a training step needs from one bottleneck application.

    ``quantized`` is the raw code combination (differentiable w.r.t. the
    codebook); ``decoder_input`` is what the decoder consumes (a
    straight-through composite for hard quantizers, ``quantized`` itself for
    soft ones). ``commit`` is a ready-made commitment loss node for
    quantizers that define their own (residual depth-averaging); None means
    the caller applies the standard two-term commitment.
    """

    quantized: Node
    decoder_input: Node
    assignment: Assignment
    quant_error: float
    min_entry: float
    perplexity: float
    indices: np.ndarray | None = None
    codes_per_depth: np.ndarray | None = None
    commit: Node | None = None
    flagged_columns: tuple[int, ...] = ()

    def __post_init__(self):
        if self.quant_error < 0:
            raise ValueError("quant_error cannot be negative")


def vq_assign(z, codes) -> tuple[np.ndarray, Assignment]:
    """Nearest-code index per column; ties break to the lowest index.

    Distances are computed in the expanded form ||c||^2 - 2 c.z (the ||z||^2
    term is constant per column and cannot change the argmin).
    """
    z = as_matrix(z, "z")
    codes = as_matrix(codes, "codes")
    if z.shape[0] != codes.shape[0]:
        raise ShapeMismatchError(
            f"embedding dims differ: z {z.shape} vs codes {codes.shape}"
        )
    scores = codes.T @ z * (-2.0) + np.sum(codes * codes, axis=0)[:, None]
    indices = np.argmin(scores, axis=0)
    weights = np.zeros((codes.shape[1], z.shape[1]))
    weights[indices, np.arange(z.shape[1])] = 1.0
    return indices, Assignment(weights=weights, kind=ONE_HOT)


def _column_mse(a: Node, b: Node) -> Node:
    """Mean over columns of the squared column distance (= entry mse * F)."""
    return ad.scale(ad.mse(a, b), float(a.value.shape[0]))


def commitment_terms(z_node: Node, zq_node: Node, beta: float, column_mean: bool = False) -> Node:
    """The two stop-gradient commitment terms, (1-b)||sg[z]-zq||^2 + b||z-sg[zq]||^2.

    ``column_mean`` selects per-column averaging (hard-quantizer op
    convention); the default averages per entry (training-loss convention).
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie strictly between 0 and 1, got {beta}")
    metric = _column_mse if column_mean else ad.mse
    pull_codes = metric(ad.detach(z_node), zq_node)
    pull_encoder = metric(z_node, ad.detach(zq_node))
    return ad.add(ad.scale(pull_codes, 1.0 - beta), ad.scale(pull_encoder, beta))


def _mean_sq(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(np.mean(d * d))


def vq_quantize_ste(z_node: Node, c_node: Node, beta: float) -> QuantizeResult:
    """Hard nearest-code quantization with a straight-through backward pass.

    The commitment loss follows the per-column convention (squared column
    distances averaged over the M columns).
    """
    indices, assignment = vq_assign(z_node.value, c_node.value)
    hard = ad.gather_columns(c_node, indices)
    commit = commitment_terms(z_node, hard, beta, column_mean=True)
    return QuantizeResult(
        quantized=hard,
        decoder_input=ad.ste(z_node, hard),
        assignment=assignment,
        quant_error=_mean_sq(z_node.value, hard.value),
        min_entry=float(assignment.weights.min()),
        perplexity=perplexity(assignment),
        indices=indices,
        commit=commit,
    )


def codebook_replacement(codebook: Codebook, z_e, threshold_steps: int, rng: Rng) -> Codebook:
    """Overwrite codes stale for >= threshold_steps with random batch columns.

    Mutates ``codebook.vectors`` in place (training owns the array) and
    resets the counters of replaced codes. Replacement picks are drawn in
    increasing code order, so a fixed rng stream replays exactly.
    """
    z_e = as_matrix(z_e, "z_e")
    threshold_steps = check_positive_int(threshold_steps, "threshold_steps")
    if z_e.shape[0] != codebook.dim:
        raise ShapeMismatchError("batch embedding dim does not match the codebook")
    if z_e.shape[1] == 0:
        return codebook
    stale = np.flatnonzero(codebook.stale_steps >= threshold_steps)
    for k in stale:
        pick = int(rng.integers(0, z_e.shape[1]))
        codebook.vectors[:, k] = z_e[:, pick]
        codebook.stale_steps[k] = 0
    return codebook


def gumbel_quantize(
    z_node: Node,
    c_node: Node,
    tau: float,
    rng: Rng | None,
    training: bool = True,
) -> QuantizeResult:
    """Stochastic quantization with Gumbel-perturbed distance logits.

    Logits are -||z - c_j||^2 / tau, built on the tape so gradients reach
    both the encoder output and the codebook. In training mode the decoder
    sees the softmax combination (soft backward) while the reported indices
    are the perturbed argmax draws; in evaluation mode the noise is omitted
    and the hard nearest code is used.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z_sq = ad.sum_axis(ad.mul(z_node, z_node), 0, keepdims=True)  # (1, M)
    c_sq = ad.sum_axis(ad.mul(c_node, c_node), 0, keepdims=True)  # (1, K)
    cross = ad.matmul(ad.transpose(c_node), z_node)  # (K, M)
    d_sq = ad.add(ad.sub(z_sq, ad.scale(cross, 2.0)), ad.transpose(c_sq))
    logits = ad.scale(d_sq, -1.0 / tau)

    if training:
        if rng is None:
            raise ValueError("training-mode draws need an rng")
        noise = z_node.tape.leaf(rng.gumbel(logits.value.shape), op="gumbel_noise")
        perturbed = ad.add(logits, noise)
        weights_node = ad.softmax_cols(perturbed)
        indices = np.argmax(perturbed.value, axis=0)
        assignment = Assignment(weights=weights_node.value, kind=SOFT)
        quantized = ad.matmul(c_node, weights_node)
        decoder_input = quantized
    else:
        indices, assignment = vq_assign(z_node.value, c_node.value)
        quantized = ad.gather_columns(c_node, indices)
        decoder_input = ad.ste(z_node, quantized)

    return QuantizeResult(
        quantized=quantized,
        decoder_input=decoder_input,
        assignment=assignment,
        quant_error=_mean_sq(z_node.value, quantized.value),
        min_entry=float(assignment.weights.min()),
        perplexity=perplexity(assignment),
        indices=indices,
    )


def rq_quantize(z_node: Node, c_node: Node, depth: int, beta: float) -> QuantizeResult:
    """Residual quantization: recursively quantize what the previous depth missed.

    One shared codebook serves every depth. The decoder input applies the
    straight-through trick to the summed codes; the commitment loss is the
    per-depth commitment (per-column convention, residual vs chosen code)
    averaged over depths. Depth 1 reduces exactly to ``vq_quantize_ste``.
    """
    depth = check_positive_int(depth, "depth")
    residual = z_node
    total: Node | None = None
    commit: Node | None = None
    codes_per_depth = np.empty((depth, z_node.value.shape[1]), dtype=np.int64)
    usage_weights = np.zeros((c_node.value.shape[1], z_node.value.shape[1]))
    for d in range(depth):
        indices, assignment = vq_assign(residual.value, c_node.value)
        codes_per_depth[d] = indices
        usage_weights += assignment.weights
        hard = ad.gather_columns(c_node, indices)
        level_commit = commitment_terms(residual, hard, beta, column_mean=True)
        commit = level_commit if commit is None else ad.add(commit, level_commit)
        total = hard if total is None else ad.add(total, hard)
        residual = ad.sub(residual, ad.detach(hard))
    commit = ad.scale(commit, 1.0 / depth)
    usage = Assignment(weights=usage_weights / depth, kind=SOFT)
    return QuantizeResult(
        quantized=total,
        decoder_input=ad.ste(z_node, total),
        assignment=usage,
        quant_error=_mean_sq(z_node.value, total.value),
        min_entry=float(usage.weights.min()),
        perplexity=perplexity(usage),
        indices=codes_per_depth[0],
        codes_per_depth=codes_per_depth,
        commit=commit,
    )


def sanitize_weights(weights: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero and renormalize columns to sum 1."""
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    sums = w.sum(axis=0, keepdims=True)
    sums = np.where(sums > 0.0, sums, 1.0)
    return w / sums


def perplexity(assignment) -> float:
    """Exponential of the entropy of mean code usage; 1 = collapse, K = uniform.

    Accepts an Assignment or a raw (K, M) weight matrix. Negative entries
    are clamped and columns renormalized before measuring, so slightly
    infeasible soft weights are still measurable.
    """
    weights = assignment.weights if isinstance(assignment, Assignment) else assignment
    w = sanitize_weights(as_matrix(weights, "weights"))
    mean_usage = w.mean(axis=1)
    positive = mean_usage[mean_usage > 0.0]
    entropy = -float(np.sum(positive * np.log(positive)))
    value = float(np.exp(entropy))
    return min(max(value, 1.0), float(w.shape[0]))


def top_s_restrict(assignment: Assignment, s: int) -> Assignment:
    """Keep the S largest weights per column (ties to lowest index), renormalize.

    Only meaningful for soft assignments; the restriction of a one-hot
    assignment is a usage error upstream.
    """
    if assignment.kind != SOFT:
        raise ValueError("top-S restriction applies to soft assignments only")
    s = check_positive_int(s, "s")
    k = assignment.n_codes
    if s > k:
        raise ValueError(f"s must not exceed the number of codes ({s} > {k})")
    w = assignment.weights
    # Stable sort on negated weights: equal weights keep ascending index order.
    order = np.argsort(-w, axis=0, kind="stable")
    kept = np.zeros_like(w)
    cols = np.arange(w.shape[1])
    for rank in range(s):
        rows = order[rank]
        kept[rows, cols] = w[rows, cols]
    sums = kept.sum(axis=0, keepdims=True)
    sums = np.where(sums > 0.0, sums, 1.0)
    return Assignment(weights=kept / sums, kind=SOFT)
