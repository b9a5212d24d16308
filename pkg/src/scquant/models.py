"""Convolutional encoder/decoder pair with a quantized bottleneck.

Convolutions are expressed as a patch gather (``im2col``) followed by a plain
matrix multiply, so their backward passes reuse the matmul adjoint; the
transposed convolution runs the same machinery in reverse through a patch
scatter (``col2im``). Both gather and scatter share one cached index plan per
geometry, and the scatter uses ``np.bincount``, which keeps repeated backward
passes bitwise reproducible.

Architecture (channels ``c``, residual width ``r``, latent width ``f``):

* encoder: two stride-2 4x4 convolutions (in -> c -> c, rectified), ``n``
  residual blocks, then a linear 1x1 projection c -> f. Spatial size drops by
  a factor of four.
* residual block (post-activation wiring): ``relu(x + conv1x1(relu(conv3x3(x))))``.
* decoder: the mirror image, with stride-2 transposed convolutions and a
  linear output layer.

Pixels are expected in [0, 1]; the reconstruction loss is plain mean squared
error, and there are no normalization layers, so forward passes are exactly
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .errors import ShapeMismatchError
from .linalg import Rng
from .validation import check_positive_int

_DOWN = dict(kernel=(4, 4), stride=2, pad=1)
_MID = dict(kernel=(3, 3), stride=1, pad=1)
_ONE = dict(kernel=(1, 1), stride=1, pad=0)


# ---------------------------------------------------------------------------
# Patch gather/scatter plans


@lru_cache(maxsize=None)
def _patch_plan(n, c, h, w, kh, kw, stride, pad):
    """Flat indices into the zero-padded input for every patch position.

    Returns ``(idx, ho, wo, hp, wp)`` where ``idx`` has shape
    ``(c*kh*kw, n*ho*wo)``; rows run channel-major over the kernel window and
    columns run row-major over ``(image, out_row, out_col)``.
    """
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError(
            f"kernel ({kh}x{kw}) does not fit input {h}x{w} with pad {pad}"
        )
    chan = np.repeat(np.arange(c), kh * kw)
    ki = np.tile(np.repeat(np.arange(kh), kw), c)
    kj = np.tile(np.arange(kw), c * kh)
    img = np.repeat(np.arange(n), ho * wo)
    oi = np.tile(np.repeat(np.arange(ho), wo), n)
    oj = np.tile(np.arange(wo), n * ho)
    rows = ki[:, None] + stride * oi[None, :]
    cols = kj[:, None] + stride * oj[None, :]
    idx = ((img[None, :] * c + chan[:, None]) * hp + rows) * wp + cols
    idx.setflags(write=False)
    return idx, ho, wo, hp, wp


def im2col(x: Node, kernel, stride: int, pad: int) -> tuple[Node, tuple[int, int]]:
    """Gather sliding-window patches of ``x`` into a matrix node.

    ``x`` is (N, C, H, W); the result is ``(C*kh*kw, N*Ho*Wo)`` plus the
    output grid size. The adjoint scatter-adds back through the same plan.
    """
    if x.value.ndim != 4:
        raise ShapeMismatchError(f"expected a 4-D image batch, got {x.value.shape}")
    n, c, h, w = x.value.shape
    kh, kw = kernel
    idx, ho, wo, hp, wp = _patch_plan(n, c, h, w, kh, kw, stride, pad)
    padded = np.zeros((n, c, hp, wp))
    padded[:, :, pad : pad + h, pad : pad + w] = x.value
    value = padded.ravel()[idx]

    def vjp(u):
        flat = np.bincount(idx.ravel(), weights=u.ravel(), minlength=n * c * hp * wp)
        g = flat.reshape(n, c, hp, wp)
        return np.ascontiguousarray(g[:, :, pad : pad + h, pad : pad + w])

    return x.tape.record("im2col", value, [(x, vjp)]), (ho, wo)


def col2im(cols: Node, out_shape, kernel, stride: int, pad: int) -> Node:
    """Scatter-add patch columns back onto an image grid (adjoint of im2col)."""
    n, c, h, w = out_shape
    kh, kw = kernel
    idx, ho, wo, hp, wp = _patch_plan(n, c, h, w, kh, kw, stride, pad)
    if cols.value.shape != idx.shape:
        raise ShapeMismatchError(
            f"patch matrix has shape {cols.value.shape}, plan expects {idx.shape}"
        )
    flat = np.bincount(idx.ravel(), weights=cols.value.ravel(), minlength=n * c * hp * wp)
    value = np.ascontiguousarray(
        flat.reshape(n, c, hp, wp)[:, :, pad : pad + h, pad : pad + w]
    )

    def vjp(u):
        padded = np.zeros((n, c, hp, wp))
        padded[:, :, pad : pad + h, pad : pad + w] = u
        return padded.ravel()[idx]

    return cols.tape.record("col2im", value, [(cols, vjp)])


# ---------------------------------------------------------------------------
# Convolutions


def conv2d(x: Node, w: Node, b: Node | None, kernel, stride: int, pad: int) -> Node:
    """2-D convolution; weights are ``(Cout, Cin*kh*kw)`` patch-major."""
    n, cin, _, _ = x.value.shape
    kh, kw = kernel
    cout, patch = w.value.shape
    if patch != cin * kh * kw:
        raise ShapeMismatchError(
            f"weight patch size {patch} != Cin*kh*kw = {cin * kh * kw}"
        )
    cols, (ho, wo) = im2col(x, kernel, stride, pad)
    out = ad.matmul(w, cols)
    out = ad.reshape(out, (cout, n, ho, wo))
    out = ad.transpose(out, (1, 0, 2, 3))
    if b is not None:
        out = ad.add(out, ad.reshape(b, (1, cout, 1, 1)))
    return out


def conv2d_transpose(x: Node, w: Node, b: Node | None, kernel, stride: int, pad: int) -> Node:
    """Stride-``s`` upsampling convolution; weights are ``(Cin, Cout*kh*kw)``.

    Output spatial size is ``(H-1)*stride + kh - 2*pad`` per axis, the exact
    inverse of the forward convolution's shape arithmetic.
    """
    n, cin, hi, wi = x.value.shape
    kh, kw = kernel
    cin_w, patch = w.value.shape
    if cin_w != cin or patch % (kh * kw):
        raise ShapeMismatchError(
            f"weight shape {w.value.shape} incompatible with input channels {cin} "
            f"and kernel {kh}x{kw}"
        )
    cout = patch // (kh * kw)
    ho = (hi - 1) * stride + kh - 2 * pad
    wo = (wi - 1) * stride + kw - 2 * pad
    xf = ad.reshape(ad.transpose(x, (1, 0, 2, 3)), (cin, n * hi * wi))
    cols = ad.matmul(ad.transpose(w), xf)
    out = col2im(cols, (n, cout, ho, wo), kernel, stride, pad)
    if b is not None:
        out = ad.add(out, ad.reshape(b, (1, cout, 1, 1)))
    return out


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class AutoencoderParams:
    """All weights of the encoder/decoder pair, keyed by layer name.

    ``arrays`` preserves insertion order, which fixes both the optimizer's
    update order and the initialization draw order.
    """

    in_channels: int
    conv_channels: int
    residual_channels: int
    n_residual_blocks: int
    latent_dim: int
    arrays: dict[str, np.ndarray]

    @classmethod
    def shapes(
        cls,
        in_channels: int,
        conv_channels: int,
        residual_channels: int,
        n_residual_blocks: int,
        latent_dim: int,
    ) -> list[tuple[str, tuple[int, ...]]]:
        ci, c, r, f = in_channels, conv_channels, residual_channels, latent_dim
        out: list[tuple[str, tuple[int, ...]]] = [
            ("enc.down1.w", (c, ci * 16)),
            ("enc.down1.b", (c,)),
            ("enc.down2.w", (c, c * 16)),
            ("enc.down2.b", (c,)),
        ]
        for i in range(n_residual_blocks):
            out += [
                (f"enc.res{i}.w1", (r, c * 9)),
                (f"enc.res{i}.b1", (r,)),
                (f"enc.res{i}.w2", (c, r)),
                (f"enc.res{i}.b2", (c,)),
            ]
        out += [
            ("enc.proj.w", (f, c)),
            ("enc.proj.b", (f,)),
            ("dec.proj.w", (c, f)),
            ("dec.proj.b", (c,)),
        ]
        for i in range(n_residual_blocks):
            out += [
                (f"dec.res{i}.w1", (r, c * 9)),
                (f"dec.res{i}.b1", (r,)),
                (f"dec.res{i}.w2", (c, r)),
                (f"dec.res{i}.b2", (c,)),
            ]
        out += [
            ("dec.up1.w", (c, c * 16)),
            ("dec.up1.b", (c,)),
            ("dec.up2.w", (c, ci * 16)),
            ("dec.up2.b", (ci,)),
        ]
        return out

    @classmethod
    def initialize(
        cls,
        rng: Rng,
        *,
        in_channels: int = 3,
        conv_channels: int = 32,
        residual_channels: int = 16,
        n_residual_blocks: int = 2,
        latent_dim: int = 8,
    ) -> "AutoencoderParams":
        """Draw weights at scale 1/sqrt(fan-in) in fixed name order; zero biases."""
        for label, v in (
            ("in_channels", in_channels),
            ("conv_channels", conv_channels),
            ("residual_channels", residual_channels),
            ("latent_dim", latent_dim),
        ):
            check_positive_int(v, label)
        if n_residual_blocks < 0:
            raise ValueError("n_residual_blocks must be >= 0")
        arrays: dict[str, np.ndarray] = {}
        for name, shape in cls.shapes(
            in_channels, conv_channels, residual_channels, n_residual_blocks, latent_dim
        ):
            if name.rsplit(".", 1)[1].startswith("b"):
                arrays[name] = np.zeros(shape)
            elif name.startswith("dec.up"):
                # Transposed conv: each output pixel collects Cin * (kernel
                # taps per stride cell) contributions.
                fan_in = shape[0] * 16 // 4
                arrays[name] = rng.normal(shape, scale=fan_in**-0.5)
            else:
                arrays[name] = rng.normal(shape, scale=shape[1] ** -0.5)
        return cls(
            in_channels,
            conv_channels,
            residual_channels,
            n_residual_blocks,
            latent_dim,
            arrays,
        )

    def enter(self, tape: Tape) -> dict[str, Node]:
        """Register every array as a tape leaf; returns name -> leaf node."""
        return {name: tape.leaf(arr, op=name) for name, arr in self.arrays.items()}

    def n_entries(self) -> int:
        return sum(a.size for a in self.arrays.values())


# ---------------------------------------------------------------------------
# Latent layout


@dataclass
class LatentBatch:
    """Encoder output as both the (N, F, H, W) grid and its (F, M) matrix view.

    ``M = N*H*W`` with columns ordered row-major over ``(image, row, col)``;
    ``unflatten_latents`` inverts the layout bitwise.
    """

    grid: Node
    flat: Node

    @property
    def grid_shape(self) -> tuple[int, int, int, int]:
        return self.grid.value.shape


def flatten_latents(z: Node) -> Node:
    if z.value.ndim != 4:
        raise ShapeMismatchError(f"expected a 4-D latent grid, got {z.value.shape}")
    n, f, h, w = z.value.shape
    return ad.reshape(ad.transpose(z, (1, 0, 2, 3)), (f, n * h * w))


def unflatten_latents(flat: Node, grid_shape) -> Node:
    n, f, h, w = grid_shape
    if flat.value.shape != (f, n * h * w):
        raise ShapeMismatchError(
            f"flat latents have shape {flat.value.shape}, expected {(f, n * h * w)}"
        )
    return ad.transpose(ad.reshape(flat, (f, n, h, w)), (1, 0, 2, 3))


# ---------------------------------------------------------------------------
# Forward passes


def _residual_block(h: Node, leaves: dict[str, Node], prefix: str) -> Node:
    t = conv2d(h, leaves[f"{prefix}.w1"], leaves[f"{prefix}.b1"], **_MID)
    t = ad.relu(t)
    t = conv2d(t, leaves[f"{prefix}.w2"], leaves[f"{prefix}.b2"], **_ONE)
    return ad.relu(ad.add(h, t))


def encoder_forward(x: Node, leaves: dict[str, Node], params: AutoencoderParams) -> LatentBatch:
    """Map an image batch (N, Cin, H, W) to latents (N, F, H/4, W/4)."""
    if x.value.ndim != 4:
        raise ShapeMismatchError(f"expected a 4-D image batch, got {x.value.shape}")
    n, cin, h, w = x.value.shape
    if cin != params.in_channels:
        raise ShapeMismatchError(
            f"batch has {cin} channels, model expects {params.in_channels}"
        )
    if h % 4 or w % 4:
        raise ShapeMismatchError(f"spatial size {h}x{w} must be divisible by 4")
    out = ad.relu(conv2d(x, leaves["enc.down1.w"], leaves["enc.down1.b"], **_DOWN))
    out = ad.relu(conv2d(out, leaves["enc.down2.w"], leaves["enc.down2.b"], **_DOWN))
    for i in range(params.n_residual_blocks):
        out = _residual_block(out, leaves, f"enc.res{i}")
    z = conv2d(out, leaves["enc.proj.w"], leaves["enc.proj.b"], **_ONE)
    return LatentBatch(grid=z, flat=flatten_latents(z))


def decoder_forward(z_q: Node, leaves: dict[str, Node], params: AutoencoderParams) -> Node:
    """Map quantized latents (N, F, H, W) back to an image batch (N, Cin, 4H, 4W)."""
    if z_q.value.ndim != 4:
        raise ShapeMismatchError(f"expected a 4-D latent grid, got {z_q.value.shape}")
    if z_q.value.shape[1] != params.latent_dim:
        raise ShapeMismatchError(
            f"latents have {z_q.value.shape[1]} channels, model expects {params.latent_dim}"
        )
    out = conv2d(z_q, leaves["dec.proj.w"], leaves["dec.proj.b"], **_ONE)
    for i in range(params.n_residual_blocks):
        out = _residual_block(out, leaves, f"dec.res{i}")
    out = ad.relu(conv2d_transpose(out, leaves["dec.up1.w"], leaves["dec.up1.b"], **_DOWN))
    return conv2d_transpose(out, leaves["dec.up2.w"], leaves["dec.up2.b"], **_DOWN)


# ---------------------------------------------------------------------------
# Training loss


def vqvae_loss_parts(
    x: Node, x_hat: Node, z_e: Node, z_q: Node, beta: float = 0.25
) -> tuple[Node, dict[str, float]]:
    """Reconstruction plus the two stop-gradient pull terms.

    total = mean((x - x_hat)^2)
          + (1 - beta) * mean((sg[z_e] - z_q)^2)   # moves the codes
          + beta       * mean((z_e - sg[z_q])^2)   # commits the encoder

    Means are over pixels and latent entries respectively. Returns the scalar
    node and the detached numeric parts for logging.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    recon = ad.mse(x_hat, x)
    codebook_pull = ad.mse(z_q, ad.detach(z_e))
    encoder_pull = ad.mse(z_e, ad.detach(z_q))
    total = ad.add(
        recon,
        ad.add(ad.scale(codebook_pull, 1.0 - beta), ad.scale(encoder_pull, beta)),
    )
    parts = {
        "recon": float(recon.value),
        "codebook": float(codebook_pull.value),
        "commit": float(encoder_pull.value),
    }
    return total, parts


def vqvae_loss(x: Node, x_hat: Node, z_e: Node, z_q: Node, beta: float = 0.25) -> Node:
    total, _ = vqvae_loss_parts(x, x_hat, z_e, z_q, beta)
    return total
