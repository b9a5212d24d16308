"""Training loop, metrics logging, and checkpoint serialization.

Determinism contract: every source of randomness is a counter-based stream
keyed by ``(seed, tag << 40 | index)`` — weight init, codebook init, per-epoch
shuffles, per-step sampling noise, per-step replacement draws — and all
reductions run in fixed order, so identical config+seed reproduces artifacts
byte for byte. Wall-clock columns default to 0.0 for the same reason; pass
``timing=True`` to record real durations (at the cost of bytewise replay of
the metrics file).

Checkpoint format ("SCQC"): magic, u32 version, u64 header length, a UTF-8
JSON header holding the config echo and a parameter manifest (name, shape,
payload byte offset), then the raw little-endian float64 blobs in manifest
order. The codebook travels as the final manifest entry.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import re
import struct
import time
from dataclasses import asdict, dataclass, field

import jsonschema
import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .datasets import read_scqd
from .errors import CheckpointFormatError, TrainingDivergedError
from .linalg import Rng
from .models import (
    AutoencoderParams,
    decoder_forward,
    encoder_forward,
    unflatten_latents,
)
from .quantizers import (
    Codebook,
    QuantizeResult,
    codebook_replacement,
    commitment_terms,
    gumbel_quantize,
    perplexity,
    rq_quantize,
    sanitize_weights,
    vq_assign,
    vq_quantize_ste,
)
from .scq import ScqConfig, scq_exact_quantize, scq_fast

QUANTIZER_KINDS = ("vq", "vq+replacement", "gumbel", "rq", "scq_fast", "scq_exact")
SOFT_KINDS = ("scq_fast", "scq_exact")

CSV_HEADER = "step,epoch,split,mse,quant_error,perplexity,loss_total,loss_commit,min_entry,wall_ms"

CHECKPOINT_MAGIC = b"SCQC"
CHECKPOINT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sIQ")

# Stream tags; the low 40 bits carry a step/epoch/image counter.
_TAG_PARAMS = 1
_TAG_CODEBOOK = 2
_TAG_SHUFFLE = 3
_TAG_NOISE = 4
_TAG_REPLACE = 5


def _stream(tag: int, index: int = 0) -> int:
    if index >= 1 << 40:
        raise ValueError("stream index overflows the 40-bit counter field")
    return (tag << 40) | index


# ---------------------------------------------------------------------------
# Configuration

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["quantizer", "seed", "dataset"],
    "properties": {
        "quantizer": {"enum": list(QUANTIZER_KINDS)},
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {"type": "string", "minLength": 1},
        "test_dataset": {"type": ["string", "null"]},
        "test_fraction": {"type": "number", "minimum": 0.0, "exclusiveMaximum": 1.0},
        "out_dir": {"type": "string", "minLength": 1},
        "codebook_size": {"type": "integer", "minimum": 1},
        "latent_dim": {"type": "integer", "minimum": 1},
        "lam": {"type": "number", "exclusiveMinimum": 0.0},
        "projection_steps": {"type": "integer", "minimum": 1},
        "beta": {"type": "number", "exclusiveMinimum": 0.0, "exclusiveMaximum": 1.0},
        "depth": {"type": "integer", "minimum": 1},
        "tau": {"type": "number", "exclusiveMinimum": 0.0},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0.0},
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "conv_channels": {"type": "integer", "minimum": 1},
        "residual_channels": {"type": "integer", "minimum": 1},
        "n_residual_blocks": {"type": "integer", "minimum": 0},
        "log_interval": {"type": "integer", "minimum": 1},
        "replace_after": {"type": "integer", "minimum": 1},
        "scq_commitment": {"type": "boolean"},
        "final_clamp": {"type": "boolean"},
        "timing": {"type": "boolean"},
    },
}


@dataclass
class TrainConfig:
    """Run description; every field is echoed into checkpoints and schemas.

    ``seed`` is mandatory — there is deliberately no entropy-derived default.
    """

    quantizer: str
    seed: int
    dataset: str
    test_dataset: str | None = None
    test_fraction: float = 0.1
    out_dir: str = "runs"
    codebook_size: int = 64
    latent_dim: int = 8
    lam: float = 0.1
    projection_steps: int = 20
    beta: float = 0.25
    depth: int = 2
    tau: float = 1.0
    learning_rate: float = 2e-4
    batch_size: int = 32
    epochs: int = 1
    conv_channels: int = 32
    residual_channels: int = 16
    n_residual_blocks: int = 2
    log_interval: int = 50
    replace_after: int = 100
    scq_commitment: bool = True
    final_clamp: bool = False
    timing: bool = False


def validate_config_dict(raw: dict) -> None:
    """Schema-check a raw config mapping; raises jsonschema.ValidationError."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise errors[0]


def config_pointer(error: jsonschema.ValidationError) -> str:
    """JSON pointer for a validation error, naming missing required fields."""
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        match = re.match(r"'([^']+)'", error.message)
        if match:
            parts.append(match.group(1))
    return "/" + "/".join(parts)


def config_from_dict(raw: dict) -> TrainConfig:
    validate_config_dict(raw)
    return TrainConfig(**raw)


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
        )


_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


def adam_step(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, applied to ``arrays`` in place."""
    state.t += 1
    bc1 = 1.0 - _ADAM_B1**state.t
    bc2 = 1.0 - _ADAM_B2**state.t
    for name, arr in arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= _ADAM_B1
        m += (1.0 - _ADAM_B1) * g
        v *= _ADAM_B2
        v += (1.0 - _ADAM_B2) * (g * g)
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + _ADAM_EPS)


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsRow:
    step: int
    epoch: int
    split: str
    mse: float
    quant_error: float
    perplexity: float
    loss_total: float
    loss_commit: float
    min_entry: float
    wall_ms: float

    def as_csv(self) -> str:
        return ",".join(
            [
                str(self.step),
                str(self.epoch),
                self.split,
                repr(float(self.mse)),
                repr(float(self.quant_error)),
                repr(float(self.perplexity)),
                repr(float(self.loss_total)),
                repr(float(self.loss_commit)),
                repr(float(self.min_entry)),
                repr(float(self.wall_ms)),
            ]
        )


def read_metrics(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER.split(","):
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for rec in reader:
            rows.append(
                MetricsRow(
                    step=int(rec["step"]),
                    epoch=int(rec["epoch"]),
                    split=rec["split"],
                    mse=float(rec["mse"]),
                    quant_error=float(rec["quant_error"]),
                    perplexity=float(rec["perplexity"]),
                    loss_total=float(rec["loss_total"]),
                    loss_commit=float(rec["loss_commit"]),
                    min_entry=float(rec["min_entry"]),
                    wall_ms=float(rec["wall_ms"]),
                )
            )
    return rows


class _Accumulator:
    """Fixed-order aggregation of per-batch statistics for one split/interval."""

    def __init__(self, n_codes: int):
        self.usage = np.zeros(n_codes)
        self.columns = 0
        self.pixel_sq = 0.0
        self.pixels = 0
        self.latent_sq = 0.0
        self.latents = 0
        self.loss_sum = 0.0
        self.commit_sum = 0.0
        self.images = 0
        self.min_entry = math.inf
        self.wall_ms = 0.0

    def add(self, batch_images: int, pixels: int, recon: float, result: QuantizeResult,
            loss_total: float, loss_commit: float, wall_ms: float) -> None:
        w = result.assignment.weights
        self.usage += sanitize_weights(w).sum(axis=1)
        self.columns += w.shape[1]
        self.pixel_sq += recon * pixels
        self.pixels += pixels
        self.latent_sq += result.quant_error * result.quantized.value.size
        self.latents += result.quantized.value.size
        self.loss_sum += loss_total * batch_images
        self.commit_sum += loss_commit * batch_images
        self.images += batch_images
        self.min_entry = min(self.min_entry, result.min_entry)
        self.wall_ms += wall_ms

    def row(self, step: int, epoch: int, split: str) -> MetricsRow:
        if self.images == 0:
            raise ValueError("cannot summarize an empty interval")
        mean_usage = (self.usage / self.columns)[:, None]
        return MetricsRow(
            step=step,
            epoch=epoch,
            split=split,
            mse=self.pixel_sq / self.pixels,
            quant_error=self.latent_sq / self.latents,
            perplexity=perplexity(mean_usage),
            loss_total=self.loss_sum / self.images,
            loss_commit=self.commit_sum / self.images,
            min_entry=self.min_entry,
            wall_ms=self.wall_ms,
        )


# ---------------------------------------------------------------------------
# Quantizer dispatch


def quantize_batch(
    kind: str,
    flat_node,
    c_node,
    config: TrainConfig,
    rng: Rng | None,
    training: bool,
) -> QuantizeResult:
    """Apply the configured bottleneck to flattened latents.

    The extra ``identity`` kind (not reachable from configs) bypasses
    quantization entirely; it exists for ablation checks of the metric
    pipeline, where the quantization error must read exactly zero.
    """
    if kind in ("vq", "vq+replacement"):
        return vq_quantize_ste(flat_node, c_node, config.beta)
    if kind == "gumbel":
        return gumbel_quantize(flat_node, c_node, config.tau, rng, training=training)
    if kind == "rq":
        return rq_quantize(flat_node, c_node, config.depth, config.beta)
    if kind == "scq_fast":
        cfg = ScqConfig(
            lam=config.lam,
            projection_steps=config.projection_steps,
            final_clamp=config.final_clamp,
        )
        return scq_fast(flat_node, c_node, cfg)
    if kind == "scq_exact":
        return scq_exact_quantize(flat_node, c_node, config.lam)
    if kind == "identity":
        _, assignment = vq_assign(flat_node.value, c_node.value)
        return QuantizeResult(
            quantized=flat_node,
            decoder_input=flat_node,
            assignment=assignment,
            quant_error=0.0,
            min_entry=float(assignment.weights.min()),
            perplexity=perplexity(assignment),
        )
    raise ValueError(f"unknown quantizer kind {kind!r}")


@dataclass
class BatchPass:
    """Everything one end-to-end batch pass produces."""

    tape: Tape
    leaves: dict
    c_node: object
    loss: object
    recon: float
    commit: float
    result: QuantizeResult
    latent_columns: np.ndarray


def _forward_batch(
    params: AutoencoderParams,
    codebook: Codebook,
    config: TrainConfig,
    batch: np.ndarray,
    rng: Rng | None,
    training: bool,
) -> BatchPass:
    tape = Tape()
    leaves = params.enter(tape)
    c_node = tape.leaf(codebook.vectors, op="codebook")
    x_node = tape.leaf(batch, op="batch")
    latent = encoder_forward(x_node, leaves, params)
    result = quantize_batch(config.quantizer, latent.flat, c_node, config, rng, training)
    z_q = unflatten_latents(result.decoder_input, latent.grid_shape)
    x_hat = decoder_forward(z_q, leaves, params)
    recon = ad.mse(x_hat, x_node)

    commit_node = None
    if result.commit is not None:
        # Quantizer-supplied commitment terms use per-column averaging;
        # rescale to the per-entry convention of the training loss.
        commit_node = ad.scale(result.commit, 1.0 / float(latent.flat.value.shape[0]))
    elif config.quantizer in SOFT_KINDS and config.scq_commitment:
        commit_node = commitment_terms(latent.flat, result.quantized, config.beta)

    if commit_node is None:
        loss = recon
        commit_value = 0.0
    else:
        loss = ad.add(recon, commit_node)
        commit_value = float(commit_node.value)
    return BatchPass(
        tape, leaves, c_node, loss, float(recon.value), commit_value, result,
        latent.flat.value,
    )


# ---------------------------------------------------------------------------
# Checkpoints


def write_checkpoint(path, config: TrainConfig, params: AutoencoderParams, codebook: Codebook) -> None:
    manifest = []
    blobs = []
    offset = 0
    entries = list(params.arrays.items()) + [("quantizer.codebook", codebook.vectors)]
    for name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": config_to_dict(config),
        "in_channels": params.in_channels,
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[TrainConfig, AutoencoderParams, Codebook]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_PREFIX.size:
        raise CheckpointFormatError(f"{path}: truncated prefix")
    magic, version, header_len = _CKPT_PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    body = raw[_CKPT_PREFIX.size :]
    if len(body) < header_len:
        raise CheckpointFormatError(f"{path}: header shorter than declared")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc
    for key in ("config", "in_channels", "manifest"):
        if key not in header:
            raise CheckpointFormatError(f"{path}: header is missing {key!r}")
    try:
        config = config_from_dict(header["config"])
    except (jsonschema.ValidationError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: invalid config echo ({exc})") from exc
    payload = body[header_len:]
    arrays: dict[str, np.ndarray] = {}
    end = 0
    for entry in header["manifest"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 8
        if end > len(payload):
            raise CheckpointFormatError(
                f"{path}: manifest entry {entry['name']!r} overruns the payload"
            )
        arrays[entry["name"]] = (
            np.frombuffer(payload, dtype="<f8", count=count, offset=start)
            .astype(np.float64)
            .reshape(shape)
        )
    if end != len(payload):
        raise CheckpointFormatError(f"{path}: {len(payload) - end} trailing payload bytes")
    if "quantizer.codebook" not in arrays:
        raise CheckpointFormatError(f"{path}: checkpoint lacks a codebook entry")
    codebook = Codebook(vectors=arrays.pop("quantizer.codebook"))
    params = AutoencoderParams(
        in_channels=int(header["in_channels"]),
        conv_channels=config.conv_channels,
        residual_channels=config.residual_channels,
        n_residual_blocks=config.n_residual_blocks,
        latent_dim=config.latent_dim,
        arrays=arrays,
    )
    return config, params, codebook


# ---------------------------------------------------------------------------
# Training and evaluation


@dataclass
class TrainResult:
    out_dir: str
    metrics_path: str
    final_checkpoint: str
    best_checkpoint: str
    rows: list[MetricsRow] = field(default_factory=list)
    best_step: int = 0
    best_mse: float = math.inf
    steps: int = 0

    @property
    def final_test_row(self) -> MetricsRow:
        for row in reversed(self.rows):
            if row.split == "test":
                return row
        raise ValueError("no test rows recorded")


def _split_dataset(config: TrainConfig):
    images = read_scqd(config.dataset)
    if config.test_dataset:
        return images, read_scqd(config.test_dataset)
    n = images.shape[0]
    n_test = max(1, int(n * config.test_fraction))
    if n - n_test < 1:
        raise ValueError(
            f"dataset of {n} images cannot be split with test_fraction={config.test_fraction}"
        )
    return images[: n - n_test], images[n - n_test :]


def _run_split(
    params: AutoencoderParams,
    codebook: Codebook,
    config: TrainConfig,
    images: np.ndarray,
    *,
    step: int,
    epoch: int,
    split: str = "test",
) -> MetricsRow:
    """Gradient-free pass over a split in file order; one summary row."""
    acc = _Accumulator(codebook.n_codes)
    start = time.perf_counter() if config.timing else 0.0
    for lo in range(0, images.shape[0], config.batch_size):
        batch = images[lo : lo + config.batch_size]
        p = _forward_batch(params, codebook, config, batch, None, training=False)
        acc.add(batch.shape[0], batch.size, p.recon, p.result, float(p.loss.value), p.commit, 0.0)
    if config.timing:
        acc.wall_ms = (time.perf_counter() - start) * 1000.0
    return acc.row(step, epoch, split)


def evaluate(checkpoint_path, dataset_path, batch_size: int | None = None) -> MetricsRow:
    """Score a stored model over a dataset; same pass the trainer logs with."""
    config, params, codebook = read_checkpoint(checkpoint_path)
    if batch_size is not None:
        config.batch_size = batch_size
    images = read_scqd(dataset_path)
    return _run_split(params, codebook, config, images, step=0, epoch=0)


def train(config: TrainConfig) -> TrainResult:
    """Run the configured training; writes metrics.csv, final.scqc, best.scqc."""
    train_images, test_images = _split_dataset(config)
    in_channels = train_images.shape[1]

    params = AutoencoderParams.initialize(
        Rng(config.seed, _stream(_TAG_PARAMS)),
        in_channels=in_channels,
        conv_channels=config.conv_channels,
        residual_channels=config.residual_channels,
        n_residual_blocks=config.n_residual_blocks,
        latent_dim=config.latent_dim,
    )
    codebook = Codebook.random_init(
        config.latent_dim, config.codebook_size, Rng(config.seed, _stream(_TAG_CODEBOOK))
    )

    opt_arrays = dict(params.arrays)
    opt_arrays["quantizer.codebook"] = codebook.vectors
    state = AdamState.for_arrays(opt_arrays)

    os.makedirs(config.out_dir, exist_ok=True)
    metrics_path = os.path.join(config.out_dir, "metrics.csv")
    final_path = os.path.join(config.out_dir, "final.scqc")
    best_path = os.path.join(config.out_dir, "best.scqc")
    result = TrainResult(config.out_dir, metrics_path, final_path, best_path)

    best_snapshot = None

    def consider_best(row: MetricsRow, step: int):
        nonlocal best_snapshot
        if row.mse < result.best_mse:
            result.best_mse = row.mse
            result.best_step = step
            best_snapshot = (
                copy.deepcopy(params.arrays),
                codebook.vectors.copy(),
                codebook.stale_steps.copy(),
            )

    lines = [CSV_HEADER]

    def log(row: MetricsRow):
        result.rows.append(row)
        lines.append(row.as_csv())

    initial = _run_split(params, codebook, config, test_images, step=0, epoch=0)
    log(initial)
    consider_best(initial, 0)

    step = 0
    acc = _Accumulator(codebook.n_codes)
    for epoch in range(1, config.epochs + 1):
        order = Rng(config.seed, _stream(_TAG_SHUFFLE, epoch)).permutation(
            train_images.shape[0]
        )
        for lo in range(0, order.size, config.batch_size):
            batch = train_images[order[lo : lo + config.batch_size]]
            step += 1
            tick = time.perf_counter() if config.timing else 0.0
            noise_rng = Rng(config.seed, _stream(_TAG_NOISE, step))

            def batch_stats(extra):
                stats = {
                    "step": step,
                    "epoch": epoch,
                    "batch_min": float(batch.min()),
                    "batch_max": float(batch.max()),
                    "batch_mean": float(batch.mean()),
                }
                stats.update(extra)
                return stats

            try:
                p = _forward_batch(params, codebook, config, batch, noise_rng, training=True)
            except ValueError as exc:
                # Exploding weights surface as non-finite intermediate values
                # before any loss exists to inspect.
                raise TrainingDivergedError(
                    f"non-finite values in the forward pass at step {step}: {exc}",
                    stats=batch_stats({"loss_total": math.nan}),
                ) from exc
            loss_value = float(p.loss.value)
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}",
                    stats=batch_stats(
                        {
                            "loss_total": loss_value,
                            "reconstruction": p.recon,
                            "commitment": p.commit,
                            "quant_error": p.result.quant_error,
                        }
                    ),
                )
            grads = p.tape.backward(p.loss)
            grad_map = {name: grads[node] for name, node in p.leaves.items()}
            grad_map["quantizer.codebook"] = grads[p.c_node]
            adam_step(opt_arrays, grad_map, state, config.learning_rate)

            if config.quantizer == "vq+replacement":
                codebook.note_usage(p.result.indices)
                codebook_replacement(
                    codebook,
                    p.latent_columns,
                    config.replace_after,
                    Rng(config.seed, _stream(_TAG_REPLACE, step)),
                )

            wall = (time.perf_counter() - tick) * 1000.0 if config.timing else 0.0
            acc.add(batch.shape[0], batch.size, p.recon, p.result, loss_value, p.commit, wall)
            if step % config.log_interval == 0:
                log(acc.row(step, epoch, "train"))
                acc = _Accumulator(codebook.n_codes)

        if epoch == config.epochs and acc.images:
            log(acc.row(step, epoch, "train"))
        test_row = _run_split(params, codebook, config, test_images, step=step, epoch=epoch)
        log(test_row)
        consider_best(test_row, step)

    result.steps = step
    with open(metrics_path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    write_checkpoint(final_path, config, params, codebook)
    if best_snapshot is None:
        write_checkpoint(best_path, config, params, codebook)
    else:
        best_params = AutoencoderParams(
            in_channels=params.in_channels,
            conv_channels=params.conv_channels,
            residual_channels=params.residual_channels,
            n_residual_blocks=params.n_residual_blocks,
            latent_dim=params.latent_dim,
            arrays=best_snapshot[0],
        )
        best_codebook = Codebook(vectors=best_snapshot[1], stale_steps=best_snapshot[2])
        write_checkpoint(best_path, config, best_params, best_codebook)
    return result
