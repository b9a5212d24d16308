"""Command-line surface: data generation/ingestion, training, analyses.

Verbs
-----
- ``gen-synth``     write a seeded synthetic image dataset (SCQD format)
- ``ingest-cifar``  convert standard CIFAR-10 binary batches to SCQD
- ``train``         run the training loop from a JSON config (optionally
                    fanned out over ``--seed-list`` with an aggregate CSV)
- ``eval``          score a checkpoint over a dataset, emit one metrics row
- ``analyze-tops``  reconstruction MSE as a function of the number of
                    retained convex weights per column (soft quantizers only)
- ``gradcheck``     finite-difference audit of every registered backward pass

Exit codes: 0 success, 1 check/abort failure, 2 usage or schema error.
Every command is deterministic: identical arguments and seeds produce
byte-identical output artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from typing import Callable

import jsonschema
import numpy as np

from . import autodiff as ad
from . import models, scq
from .autodiff import Node, Tape
from .datasets import ingest_cifar, read_scqd, synthesize_images, write_scqd
from .errors import CheckpointFormatError, DatasetFormatError, TrainingDivergedError
from .linalg import Rng
from .models import decoder_forward, encoder_forward, unflatten_latents
from .quantizers import top_s_restrict
from .scq import ScqConfig, scq_exact, scq_exact_quantize, scq_fast
from .trainer import (
    CSV_HEADER,
    SOFT_KINDS,
    config_from_dict,
    config_pointer,
    evaluate,
    quantize_batch,
    read_checkpoint,
    train,
)

_AGGREGATE_FIELDS = ("mse", "quant_error", "perplexity", "loss_total", "loss_commit", "min_entry")


class _UsageError(Exception):
    """Bad arguments discovered after parsing; maps to exit code 2."""


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


# ---------------------------------------------------------------------------
# Dataset commands


def _cmd_gen_synth(args) -> int:
    if args.n < 0:
        raise _UsageError("--n must be nonnegative")
    if args.size <= 0 or args.size % 4 != 0:
        raise _UsageError("--size must be a positive multiple of 4")
    seed = args.seed if args.seed is not None else 0
    images = synthesize_images(args.n, args.size, Rng(seed, 0))
    write_scqd(args.out, images)
    _say(args, f"wrote {args.n} images ({args.size}x{args.size}) to {args.out}")
    return 0


def _cmd_ingest_cifar(args) -> int:
    images = ingest_cifar(args.in_dir, args.split)
    write_scqd(args.out, images)
    _say(args, f"wrote {images.shape[0]} images from {args.in_dir} ({args.split}) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Training commands


def _load_config_dict(args) -> dict:
    if args.config is None:
        raise _UsageError("this command requires --config pointing at a JSON file")
    with open(args.config) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise _UsageError(f"{args.config} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise _UsageError(f"{args.config} must contain a JSON object")
    return raw


def _parse_seed_list(text: str) -> list[int]:
    try:
        seeds = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise _UsageError(f"--seed-list must be comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise _UsageError("--seed-list is empty")
    if len(set(seeds)) != len(seeds):
        raise _UsageError("--seed-list contains duplicates")
    return seeds


def _train_one(raw: dict) -> "object":
    try:
        config = config_from_dict(raw)
    except jsonschema.ValidationError as exc:
        print(f"config error at {config_pointer(exc)}: {exc.message}", file=sys.stderr)
        raise
    return train(config)


def _cmd_train(args) -> int:
    raw = _load_config_dict(args)
    if args.out_dir is not None:
        raw["out_dir"] = args.out_dir
    if args.seed_list is not None and args.seed is not None:
        raise _UsageError("--seed and --seed-list are mutually exclusive")
    try:
        if args.seed_list is None:
            if args.seed is not None:
                raw["seed"] = args.seed
            result = _train_one(raw)
            row = result.final_test_row
            _say(args, CSV_HEADER)
            _say(args, row.as_csv())
            _say(args, f"artifacts in {result.out_dir}")
            return 0

        seeds = _parse_seed_list(args.seed_list)
        base = raw.get("out_dir", "runs")
        rows = []
        for seed in seeds:
            per_seed = dict(raw, seed=seed, out_dir=os.path.join(base, f"seed_{seed}"))
            result = _train_one(per_seed)
            rows.append(result.final_test_row)
            _say(args, f"seed {seed}: test mse {result.final_test_row.mse!r}")
    except jsonschema.ValidationError:
        return 2

    lines = ["metric,mean,stddev"]
    for name in _AGGREGATE_FIELDS:
        values = np.array([getattr(row, name) for row in rows], dtype=np.float64)
        lines.append(f"{name},{float(values.mean())!r},{float(values.std())!r}")
    aggregate_path = os.path.join(base, "aggregate.csv")
    os.makedirs(base, exist_ok=True)
    with open(aggregate_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _say(args, f"aggregate over seeds {seeds} in {aggregate_path}")
    return 0


def _cmd_eval(args) -> int:
    data_path = args.data
    if data_path is None:
        config, _, _ = read_checkpoint(args.checkpoint)
        data_path = config.dataset
    row = evaluate(args.checkpoint, data_path, args.batch_size)
    text = CSV_HEADER + "\n" + row.as_csv() + "\n"
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(text)
    if not args.quiet:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Top-S analysis


def _cmd_analyze_tops(args) -> int:
    config, params, codebook = read_checkpoint(args.checkpoint)
    if config.quantizer not in SOFT_KINDS:
        raise _UsageError(
            f"analyze-tops requires a soft-quantizer checkpoint; got '{config.quantizer}'"
        )
    k = codebook.n_codes
    max_s = args.max_s if args.max_s is not None else k
    if not 1 <= max_s <= k:
        raise _UsageError(f"--max-s must be in [1, {k}], got {max_s}")
    images = read_scqd(args.data if args.data is not None else config.dataset)
    if images.shape[0] == 0:
        raise _UsageError("dataset is empty")
    batch_size = args.batch_size if args.batch_size is not None else config.batch_size

    # Accumulate squared error for the unrestricted decode (slot 0) and for
    # every retained-weight budget S (slots 1..max_s), then divide once.
    sq_err = np.zeros(max_s + 1)
    pixels = 0
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size]
        tape = Tape()
        leaves = params.enter(tape)
        c_node = tape.leaf(codebook.vectors)
        latent = encoder_forward(tape.leaf(x), leaves, params)
        result = quantize_batch(config.quantizer, latent.flat, c_node, config, None, False)
        grid_shape = latent.grid_shape

        def decode(flat_value):
            # A throwaway tape per decode caps memory at one decoder graph
            # instead of retaining all max_s + 1 of them at once.
            t = Tape()
            grid = unflatten_latents(t.leaf(flat_value), grid_shape)
            return decoder_forward(grid, params.enter(t), params).value

        sq_err[0] += np.sum((decode(result.decoder_input.value) - x) ** 2)
        for s in range(1, max_s + 1):
            restricted = top_s_restrict(result.assignment, s)
            sq_err[s] += np.sum((decode(codebook.vectors @ restricted.weights) - x) ** 2)
        pixels += x.size

    mses = sq_err / pixels
    lines = ["s,mse"] + [f"{s},{float(mses[s])!r}" for s in range(1, max_s + 1)]
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(text)
        _say(args, f"wrote {max_s} rows to {args.out} (unrestricted mse {float(mses[0])!r})")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Gradient-check suite


@dataclass
class _Check:
    name: str
    suites: tuple[str, ...]
    tol: float
    fn: Callable[[int], float] | None
    skip_reason: str | None = None


def _away_from(x: np.ndarray, kink: float, margin: float = 0.05) -> np.ndarray:
    """Push entries clear of a subgradient kink so central differences hold."""
    return np.where(np.abs(x - kink) < margin, x + 2.0 * margin, x)


def _check_matmul(seed: int) -> float:
    worst = 0.0
    for i in range(20):
        rng = Rng(seed, i)
        a, b = rng.normal((3, 4)), rng.normal((4, 2))
        target = rng.normal((3, 2))
        worst = max(
            worst,
            ad.grad_check(
                lambda tape, leaves: ad.mse(ad.matmul(leaves[0], leaves[1]), leaves[2]),
                [a, b, target],
            ),
        )
    return worst


def _check_add(seed: int) -> float:
    worst = 0.0
    for i in range(20):
        rng = Rng(seed, i)
        # Alternate matched shapes with a broadcast along rows.
        b_shape = (2, 3) if i % 2 == 0 else (1, 3)
        a, b = rng.normal((2, 3)), rng.normal(b_shape)
        worst = max(
            worst,
            ad.grad_check(
                lambda tape, leaves: ad.sum_all(ad.mul(ad.add(leaves[0], leaves[1]), leaves[0])),
                [a, b],
            ),
        )
    return worst


def _check_relu(seed: int) -> float:
    worst = 0.0
    for i in range(20):
        x = _away_from(Rng(seed, i).normal((4, 5)), 0.0)
        worst = max(
            worst,
            ad.grad_check(
                lambda tape, leaves: ad.sum_all(ad.mul(ad.relu(leaves[0]), leaves[0])), [x]
            ),
        )
    return worst


def _check_clamp_min(seed: int) -> float:
    worst = 0.0
    for i in range(20):
        x = _away_from(Rng(seed, i).normal((4, 5)), 0.25)
        worst = max(
            worst,
            ad.grad_check(
                lambda tape, leaves: ad.sum_all(ad.mul(ad.clamp_min(leaves[0], 0.25), leaves[0])),
                [x],
            ),
        )
    return worst


def _check_mse(seed: int) -> float:
    worst = 0.0
    for i in range(20):
        rng = Rng(seed, i)
        a, b = rng.normal((3, 4)), rng.normal((3, 4))
        worst = max(
            worst,
            ad.grad_check(lambda tape, leaves: ad.mse(leaves[0], leaves[1]), [a, b]),
        )
    return worst


def _check_conv2d(seed: int) -> float:
    worst = 0.0
    cases = [((3, 3), 1, 1), ((4, 4), 2, 1), ((3, 3), 1, 0), ((1, 1), 1, 0)]
    for i in range(20):
        rng = Rng(seed, i)
        kernel, stride, pad = cases[i % len(cases)]
        c_in, c_out = 2, 3
        x = rng.normal((2, c_in, 5, 5))
        w = rng.normal((c_out, c_in * kernel[0] * kernel[1]), scale=0.5)
        b = rng.normal((c_out,))

        def fn(tape, leaves, kernel=kernel, stride=stride, pad=pad):
            y = models.conv2d(leaves[0], leaves[1], leaves[2], kernel, stride, pad)
            return ad.mse(y, leaves[3])

        tape = Tape()
        y0 = models.conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), kernel, stride, pad)
        target = Rng(seed, 1000 + i).normal(y0.value.shape)
        worst = max(worst, ad.grad_check(fn, [x, w, b, target]))
    return worst


def _check_conv2d_transpose(seed: int) -> float:
    worst = 0.0
    cases = [((4, 4), 2, 1), ((3, 3), 1, 1), ((2, 2), 2, 0)]
    for i in range(20):
        rng = Rng(seed, i)
        kernel, stride, pad = cases[i % len(cases)]
        c_in, c_out = 3, 2
        x = rng.normal((2, c_in, 3, 3))
        w = rng.normal((c_in, c_out * kernel[0] * kernel[1]), scale=0.5)
        b = rng.normal((c_out,))

        def fn(tape, leaves, kernel=kernel, stride=stride, pad=pad):
            y = models.conv2d_transpose(leaves[0], leaves[1], leaves[2], kernel, stride, pad)
            return ad.mse(y, leaves[3])

        tape = Tape()
        y0 = models.conv2d_transpose(tape.leaf(x), tape.leaf(w), tape.leaf(b), kernel, stride, pad)
        target = Rng(seed, 1000 + i).normal(y0.value.shape)
        worst = max(worst, ad.grad_check(fn, [x, w, b, target]))
    return worst


def _check_solve_spd(seed: int) -> float:
    worst = 0.0
    for i in range(20):
        rng = Rng(seed, i)
        # Mild conditioning keeps central-difference truncation well under tol.
        g = rng.normal((4, 4), scale=0.5)
        a = g @ g.T + 4.0 * np.eye(4)
        b = rng.normal((4, 2))
        target = rng.normal((4, 2))

        def fn(tape, leaves):
            a_sym = ad.scale(ad.add(leaves[0], ad.transpose(leaves[0])), 0.5)
            return ad.mse(ad.solve_spd(a_sym, leaves[1]), leaves[2])

        worst = max(worst, ad.grad_check(fn, [a, b, target]))
    return worst


def _check_column_shift(seed: int) -> float:
    worst = 0.0
    for i in range(20):
        rng = Rng(seed, i)
        p, target = rng.normal((4, 3)), rng.normal((4, 3))
        worst = max(
            worst,
            ad.grad_check(
                lambda tape, leaves: ad.mse(scq._shift_columns_node(leaves[0]), leaves[1]),
                [p, target],
            ),
        )
    return worst


def _check_scq_fast_e2e(seed: int) -> float:
    worst = 0.0
    for i in range(20):
        rng = Rng(seed, i)
        z = rng.normal((3, 4))
        codes = rng.normal((3, 5))
        target = rng.normal((3, 4))
        cfg = ScqConfig(lam=0.1, projection_steps=4, final_clamp=(i % 2 == 1))

        def fn(tape, leaves, cfg=cfg):
            return ad.mse(scq_fast(leaves[0], leaves[1], cfg).decoder_input, tape.leaf(target))

        worst = max(worst, ad.grad_check(fn, [z, codes]))
    return worst


def _stable_exact_instance(rng: Rng, f: int = 3, k: int = 5, lam: float = 0.3):
    """Resample until the optimum has wide active-set and assignment margins.

    Finite differences only agree with the implicit gradient while the
    active set and the one-hot target survive the probe perturbations, so
    instances too close to a boundary are rejected.
    """
    for attempt in range(1000):
        codes = rng.normal((f, k))
        z = rng.normal((f, 1))
        d = ((codes - z) ** 2).sum(axis=0)
        if np.diff(np.sort(d))[0] < 1e-2:
            continue
        sol = scq_exact(z, codes, lam)
        p = sol.assignment.weights[:, 0]
        free = p > 0.0
        if p[free].min() < 1e-3:
            continue
        if (~free).any() and sol.nu[~free, 0].min() < 1e-3:
            continue
        return z, codes
    raise RuntimeError("no stable instance found")  # pragma: no cover


def _check_scq_exact_vjp(seed: int) -> float:
    worst = 0.0
    lam = 0.3
    for i in range(20):
        rng = Rng(seed, i)
        z, codes = _stable_exact_instance(rng, lam=lam)
        target = rng.normal(z.shape)

        def fn(tape, leaves):
            result = scq_exact_quantize(leaves[0], leaves[1], lam, on_singular="raise")
            return ad.mse(result.decoder_input, tape.leaf(target))

        worst = max(worst, ad.grad_check(fn, [z, codes]))
    return worst


_CHECKS = [
    _Check("matmul", ("models",), 1e-6, _check_matmul),
    _Check("add", ("models",), 1e-6, _check_add),
    _Check("relu", ("models",), 1e-6, _check_relu),
    _Check("clamp_min", ("models",), 1e-6, _check_clamp_min),
    _Check("mse", ("models",), 1e-6, _check_mse),
    _Check("conv2d", ("models",), 1e-6, _check_conv2d),
    _Check("conv2d_transpose", ("models",), 1e-6, _check_conv2d_transpose),
    _Check("solve_spd", ("models",), 1e-6, _check_solve_spd),
    _Check("column_shift", ("models",), 1e-6, _check_column_shift),
    _Check("solve_spd_vjp", ("quantizers",), 1e-6, _check_solve_spd),
    _Check("scq_fast_e2e", ("quantizers",), 1e-5, _check_scq_fast_e2e),
    _Check("scq_exact_vjp", ("quantizers",), 1e-5, _check_scq_exact_vjp),
    _Check(
        "ste",
        ("quantizers",),
        0.0,
        None,
        skip_reason="rerouted gradient; finite differences cannot probe it",
    ),
]

# Friendly names for the corruption hook where the callable is module-private.
_CORRUPT_ALIASES = {"column_shift": (scq, "_shift_columns_node")}


def _scaled_vjp(vjp):
    return lambda u: 1.5 * np.asarray(vjp(u))


def _corrupt_primitive(name: str):
    """Scale every vjp of the named primitive by 1.5; returns an undo thunk.

    Negative control for the gradcheck suite: a corrupted backward pass must
    surface as a failure, proving the suite can actually catch one.
    """
    if name in _CORRUPT_ALIASES:
        module, attr = _CORRUPT_ALIASES[name]
    else:
        for module in (ad, models, scq):
            if callable(getattr(module, name, None)):
                attr = name
                break
        else:
            raise _UsageError(f"unknown primitive {name!r} for --corrupt-primitive")
    original = getattr(module, attr)

    def wrecked(*args, **kwargs):
        out = original(*args, **kwargs)
        if isinstance(out, Node):
            out.parents = tuple((p, _scaled_vjp(v)) for p, v in out.parents)
        return out

    setattr(module, attr, wrecked)
    return lambda: setattr(module, attr, original)


def _cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    checks = [c for c in _CHECKS if args.suite == "all" or args.suite in c.suites]
    restore = _corrupt_primitive(args.corrupt_primitive) if args.corrupt_primitive else None
    failures = []
    try:
        for check in checks:
            if check.skip_reason is not None:
                _say(args, f"skip  {check.name:<18} {check.skip_reason}")
                continue
            worst = check.fn(seed)
            if worst <= check.tol:
                _say(args, f"ok    {check.name:<18} worst {worst:.3e}  tol {check.tol:.1e}")
            else:
                failures.append(check.name)
                print(f"FAIL  {check.name:<18} worst {worst:.3e}  tol {check.tol:.1e}")
    finally:
        if restore is not None:
            restore()
    if failures:
        print(f"failing primitives: {', '.join(failures)}")
        return 1
    _say(args, f"suite '{args.suite}': all gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed")
    common.add_argument("--config", default=None, help="JSON config path")
    common.add_argument("--out-dir", default=None, help="override the output directory")
    common.add_argument("--quiet", action="store_true", help="suppress informational output")

    parser = argparse.ArgumentParser(
        prog="scquant",
        description="Quantized-bottleneck autoencoders: data, training, analyses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic SCQD dataset")
    p.add_argument("--out", required=True, help="output SCQD path")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--size", type=int, required=True, help="image side (multiple of 4)")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("ingest-cifar", parents=[common], help="convert CIFAR-10 binaries to SCQD")
    p.add_argument("--in", dest="in_dir", required=True, help="directory with batch files")
    p.add_argument("--out", required=True, help="output SCQD path")
    p.add_argument("--split", choices=("train", "test"), required=True)
    p.set_defaults(func=_cmd_ingest_cifar)

    p = sub.add_parser("train", parents=[common], help="run training from a JSON config")
    p.add_argument("--seed-list", default=None, help="comma-separated seeds to fan out over")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint over a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint path (.scqc)")
    p.add_argument("--data", default=None, help="SCQD path (default: dataset echoed in checkpoint)")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--out", default=None, help="also write the metrics row to this CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser(
        "analyze-tops", parents=[common], help="reconstruction MSE vs retained weights per column"
    )
    p.add_argument("--checkpoint", required=True, help="soft-quantizer checkpoint (.scqc)")
    p.add_argument("--data", default=None, help="SCQD path (default: dataset echoed in checkpoint)")
    p.add_argument("--max-s", type=int, default=None, help="largest budget S (default: codebook size)")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--out", default=None, help="write the s,mse CSV here instead of stdout")
    p.set_defaults(func=_cmd_analyze_tops)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of backward passes")
    p.add_argument("--suite", choices=("quantizers", "models", "all"), default="all")
    p.add_argument(
        "--corrupt-primitive",
        default=None,
        metavar="NAME",
        help="negative control: corrupt the named primitive's vjp before running",
    )
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.stats:
            print(json.dumps(exc.stats, sort_keys=True, default=float), file=sys.stderr)
        return 1
    except (DatasetFormatError, CheckpointFormatError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:  # pragma: no cover - console-script shim
    raise SystemExit(main())
