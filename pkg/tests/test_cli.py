"""Command-line surface: verbs, exit codes, and artifact determinism."""

import json

import numpy as np
import pytest

from scquant.cli import main
from scquant.datasets import read_scqd
from scquant.trainer import read_checkpoint, read_metrics

HEADER_BYTES = 24


def run(*argv):
    return main([str(a) for a in argv])


def write_config(tmp_path, **overrides):
    """Tiny-but-real training config backed by generated train/test datasets."""
    data = tmp_path / "train.scqd"
    test_data = tmp_path / "test.scqd"
    if not data.exists():
        assert run("gen-synth", "--out", data, "--n", "20", "--size", "8", "--seed", "9", "--quiet") == 0
        assert run("gen-synth", "--out", test_data, "--n", "6", "--size", "8", "--seed", "10", "--quiet") == 0
    cfg = dict(
        quantizer="scq_fast",
        seed=3,
        dataset=str(data),
        test_dataset=str(test_data),
        out_dir=str(tmp_path / "run"),
        codebook_size=8,
        latent_dim=4,
        epochs=1,
        batch_size=8,
        conv_channels=3,
        residual_channels=2,
        n_residual_blocks=1,
        log_interval=2,
        projection_steps=4,
        learning_rate=1e-3,
    )
    for key, value in overrides.items():
        if value is None:
            cfg.pop(key, None)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


class TestGenSynth:
    def test_writes_readable_dataset(self, tmp_path):
        out = tmp_path / "toy.scqd"
        assert run("gen-synth", "--out", out, "--n", "5", "--size", "12", "--seed", "1", "--quiet") == 0
        images = read_scqd(out)
        assert images.shape == (5, 3, 12, 12)

    def test_file_length_matches_header_arithmetic(self, tmp_path):
        out = tmp_path / "toy.scqd"
        assert run("gen-synth", "--out", out, "--n", "7", "--size", "8", "--quiet") == 0
        assert out.stat().st_size == HEADER_BYTES + 7 * 3 * 8 * 8 * 4

    def test_zero_images_is_a_valid_header_only_file(self, tmp_path):
        out = tmp_path / "empty.scqd"
        assert run("gen-synth", "--out", out, "--n", "0", "--size", "8", "--quiet") == 0
        assert out.stat().st_size == HEADER_BYTES
        assert read_scqd(out).shape == (0, 3, 8, 8)

    def test_same_seed_twice_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.scqd", tmp_path / "b.scqd"
        for out in (a, b):
            assert run("gen-synth", "--out", out, "--n", "6", "--size", "8", "--seed", "4", "--quiet") == 0
        assert a.read_bytes() == b.read_bytes()

    def test_size_must_be_multiple_of_four(self, tmp_path):
        assert run("gen-synth", "--out", tmp_path / "x.scqd", "--n", "1", "--size", "10") == 2

    def test_negative_count_rejected(self, tmp_path):
        assert run("gen-synth", "--out", tmp_path / "x.scqd", "--n", "-1", "--size", "8") == 2

    def test_unwritable_path_is_io_error(self, tmp_path):
        missing = tmp_path / "no" / "such" / "dir" / "x.scqd"
        assert run("gen-synth", "--out", missing, "--n", "1", "--size", "8", "--quiet") == 1


class TestIngestCifar:
    RECORD = 3073

    def fake_batches(self, tmp_path, per_file=2):
        rng = np.random.default_rng(0)
        for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
            payload = rng.integers(0, 256, size=per_file * self.RECORD, dtype=np.uint8)
            (tmp_path / f"{name}.bin").write_bytes(payload.tobytes())

    def test_train_split_concatenates_batches(self, tmp_path):
        self.fake_batches(tmp_path)
        out = tmp_path / "cifar.scqd"
        assert run("ingest-cifar", "--in", tmp_path, "--out", out, "--split", "train", "--quiet") == 0
        assert read_scqd(out).shape == (10, 3, 32, 32)

    def test_missing_batch_file_names_it(self, tmp_path, capsys):
        assert run("ingest-cifar", "--in", tmp_path, "--out", tmp_path / "x.scqd", "--split", "test") == 1
        assert "test_batch" in capsys.readouterr().err

    def test_malformed_length_is_format_error(self, tmp_path):
        self.fake_batches(tmp_path)
        (tmp_path / "test_batch.bin").write_bytes(b"\x00" * 100)
        assert run("ingest-cifar", "--in", tmp_path, "--out", tmp_path / "x.scqd", "--split", "test") == 1

    def test_unknown_split_rejected_by_parser(self, tmp_path):
        assert run("ingest-cifar", "--in", tmp_path, "--out", tmp_path / "x.scqd", "--split", "valid") == 2


class TestTrainVerb:
    def test_trains_and_writes_artifacts(self, tmp_path):
        config, cfg = write_config(tmp_path)
        assert run("train", "--config", config, "--quiet") == 0
        out = tmp_path / "run"
        for name in ("metrics.csv", "final.scqc", "best.scqc"):
            assert (out / name).exists()

    def test_missing_config_flag(self):
        assert run("train") == 2

    def test_config_file_must_be_json(self, tmp_path):
        bad = tmp_path / "broken.json"
        bad.write_text("{not json")
        assert run("train", "--config", bad) == 2

    def test_missing_required_field_reports_pointer(self, tmp_path, capsys):
        config, _ = write_config(tmp_path, quantizer=None)
        assert run("train", "--config", config) == 2
        assert "/quantizer" in capsys.readouterr().err

    def test_out_of_range_beta_reports_pointer(self, tmp_path, capsys):
        config, _ = write_config(tmp_path, beta=1.5)
        assert run("train", "--config", config) == 2
        assert "/beta" in capsys.readouterr().err

    def test_unknown_quantizer_reports_pointer(self, tmp_path, capsys):
        config, _ = write_config(tmp_path, quantizer="fuzzy")
        assert run("train", "--config", config) == 2
        assert "/quantizer" in capsys.readouterr().err

    def test_seed_override_lands_in_checkpoint(self, tmp_path):
        config, _ = write_config(tmp_path)
        assert run("train", "--config", config, "--seed", "11", "--quiet") == 0
        stored, _, _ = read_checkpoint(tmp_path / "run" / "final.scqc")
        assert stored.seed == 11

    def test_out_dir_override(self, tmp_path):
        config, _ = write_config(tmp_path)
        target = tmp_path / "elsewhere"
        assert run("train", "--config", config, "--out-dir", target, "--quiet") == 0
        assert (target / "metrics.csv").exists()

    def test_seed_and_seed_list_conflict(self, tmp_path):
        config, _ = write_config(tmp_path)
        assert run("train", "--config", config, "--seed", "1", "--seed-list", "1,2") == 2

    def test_repeat_run_is_byte_identical(self, tmp_path):
        config, _ = write_config(tmp_path, quantizer="vq")
        assert run("train", "--config", config, "--quiet") == 0
        first = {
            name: (tmp_path / "run" / name).read_bytes()
            for name in ("metrics.csv", "final.scqc", "best.scqc")
        }
        assert run("train", "--config", config, "--quiet") == 0
        for name, blob in first.items():
            assert (tmp_path / "run" / name).read_bytes() == blob, name

    def test_divergent_run_dumps_stats_and_exits_one(self, tmp_path, capsys):
        config, _ = write_config(tmp_path, quantizer="vq", learning_rate=1e150)
        with np.errstate(all="ignore"):
            assert run("train", "--config", config, "--quiet") == 1
        err = capsys.readouterr().err
        assert "diverged" in err
        assert "batch_mean" in err


class TestSeedListFanOut:
    def test_per_seed_dirs_and_aggregate(self, tmp_path):
        config, cfg = write_config(tmp_path, quantizer="vq")
        assert run("train", "--config", config, "--seed-list", "1,2", "--quiet") == 0
        base = tmp_path / "run"
        rows = []
        for seed in (1, 2):
            per_seed = read_metrics(base / f"seed_{seed}" / "metrics.csv")
            stored, _, _ = read_checkpoint(base / f"seed_{seed}" / "final.scqc")
            assert stored.seed == seed
            rows.append([r for r in per_seed if r.split == "test"][-1])

        lines = (base / "aggregate.csv").read_text().splitlines()
        assert lines[0] == "metric,mean,stddev"
        parsed = {parts[0]: (float(parts[1]), float(parts[2])) for parts in
                  (line.split(",") for line in lines[1:])}
        values = np.array([row.mse for row in rows])
        assert parsed["mse"][0] == float(values.mean())
        assert parsed["mse"][1] == float(values.std())
        assert set(parsed) == {"mse", "quant_error", "perplexity", "loss_total",
                               "loss_commit", "min_entry"}

    def test_duplicate_seeds_rejected(self, tmp_path):
        config, _ = write_config(tmp_path)
        assert run("train", "--config", config, "--seed-list", "1,1") == 2

    def test_garbage_seed_list_rejected(self, tmp_path):
        config, _ = write_config(tmp_path)
        assert run("train", "--config", config, "--seed-list", "1,zwei") == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One small scq_fast training run shared by eval/analysis tests."""
    tmp_path = tmp_path_factory.mktemp("trained")
    config, cfg = write_config(tmp_path, epochs=2)
    assert main(["train", "--config", str(config), "--quiet"]) == 0
    return {
        "dir": tmp_path / "run",
        "data": tmp_path / "train.scqd",
        "test_data": tmp_path / "test.scqd",
        "config": cfg,
        "tmp": tmp_path,
    }


class TestEvalVerb:
    def test_matches_final_logged_test_row(self, trained, tmp_path):
        out = tmp_path / "eval.csv"
        rc = run("eval", "--checkpoint", trained["dir"] / "final.scqc",
                 "--data", trained["test_data"], "--out", out, "--quiet")
        assert rc == 0
        eval_row = read_metrics(out)[0]
        final_row = [r for r in read_metrics(trained["dir"] / "metrics.csv") if r.split == "test"][-1]
        for field in ("mse", "quant_error", "perplexity", "loss_total", "loss_commit", "min_entry"):
            assert getattr(eval_row, field) == getattr(final_row, field), field

    def test_repeat_eval_is_byte_identical(self, trained, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert run("eval", "--checkpoint", trained["dir"] / "final.scqc",
                       "--data", trained["test_data"], "--out", out, "--quiet") == 0
        assert a.read_bytes() == b.read_bytes()

    def test_data_defaults_to_checkpoint_dataset(self, trained, capsys):
        rc = run("eval", "--checkpoint", trained["dir"] / "final.scqc")
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("step,epoch,split,")
        assert ",test," in out

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        assert run("eval", "--checkpoint", tmp_path / "nope.scqc") == 1


class TestAnalyzeTops:
    def test_row_count_and_format(self, trained, tmp_path):
        out = tmp_path / "tops.csv"
        rc = run("analyze-tops", "--checkpoint", trained["dir"] / "final.scqc",
                 "--data", trained["data"], "--max-s", "3", "--out", out, "--quiet")
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "s,mse"
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "2", "3"]
        assert all(np.isfinite(float(line.split(",")[1])) for line in lines[1:])

    def test_full_budget_equals_unrestricted_mse(self, trained, tmp_path):
        k = trained["config"]["codebook_size"]
        tops = tmp_path / "tops_full.csv"
        assert run("analyze-tops", "--checkpoint", trained["dir"] / "final.scqc",
                   "--data", trained["data"], "--max-s", k, "--out", tops, "--quiet") == 0
        evalcsv = tmp_path / "eval.csv"
        assert run("eval", "--checkpoint", trained["dir"] / "final.scqc",
                   "--data", trained["data"], "--out", evalcsv, "--quiet") == 0
        top_mse = float(tops.read_text().splitlines()[-1].split(",")[1])
        eval_mse = read_metrics(evalcsv)[0].mse
        assert abs(top_mse - eval_mse) <= 1e-12

    def test_repeat_is_byte_identical(self, trained, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert run("analyze-tops", "--checkpoint", trained["dir"] / "final.scqc",
                       "--data", trained["data"], "--max-s", "4", "--out", out, "--quiet") == 0
        assert a.read_bytes() == b.read_bytes()

    def test_single_budget_single_row(self, trained, capsys):
        rc = run("analyze-tops", "--checkpoint", trained["dir"] / "final.scqc",
                 "--data", trained["data"], "--max-s", "1")
        assert rc == 0
        assert len(capsys.readouterr().out.splitlines()) == 2

    def test_budget_above_codebook_rejected(self, trained):
        k = trained["config"]["codebook_size"]
        assert run("analyze-tops", "--checkpoint", trained["dir"] / "final.scqc",
                   "--data", trained["data"], "--max-s", k + 1) == 2

    def test_hard_quantizer_checkpoint_rejected(self, tmp_path, capsys):
        config, _ = write_config(tmp_path, quantizer="vq")
        assert run("train", "--config", config, "--quiet") == 0
        rc = run("analyze-tops", "--checkpoint", tmp_path / "run" / "final.scqc",
                 "--data", tmp_path / "train.scqd")
        assert rc == 2
        assert "soft" in capsys.readouterr().err


class TestGradcheckVerb:
    def test_models_suite_passes(self, capsys):
        assert run("gradcheck", "--suite", "models") == 0
        out = capsys.readouterr().out
        for name in ("conv2d", "solve_spd", "column_shift"):
            assert name in out

    def test_quantizers_suite_reports_ste_as_skipped(self, capsys):
        assert run("gradcheck", "--suite", "quantizers") == 0
        out = capsys.readouterr().out
        assert "skip" in out and "ste" in out

    def test_corrupted_vjp_fails_naming_the_primitive(self, capsys):
        assert run("gradcheck", "--suite", "models", "--quiet",
                   "--corrupt-primitive", "matmul") == 1
        out = capsys.readouterr().out
        assert "matmul" in out

    def test_corruption_hook_restores_the_primitive(self):
        assert run("gradcheck", "--suite", "models", "--quiet",
                   "--corrupt-primitive", "conv2d") == 1
        assert run("gradcheck", "--suite", "models", "--quiet") == 0

    def test_unknown_primitive_is_usage_error(self):
        assert run("gradcheck", "--corrupt-primitive", "frobnicate") == 2


class TestParserBasics:
    def test_no_command_is_usage_error(self):
        assert main([]) == 2

    def test_unknown_command_is_usage_error(self):
        assert main(["transmogrify"]) == 2

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0
