import json
import subprocess
import sys

import pytest

from shimkit import config as C
from shimkit.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, build_parser, main
from shimkit.dataset import MANIFEST, load_dataset
from shimkit.errors import NumericalError

SMALL = ["--phantoms", "1", "--grid", "16x16x8", "--slices-per-phantom", "4", "--min-mask-voxels", "16"]
TINY_NET = ["--set", "net.stem_width=2", "--set", "net.stage_widths=2,4,8,16", "--batch", "4"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "d"
    assert run("simulate", "--out", out, *SMALL, "--augment", "0,20") == EXIT_OK
    assert run("reference", "--data", out, "--restarts", "8", "--jobs", "1") == EXIT_OK
    return out


def strip_times(obj):
    if isinstance(obj, dict):
        return {k: strip_times(v) for k, v in obj.items() if k not in ("wall_time", "time_ms", "runtime_ms")}
    if isinstance(obj, list):
        return [strip_times(v) for v in obj]
    return obj


class TestHelp:
    def test_every_subcommand_lists_defaults(self, capsys):
        for cmd in ("simulate", "reference", "mls", "train", "eval", "bench", "config"):
            with pytest.raises(SystemExit) as exc:
                build_parser().parse_args([cmd, "--help"])
            assert exc.value.code == 0
            text = capsys.readouterr().out
            assert "default" in text and "--seed" in text

    def test_simulate_help_shows_values(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["simulate", "--help"])
        text = " ".join(capsys.readouterr().out.split())
        assert "(default: 10)" in text and "(default: 64,64,32)" in text and "(default: auto)" in text

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "shimkit.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "simulate" in res.stdout


class TestExitCodes:
    def test_bad_value(self, tmp_path):
        assert run("simulate", "--out", tmp_path / "x", "--coils", "0") == EXIT_CONFIG

    def test_unknown_key(self, tmp_path):
        assert run("simulate", "--out", tmp_path / "x", "--set", "coil.colour=red") == EXIT_CONFIG

    def test_unparsable_value(self, tmp_path):
        assert run("simulate", "--out", tmp_path / "x", "--phantoms", "many") == EXIT_CONFIG

    def test_argparse_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate"])
        assert exc.value.code == 2

    def test_missing_dataset(self, tmp_path):
        assert run("mls", "--data", tmp_path) == EXIT_CONFIG

    def test_corrupt_dataset(self, tmp_path):
        (tmp_path / MANIFEST).write_text("{broken")
        assert run("mls", "--data", tmp_path) == EXIT_IO

    def test_corrupt_checkpoint(self, dataset, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert run("eval", "--data", dataset, "--ckpt", bad) == EXIT_IO

    def test_train_without_references(self, tmp_path):
        out = tmp_path / "d"
        assert run("simulate", "--out", out, *SMALL, "--augment", "0") == EXIT_OK
        assert run("train", "--data", out, "--epochs", "1") == EXIT_CONFIG

    def test_existing_dataset_needs_force(self, dataset):
        assert run("simulate", "--out", dataset, *SMALL) == EXIT_CONFIG

    def test_numerical_failure(self, dataset, monkeypatch, capsys):
        import shimkit.optimize

        def boom(*a, **k):
            raise NumericalError("objective became NaN", {"iteration": 3})

        monkeypatch.setattr(shimkit.optimize, "mls_variable_exchange", boom)
        assert run("mls", "--data", dataset) == EXIT_NUMERIC
        assert '"iteration": 3' in capsys.readouterr().err


class TestConfig:
    def test_default_sample_count(self):
        cfg = C.resolve(env={})
        assert cfg["phantom"]["count"] * cfg["data"]["slices_per_phantom"] * len(cfg["data"]["augment"]) == 3840

    def test_precedence(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("run.seed = 4  # from file\ncoil.count = 6\n")
        assert C.resolve(f, env={})["run"]["seed"] == 4
        assert C.resolve(f, env={C.SEED_ENV: "9"})["run"]["seed"] == 9
        cfg = C.resolve(f, {"run.seed": "11"}, env={C.SEED_ENV: "9"})
        assert cfg["run"]["seed"] == 11 and cfg["coil"]["count"] == 6

    def test_jobs_does_not_change_hash(self):
        a = C.resolve(env={})
        assert C.config_hash(a) == C.config_hash(C.with_values(a, run__jobs=3))
        assert C.config_hash(a) != C.config_hash(C.with_values(a, run__seed=1))

    def test_config_command_round_trips(self, tmp_path, capsys):
        assert run("config", "--seed", "5", "--set", "coil.count=4") == EXIT_OK
        text = capsys.readouterr().out
        f = tmp_path / "dumped.cfg"
        f.write_text(text)
        cfg = C.resolve(f, env={})
        assert cfg["run"]["seed"] == 5 and cfg["coil"]["count"] == 4

    def test_env_seed_reaches_artifacts(self, tmp_path, monkeypatch):
        monkeypatch.setenv(C.SEED_ENV, "21")
        out = tmp_path / "d"
        assert run("simulate", "--out", out, *SMALL, "--augment", "0") == EXIT_OK
        manifest, _ = load_dataset(out)
        assert manifest.seed == 21 and manifest.run_config["config"]["run"]["seed"] == 21


class TestPipeline:
    def test_no_augmentation_gives_k_slices(self, tmp_path):
        out = tmp_path / "d"
        assert run("simulate", "--out", out, *SMALL, "--augment", "0") == EXIT_OK
        _, samples = load_dataset(out)
        assert len(samples) == 4
        assert all(s.provenance["angle"] == 0.0 for s in samples)

    def test_artifacts_echo_config(self, dataset):
        manifest, _ = load_dataset(dataset)
        for doc in (manifest.run_config, manifest.extra["stages"]["reference"]):
            assert set(doc) == {"config", "config_hash", "tool_version"}

    def test_reference_rerun_is_noop(self, dataset, capsys):
        before = (dataset / MANIFEST).read_bytes()
        assert run("reference", "--data", dataset, "--restarts", "8") == EXIT_OK
        assert "nothing to do" in capsys.readouterr().out
        assert (dataset / MANIFEST).read_bytes() == before

    def test_reference_independent_of_jobs(self, tmp_path):
        dirs = []
        for jobs in (1, 2):
            out = tmp_path / f"j{jobs}"
            assert run("simulate", "--out", out, *SMALL, "--augment", "0") == EXIT_OK
            assert run("reference", "--data", out, "--restarts", "8", "--jobs", jobs) == EXIT_OK
            dirs.append(out)
        assert (dirs[0] / MANIFEST).read_bytes() == (dirs[1] / MANIFEST).read_bytes()

    def test_mls_results(self, dataset, tmp_path):
        out = tmp_path / "mls.json"
        assert run("mls", "--data", dataset, "--out", out) == EXIT_OK
        doc = json.loads(out.read_text())
        assert len(doc["slices"]) == 8 and doc["mean_rmse"] > 0
        assert "config_hash" in doc

    def test_zero_epoch_checkpoint_evaluates(self, dataset, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        assert run("train", "--data", dataset, "--epochs", "0", "--out", ckpt, *TINY_NET) == EXIT_OK
        assert run("eval", "--data", dataset, "--ckpt", ckpt, "--split", "all") == EXIT_OK
        doc = json.loads((tmp_path / "m.ckpt.eval.json").read_text())
        assert doc["summary"]["n"] == 8

    def test_eval_rejects_other_geometry(self, dataset, tmp_path):
        other = tmp_path / "o"
        assert run("simulate", "--out", other, *SMALL, "--augment", "0", "--coils", "4") == EXIT_OK
        assert run("reference", "--data", other, "--restarts", "2") == EXIT_OK
        ckpt = tmp_path / "m.ckpt"
        assert run("train", "--data", dataset, "--epochs", "0", "--out", ckpt, *TINY_NET) == EXIT_OK
        assert run("eval", "--data", other, "--ckpt", ckpt) == EXIT_CONFIG

    def test_train_and_eval_are_deterministic(self, dataset, tmp_path):
        docs, blobs = [], []
        for name in ("a", "b"):
            ckpt = tmp_path / f"{name}.ckpt"
            assert run("train", "--data", dataset, "--epochs", "2", "--out", ckpt, *TINY_NET) == EXIT_OK
            assert run("eval", "--data", dataset, "--ckpt", ckpt, "--split", "all") == EXIT_OK
            blobs.append(ckpt.read_bytes())
            docs.append(strip_times(json.loads((tmp_path / f"{name}.ckpt.eval.json").read_text())))
        assert blobs[0] == blobs[1]
        docs[0]["summary"].pop("mean_wall_time")
        docs[1]["summary"].pop("mean_wall_time")
        assert docs[0] == docs[1]

    def test_bench_writes_report(self, tmp_path, capsys):
        data = tmp_path / "d"
        assert run("simulate", "--out", data, "--phantoms", "2", "--grid", "16x16x8", "--slices-per-phantom", "5",
                   "--min-mask-voxels", "16", "--augment", "0,20") == EXIT_OK
        assert run("reference", "--data", data, "--restarts", "4") == EXIT_OK
        out = tmp_path / "report"
        assert run("bench", "--data", data, "--out", out, "--folds", "2", "--epochs", "1", *TINY_NET) == EXIT_OK
        assert {p.name for p in out.iterdir()} >= {"summary.csv", "per_slice.csv", "report.json", "summary.txt"}
        doc = json.loads((out / "report.json").read_text())
        assert doc["config"]["config"]["bench"]["folds"] == 2
        assert "Mean RMSE" in capsys.readouterr().out


class TestSharedConfig:
    def test_stages_share_one_config_hash(self, tmp_path):
        import time

        from shimkit.surrogate import load_checkpoint

        data, ckpt, report = tmp_path / "d", tmp_path / "m.ckpt", tmp_path / "r"
        t0 = time.perf_counter()
        assert run("simulate", "--out", data, "--phantoms", "1", "--grid", "16x16x8", "--min-mask-voxels", "16",
                   "--augment", "0,90", "--seed", "2", "--set", "restart.n_random=4", "--set", "train.epochs=2",
                   "--set", "bench.folds=2", *TINY_NET[:4], "--set", "train.batch_size=4") == EXIT_OK
        for argv in (("reference", "--data", data), ("mls", "--data", data), ("train", "--data", data, "--out", ckpt),
                     ("eval", "--data", data, "--ckpt", ckpt), ("bench", "--data", data, "--out", report)):
            assert run(*argv) == EXIT_OK
        elapsed = time.perf_counter() - t0
        manifest, samples = load_dataset(data)
        hashes = {
            manifest.run_config["config_hash"],
            manifest.extra["stages"]["reference"]["config_hash"],
            json.loads((data / "mls_results.json").read_text())["config_hash"],
            load_checkpoint(ckpt)[1]["extra"]["config_hash"],
            json.loads((tmp_path / "m.ckpt.eval.json").read_text())["config_hash"],
            json.loads((report / "report.json").read_text())["config"]["config_hash"],
        }
        assert len(hashes) == 1
        assert load_checkpoint(ckpt)[0].cfg.stage_widths == (2, 4, 8, 16)
        assert elapsed < 300

    def test_quadrature_only_references_are_deterministic(self, tmp_path):
        runs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run("simulate", "--out", out, *SMALL, "--augment", "0") == EXIT_OK
            assert run("reference", "--data", out, "--restarts", "0", "--include-quadrature", "true") == EXIT_OK
            runs.append([(s.ref_weights.values.tobytes(), s.ref_rmse) for s in load_dataset(out)[1]])
        assert runs[0] == runs[1] and all(r is not None for _, r in runs[0])

    def test_flag_overrides_recorded_config(self, dataset, capsys):
        assert run("config", "--seed", "4") == EXIT_OK
        assert "run.seed = 4" in capsys.readouterr().out
        manifest, _ = load_dataset(dataset)
        recorded = manifest.run_config["config"]
        cfg = C.resolve(overrides={"train.epochs": "7"}, env={}, base=recorded)
        assert cfg["train"]["epochs"] == 7
        assert cfg["phantom"]["grid"] == (16, 16, 8)
