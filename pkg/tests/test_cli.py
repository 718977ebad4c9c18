import csv
import json

import pytest

from domainadaptor.cli import main
from domainadaptor.config import ExperimentConfig, apply_override, derive_seed, load_config
from domainadaptor.errors import ConfigError

TINY = ["dataset.per_domain_n=20", "train.epochs=1", "train.batch_size=8", "adapt.batch_size=8", "adapt.m=2"]


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path / "runs"), "-q"])


def only_run_dir(tmp_path, prefix):
    (d,) = [p for p in (tmp_path / "runs").iterdir() if p.name.startswith(prefix)]
    return d


def error_line(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    """Tiny generated data plus checkpoints shared by the command tests."""
    root = tmp_path_factory.mktemp("artifacts")
    sets = [x for o in TINY for x in ("--set", o)]
    assert main(["pipeline", *sets, "--set", 'adapt.methods=["source-only"]', "--out", str(root), "-q"]) == 0
    (run_dir,) = list(root.iterdir())
    return run_dir


class TestConfig:
    def test_defaults_are_documented_in_packaged_json(self):
        cfg = ExperimentConfig()
        assert [d.name for d in cfg.dataset.domains] == ["photo", "art", "cartoon", "sketch"]
        assert cfg.dataset.per_domain_n == 2000 and cfg.sweep.seeds == [0, 1, 2, 3, 4]

    def test_overrides_parse_json_values(self):
        doc = {}
        apply_override(doc, "adapt.lr=0.5")
        apply_override(doc, 'adapt.methods=["tent"]')
        apply_override(doc, "adapt.mode=online")
        assert doc == {"adapt": {"lr": 0.5, "methods": ["tent"], "mode": "online"}}
        with pytest.raises(ConfigError):
            apply_override(doc, "no-equals")

    def test_unknown_key_names_its_path(self):
        with pytest.raises(ConfigError, match="adapt.bogus"):
            load_config(overrides=["adapt.bogus=1"])

    def test_json_error_carries_line_and_column(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{\n  "seed": 1,\n  oops\n}\n')
        with pytest.raises(ConfigError, match=r"bad.json:3:3"):
            load_config(bad)

    def test_seed_flag_wins(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"seed": 3}')
        assert load_config(path, seed=5).seed == 5

    def test_derived_seeds(self):
        assert derive_seed(0, "dataset") == derive_seed(0, "dataset")
        assert len({derive_seed(0, "dataset"), derive_seed(0, "train"), derive_seed(1, "dataset")}) == 3

    def test_digest_tracks_content(self):
        assert ExperimentConfig().digest() == load_config().digest()
        assert ExperimentConfig().digest() != load_config(overrides=["adapt.lr=0.2"]).digest()

    @pytest.mark.parametrize("override", ["adapt.held_out=[\"nowhere\"]"])
    def test_unknown_held_out_domain(self, override):
        with pytest.raises(ConfigError):
            load_config(overrides=[override]).held_out()


class TestCommands:
    def test_verify_passes(self, tmp_path, capsys):
        assert run(tmp_path, "verify") == 0
        out = only_run_dir(tmp_path, "verify-")
        rows = list(csv.DictReader(open(out / "verify.csv")))
        assert rows and all(r["passed"] == "True" for r in rows)
        assert json.loads((out / "config.json").read_text())["seed"] == 0

    @pytest.mark.parametrize("argv", [["adapt", "--set", "nope.x=1"], ["train", "--set", "train.epochs=0"],
                                      ["adapt"], ["verify", "--jobs", "0"]])
    def test_config_errors_exit_one(self, tmp_path, capsys, argv):
        assert run(tmp_path, *argv) == 1
        assert error_line(capsys)["error"] == "config"

    def test_malformed_json_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert run(tmp_path, "verify", "--config", str(bad)) == 1
        assert "bad.json:1:2" in error_line(capsys)["message"]

    def test_missing_checkpoint_is_a_file_error(self, tmp_path, capsys, artifacts):
        empty = tmp_path / "empty"
        empty.mkdir()
        code = run(tmp_path, "adapt", *[x for o in TINY for x in ("--set", o)],
                   "--set", f"paths.data_dir={artifacts / 'data'}", "--set", f"paths.checkpoint_dir={empty}")
        assert code == 1
        err = error_line(capsys)
        assert err["error"] == "file" and "heldout_" in err["message"]

    def test_source_only_adapt_is_reproducible(self, tmp_path, artifacts):
        args = [x for o in TINY for x in ("--set", o)] + [
            "--set", f"paths.data_dir={artifacts / 'data'}", "--set", f"paths.checkpoint_dir={artifacts / 'checkpoints'}",
            "--set", 'adapt.methods=["source-only"]']
        assert run(tmp_path / "a", "adapt", *args) == 0
        assert run(tmp_path / "b", "adapt", *args) == 0
        a, b = only_run_dir(tmp_path / "a", "adapt-"), only_run_dir(tmp_path / "b", "adapt-")
        files = sorted(p.name for p in a.iterdir())
        assert "adapt_sketch.csv" in files and "adapt_summary.csv" in files
        for name in files:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_every_method_runs(self, tmp_path, artifacts):
        args = [x for o in TINY for x in ("--set", o)] + [
            "--set", f"paths.data_dir={artifacts / 'data'}", "--set", f"paths.checkpoint_dir={artifacts / 'checkpoints'}",
            "--set", 'adapt.held_out=["art"]']
        assert run(tmp_path, "adapt", *args) == 0
        rows = list(csv.DictReader(open(only_run_dir(tmp_path, "adapt-") / "adapt_summary.csv")))
        assert len({r["method"] for r in rows}) == 8

    def test_alpha_sweep_row_counts(self, tmp_path, artifacts):
        grid = [0.5, 0.9]
        args = [x for o in TINY for x in ("--set", o)] + [
            "--set", f"paths.data_dir={artifacts / 'data'}", "--set", f"paths.checkpoint_dir={artifacts / 'checkpoints'}",
            "--set", "sweep.kind=alpha", "--set", f"sweep.grid={json.dumps(grid)}", "--set", "sweep.seeds=[0,1,2]",
            "--set", "sweep.batch_size=8", "--set", 'adapt.held_out=["sketch"]']
        assert run(tmp_path, "sweep", *args) == 0
        out = only_run_dir(tmp_path, "sweep-")
        for seed in range(3):
            rows = list(csv.DictReader(open(out / f"alpha_sketch_{seed}.csv")))
            assert [float(r["grid_value"]) for r in rows] == grid
        summary = list(csv.DictReader(open(out / "alpha_summary.csv")))
        assert len(summary) == len(grid) and all(r["n_seeds"] == "3" for r in summary)

    def test_pipeline_outputs(self, artifacts):
        names = {p.name for p in artifacts.iterdir()}
        assert {"config.json", "data", "checkpoints", "train_history.csv", "adapt_summary.csv"} <= names
        assert len(list((artifacts / "checkpoints").glob("heldout_*.dac"))) == 4
        history = list(csv.DictReader(open(artifacts / "train_history.csv")))
        assert len(history) == 4 and all(r["held_out_acc"] for r in history)
