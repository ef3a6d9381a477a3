"""End-to-end checks of the command-line surface.

Commands run in-process through cli.main so exit codes and stdout are
observable without spawning interpreters.
"""

import json

import pytest

from xfm import cli, data, metrics, model
from xfm.numerics import derive_seed

PAIR_SPEC = """\
synth.fields = 3
synth.vocab_per_field = 6
synth.latent_dim = 3
synth.terms = 0*1:1.2;1*2:0.8
synth.noise_std = 0.1
synth.n = 1000
synth.seed = 7
"""

TRIPLE_SPEC = """\
synth.fields = 3
synth.vocab_per_field = 5
synth.latent_dim = 3
synth.terms = 0*1*2:2.0
synth.noise_std = 0.05
synth.n = 4000
synth.seed = 21
"""


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pair_data(tmp_path_factory):
    """Dataset with two pairwise interaction terms, written via the CLI."""
    root = tmp_path_factory.mktemp("pair")
    spec = root / "synth.cfg"
    spec.write_text(PAIR_SPEC)
    assert run_cli("synthesize", "--spec", spec, "--output-dir", root / "data") == 0
    return root / "data"


@pytest.fixture(scope="module")
def triple_data(tmp_path_factory):
    """Dataset whose signal is a single three-field interaction."""
    root = tmp_path_factory.mktemp("triple")
    spec = root / "synth.cfg"
    spec.write_text(TRIPLE_SPEC)
    assert run_cli("synthesize", "--spec", spec, "--output-dir", root / "data") == 0
    return root / "data"


def train_args(data_dir, out_dir, *extra):
    return [
        "train",
        "--data.train",
        data_dir / "data.csv",
        "--data.schema",
        data_dir / "data.schema",
        "--output.dir",
        out_dir,
        *extra,
    ]


FM_FLAGS = (
    "--model.preset",
    "fm",
    "--model.embedding_dim",
    "8",
    "--train.lr",
    "0.01",
    "--train.batch_size",
    "128",
    "--train.max_epochs",
    "10",
    "--train.seed",
    "3",
)


@pytest.fixture(scope="module")
def fm_run(pair_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("fmrun")
    assert run_cli(*train_args(pair_data, out, *FM_FLAGS)) == 0
    return out


class TestConfigHandling:
    def test_flag_overrides_file(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("train.lr = 0.005\ntrain.seed = 9\n")
        parser = cli.build_parser()
        args = parser.parse_args(
            ["train", "--config", str(cfg_file), "--train.lr", "0.009"]
        )
        cfg = cli.gather_config(args, cli.TRAIN_KEYS)
        assert cfg["train.lr"] == "0.009"
        assert cfg["train.seed"] == "9"

    def test_missing_config_file(self, capsys):
        assert run_cli("train", "--config", "/nonexistent/run.cfg") == 2
        assert "/nonexistent/run.cfg" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        assert run_cli("--help") == 0
        assert "synthesize" in capsys.readouterr().out


class TestSynthesize:
    def test_row_count_and_artifacts(self, pair_data):
        lines = (pair_data / "data.csv").read_text().splitlines()
        assert len(lines) == 1001
        assert (pair_data / "data.schema").is_file()
        assert (pair_data / "manifest.json").is_file()

    def test_same_seed_byte_identical(self, tmp_path):
        spec = tmp_path / "s.cfg"
        spec.write_text(PAIR_SPEC)
        for name in ("a", "b"):
            assert run_cli("synthesize", "--spec", spec, "--output-dir", tmp_path / name) == 0
        assert (tmp_path / "a" / "data.csv").read_bytes() == (
            tmp_path / "b" / "data.csv"
        ).read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (
            tmp_path / "b" / "manifest.json"
        ).read_bytes()

    def test_manifest_recomputes_probabilities(self, pair_data):
        """The manifest pins the exact label probabilities: regenerating from
        its recorded spec reproduces them bit for bit."""
        manifest = json.loads((pair_data / "manifest.json").read_text())
        spec = data.SyntheticSpec(
            field_count=manifest["spec"]["field_count"],
            vocab_per_field=manifest["spec"]["vocab_per_field"],
            latent_dim=manifest["spec"]["latent_dim"],
            interaction_terms=tuple(
                (tuple(t["fields"]), t["weight"])
                for t in manifest["spec"]["interaction_terms"]
            ),
            noise_std=manifest["spec"]["noise_std"],
            n_instances=manifest["spec"]["n_instances"],
            seed=manifest["spec"]["seed"],
        )
        _, again = data.synthesize_full(spec)
        assert again["probabilities"] == manifest["probabilities"]
        assert again["latents"] == manifest["latents"]

    def test_invalid_spec_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("synth.fields = 1\nsynth.vocab_per_field = 4\n")
        assert run_cli("synthesize", "--spec", bad, "--output-dir", tmp_path) == 2
        assert "error" in capsys.readouterr().err


class TestTrain:
    def test_artifacts(self, fm_run):
        for name in ("model.ckpt", "history.jsonl", "eval.json", "schema.json", "history.png"):
            assert (fm_run / name).is_file(), name

    def test_learns_above_chance(self, fm_run):
        report = json.loads((fm_run / "eval.json").read_text())
        assert report["split"] == "test"
        assert report["auc"] > 0.5

    def test_history_lines(self, fm_run):
        lines = (fm_run / "history.jsonl").read_text().splitlines()
        assert 0 < len(lines) <= 10
        first = json.loads(lines[0])
        assert set(first) == {"epoch", "train_loss", "valid_loss", "valid_auc", "seconds"}

    def test_missing_dataset_names_path(self, pair_data, tmp_path, capsys):
        code = run_cli(
            "train",
            "--data.train",
            tmp_path / "absent.csv",
            "--data.schema",
            pair_data / "data.schema",
        )
        assert code == 2
        assert "absent.csv" in capsys.readouterr().err

    def test_same_seed_byte_identical_artifacts(self, pair_data, fm_run, tmp_path):
        again = tmp_path / "again"
        assert run_cli(*train_args(pair_data, again, *FM_FLAGS)) == 0
        assert (again / "eval.json").read_bytes() == (fm_run / "eval.json").read_bytes()
        assert (again / "model.ckpt").read_bytes() == (fm_run / "model.ckpt").read_bytes()

    def test_explicit_validation_file(self, pair_data, tmp_path):
        out = tmp_path / "out"
        code = run_cli(
            *train_args(
                pair_data,
                out,
                "--data.valid",
                pair_data / "data.csv",
                "--model.preset",
                "lr",
                "--train.max_epochs",
                "2",
            )
        )
        assert code == 0
        report = json.loads((out / "eval.json").read_text())
        assert report["split"] == "valid"
        assert report["n"] == 1000

    def test_no_split_trains_on_everything(self, pair_data, tmp_path):
        out = tmp_path / "out"
        code = run_cli(
            *train_args(
                pair_data,
                out,
                "--data.split",
                "1,0,0",
                "--model.preset",
                "lr",
                "--train.max_epochs",
                "3",
            )
        )
        assert code == 0
        report = json.loads((out / "eval.json").read_text())
        assert report["split"] == "train"
        assert report["n"] == 1000
        history = [
            json.loads(line)
            for line in (out / "history.jsonl").read_text().splitlines()
        ]
        assert len(history) == 3
        assert all(rec["valid_auc"] is None for rec in history)

    def test_bench_reports_block_timings(self, pair_data, tmp_path, capsys):
        out = tmp_path / "out"
        code = run_cli(
            *train_args(
                pair_data,
                out,
                "--bench",
                "--model.preset",
                "xdeepfm",
                "--model.embedding_dim",
                "4",
                "--model.dnn_widths",
                "8",
                "--model.cin_widths",
                "4",
                "--train.max_epochs",
                "1",
            )
        )
        assert code == 0
        first = json.loads(capsys.readouterr().out.splitlines()[0])
        assert first["bench"]["cin_seconds_per_epoch"] > 0
        assert first["bench"]["dnn_seconds_per_epoch"] > 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_3(self, pair_data, tmp_path, capsys):
        code = run_cli(
            *train_args(
                pair_data,
                tmp_path / "out",
                "--model.preset",
                "fm",
                "--train.lr",
                "1e200",
                "--train.max_epochs",
                "2",
            )
        )
        assert code == 3
        assert "non-finite" in capsys.readouterr().err


class TestEvaluate:
    def test_scores_full_file(self, pair_data, fm_run, tmp_path, capsys):
        out_file = tmp_path / "report.json"
        code = run_cli(
            "evaluate",
            "--checkpoint",
            fm_run / "model.ckpt",
            "--data",
            pair_data / "data.csv",
            "--output",
            out_file,
        )
        assert code == 0
        printed = capsys.readouterr().out.strip()
        assert out_file.read_text().strip() == printed
        report = json.loads(printed)
        assert report["n"] == 1000
        assert 0.5 < report["auc"] <= 1.0

    def test_mismatched_snapshot_exits_2(self, fm_run, triple_data, tmp_path, capsys):
        with open(triple_data / "data.csv", newline="", encoding="utf-8") as fh:
            fields, label_column = data.load_schema_config(
                (triple_data / "data.schema").read_text()
            )
            other = data.parse_dataset(fh, fields, label_column)
        snapshot = tmp_path / "schema.json"
        snapshot.write_text(json.dumps(data.schema_to_json(other.schema)))
        code = run_cli(
            "evaluate",
            "--checkpoint",
            fm_run / "model.ckpt",
            "--schema-snapshot",
            snapshot,
            "--data",
            triple_data / "data.csv",
        )
        assert code == 2
        assert "does not match" in capsys.readouterr().err


class TestVerify:
    def test_default_runs_all_checks(self, capsys):
        assert run_cli("verify") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        reports = [json.loads(line) for line in lines]
        assert {r["name"] for r in reports} == {
            "collinearity",
            "polynomial",
            "params",
            "fm_reduction",
            "gradients",
        }
        assert all(r["passed"] for r in reports)
        assert all("worst_deviation" in r and "details" in r for r in reports)

    def test_empty_selection_is_a_no_op(self, capsys):
        assert run_cli("verify", "--checks") == 0
        assert capsys.readouterr().out.strip() == ""

    def test_subset_runs_in_given_order(self, capsys):
        assert run_cli("verify", "--checks", "gradients", "collinearity") == 0
        names = [
            json.loads(line)["name"]
            for line in capsys.readouterr().out.strip().splitlines()
        ]
        assert names == ["gradients", "collinearity"]

    def test_corrupted_cin_backward_fails(self, monkeypatch, capsys):
        """Scaling the CIN filter gradients must trip the gradients check."""
        true_backward = model.backward_batch

        def bent(params, batch, cache, grad_z):
            grads = true_backward(params, batch, cache, grad_z)
            for name in params.names():
                if name.startswith("cin."):
                    params.view_in(grads, name)[...] *= 1.5
            return grads

        monkeypatch.setattr(model, "backward_batch", bent)
        assert run_cli("verify", "--checks", "gradients") == 1
        report = json.loads(capsys.readouterr().out.strip())
        assert report["passed"] is False
        assert report["worst_deviation"] > 1e-4


class TestGridsearch:
    def test_failed_rows_recorded_without_aborting(self, pair_data, tmp_path, capsys):
        out = tmp_path / "grid"
        code = run_cli(
            "gridsearch",
            "--data.train",
            pair_data / "data.csv",
            "--data.schema",
            pair_data / "data.schema",
            "--model.parts",
            "linear,cin",
            "--model.embedding_dim",
            "4",
            "--model.cin_widths",
            "4",
            "--train.max_epochs",
            "2",
            "--grid.cin_width",
            "4,0",
            "--grid.lr",
            "0.01",
            "--output.dir",
            out,
        )
        assert code == 0
        announced = json.loads(capsys.readouterr().out.splitlines()[0])
        assert announced["combinations"] == 2
        rows = (out / "grid_results.csv").read_text().splitlines()
        header = rows[0].split(",")
        assert header[:7] == [
            "cin_depth",
            "cin_width",
            "dnn_depth",
            "dnn_width",
            "activation",
            "lr",
            "lambda",
        ]
        body = [dict(zip(header, line.split(","))) for line in rows[1:]]
        assert len(body) == 2
        ok = [r for r in body if r["status"] == "ok"]
        failed = [r for r in body if r["status"] == "failed"]
        assert len(ok) == 1 and len(failed) == 1
        assert failed[0]["error"] != ""
        assert (out / "grid_results.png").is_file()

    def test_three_way_signal_needs_depth_two(self, triple_data, tmp_path):
        """A single 3-field interaction is invisible to one filter layer, so
        the two-layer configuration must outrank it on validation AUC."""
        out = tmp_path / "grid"
        code = run_cli(
            "gridsearch",
            "--data.train",
            triple_data / "data.csv",
            "--data.schema",
            triple_data / "data.schema",
            "--model.parts",
            "linear,cin",
            "--model.embedding_dim",
            "8",
            "--model.cin_widths",
            "8",
            "--train.lr",
            "0.02",
            "--train.batch_size",
            "256",
            "--train.max_epochs",
            "24",
            "--train.patience",
            "0",
            "--train.seed",
            "5",
            "--grid.cin_depth",
            "1,2",
            "--output.dir",
            out,
        )
        assert code == 0
        rows = (out / "grid_results.csv").read_text().splitlines()
        header = rows[0].split(",")
        body = [dict(zip(header, line.split(","))) for line in rows[1:]]
        assert [r["status"] for r in body] == ["ok", "ok"]
        assert body[0]["cin_depth"] == "2"
        assert float(body[0]["valid_auc"]) > float(body[1]["valid_auc"]) + 0.01

    def test_singleton_grid_matches_train_command(self, pair_data, tmp_path):
        """One combination is exactly one training run: replaying it through
        the train command with the derived seed gives the same numbers."""
        grid_out = tmp_path / "grid"
        shared = [
            "--data.train",
            pair_data / "data.csv",
            "--data.schema",
            pair_data / "data.schema",
            "--model.parts",
            "linear,cin",
            "--model.embedding_dim",
            "4",
            "--model.cin_widths",
            "4",
            "--train.max_epochs",
            "4",
            "--train.batch_size",
            "128",
        ]
        assert (
            run_cli(
                "gridsearch",
                *shared,
                "--train.seed",
                "11",
                "--output.dir",
                grid_out,
            )
            == 0
        )
        rows = (grid_out / "grid_results.csv").read_text().splitlines()
        row = dict(zip(rows[0].split(","), rows[1].split(",")))
        assert row["status"] == "ok"

        train_out = tmp_path / "train"
        assert (
            run_cli(
                "train",
                *shared,
                "--train.seed",
                str(derive_seed(11, 0)),
                "--data.split_seed",
                "11",
                "--output.dir",
                train_out,
            )
            == 0
        )
        params = model.load_checkpoint(train_out / "model.ckpt")
        with open(pair_data / "data.csv", newline="", encoding="utf-8") as fh:
            fields, label_column = data.load_schema_config(
                (pair_data / "data.schema").read_text()
            )
            full = data.parse_dataset(fh, fields, label_column)
        _, valid_ds, _ = data.split(full, (0.8, 0.1, 0.1), 11)
        report = metrics.evaluate(params, valid_ds)
        assert report.auc == float(row["valid_auc"])
        assert report.logloss == float(row["valid_logloss"])

    def test_requires_validation_split(self, pair_data, tmp_path, capsys):
        code = run_cli(
            "gridsearch",
            "--data.train",
            pair_data / "data.csv",
            "--data.schema",
            pair_data / "data.schema",
            "--data.split",
            "1,0,0",
            "--output.dir",
            tmp_path,
        )
        assert code == 2
        assert "validation" in capsys.readouterr().err
