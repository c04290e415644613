"""End-to-end command-line runs against tiny datasets: artifact shapes,
manifest reproducibility, and exit-code contract (0 ok, 1 computation
failure, 2 usage/input error)."""

import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from molgraph3d.cli import main

from conftest import make_mol, mol_to_sdf, regression_fixture


@pytest.fixture
def dataset(tmp_path):
    records = regression_fixture(n=10, seed=31)
    sdf = tmp_path / "mols.sdf"
    sdf.write_text("".join(mol_to_sdf(r.molecule) for r in records))
    targets = tmp_path / "targets.csv"
    targets.write_text(
        "id,target\n" + "".join(f"{r.molecule.id},{r.target}\n" for r in records))
    config = tmp_path / "config.json"
    config.write_text(json.dumps(
        {"hidden": 4, "fc_width": 4, "conv_layers": 2,
         "max_epochs": 3, "batch_size": 4}))
    return sdf, targets, config


def _train(tmp_path, dataset, out="run", extra=()):
    sdf, targets, config = dataset
    out_dir = tmp_path / out
    code = main(["train", "--sdf", str(sdf), "--targets", str(targets),
                 "--task", "regression", "--agg", "sum",
                 "--config", str(config), "--out", str(out_dir),
                 "--folds", "5", "--fold", "0", "--seed", "7", *extra])
    assert code == 0
    return out_dir


class TestFeaturize:
    def test_dump_and_manifest(self, tmp_path, ethane):
        sdf = tmp_path / "ethane.sdf"
        sdf.write_text(mol_to_sdf(ethane))
        out = tmp_path / "feat"
        assert main(["featurize", "--sdf", str(sdf), "--out", str(out)]) == 0
        doc = json.loads((out / "graph_tensors.json").read_text())
        assert doc[0]["id"] == "ethane"
        assert np.allclose(doc[0]["adjacency"], [[0.5, 0.5], [0.5, 0.5]])
        assert doc[0]["feature_blocks"][0] == {"name": "atom_type", "width": 15}
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "featurize"
        assert str(sdf) in manifest["inputs"]

    def test_missing_file_exit_2(self, tmp_path, capsys):
        code = main(["featurize", "--sdf", str(tmp_path / "nope.sdf"),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert capsys.readouterr().err != ""

    def test_bad_record_reported_nonzero(self, tmp_path, ethane, capsys):
        sdf = tmp_path / "mixed.sdf"
        sdf.write_text(mol_to_sdf(ethane) + "garbage\n$$$$\n")
        out = tmp_path / "feat"
        code = main(["featurize", "--sdf", str(sdf), "--out", str(out)])
        assert code == 2
        # good record still dumped
        doc = json.loads((out / "graph_tensors.json").read_text())
        assert len(doc) == 1
        assert "record 1" in capsys.readouterr().err


class TestTrain:
    def test_single_fold_artifacts(self, tmp_path, dataset):
        out = _train(tmp_path, dataset)
        for name in ("fold_assignments.json", "fold0.checkpoint.json",
                     "fold0.log.csv", "fold0.predictions.csv",
                     "metrics.json", "manifest.json"):
            assert (out / name).exists(), name
        log = list(csv.reader((out / "fold0.log.csv").open()))
        assert log[0] == ["epoch", "train_loss", "val_loss", "lr"]
        assert len(log) == 4  # 3 epochs
        report = json.loads((out / "metrics.json").read_text())
        assert "rmse" in report["summary"]

    def test_fold_flag_runs_exactly_one(self, tmp_path, dataset):
        out = _train(tmp_path, dataset)
        assert not (out / "fold1.checkpoint.json").exists()

    def test_reruns_bit_identical(self, tmp_path, dataset):
        out1 = _train(tmp_path, dataset, out="a")
        out2 = _train(tmp_path, dataset, out="b")
        for name in ("fold0.checkpoint.json", "fold0.log.csv", "metrics.json"):
            h1 = hashlib.sha256((out1 / name).read_bytes()).hexdigest()
            h2 = hashlib.sha256((out2 / name).read_bytes()).hexdigest()
            assert h1 == h2, name

    def test_conflicting_task_rejected_before_training(self, tmp_path, dataset, capsys):
        sdf, targets, config = dataset
        code = main(["train", "--sdf", str(sdf), "--targets", str(targets),
                     "--task", "classification", "--agg", "sum",
                     "--config", str(config), "--out", str(tmp_path / "x"),
                     "--folds", "5", "--fold", "0"])
        assert code == 2
        assert "0,1" in capsys.readouterr().err.replace("{", "").replace("}", "")

    def test_label_map(self, tmp_path):
        records = regression_fixture(n=10, seed=32)
        sdf = tmp_path / "c.sdf"
        sdf.write_text("".join(mol_to_sdf(r.molecule) for r in records))
        targets = tmp_path / "c.csv"
        labels = ["CA", "CM", "CI", "CI", "CA", "CI", "CM", "CI", "CA", "CI"]
        targets.write_text(
            "id,target\n" + "".join(f"{r.molecule.id},{lab}\n"
                                    for r, lab in zip(records, labels)))
        code = main(["train", "--sdf", str(sdf), "--targets", str(targets),
                     "--task", "classification", "--agg", "max",
                     "--out", str(tmp_path / "y"), "--folds", "5", "--fold", "0",
                     "--max-epochs", "2", "--label-map", "CA=1,CM=1,CI=0"])
        assert code == 0

    def test_unknown_config_key_rejected(self, tmp_path, dataset, capsys):
        sdf, targets, _ = dataset
        bad = tmp_path / "bad.json"
        bad.write_text('{"hidden": 4, "nonsense": 1}')
        code = main(["train", "--sdf", str(sdf), "--targets", str(targets),
                     "--task", "regression", "--agg", "sum",
                     "--config", str(bad), "--out", str(tmp_path / "z")])
        assert code == 2
        assert "nonsense" in capsys.readouterr().err


class TestEvaluate:
    def test_metrics_and_predictions(self, tmp_path, dataset):
        sdf, targets, _ = dataset
        out = _train(tmp_path, dataset)
        eval_dir = tmp_path / "eval"
        code = main(["evaluate", "--model", str(out / "fold0.checkpoint.json"),
                     "--sdf", str(sdf), "--targets", str(targets),
                     "--out", str(eval_dir)])
        assert code == 0
        metrics = json.loads((eval_dir / "metrics.json").read_text())
        assert set(metrics) == {"mae", "rmse"}
        lines = (eval_dir / "predictions.csv").read_text().splitlines()
        assert len(lines) == 11

    def test_empty_set_rejected(self, tmp_path, dataset):
        out = _train(tmp_path, dataset)
        empty = tmp_path / "empty.csv"
        empty.write_text("id,target\n")
        code = main(["evaluate", "--model", str(out / "fold0.checkpoint.json"),
                     "--sdf", str(dataset[0]), "--targets", str(empty),
                     "--out", str(tmp_path / "e2")])
        assert code == 2

    def test_checkpoint_shape_mismatch(self, tmp_path, dataset):
        out = _train(tmp_path, dataset)
        ckpt = out / "fold0.checkpoint.json"
        doc = json.loads(ckpt.read_text())
        doc["tensors"]["out.w"]["shape"] = [1, 3]
        broken = tmp_path / "broken.json"
        broken.write_text(json.dumps(doc))
        code = main(["evaluate", "--model", str(broken), "--sdf", str(dataset[0]),
                     "--targets", str(dataset[1]), "--out", str(tmp_path / "e3")])
        assert code == 2


class TestRotateEval:
    def test_sweep_grid_and_consistency_with_evaluate(self, tmp_path, dataset):
        sdf, targets, _ = dataset
        out = _train(tmp_path, dataset)
        rot_dir = tmp_path / "rot"
        code = main(["rotate-eval", "--model", str(out / "fold0.checkpoint.json"),
                     "--sdf", str(sdf), "--targets", str(targets),
                     "--mode", "sweep", "--out", str(rot_dir)])
        assert code == 0
        rows = list(csv.DictReader((rot_dir / "sweep.csv").open()))
        assert len(rows) == (8 * 3 + 1) * 2  # two metrics per setting
        eval_dir = tmp_path / "ev"
        main(["evaluate", "--model", str(out / "fold0.checkpoint.json"),
              "--sdf", str(sdf), "--targets", str(targets), "--out", str(eval_dir)])
        plain = json.loads((eval_dir / "metrics.json").read_text())
        zero_rows = [r for r in rows if r["degrees"] == "0.0" and r["metric"] == "rmse"]
        assert len(zero_rows) == 3
        for row in zero_rows:
            assert float(row["value"]) == plain["rmse"]  # bit-identical

    def test_fine_mode_72_rows(self, tmp_path, dataset):
        sdf, targets, _ = dataset
        out = _train(tmp_path, dataset)
        rot_dir = tmp_path / "fine"
        code = main(["rotate-eval", "--model", str(out / "fold0.checkpoint.json"),
                     "--sdf", str(sdf), "--targets", str(targets),
                     "--mode", "fine", "--molecule-id", "fix-3",
                     "--out", str(rot_dir)])
        assert code == 0
        lines = (rot_dir / "fine_sweep.csv").read_text().splitlines()
        assert len(lines) == 73

    def test_random_mode_single_row(self, tmp_path, dataset):
        sdf, targets, _ = dataset
        out = _train(tmp_path, dataset)
        rot_dir = tmp_path / "rand"
        code = main(["rotate-eval", "--model", str(out / "fold0.checkpoint.json"),
                     "--sdf", str(sdf), "--targets", str(targets),
                     "--mode", "random", "--out", str(rot_dir)])
        assert code == 0
        rows = list(csv.DictReader((rot_dir / "sweep.csv").open()))
        assert {r["axis"] for r in rows} == {"xyz"}


class TestContrib:
    def test_weights_sum_to_one(self, tmp_path, dataset):
        sdf, _, _ = dataset
        out = _train(tmp_path, dataset)
        contrib_dir = tmp_path / "contrib"
        code = main(["contrib", "--model", str(out / "fold0.checkpoint.json"),
                     "--sdf", str(sdf), "--agg", "sum", "--out", str(contrib_dir)])
        assert code == 0
        doc = json.loads((contrib_dir / "contributions.json").read_text())
        assert len(doc) == 10
        for entry in doc:
            assert abs(sum(entry["scalar_weights"]) - 1.0) <= 1e-9
            assert abs(sum(entry["vector_weights"]) - 1.0) <= 1e-9

    def test_single_atom_weight_one(self, tmp_path, dataset, methane):
        out = _train(tmp_path, dataset)
        sdf = tmp_path / "single.sdf"
        sdf.write_text(mol_to_sdf(methane))
        contrib_dir = tmp_path / "c1"
        code = main(["contrib", "--model", str(out / "fold0.checkpoint.json"),
                     "--sdf", str(sdf), "--agg", "sum", "--out", str(contrib_dir)])
        assert code == 0
        doc = json.loads((contrib_dir / "contributions.json").read_text())
        assert doc[0]["scalar_weights"] == [1.0]

    def test_agg_mismatch_rejected(self, tmp_path, dataset, capsys):
        out = _train(tmp_path, dataset)
        code = main(["contrib", "--model", str(out / "fold0.checkpoint.json"),
                     "--sdf", str(dataset[0]), "--agg", "max",
                     "--out", str(tmp_path / "c2")])
        assert code == 2
        assert "does not match" in capsys.readouterr().err


class TestInputsUntouched:
    def test_no_command_mutates_inputs(self, tmp_path, dataset):
        sdf, targets, config = dataset
        before = {p: hashlib.sha256(p.read_bytes()).hexdigest()
                  for p in (sdf, targets, config)}
        out = _train(tmp_path, dataset)
        main(["evaluate", "--model", str(out / "fold0.checkpoint.json"),
              "--sdf", str(sdf), "--targets", str(targets),
              "--out", str(tmp_path / "ev2")])
        main(["featurize", "--sdf", str(sdf), "--out", str(tmp_path / "f2")])
        for p, digest in before.items():
            assert hashlib.sha256(p.read_bytes()).hexdigest() == digest, p


class TestUsage:
    def test_unknown_command_exit_2(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

    def test_missing_required_flag_exit_2(self):
        with pytest.raises(SystemExit) as err:
            main(["featurize"])
        assert err.value.code == 2

    def test_console_script_help(self):
        out = subprocess.run([sys.executable, "-m", "molgraph3d.cli", "--help"],
                             capture_output=True, text=True)
        assert out.returncode == 0
        assert "featurize" in out.stdout
