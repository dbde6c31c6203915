import json
import subprocess
import sys

import numpy as np
import pytest

from daffnet import cli, fileio, metrics
from daffnet.synthdata import Corpus

from conftest import SMALL_ARCH


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_config(path, **doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    cfg = write_config(
        out / "cfg.json",
        version=1,
        corpus=str(tiny_corpus),
        output_dir=str(out / "run"),
        variant="DAFFNet",
        architecture=dict(SMALL_ARCH),
        iterations=2,
    )
    assert run("train", "--config", cfg) == 0
    return out / "run" / "final.dckp"


class TestGen:
    def test_writes_manifest(self, tmp_path):
        assert run("gen", "--out", tmp_path / "c", "--pairs", 2, "--seed", 3) == 0
        m = json.loads((tmp_path / "c/manifest.json").read_text())
        assert len(m["pairs"]) == 2

    def test_same_seed_same_manifest(self, tmp_path):
        run("gen", "--out", tmp_path / "a", "--pairs", 1, "--seed", 4)
        run("gen", "--out", tmp_path / "b", "--pairs", 1, "--seed", 4)
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()

    def test_bad_dims_exit_2(self, tmp_path, capsys):
        assert run("gen", "--out", tmp_path / "c", "--dims", 20) == 2
        assert "dims must be divisible by 16" in capsys.readouterr().err
        assert not (tmp_path / "c").exists()

    def test_unknown_flag_rejected(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("gen", "--out", tmp_path, "--colour", "red")
        assert exc.value.code == 2

    def test_unwritable_target_exit_3(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("gen", "--out", blocker / "sub", "--pairs", 1) == 3


class TestTrain:
    def test_missing_corpus_exit_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", corpus=str(tmp_path / "none"), output_dir=str(tmp_path / "o"))
        assert run("train", "--config", cfg) == 2
        assert not (tmp_path / "o").exists()

    def test_schema_violation_exit_2(self, tmp_path, tiny_corpus, capsys):
        cfg = write_config(tmp_path / "c.json", corpus=str(tiny_corpus), output_dir="o", learning_rate=-1)
        assert run("train", "--config", cfg) == 2
        cfg = write_config(tmp_path / "c.json", corpus=str(tiny_corpus), output_dir="o", epochs=3)
        assert run("train", "--config", cfg) == 2
        assert "epochs" in capsys.readouterr().err
        cfg = write_config(tmp_path / "c.json", version=2, corpus=str(tiny_corpus), output_dir="o")
        assert run("train", "--config", cfg) == 2

    def test_config_not_json_exit_2(self, tmp_path):
        (tmp_path / "c.json").write_text("corpus = 1")
        assert run("train", "--config", tmp_path / "c.json") == 2

    def test_final_checkpoint_loads_and_reports(self, trained):
        from daffnet.network import load_checkpoint

        model, meta, it, _ = load_checkpoint(trained)
        assert it == 2 and model.variant == "DAFFNet"
        run_dir = trained.parent
        assert (run_dir / "eval_report.jsonl").exists() and (run_dir / "eval_table.txt").exists()

    def test_unsupervised_without_labels(self, unlabelled_corpus, tmp_path):
        cfg = write_config(
            tmp_path / "c.json",
            corpus=str(unlabelled_corpus),
            output_dir=str(tmp_path / "o"),
            variant="DAFFNetUns",
            architecture=dict(SMALL_ARCH),
            iterations=1,
        )
        assert run("train", "--config", cfg) == 0
        assert (tmp_path / "o/final.dckp").exists()

    def test_numeric_fault_exit_4(self, tiny_corpus, tmp_path, monkeypatch, capsys):
        from daffnet import trainer
        from daffnet.errors import NumericFault

        def boom(*a, **k):
            raise NumericFault("non-finite loss component(s) ['sim'] at iteration 1")

        monkeypatch.setattr(trainer, "step_loss", boom)
        cfg = write_config(
            tmp_path / "c.json", corpus=str(tiny_corpus), output_dir=str(tmp_path / "o"),
            variant="PyramidReg", architecture=dict(SMALL_ARCH), iterations=1,
        )
        assert run("train", "--config", cfg) == 4
        assert "iteration 1" in capsys.readouterr().err


class TestRegister:
    def test_self_registration(self, trained, tiny_corpus, tmp_path, capsys):
        fixed = tiny_corpus / "pair_000/fixed.dvol"
        code = run(
            "register", "--model", trained, "--moving", fixed, "--fixed", fixed,
            "--out-field", tmp_path / "u.dvol", "--out-warped", tmp_path / "w.dvol",
        )
        assert code == 0
        njd = float(capsys.readouterr().out.split("NJD%:")[1])
        assert njd == 0.0
        u = fileio.read_volume(tmp_path / "u.dvol")
        assert u.kind == "field" and u.data.shape == (3, 32, 32, 32)
        w = fileio.read_volume(tmp_path / "w.dvol").data
        f = fileio.read_volume(fixed).data
        assert np.abs(w - f).mean() < 0.01

    def test_only_field_written(self, trained, tiny_corpus, tmp_path):
        d = tmp_path / "out"
        d.mkdir()
        p = tiny_corpus / "pair_001"
        assert run("register", "--model", trained, "--moving", p / "moving.dvol", "--fixed", p / "fixed.dvol",
                   "--out-field", d / "u.dvol") == 0
        assert [x.name for x in d.iterdir()] == ["u.dvol"]
        rec = fileio.read_volume(d / "u.dvol")
        assert fileio.decode_volume(fileio.encode_volume(rec.data, "field", rec.spacing)).data.tobytes() == rec.data.tobytes()

    def test_warped_labels_are_labels(self, trained, tiny_corpus, tmp_path):
        p = tiny_corpus / "pair_001"
        assert run("register", "--model", trained, "--moving", p / "moving.dvol", "--fixed", p / "fixed.dvol",
                   "--out-field", tmp_path / "u.dvol", "--labels", p / "moving_labels.dvol",
                   "--out-warped-labels", tmp_path / "l.dvol") == 0
        lab = fileio.read_volume(tmp_path / "l.dvol")
        assert lab.kind == "labels" and set(np.unique(lab.data)) <= {0, 1, 2, 3}

    def test_dim_mismatch_exit_2(self, trained, tiny_corpus, tmp_path, capsys):
        small = tmp_path / "small.dvol"
        fileio.write_volume(small, np.zeros((16, 32, 32), np.float32))
        code = run("register", "--model", trained, "--moving", small,
                   "--fixed", tiny_corpus / "pair_000/fixed.dvol", "--out-field", tmp_path / "u.dvol")
        assert code == 2
        err = capsys.readouterr().err
        assert "(16, 32, 32)" in err and "(32, 32, 32)" in err
        assert not (tmp_path / "u.dvol").exists()

    def test_corrupt_volume_exit_3(self, trained, tiny_corpus, tmp_path):
        bad = tmp_path / "bad.dvol"
        bad.write_bytes(b"JUNK" * 20)
        code = run("register", "--model", trained, "--moving", bad,
                   "--fixed", tiny_corpus / "pair_000/fixed.dvol", "--out-field", tmp_path / "u.dvol")
        assert code == 3


class TestEval:
    def test_writes_report_and_table(self, trained, tiny_corpus, tmp_path, capsys):
        report = tmp_path / "r.jsonl"
        assert run("eval", "--model", trained, "--manifest", tiny_corpus / "manifest.json", "--report", report) == 0
        recs = [json.loads(l) for l in report.read_text().splitlines()]
        assert [r["pair"] for r in recs] == Corpus(tiny_corpus).ids("test")
        assert "Reg. Dice(%)" in capsys.readouterr().out
        assert (tmp_path / "r.jsonl.table.txt").exists()

    def test_identity_model_matches_pre_registration(self, tiny_corpus, tmp_path):
        from daffnet.network import ArchitectureConfig, build_variant, save_checkpoint

        model = build_variant(ArchitectureConfig(variant="PyramidReg", **SMALL_ARCH))
        save_checkpoint(tmp_path / "id.dckp", model)
        report = tmp_path / "r.jsonl"
        assert run("eval", "--model", tmp_path / "id.dckp", "--manifest", tiny_corpus, "--report", report, "--split", "all") == 0
        for r in map(json.loads, report.read_text().splitlines()):
            assert r["dsc"] == r["pre_dsc"]

    def test_unlabelled_corpus_exit_2(self, trained, unlabelled_corpus, tmp_path):
        assert run("eval", "--model", trained, "--manifest", unlabelled_corpus, "--report", tmp_path / "r") == 2


class TestCheck:
    def test_quick_checks_pass(self, capsys):
        assert run("check", "--only", "exact_identities", "loss_identities", "metric_oracles") == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 3

    def test_failure_exit_1_names_property(self, monkeypatch, capsys):
        from daffnet import checks

        monkeypatch.setitem(checks.CHECKS, "exact_identities", lambda: (False, "broken"))
        assert run("check", "--only", "exact_identities") == 1
        assert "failed properties: exact_identities" in capsys.readouterr().out

    def test_unknown_check_exit_2(self):
        assert run("check", "--only", "nonsense") == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "daffnet.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("gen", "train", "ablate", "sweep", "register", "eval", "check"):
        assert sub in out.stdout


def test_ablate_and_sweep_configs(tiny_corpus, tmp_path):
    base = dict(corpus=str(tiny_corpus), architecture=dict(SMALL_ARCH), iterations=1)
    cfg = write_config(tmp_path / "a.json", output_dir=str(tmp_path / "a"), ablation_variants=["PyramidReg", "DAFFNet"], **base)
    assert run("ablate", "--config", cfg) == 0
    assert len((tmp_path / "a/ablation_table.txt").read_text().splitlines()) == 4
    cfg = write_config(tmp_path / "s.json", output_dir=str(tmp_path / "s"), sweep_grid=[[1, 10]], **base)
    assert run("sweep", "--config", cfg) == 0
    assert "l1=1/l2=10" in (tmp_path / "s/sweep_table.txt").read_text()
