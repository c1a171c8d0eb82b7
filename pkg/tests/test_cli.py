import csv
import hashlib
import json

import numpy as np
import pytest

from spikescr.cli import main
from spikescr.data import load_dense, load_events, meta_path
from spikescr.layers import load_checkpoint

SMALL_FLAGS = ["--blocks", "1", "--heads", "2", "--hidden", "8", "--batch-size", "8"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture
def events(tmp_path):
    path = tmp_path / "ev.jsonl"
    assert main(["gen-data", "--samples", "8", "--seed", "1", "--out", str(path)]) == 0
    return path


def test_gen_data_empty(tmp_path):
    path = tmp_path / "e.jsonl"
    assert main(["gen-data", "--samples", "0", "--out", str(path)]) == 0
    assert path.read_text() == "" and len(load_events(path)) == 0


def test_gen_data_checksum_stable(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        main(["gen-data", "--samples", "12", "--seed", "7", "--out", str(p)])
    assert _sha(a) == _sha(b)


def test_gen_data_metadata(tmp_path):
    p = tmp_path / "m.jsonl"
    main(["gen-data", "--classes", "4", "--neurons", "140", "--samples", "4", "--out", str(p)])
    meta = json.loads(meta_path(p).read_text())
    assert meta["n_classes"] == 4 and meta["n_neurons"] == 140


def test_seed_env_fallback(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SPIKESCR_SEED", "42")
    main(["gen-data", "--samples", "2", "--out", str(tmp_path / "s.jsonl")])
    assert _out(capsys)["seed"] == 42


def test_train_smoke_and_resume(tmp_path, events, capsys):
    run = tmp_path / "run"
    args = ["train", "--data", str(events), "--t-steps", "40", "--epochs", "1", "--out", str(run), *SMALL_FLAGS]
    assert main(args) == 0
    info = _out(capsys)
    assert info["t_steps"] == 40
    assert (run / "model.sscr").exists() and (run / "manifest.json").exists()
    rows = list(csv.DictReader(open(run / "metrics.csv")))
    assert len(rows) == 1 and rows[0]["epoch"] == "0"
    assert main(["train", "--data", str(events), "--t-steps", "40", "--epochs", "2", "--out", str(run),
                 "--resume", str(run / "model.sscr"), *SMALL_FLAGS]) == 0
    rows = list(csv.DictReader(open(run / "metrics.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1", "2"]
    _, meta = load_checkpoint(run / "model.sscr")
    assert meta["epoch"] == 2
    manifest = json.loads((run / "manifest.json").read_text())
    assert {"config", "seed", "build", "started", "finished", "artifacts"} <= set(manifest)


def test_train_is_deterministic(tmp_path, events):
    for name in ("r1", "r2"):
        main(["train", "--data", str(events), "--t-steps", "10", "--epochs", "1", "--seed", "3",
              "--out", str(tmp_path / name), *SMALL_FLAGS])
    assert (tmp_path / "r1" / "metrics.csv").read_text() == (tmp_path / "r2" / "metrics.csv").read_text()
    assert _sha(tmp_path / "r1" / "model.sscr") == _sha(tmp_path / "r2" / "model.sscr")


def test_bad_config_key(tmp_path, events, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"optim": {"learning_rate": 1}}))
    code = main(["train", "--data", str(events), "--t-steps", "10", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "learning_rate" in capsys.readouterr().err


def test_config_file_values_used(tmp_path, events):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"hidden": 8, "n_heads": 2}, "optim": {"epochs": 1, "batch_size": 8}}))
    assert main(["train", "--data", str(events), "--t-steps", "10", "--config", str(cfg),
                 "--out", str(tmp_path / "y")]) == 0
    model, _ = load_checkpoint(tmp_path / "y" / "model.sscr")
    assert model.cfg.hidden == 8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, events):
    code = main(["train", "--data", str(events), "--t-steps", "10", "--epochs", "3", "--lr", "1e38",
                 "--out", str(tmp_path / "nan"), *SMALL_FLAGS])
    assert code == 3


def test_missing_data_exit_code(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--t-steps", "4", "--out", str(tmp_path)]) == 2


def test_usage_errors():
    assert main_exit(["train"]) == 1
    assert main_exit(["frobnicate"]) == 1


def main_exit(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


def test_kdcl_schedules(tmp_path, events, capsys):
    run = tmp_path / "k"
    assert main(["kdcl", "--data", str(events), "--schedule", "40,10", "--epochs", "1", "--out", str(run),
                 *SMALL_FLAGS]) == 0
    report = json.loads((run / "report.json").read_text())
    assert len(list(run.glob("stage*.sscr"))) == 2
    assert report["stages"][1]["teacher_val_acc"] is not None or "teacher_val_acc" in report["stages"][1]
    assert report["stages"][1]["teacher_t_steps"] == 40
    run1 = tmp_path / "k1"
    assert main(["kdcl", "--data", str(events), "--schedule", "40", "--epochs", "1", "--out", str(run1),
                 *SMALL_FLAGS]) == 0
    assert len(list(run1.glob("stage*.sscr"))) == 1
    assert main(["kdcl", "--data", str(events), "--schedule", "10,40", "--out", str(tmp_path / "bad")]) == 1


def test_kdcl_report_has_teacher_accuracy(tmp_path, events):
    run = tmp_path / "kv"
    main(["kdcl", "--data", str(events), "--val", str(events), "--schedule", "20,10", "--epochs", "1",
          "--out", str(run), *SMALL_FLAGS])
    st = json.loads((run / "report.json").read_text())["stages"]
    assert st[1]["teacher_val_acc"] == st[0]["val_acc"]


def test_rebin_command(tmp_path, events, capsys):
    d40, d10 = tmp_path / "d40.sdns", tmp_path / "d10.sdns"
    assert main(["rebin", "--data", str(events), "--t-steps", "40", "--out", str(d40)]) == 0
    assert main(["rebin", "--data", str(d40), "--t-steps", "10", "--out", str(d10)]) == 0
    a, b = load_dense(d40), load_dense(d10)
    assert b.x.shape[1] == 10 and a.x.sum() == b.x.sum()
    direct = tmp_path / "direct.sdns"
    main(["rebin", "--data", str(events), "--t-steps", "10", "--out", str(direct)])
    np.testing.assert_array_equal(load_dense(direct).x, b.x)
    assert main(["rebin", "--data", str(d40), "--t-steps", "7", "--out", str(tmp_path / "x.sdns")]) == 1


def _train_tiny(tmp_path, events, epochs=1, extra=()):
    run = tmp_path / "m"
    main(["train", "--data", str(events), "--t-steps", "10", "--epochs", str(epochs), "--out", str(run),
          *SMALL_FLAGS, *extra])
    return run / "model.sscr"


def test_eval_confusion_and_determinism(tmp_path, events, capsys):
    ckpt = _train_tiny(tmp_path, events)
    conf = tmp_path / "cm.csv"
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(events), "--t-steps", "10",
                 "--confusion", str(conf)]) == 0
    first = _out(capsys)
    main(["eval", "--checkpoint", str(ckpt), "--data", str(events), "--t-steps", "10"])
    assert _out(capsys) == first
    rows = list(csv.reader(open(conf)))[1:]
    labels = load_events(events).labels
    for i, row in enumerate(rows):
        assert sum(int(v) for v in row[1:]) == int((labels == i).sum())


def test_eval_memorizes_eight_samples(tmp_path, events, capsys):
    ckpt = _train_tiny(tmp_path, events, epochs=60, extra=["--lr", "1e-2", "--hidden", "16"])
    capsys.readouterr()
    main(["eval", "--checkpoint", str(ckpt), "--data", str(events), "--t-steps", "10"])
    assert _out(capsys)["accuracy"] == 1.0


def test_profile_reports(tmp_path, events, capsys):
    ckpt = _train_tiny(tmp_path, events)
    zero = tmp_path / "zero.jsonl"
    zero.write_text(json.dumps({"label": 0, "duration": 1.0, "n_neurons": 140, "events": []}) + "\n")
    js, cs = tmp_path / "p.json", tmp_path / "p.csv"
    capsys.readouterr()
    assert main(["profile", "--checkpoint", str(ckpt), "--data", str(zero), "--t-steps", "10",
                 "--json", str(js), "--csv", str(cs)]) == 0
    assert _out(capsys)["e_total_mj"] == 0.0
    main(["profile", "--checkpoint", str(ckpt), "--data", str(events), "--t-steps", "10", "--json", str(js)])
    spike = json.loads(js.read_text())
    assert spike["totals"]["e_total_mj"] == pytest.approx(sum(r["energy_pj"] for r in spike["layers"]) * 1e-9)
    main(["profile", "--checkpoint", str(ckpt), "--data", str(events), "--t-steps", "10", "--json", str(js),
          "--input-kind", "real"])
    real = json.loads(js.read_text())
    first = real["layers"][0]
    assert first["billing"] == "mac"
    assert real["totals"]["e_mac_joules"] == pytest.approx(first["flops"] * 4.6e-12)
    assert spike["layers"][1:] == real["layers"][1:]


def test_profile_constant_overrides(tmp_path, events, capsys):
    ckpt = _train_tiny(tmp_path, events)
    capsys.readouterr()
    main(["profile", "--checkpoint", str(ckpt), "--data", str(events), "--t-steps", "10"])
    base = _out(capsys)
    main(["profile", "--checkpoint", str(ckpt), "--data", str(events), "--t-steps", "10", "--e-ac-pj", "1.8"])
    assert _out(capsys)["e_total_mj"] == pytest.approx(2 * base["e_total_mj"])
