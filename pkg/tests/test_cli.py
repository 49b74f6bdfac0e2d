import csv
import json

import pytest

from langprior.cli import main
from langprior.rescale import smooth_weight

SMALL = {"num_types": 2, "answers_per_type": 3, "train_size": 300, "test_size": 200,
         "q_dim": 2, "v_dim": 6, "epochs_finetune": 3, "h_q": 4, "h_v": 8, "h_f": 8}


@pytest.fixture()
def cfg(tmp_path):
    def write(**kw):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({**SMALL, **kw}))
        return str(path)
    return write


def test_gen_data_writes_files(tmp_path, cfg):
    assert main(["gen-data", "--config", cfg(), "--out", str(tmp_path / "d")]) == 0
    for name in ("train.jsonl", "test.jsonl", "vocab.json", "counts.json", "config.json"):
        assert (tmp_path / "d" / name).exists()


def test_gen_data_same_seed_identical(tmp_path, cfg):
    c = cfg()
    main(["gen-data", "--config", c, "--seed", "4", "--out", str(tmp_path / "a")])
    main(["gen-data", "--config", c, "--seed", "4", "--out", str(tmp_path / "b")])
    for name in ("train.jsonl", "test.jsonl", "vocab.json", "counts.json", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_data_unwritable_path(tmp_path, cfg):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--config", cfg(), "--out", str(blocker / "sub")]) == 2


def test_bad_config(tmp_path, cfg):
    assert main(["gen-data", "--config", cfg(bogus=1), "--out", str(tmp_path / "d")]) == 2
    assert main(["gen-data", "--config", cfg(skew=-1), "--out", str(tmp_path / "d")]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")]) == 2


def test_train_eval_diagnose(tmp_path, cfg):
    c = cfg(shift_mode="none", visual_noise=0.0, epochs_finetune=40, use_mask=True,
            use_rescale=True, epochs_mask_pretrain=5)
    d, run = tmp_path / "d", tmp_path / "run"
    assert main(["gen-data", "--config", c, "--out", str(d)]) == 0
    assert main(["train", "--config", c, "--data", str(d), "--out", str(run / "model.json")]) == 0
    assert (run / "trace.csv").exists() and (run / "config.json").exists()
    assert main(["eval", "--ckpt", str(run / "model.json"), "--data", str(d), "--out", str(run / "ev")]) == 0
    metrics = json.loads((run / "ev" / "metrics.json").read_text())
    assert metrics["test"]["accuracy"] >= 0.95
    assert metrics["test"]["out_of_type_rate"] == 0.0
    assert main(["diagnose", "--ckpt", str(run / "model.json"), "--data", str(d),
                 "--report", str(run / "diag")]) == 0
    summary = json.loads((run / "diag" / "summary.json").read_text())
    assert set(summary["types"]) == {"0", "1"}
    assert (run / "diag" / "gradnorms.csv").exists()


def test_eval_mismatched_vocab(tmp_path, cfg):
    d1, d2, run = tmp_path / "d1", tmp_path / "d2", tmp_path / "run"
    main(["gen-data", "--config", cfg(), "--out", str(d1)])
    main(["gen-data", "--config", cfg(answers_per_type=4, v_dim=8), "--out", str(d2)])
    main(["train", "--config", cfg(), "--data", str(d1), "--out", str(run / "m.json")])
    assert main(["eval", "--ckpt", str(run / "m.json"), "--data", str(d2), "--out", str(run / "e")]) == 2


def test_eval_missing_checkpoint(tmp_path, cfg):
    main(["gen-data", "--config", cfg(), "--out", str(tmp_path / "d")])
    assert main(["eval", "--ckpt", str(tmp_path / "none.json"), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "e")]) == 2


def test_train_divergence_exit_code(tmp_path, cfg):
    c = cfg(lr=1e200, visual_noise=0.5)
    main(["gen-data", "--config", c, "--out", str(tmp_path / "d")])
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--config", c, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "m.json")])
    assert code == 3


def _weights(tmp_path, counts):
    src = tmp_path / "counts.json"
    src.write_text(json.dumps({"types": ["what color"], "counts": [counts],
                               "answers": ["red", "blue", "green"]}))
    out = tmp_path / "w.csv"
    assert main(["weights", "--counts", str(src), "--out", str(out)]) == 0
    with open(out) as fh:
        return list(csv.DictReader(fh)), out.read_bytes()


def test_weights_toy_table(tmp_path):
    rows, first = _weights(tmp_path, [80, 4, 16])
    red = next(r for r in rows if r["answer"] == "red")
    assert float(red["raw"]) == 0.25
    assert float(red["smoothed"]) == pytest.approx(smooth_weight(0.25), abs=1e-15)
    assert float(next(r for r in rows if r["answer"] == "blue")["raw"]) == 24.0
    _, second = _weights(tmp_path, [80, 4, 16])
    assert first == second


def test_weights_missing_file(tmp_path):
    assert main(["weights", "--counts", str(tmp_path / "x.json"), "--out", str(tmp_path / "w.csv")]) == 2
