import json
import re

import numpy as np
import pytest

from xmodal import cli
from xmodal.align import AttentionParams, PoolParams
from xmodal.dataio import Corpus, Study, manifest_path, read_corpus, write_corpus
from xmodal.grad import init_params
from xmodal.posenc import GridShape
from xmodal.train import Checkpoint, DivergenceError

SYNTH = {"num_studies": 24, "d": 16, "grid": [3, 3], "n_words": 6, "vocab_size": 8,
         "concepts_per_study": 2, "num_classes": 3, "seed": 5}


@pytest.fixture
def corpora(tmp_path):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps(SYNTH))
    train, val = tmp_path / "train.lmtr", tmp_path / "val.lmtr"
    assert cli.main(["gen", "--config", str(cfg), "--out", str(train)]) == 0
    assert cli.main(["gen", "--config", str(cfg), "--out", str(val), "--seed", "6"]) == 0
    return train, val


def _train(corpora, out, *extra):
    train, val = corpora
    return cli.main(["train", "--train", str(train), "--val", str(val), "--out", str(out),
                     "--lr", "1e-3", "--batch-size", "8", "--max-epochs", "4", "--seed", "2", *extra])


def test_gen_writes_verifiable_corpus(corpora, capsys):
    train, _ = corpora
    manifest = json.loads(open(manifest_path(str(train))).read())
    assert manifest["counts"]["studies"] == SYNTH["num_studies"]
    assert read_corpus(train, verify=True).dim == 16


def test_gen_same_seed_same_checksum(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SYNTH))
    sums = []
    for name in ("a.lmtr", "b.lmtr"):
        assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        sums.append(json.loads(open(manifest_path(str(tmp_path / name))).read())["checksum"])
    assert sums[0] == sums[1]


def test_gen_seed_flag_keeps_concept_geometry(corpora):
    train, val = (read_corpus(p) for p in corpora)
    assert not np.array_equal(train.studies[0].frontal, val.studies[0].frontal)


def test_gen_malformed_json_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_gen_bad_field_named(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({**SYNTH, "noise_sigma": -1}))
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "noise_sigma" in capsys.readouterr().err


def test_train_outputs_and_exit_0(corpora, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(corpora, out) == 0
    assert {"best.ckpt", "history.csv", "metrics.json"} <= {p.name for p in out.iterdir()}
    metrics = json.loads((out / "metrics.json").read_text())
    train_cfg = metrics["config"]["train"]
    assert train_cfg["lr"] == 1e-3 and train_cfg["batch_size"] == 8 and train_cfg["seed"] == 2
    assert "R_sum" in metrics and "i2t_R@1" in metrics["recall"]


def test_train_patience_zero_runs_one_epoch(corpora, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(corpora, out, "--patience", "0") == 0
    lines = (out / "history.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("1,")


def test_train_bad_config_field_exit_2(corpora, tmp_path, capsys):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"weight_decay": -1}))
    assert _train(corpora, tmp_path / "run", "--config", str(cfg)) == 2
    assert "weight_decay" in capsys.readouterr().err


def test_train_divergence_exit_3(corpora, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise DivergenceError("non-finite loss", None)

    monkeypatch.setattr(cli, "fit", boom)
    assert _train(corpora, tmp_path / "run") == 3


def test_train_reproducible_across_threads(corpora, tmp_path, capsys):
    runs = []
    for i, threads in enumerate(("1", "1", "3")):
        out = tmp_path / f"run{i}"
        assert _train(corpora, out, "--threads", threads) == 0
        runs.append(((out / "history.csv").read_bytes(), (out / "metrics.json").read_bytes()))
    assert runs[0] == runs[1] == runs[2]


def _hadamard(n):
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def _identity_toy(tmp_path):
    d, grid = 8, GridShape(2, 2)
    H = _hadamard(d)
    studies = [Study(id=f"t{i}", frontal=np.tile(H[i], (grid.size, 1)), tokens=np.tile(H[i], (3, 1)),
                     token_mask=np.ones(3, dtype=bool), grid=grid) for i in range(d)]
    path = tmp_path / "toy.lmtr"
    write_corpus(Corpus(studies, d, grid, split="test", id="toy"), path)
    params = init_params(d, seed=0)
    eye = np.eye(d)
    params.pool = PoolParams(AttentionParams(eye, eye, eye), AttentionParams(eye, eye, eye))
    ckpt = tmp_path / "toy.ckpt"
    Checkpoint(params, 1, 0.0, {}, {"use_pe": False, "rank_score": "global", "grid": [2, 2]}).save(ckpt)
    return path, ckpt


def test_eval_identity_toy_recall_100(tmp_path, capsys):
    corpus, ckpt = _identity_toy(tmp_path)
    out = tmp_path / "m.json"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--corpus", str(corpus), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["recall"]["i2t_R@1"] == 100.0 and report["recall"]["t2i_R@1"] == 100.0
    assert report["config"]["rank_score"] == "global" and report["config"]["lambda"] == 10.0


def test_eval_to_stdout_with_overrides(tmp_path, capsys):
    corpus, ckpt = _identity_toy(tmp_path)
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--corpus", str(corpus),
                     "--rank-score", "sum", "--lambda", "5", "--tau", "0.2"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["config"]["rank_score"] == "sum"
    assert report["config"]["lambda"] == 5.0 and report["config"]["tau"] == 0.2


def test_eval_dimension_mismatch_exit_4(corpora, tmp_path, capsys):
    _, ckpt = _identity_toy(tmp_path)
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--corpus", str(corpora[1])]) == 4
    assert "dim" in capsys.readouterr().err


def test_ground_writes_maps(tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({**SYNTH, "noise_sigma": 0.0, "num_studies": 6}))
    corpus = tmp_path / "c.lmtr"
    assert cli.main(["gen", "--config", str(cfg), "--out", str(corpus)]) == 0
    ckpt = tmp_path / "c.ckpt"
    Checkpoint(init_params(16, seed=1), 1, 0.0, {}, {"grid": [3, 3]}).save(ckpt)
    out = tmp_path / "maps"
    assert cli.main(["ground", "--checkpoint", str(ckpt), "--corpus", str(corpus), "--out", str(out)]) == 0
    report = json.loads((out / "grounding.json").read_text())
    assert all(min(v) > 1.0 for v in report["per_study"].values())
    pgm = sorted(out.glob("*.pgm"))
    assert len(pgm) == report["n_boxes"] and pgm[0].read_bytes().startswith(b"P5\n3 3\n255\n")
    assert len(sorted(out.glob("*.csv"))) == report["n_boxes"]


def test_gradcheck_default_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    captured = capsys.readouterr()
    report = json.loads(captured.out)
    assert report["pass"] and report["max_rel_error"] < 1e-6
    assert len(report["blocks"]) == 16
    assert len(re.findall(r" ok$", captured.err, flags=re.M)) == 16


def test_missing_out_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SYNTH))
    assert cli.main(["gen", "--config", str(cfg)]) == 2
