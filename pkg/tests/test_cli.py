import json
import os

import numpy as np
import pytest

from msranker import cli
from msranker import data as D
from msranker import numerics as nx

TINY = ["--set", "d_e=8", "--set", "d_g=4", "--set", "mlp_hidden=4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth", "--out", data, "--questions", 20, "--dev-questions", 5, "--test-questions", 5,
               "--candidates", 5, "--correct", 2) == 0
    pre = root / "pre.npz"
    assert run("train-preranker", "--data", data, "--epochs", 1, "--out-checkpoint", pre, *TINY) == 0
    return root, data, pre


def _files(folder):
    return {p: open(os.path.join(folder, p), "rb").read() for p in sorted(os.listdir(folder))}


def test_synth_same_flags_identical_files(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--seed", 3, "--questions", 10) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["command"] == "synth"


def test_synth_defaults_are_500_100_100(tmp_path, capsys):
    assert run("synth", "--out", tmp_path) == 0
    assert json.loads(capsys.readouterr().out)["questions"] == {"train": 500, "dev": 100, "test": 100}
    assert len(D.read_canonical(str(tmp_path / "train.jsonl"))) == 500


def test_synth_more_correct_than_candidates_fails_without_output(tmp_path):
    out = tmp_path / "never"
    assert run("synth", "--out", out, "--correct", 9, "--candidates", 3) == 1
    assert not out.exists()


def test_prep_canonical_is_idempotent(workspace, tmp_path):
    _, data, _ = workspace
    assert run("prep", "--canonical-in", data, "--out", tmp_path / "p1") == 0
    assert run("prep", "--canonical-in", tmp_path / "p1", "--out", tmp_path / "p2") == 0
    first, second = _files(tmp_path / "p1"), _files(tmp_path / "p2")
    first.pop("manifest.json"), second.pop("manifest.json")
    assert first == second
    assert first["train.jsonl"] == (data / "train.jsonl").read_bytes()


def _wikiqa_dir(folder, drop_label=False):
    cols = D.WIKIQA_COLUMNS[:-1] if drop_label else D.WIKIQA_COLUMNS
    folder.mkdir()
    for split in cli.SPLITS:
        rows = [["Q1", "Who?", "D1", "T", "D1-0", "An answer .", "1"],
                ["Q2", "What?", "D2", "T", "D2-0", "Nothing .", "0"]]
        lines = ["\t".join(cols)] + ["\t".join(r[:len(cols)]) for r in rows]
        (folder / cli.WIKIQA_FILES[split]).write_text("\n".join(lines) + "\n")
    return folder


def test_prep_wikiqa_filters_unanswerable(tmp_path, capsys):
    src = _wikiqa_dir(tmp_path / "w")
    assert run("prep", "--wikiqa-dir", src, "--out", tmp_path / "o") == 0
    assert json.loads(capsys.readouterr().out)["questions"] == {"train": 1, "dev": 1, "test": 1}


def test_prep_missing_label_column_is_a_validation_error(tmp_path, capsys):
    src = _wikiqa_dir(tmp_path / "w", drop_label=True)
    assert run("prep", "--wikiqa-dir", src, "--out", tmp_path / "o") == 1
    assert "Label" in capsys.readouterr().err


def test_prep_conflicting_inputs_touch_nothing(workspace, tmp_path):
    _, data, _ = workspace
    out = tmp_path / "out"
    assert run("prep", "--canonical-in", data, "--wikiqa-dir", data, "--out", out) == 1
    assert not out.exists()


def test_eval_oracle_scores_one(workspace, tmp_path, capsys):
    _, data, pre = workspace
    assert run("eval", "--data", data, "--checkpoint", pre, "--scorer", "oracle", "--out", tmp_path / "r.json") == 0
    assert json.loads(capsys.readouterr().out) == {"MAP": 1.0, "MRR": 1.0}
    report = json.loads((tmp_path / "r.json").read_text())
    assert len(report["questions"]) == 5


def test_data_directory_from_environment(workspace, tmp_path, monkeypatch, capsys):
    _, data, pre = workspace
    monkeypatch.setenv(cli.DATA_ENV, str(data))
    assert run("eval", "--checkpoint", pre, "--out", tmp_path / "r.json") == 0
    monkeypatch.delenv(cli.DATA_ENV)
    assert run("eval", "--checkpoint", pre, "--out", tmp_path / "r2.json") == 1
    assert cli.DATA_ENV in capsys.readouterr().err


def test_train_rl_without_evidence_then_eval(workspace, tmp_path, capsys):
    _, data, pre = workspace
    ckpt = tmp_path / "noev.npz"
    assert run("train-rl", "--data", data, "--init-checkpoint", pre, "--epochs", 1, "--no-evidence",
               "--out-checkpoint", ckpt) == 0
    kind, params, pre_params, cfg, _ = cli.load_model(str(ckpt))
    assert kind == "agent" and cfg.no_evidence and pre_params is not None
    assert not [k for k in params if k.startswith(("ec.", "gate."))]
    capsys.readouterr()
    assert run("eval", "--data", data, "--checkpoint", ckpt, "--out", tmp_path / "r.json") == 0
    assert 0.0 < json.loads(capsys.readouterr().out)["MAP"] <= 1.0


def test_deterministic_training_reproduces_parameters(workspace, tmp_path):
    _, data, pre = workspace
    sums = []
    for name in ("a.npz", "b.npz"):
        assert run("train-rl", "--data", data, "--init-checkpoint", pre, "--epochs", 1, "--deterministic",
                   "--out-checkpoint", tmp_path / name) == 0
        sums.append(nx.load_checkpoint(str(tmp_path / name))[0])
    assert sums[0].keys() == sums[1].keys()
    for k in sums[0]:
        assert sums[0][k].tobytes() == sums[1][k].tobytes()


def test_train_rl_rejects_mismatched_model_size(workspace, tmp_path):
    _, data, pre = workspace
    out = tmp_path / "x.npz"
    assert run("train-rl", "--data", data, "--init-checkpoint", pre, "--set", "d_g=7", "--out-checkpoint", out) == 1
    assert not out.exists()


def test_config_precedence_flags_over_file_over_preset(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"lr": 0.02, "d_g": 9, "dropout": 0.2}))
    args = cli.build_parser().parse_args(["train-preranker", "--out-checkpoint", "x", "--preset", "synthetic",
                                          "--config", str(cfg_file), "--lr", "0.5", "--set", "d_g=11"])
    cfg = cli.resolve_config(args)
    assert cfg.lr == 0.5 and cfg.d_g == 11 and cfg.dropout == 0.2
    assert cfg.d_e == cli.SYNTHETIC_PRESET["d_e"]
    args = cli.build_parser().parse_args(["train-preranker", "--out-checkpoint", "x"])
    assert cli.resolve_config(args) == cli.TrainConfig()


@pytest.mark.parametrize("argv", [
    ["train-preranker", "--out-checkpoint", "x", "--set", "nonsense=1"],
    ["train-preranker", "--out-checkpoint", "x", "--dropout", "1.5"],
    ["train-preranker", "--out-checkpoint", "x", "--set", "novalue"],
    ["eval", "--checkpoint", "missing.npz", "--data", "."],
    ["frobnicate"],
])
def test_validation_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "vocab.txt").write_text("a\n")
    assert cli.main(argv) == 1


def test_rank_prints_every_candidate_in_score_order(workspace, tmp_path, capsys):
    _, data, pre = workspace
    q = tmp_path / "q.jsonl"
    rec = json.loads((data / "test.jsonl").read_text().splitlines()[0])
    for c in rec["candidates"]:
        del c["label"]  # labels are optional for ranking
    q.write_text(json.dumps(rec) + "\n")
    capsys.readouterr()
    assert run("rank", "--question-file", q, "--checkpoint", pre) == 0
    out = json.loads(capsys.readouterr().out)
    scores = [r["p_pos"] for r in out["ranking"]]
    assert len(scores) == len(rec["candidates"]) and scores == sorted(scores, reverse=True)
    assert {r["cid"] for r in out["ranking"]} == {c["cid"] for c in rec["candidates"]}


def test_gradcheck_default_passes(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path / "g.json") == 0
    report = json.loads((tmp_path / "g.json").read_text())
    assert report["ok"] and report["worst"] < 1e-4
    assert "OK" in capsys.readouterr().out


def test_gradcheck_failure_exits_nonzero():
    assert run("gradcheck", "--tol", 1e-14) == 2


def test_manifest_records_input_digests(workspace):
    _, data, pre = workspace
    manifest = json.loads(open(str(pre) + ".manifest.json").read())
    assert manifest["inputs"][str(data / "train.jsonl")] == cli.file_digest(str(data / "train.jsonl"))
    assert manifest["outputs"] == [str(pre)]
    assert np.isfinite(manifest["wall_clock_s"])


def test_train_rl_lr_flag_sets_rl_learning_rate(workspace, tmp_path):
    _, data, pre = workspace
    ckpt = tmp_path / "a.npz"
    assert run("train-rl", "--data", data, "--init-checkpoint", pre, "--epochs", 1, "--lr", 0.02,
               "--out-checkpoint", ckpt) == 0
    _, _, _, cfg, _ = cli.load_model(str(ckpt))
    assert cfg.rl_lr == 0.02 and cfg.lr == cli.TrainConfig().lr
