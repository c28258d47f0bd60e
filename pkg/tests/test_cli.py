import json
from pathlib import Path

import pytest

from segalign.cli import main


def run(args):
    return main([str(a) for a in args])


def read_json(path):
    return json.loads(Path(path).read_text())


def test_no_command_usage_exit_2(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as ei:
        main(["frobnicate"])
    assert ei.value.code == 2


def test_missing_input_exits_1(tmp_path, capsys):
    code = run(["train-pref", "--data", tmp_path / "nope", "--run-dir", tmp_path / "r"])
    assert code == 1
    assert "error" in capsys.readouterr().err.lower()


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run([
            "gen-data", "--n", 30, "--seed", 7, "--run-dir", tmp_path / name,
        ]) == 0
    a = (tmp_path / "a" / "manifest_train.jsonl").read_text()
    b = (tmp_path / "b" / "manifest_train.jsonl").read_text()
    assert a == b
    pa = (tmp_path / "a" / "pairs_train.jsonl").read_text()
    pb = (tmp_path / "b" / "pairs_train.jsonl").read_text()
    assert pa == pb
    metrics = read_json(tmp_path / "a" / "metrics.json")
    assert metrics["train"]["records"] == 24
    assert (tmp_path / "a" / "vocab.txt").exists()
    assert any((tmp_path / "a" / "images").iterdir())


def test_resolved_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 12, "seed": 3}))
    # Flag --seed must beat the config file; config n must beat the default.
    assert run([
        "gen-data", "--config", cfg, "--seed", 9, "--run-dir", tmp_path / "r",
    ]) == 0
    resolved = read_json(tmp_path / "r" / "resolved_config.json")
    assert resolved["n"] == 12
    assert resolved["seed"] == 9
    assert resolved["run_dir"] == str(tmp_path / "r")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + tiny train-pref + fit-direction shared by the eval tests."""
    root = tmp_path_factory.mktemp("pipe")
    data = root / "data"
    assert run(["gen-data", "--n", "120", "--seed", 1, "--min-objects", 2,
                "--run-dir", data]) == 0
    pref = root / "pref"
    assert run(["train-pref", "--data", data, "--seed", 1, "--steps", 80,
                "--batch-size", 32, "--run-dir", pref]) == 0
    direction = root / "dir"
    assert run(["fit-direction", "--data", data, "--model", pref / "pref.ckpt",
                "--run-dir", direction]) == 0
    return {"data": data, "pref": pref, "direction": direction}


def test_train_pref_artifacts(pipeline):
    pref = pipeline["pref"]
    metrics = read_json(pref / "metrics.json")
    assert metrics["holdout_nll_final"] < metrics["holdout_nll_init"]
    assert (pref / "pref.ckpt").exists()
    lines = (pref / "losses.jsonl").read_text().splitlines()
    assert len(lines) == 80


def test_fit_direction_artifacts(pipeline):
    d = pipeline["direction"]
    obj = read_json(d / "direction.json")
    assert len(obj["V"]) == 16
    metrics = read_json(d / "metrics.json")
    assert "eta" in metrics and metrics["corpus_size"] > 0


def test_eval_retrieval_all_modes(pipeline, tmp_path):
    out = tmp_path / "ret"
    assert run(["eval-retrieval", "--data", pipeline["data"],
                "--pref", pipeline["pref"] / "pref.ckpt",
                "--direction", pipeline["direction"] / "direction.json",
                "--max-pairs", 8, "--run-dir", out]) == 0
    metrics = read_json(out / "metrics.json")
    assert set(metrics) == {
        "single/full", "single/relevant", "segment_avg/full", "segment_avg/relevant",
    }
    for rep in metrics.values():
        assert 0.0 <= rep["r_at_1"] <= 1.0
        assert rep["N"] == 8


def test_eval_scores_exports_tables(pipeline, tmp_path):
    out = tmp_path / "scores"
    assert run(["eval-scores", "--data", pipeline["data"],
                "--pref", pipeline["pref"] / "pref.ckpt",
                "--direction", pipeline["direction"] / "direction.json",
                "--max-pairs", 6, "--run-dir", out]) == 0
    for name in ("full", "relevant", "irrelevant"):
        assert (out / f"scores_{name}.tsv").exists()
    summary = read_json(out / "metrics.json")
    assert summary["full"]["off_diagonal_mean"] is not None


def test_align_report(pipeline, tmp_path):
    out = tmp_path / "align"
    assert run(["align-report", "--data", pipeline["data"],
                "--pref", pipeline["pref"] / "pref.ckpt",
                "--n-images", 3, "--run-dir", out]) == 0
    metrics = read_json(out / "metrics.json")
    assert all(0 <= b < 3 for b in metrics["best"])


def test_sft_sample_and_rft_plumbing(pipeline, tmp_path):
    sft = tmp_path / "sft"
    assert run(["train-sft", "--data", pipeline["data"], "--seed", 1,
                "--steps", 10, "--batch-size", 4, "--T", 10,
                "--run-dir", sft]) == 0
    assert (sft / "denoiser.ckpt").exists()
    assert (sft / "text_encoder.ckpt").exists()

    sample = tmp_path / "sample"
    assert run(["sample", "--model", sft, "--prompt",
                "A red circle in the center.", "--steps", 4,
                "--run-dir", sample]) == 0
    out = read_json(sample / "metrics.json")
    assert Path(out["output"]).exists()

    rft = tmp_path / "rft"
    assert run(["train-rft", "--data", pipeline["data"], "--sft", sft,
                "--pref", pipeline["pref"] / "pref.ckpt",
                "--direction", pipeline["direction"] / "direction.json",
                "--total-updates", 2, "--sample-steps", 4,
                "--steps-subset-size", 2, "--max-prompts", 8,
                "--run-dir", rft]) == 0
    rows = [json.loads(l) for l in (rft / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1]
    assert (rft / "denoiser.ckpt").exists()
