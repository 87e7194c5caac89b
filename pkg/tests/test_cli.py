"""CLI: exit codes, artifact layout, determinism, manifest round-trips."""

import json

import pytest

from patchmoe import cli
from patchmoe.errors import DivergenceError
from patchmoe.train import TrainConfig

TINY = [
    "--epochs", "2", "--batch-size", "2", "--train-samples", "4",
    "--val-samples", "2", "--image-size", "16", "--classes", "3",
    "--experts", "2", "--topk", "1", "--grid", "2", "--gate-hidden", "2",
    "--trace-every", "1", "--seed", "5",
]


def run_train(out_dir, extra=()):
    return cli.main(["train", *TINY, *extra, "--out", str(out_dir)])


def test_usage_error_exits_2(capsys):
    assert cli.main(["train", "--experts", "2", "--topk", "4", "--out", "/tmp/x"]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["nonsense"])
    assert exc.value.code == 2


def test_selftest_passes_and_fails_under_injected_fault(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6 and "FAIL" not in out
    assert cli.main(["selftest", "--inject-fault", "conv-backward"]) == 1
    assert "FAIL conv-gradient-fd" in capsys.readouterr().out


def test_train_writes_artifacts_and_manifest(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_train(out) == 0
    assert "final val_miou=" in capsys.readouterr().out
    for name in ("checkpoint.ckpt", "history.csv", "train_trace.jsonl", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["tool"] == "patchmoe" and manifest["seed"] == 5
    config = cli.config_from_manifest(manifest)
    assert isinstance(config, TrainConfig)
    assert config.moe.n_experts == 2 and config.epochs == 2


def test_train_is_byte_identical_across_reruns(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_train(a) == 0
    assert run_train(b) == 0
    for name in ("checkpoint.ckpt", "history.csv", "train_trace.jsonl", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_train_from_manifest_reproduces_the_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_train(a) == 0
    code = cli.main(
        ["train", "--from-manifest", str(a / "manifest.json"), "--out", str(b)]
    )
    assert code == 0
    assert (a / "checkpoint.ckpt").read_bytes() == (b / "checkpoint.ckpt").read_bytes()


def test_eval_exports_analytics_deterministically(tmp_path, capsys):
    run = tmp_path / "run"
    assert run_train(run) == 0
    capsys.readouterr()
    e1, e2 = tmp_path / "e1", tmp_path / "e2"
    for out in (e1, e2):
        code = cli.main(["eval", "--checkpoint", str(run / "checkpoint.ckpt"), "--out", str(out)])
        assert code == 0
        assert "val_miou=" in capsys.readouterr().out
    names = (
        "eval_trace.jsonl", "expert_counts.csv", "class_expert.csv",
        "cooccur.csv", "class_expert.ppm", "cooccur.ppm",
    )
    for name in names:
        assert (e1 / name).exists(), name
        assert (e1 / name).read_bytes() == (e2 / name).read_bytes(), name


def test_eval_missing_inputs_exit_2(tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "no.ckpt"), "--out", str(tmp_path)]) == 2
    run = tmp_path / "run"
    assert run_train(run) == 0
    assert cli.main([
        "eval", "--checkpoint", str(run / "checkpoint.ckpt"),
        "--manifest", str(tmp_path / "no.json"), "--out", str(tmp_path / "e"),
    ]) == 2
    assert "not found" in capsys.readouterr().err


def test_analyze_rebuilds_analytics_from_a_trace(tmp_path, capsys):
    run = tmp_path / "run"
    assert run_train(run) == 0
    out = tmp_path / "an"
    code = cli.main([
        "analyze", "--trace", str(run / "train_trace.jsonl"),
        "--classes", "3", "--out", str(out),
    ])
    assert code == 0
    assert "decisions=" in capsys.readouterr().out
    for name in ("expert_counts.csv", "class_expert.csv", "cooccur.csv",
                 "class_expert.ppm", "cooccur.ppm"):
        assert (out / name).exists(), name


def test_params_reports_counts_and_overheads(capsys):
    assert cli.main(["params"]) == 0
    out = capsys.readouterr().out
    assert "model parameters: total=" in out
    assert "overhead vs single-expert baseline" in out
    # reference desk config: more experts allocated than active
    total = int(out.split("total=")[1].split()[0])
    active = int(out.split("active=")[1].split()[0])
    assert active < total


def test_divergence_maps_to_exit_3(tmp_path, capsys, monkeypatch):
    def explode(config, trace_path=None):
        raise DivergenceError(17)

    monkeypatch.setattr(cli, "train", explode)
    code = cli.main(["train", *TINY, "--out", str(tmp_path / "x")])
    assert code == 3
    assert "step 17" in capsys.readouterr().err


def test_version_flag():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
