import json
import subprocess
import sys

import pytest
import yaml

from qtrain.checkpoint import load_checkpoint
from qtrain.cli import RunManifest, main

SMALL = {
    "seed": 3,
    "model": {"n_layers": 1, "d_model": 16, "d_ff": 32, "n_heads": 2, "n_kv_heads": 1, "vocab": 32, "seq_len": 8},
    "train": {"steps": 6, "micro_batch": 2, "precision": "fp8-e4m3", "eval_every": 3},
    "hardware": "4090",
}


def write_manifest(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_train_is_byte_identical(tmp_path):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert main(["train", write_manifest(d / "run.yaml", SMALL), "-q"]) == 0
        outs.append(((d / "metrics.csv").read_bytes(), (d / "model.ckpt").read_bytes()))
    assert outs[0] == outs[1]
    header = outs[0][0].decode().splitlines()[0]
    assert header == "step,tokens,train_loss,val_loss,grad_norm,simulated_time"
    assert len(outs[0][0].decode().splitlines()) == 1 + SMALL["train"]["steps"]


def test_train_outputs_and_overrides(tmp_path):
    m = write_manifest(tmp_path / "run.yaml", SMALL)
    out = tmp_path / "out"
    assert main(["train", m, "--steps", "2", "--seed", "9", "--precision", "bf16", "--out-dir", str(out), "-q"]) == 0
    tensors, meta = load_checkpoint(out / "model.ckpt")
    assert meta["step"] == 2 and meta["train"]["seed"] == 9 and meta["train"]["precision"] == "bf16"
    assert "param.embed" in tensors and "optim.m.embed" in tensors


def test_seed_changes_results(tmp_path):
    runs = []
    for seed in ("1", "2"):
        d = tmp_path / seed
        assert main(["train", write_manifest(tmp_path / "m.yaml", SMALL), "--seed", seed, "--steps", "2",
                     "--out-dir", str(d), "-q"]) == 0
        runs.append((d / "metrics.csv").read_text())
    assert runs[0] != runs[1]


def test_divergence_exit_code(tmp_path, capsys):
    bad = {**SMALL, "train": {**SMALL["train"], "lr": 1e38, "max_grad_norm": None, "warmup": 0,
                              "precision": "bf16"}}
    rc = main(["train", write_manifest(tmp_path / "run.yaml", bad), "-q"])
    assert rc == 2
    assert "diverged" in capsys.readouterr().err
    assert (tmp_path / "metrics.csv").exists()
    assert not (tmp_path / "model.ckpt").exists()


def test_manifest_validation(tmp_path, capsys):
    assert main(["train", write_manifest(tmp_path / "a.yaml", {**SMALL, "colour": "red"}), "-q"]) == 1
    assert "unknown manifest keys" in capsys.readouterr().err
    bad_train = {**SMALL, "train": {"stepz": 3}}
    assert main(["train", write_manifest(tmp_path / "b.yaml", bad_train), "-q"]) == 1
    bad_data = {**SMALL, "data": {"kind": "wikipedia"}}
    assert main(["train", write_manifest(tmp_path / "c.yaml", bad_data), "-q"]) == 1
    with pytest.raises(ValueError):
        RunManifest.from_dict({"train": {"precision": "fp4"}})


def test_manifest_roundtrip():
    m = RunManifest.from_dict(SMALL)
    again = RunManifest.from_dict({k: v for k, v in m.to_dict().items()})
    assert again == m
    assert m.train.seed == SMALL["seed"]


def test_shipped_config_parses():
    from pathlib import Path

    from qtrain.cli import load_manifest
    m = load_manifest(Path(__file__).resolve().parent.parent / "configs" / "toy.yaml")
    assert m.train.steps == 500 and m.model.seq_len == 64


def test_plan_json(capsys):
    assert main(["plan", "--model", "0.5B", "--hardware", "5060Ti", "--json", "-", "--top", "3"]) == 0
    out = capsys.readouterr().out
    report = json.loads(out[out.index("{"):])
    assert report["feasible"] > 0 and len(report["plans"]) == 3
    assert report["plans"][0]["offload"] == "---"


def test_plan_does_not_fit(capsys):
    assert main(["plan", "--model", "32B", "--hardware", "5060Ti", "--precision", "bf16"]) == 1
    assert "does not fit" in capsys.readouterr().out


def test_unknown_profile():
    with pytest.raises(SystemExit) as exc:
        main(["plan", "--model", "7B", "--hardware", "TI-83"])
    assert "available" in str(exc.value.code) and "4090" in str(exc.value.code)


def test_simulate_comms_volume(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert main(["simulate-comms", "--workers", "4", "--size", "65536", "--json", "-", "--trace", str(trace)]) == 0
    out = capsys.readouterr().out
    rep = json.loads(out[out.index("{"):])
    assert rep["bytes_sent_per_worker"] == rep["closed_form_per_worker"] == 3 / 4 * 65536
    assert rep["arith_ops"]["phase2"] == 0
    assert trace.read_text().count("\n") > 0


def test_simulate_comms_p2p_halves_traversals(capsys):
    counts = []
    for flag in ([], ["--p2p"]):
        main(["simulate-comms", "--collective", "all-gather", "--json", "-"] + flag)
        out = capsys.readouterr().out
        counts.append(json.loads(out[out.index("{"):])["link_traversals"])
    assert counts[0] == 2 * counts[1]


def test_simulate_comms_deadlock(capsys):
    assert main(["simulate-comms", "--deadlock", "--fail-on-deadlock"]) == 1
    assert "deadlock after" in capsys.readouterr().out
    assert main(["simulate-comms", "--deadlock", "--barrier", "--fail-on-deadlock"]) == 0
    assert "no deadlock" in capsys.readouterr().out


def test_report_flops(capsys):
    assert main(["report-flops", "--model", "7B", "--hardware", "4090", "--tps", "4300", "--json", "-"]) == 0
    out = capsys.readouterr().out
    rep = json.loads(out[out.index("{"):])
    assert rep["per_token"]["fp8_linear"] == pytest.approx(39.2e9, rel=0.05)
    assert rep["mfu"] == pytest.approx(0.61, abs=0.03)
    assert 0.8 <= rep["fp8_speedup_ceiling"] <= 0.95


def test_report_memory(capsys):
    args = ["report-memory", "--model", "1.5B", "--moments", "f32", "--params", "1.5e9", "--json", "-",
            "--hardware", "4090"]
    assert main(args) == 0
    out = capsys.readouterr().out
    rep = json.loads(out[out.index("{"):])
    assert rep["device"]["moments_m"] + rep["device"]["moments_v"] == 12e9
    assert "feasible" in rep


def test_model_from_yaml_file(tmp_path, capsys):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(SMALL["model"]))
    assert main(["report-flops", "--model", str(p), "--seq-len", "8"]) == 0
    assert "fp8_linear" in capsys.readouterr().out


def test_console_entry_point_runs():
    r = subprocess.run([sys.executable, "-m", "qtrain.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "plan", "simulate-comms", "report-flops", "report-memory"):
        assert cmd in r.stdout
