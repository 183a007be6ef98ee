import json
import os
import sys

import numpy as np
import pytest

from longvq.bench import bench_scaling, fit_slope, time_forward
from longvq.cli import _layer_entropy, _pin_threads, main
from longvq.config import (ConfigError, DEFAULTS, apply_sets, build_run,
                           config_to_text, load_run_config)
from longvq.rng import Rng
from longvq.tensor import Tensor, precision


@pytest.fixture(autouse=True)
def _float64():
    # main() switches the global precision; keep it scoped per test
    with precision("float64"):
        yield


TINY = ["--set", "task.L=16", "--set", "task.vocab=8",
        "--set", "model.depth=1", "--set", "model.d_model=8",
        "--set", "model.S=4", "--set", "model.n_state=4",
        "--set", "attn.z_dim=4", "--set", "attn.v_dim=8",
        "--set", "attn.window=2", "--set", "train.total_steps=6",
        "--set", "train.warmup_steps=2", "--set", "train.batch_size=8",
        "--set", "train.eval_every=3", "--set", "train.eval_batches=2"]


# ---------------------------------------------------------------------------
# config file handling

def test_defaults_round_trip(tmp_path):
    cfg = load_run_config(None)
    assert cfg == DEFAULTS and cfg is not DEFAULTS
    p = tmp_path / "c.ini"
    p.write_text(config_to_text(cfg))
    again = load_run_config(str(p))
    assert again == cfg


def test_ini_parse_and_coercion(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlr = 0.01\ntotal_steps = 42\n"
                 "[model]\npre_norm = true\n")
    cfg = load_run_config(str(p))
    assert cfg["train"]["lr"] == 0.01
    assert cfg["train"]["total_steps"] == 42
    assert cfg["model"]["pre_norm"] is True


def test_unknown_key_and_section_rejected(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlrr = 0.01\n")
    with pytest.raises(ConfigError, match="train.lrr"):
        load_run_config(str(p))
    p.write_text("[optimizer]\nlr = 0.01\n")
    with pytest.raises(ConfigError, match="optimizer"):
        load_run_config(str(p))


def test_bad_value_types(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\ntotal_steps = soon\n")
    with pytest.raises(ConfigError, match="train.total_steps"):
        load_run_config(str(p))
    p.write_text("[model]\npre_norm = perhaps\n")
    with pytest.raises(ConfigError, match="boolean"):
        load_run_config(str(p))


def test_set_overrides():
    cfg = load_run_config(None)
    apply_sets(cfg, ["train.lr=0.5", "model.depth=3", "attn.causal=false"])
    assert cfg["train"]["lr"] == 0.5
    assert cfg["model"]["depth"] == 3
    assert cfg["attn"]["causal"] is False
    with pytest.raises(ConfigError, match="model.dept"):
        apply_sets(cfg, ["model.dept=3"])
    with pytest.raises(ConfigError, match="section.key"):
        apply_sets(cfg, ["depth=3"])


def test_build_run_task_drives_interface():
    cfg = load_run_config(None)
    apply_sets(cfg, ["task.vocab=12"])
    task, mc, tc, impl = build_run(cfg, seed=99)
    assert mc.vocab == 12 and mc.n_out == 12
    assert mc.head == "mean_pool_classify"
    assert tc.seed == 99 and task.spec.seed == 99
    assert impl == "factored"


def test_build_run_bad_impl():
    cfg = load_run_config(None)
    cfg["model"]["impl"] = "sparse"
    with pytest.raises(ConfigError, match="model.impl"):
        build_run(cfg)


# ---------------------------------------------------------------------------
# commands, in process

def test_train_writes_artifacts(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["train", *TINY, "--seed", "5", "--out", "run"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("train: steps=6")
    recs = [json.loads(l) for l in open("run/metrics.jsonl")]
    steps = [r["step"] for r in recs if r.get("split") == "train"]
    assert steps == sorted(steps) and len(steps) == 6
    rep = json.load(open("run/report.json"))
    assert rep["schema"] == "longvq-report-v1"
    assert rep["command"] == "train"
    assert os.path.exists("run/checkpoint.f32")
    assert os.path.exists("run/checkpoint.f32.json")


def test_train_determinism_modulo_wallclock(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["train", *TINY, "--seed", "3", "--out", "a"]) == 0
    assert main(["train", *TINY, "--seed", "3", "--out", "b"]) == 0

    def strip(path):
        out = []
        for line in open(path):
            r = json.loads(line)
            r.pop("wallclock_ms", None)
            out.append(json.dumps(r, sort_keys=True))
        return out

    assert strip("a/metrics.jsonl") == strip("b/metrics.jsonl")


def test_invalid_norm_kind_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["train", "--set", "model.norm_kind=sandwich", "--out", "x"])
    assert rc == 2
    assert "norm_kind" in capsys.readouterr().err


def test_unknown_key_exits_2_naming_field(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["train", "--set", "model.norn_kind=layer", "--out", "x"])
    assert rc == 2
    assert "model.norn_kind" in capsys.readouterr().err


def test_eval_roundtrip_from_checkpoint(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["train", *TINY, "--seed", "2", "--out", "tr"]) == 0
    capsys.readouterr()
    rc = main(["eval", *TINY[:18], "--seed", "2",
               "--checkpoint", "tr/checkpoint.f32", "--out", "ev"])
    assert rc == 0
    rep = json.load(open("ev/report.json"))
    assert rep["command"] == "eval" and rep["examples"] > 0
    assert np.isfinite(rep["ce"]) and 0.0 <= rep["acc"] <= 1.0


def test_eval_missing_checkpoint_exits_1(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["eval", *TINY[:18], "--checkpoint", "nope.f32",
               "--out", "ev"])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_gradcheck_fault_injection_detected(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["gradcheck", "--inject-fault", "matmul", "--out", "gc"])
    assert rc == 1
    assert "FAIL" in capsys.readouterr().out
    rep = json.load(open("gc/report.json"))
    assert rep["passed"] is False and rep["fault"] == "matmul"
    assert rep["worst"][1] > rep["tol"]
    # every parameter appears in the table
    assert len(rep["params"]) > 10


def test_kernel_dump_shapes(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["kernel-dump", *TINY[:18], "--set", "model.depth=2",
               "--length", "24", "--out", "kd"])
    assert rc == 0
    with np.load("kd/kernels.npz") as z:
        assert set(z.files) == {"layer0", "layer1"}
        assert z["layer0"].shape == (8, 24)
    rep = json.load(open("kd/report.json"))
    assert rep["ssm_layers"] == 2 and rep["L"] == 24


def test_bench_command_report(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["bench-scaling", "--lengths", "128,256", "--reps", "1",
               "--S", "16", "--w", "4", "--d", "8", "--out", "bn"])
    assert rc == 0
    rep = json.load(open("bn/report.json"))
    assert set(rep["modes"]) == {"dense", "vq"}
    assert "slope" in rep["modes"]["vq"]
    assert set(rep["dense_over_vq"]) == {"128", "256"}
    assert "bench-scaling:" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# bench internals

def test_fit_slope_recovers_exponent():
    Ls = [512, 1024, 2048, 4096]
    assert fit_slope(Ls, [1e-8 * L ** 2 for L in Ls]) == pytest.approx(2.0)
    assert fit_slope(Ls, [3e-7 * L for L in Ls]) == pytest.approx(1.0)


def test_time_forward_unknown_mode():
    with pytest.raises(ValueError, match="mode"):
        time_forward("quantum", {"cfg": None})


def test_bench_scaling_structure():
    rep = bench_scaling([64, 128], reps=1, S=8, w=2, d=4, seed=1)
    assert rep["schema"] == "longvq-bench-v1"
    assert rep["params"]["Ls"] == [64, 128]
    for mode in ("dense", "vq"):
        assert set(rep["modes"][mode]["times_s"]) == {"64", "128"}
        assert all(t > 0 for t in rep["modes"][mode]["times_s"].values())


# ---------------------------------------------------------------------------
# entropy diagnostic

def _probe_layer(window, causal, bias_val=None):
    from longvq.attention import AttentionConfig, LongVQLayer
    cfg = AttentionConfig(attn_fn="softmax", window=window, causal=causal,
                          z_dim=4, v_dim=8)
    layer = LongVQLayer(8, cfg, 4, Rng(0, "probe"))
    layer.gates.w_q.data[:] = 0.0
    layer.gates.b_q.data[:] = 0.0
    if bias_val is not None:
        layer.local_bias.data[:] = -bias_val
        layer.local_bias.data[window] = bias_val
    x = Rng(1, "x").normal((2, 12, 8))
    _, aux = layer(Tensor(x))
    return layer, aux


def test_diag_entropy_uniform_rows_are_one():
    # zero Q and zero bias: every visible key gets equal weight
    layer, aux = _probe_layer(window=3, causal=False)
    vals = _layer_entropy(layer, aux, causal=False)
    for v in vals:
        assert v == pytest.approx(1.0, abs=1e-12)


def test_diag_entropy_peaked_rows_near_zero():
    # +/- large self bias forces one-hot attention rows
    layer, aux = _probe_layer(window=3, causal=False, bias_val=40.0)
    vals = _layer_entropy(layer, aux, causal=False)
    for v in vals:
        assert v < 0.05


def test_diag_entropy_command(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["diag-entropy", *TINY[:18], "--batches", "2", "--out", "de"])
    assert rc == 0
    rep = json.load(open("de/report.json"))
    assert rep["batches"] == 2
    assert len(rep["layers"]) == 1
    m = rep["layers"][0]["mean_normalized_entropy"]
    # fresh init with zero bias sits at the uniform ceiling
    assert 0.9 < m <= 1.0 + 1e-9
    assert len(rep["per_batch"]) == 2


# ---------------------------------------------------------------------------
# thread pinning

def test_pin_threads_respects_env(monkeypatch):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("LONGVQ_THREADS", "2")
    _pin_threads()
    assert os.environ["OMP_NUM_THREADS"] == "2"
    assert os.environ["MKL_NUM_THREADS"] == "2"


def test_pin_threads_defaults_to_one_for_bench(monkeypatch):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.delenv("LONGVQ_THREADS", raising=False)
    monkeypatch.setattr(sys, "argv", ["longvq", "bench-scaling"])
    _pin_threads()
    assert os.environ["OMP_NUM_THREADS"] == "1"
