"""Wall-clock scaling probe for the two attention paths.

Times one bidirectional softmax forward per length: the blocked dense
scorer against codebook stats + factored evaluation. Least-squares slope
of log(time) on log(L) separates quadratic from linear growth without
depending on absolute machine speed.
"""

from __future__ import annotations

import time

import numpy as np

from .attention import AttentionConfig, attn_dense_blocked
from .factored import build_code_stats, _fwd_bidir_soft
from .rng import Rng

__all__ = ["bench_instance", "time_forward", "fit_slope", "bench_scaling"]


def bench_instance(L, S, w, d, rng):
    cfg = AttentionConfig(attn_fn="softmax", window=w, causal=False,
                          z_dim=d, v_dim=d)
    q = rng.normal((L, d))
    C = rng.normal((S, d))
    z = rng.integers(0, S, (L,))
    v = rng.normal((L, d))
    bias = rng.normal((2 * w + 1,), std=0.1)
    return {"cfg": cfg, "q": q, "C": C, "z": z, "kh": C[z], "v": v,
            "bias": bias, "S": S}


def time_forward(mode, inst):
    """Seconds for one forward pass; stats build counts toward vq."""
    cfg = inst["cfg"]
    t0 = time.perf_counter()
    if mode == "dense":
        attn_dense_blocked(inst["q"], inst["kh"], inst["v"], inst["bias"],
                           cfg, block=512)
    elif mode == "vq":
        stats = build_code_stats(inst["z"], inst["v"], inst["S"],
                                 causal=False)
        _fwd_bidir_soft(inst["q"], inst["v"], inst["bias"], inst["C"],
                        inst["z"], stats.n, stats.U, cfg.scale, cfg.window)
    else:
        raise ValueError(f"unknown bench mode '{mode}'")
    return time.perf_counter() - t0


def fit_slope(Ls, times):
    return float(np.polyfit(np.log(np.asarray(Ls, dtype=float)),
                            np.log(np.asarray(times, dtype=float)), 1)[0])


def bench_scaling(Ls, reps=3, S=512, w=64, d=64, modes=("dense", "vq"),
                  seed=0):
    """Median-of-reps forward times per length, plus log-log slopes."""
    report = {"schema": "longvq-bench-v1",
              "params": {"S": S, "w": w, "d": d, "reps": reps,
                         "Ls": list(Ls), "seed": seed},
              "modes": {}}
    for mode in modes:
        times = []
        for L in Ls:
            inst = bench_instance(L, S, w, d, Rng(seed, f"bench-{L}"))
            time_forward(mode, inst)          # warmup, not recorded
            samples = [time_forward(mode, inst) for _ in range(reps)]
            times.append(float(np.median(samples)))
        report["modes"][mode] = {
            "times_s": {str(L): t for L, t in zip(Ls, times)},
            "slope": fit_slope(Ls, times)}
    if "dense" in report["modes"] and "vq" in report["modes"]:
        ratios = {}
        for L in Ls:
            td = report["modes"]["dense"]["times_s"][str(L)]
            tv = report["modes"]["vq"]["times_s"][str(L)]
            ratios[str(L)] = td / tv
        report["dense_over_vq"] = ratios
    return report
