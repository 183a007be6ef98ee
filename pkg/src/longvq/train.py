"""Loss assembly, AdamW with global-norm clipping and a warmup/linear
schedule, the training loop with EMA codebook stepping, and the
finite-difference gradient check harness."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .attention import attn_entropy
from .tensor import (
    NumericsError, Tensor, cross_entropy, finite_diff, grad, reshape,
)
from .rng import Rng
from .vq import codebook_perplexity, commit_loss, ema_update

__all__ = ["TrainConfig", "total_loss", "clip_grads", "AdamW", "lr_at",
           "train_loop", "gradcheck_model", "assignment_margin"]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.98)
    grad_clip: float = 0.1
    warmup_steps: int = 100
    total_steps: int = 1000
    schedule: str = "linear"
    gamma: float = 0.0001
    batch_size: int = 128
    seed: int = 0
    eval_every: int = 200
    eval_batches: int = 8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        if self.schedule != "linear":
            raise ValueError("schedule must be 'linear'")


def lr_at(cfg, step):
    """1-based step: linear warmup to lr, then linear decay to zero."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr * max(0.0, 1.0 - frac)


# ---------------------------------------------------------------------------
# loss

def total_loss(model, x, y, gamma):
    """CE plus gamma * mean per-layer commitment loss.

    Returns (loss tensor, parts dict, auxes); parts carries floats only.
    """
    logits, auxes = model(x)
    if model.cfg.head == "per_position_lm":
        B, L, C = logits.data.shape
        flat = reshape(logits, (B * L, C))
        tgt = np.asarray(y).reshape(-1)
        ce = cross_entropy(flat, tgt)
        pred = logits.data.argmax(axis=2)
        acc = float((pred == np.asarray(y)).mean())
    else:
        ce = cross_entropy(logits, y)
        acc = float((logits.data.argmax(axis=1) == np.asarray(y)).mean())
    parts = {"ce": float(ce.data), "acc": acc}
    if gamma == 0.0:
        parts["vq"] = 0.0
        return ce, parts, auxes
    layers = model.layers()
    vq = None
    for layer, aux in zip(layers, auxes):
        c = commit_loss(aux["K"], layer.codebook, aux["z"])
        vq = c if vq is None else vq + c
    vq = vq * (1.0 / len(layers))
    parts["vq"] = float(vq.data)
    return ce + gamma * vq, parts, auxes


# ---------------------------------------------------------------------------
# optimizer

def global_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_grads(grads, clip):
    """Scale the whole gradient list so its global norm is <= clip."""
    nrm = global_norm(grads)
    if nrm > clip:
        s = clip / nrm
        grads = [g * s for g in grads]
    return grads, nrm


class AdamW:
    """Decoupled weight decay; moments match the usual bias correction."""

    EPS = 1e-8

    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads, lr):
        b1, b2 = self.cfg.betas
        wd = self.cfg.weight_decay
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.EPS)
            if wd > 0.0:
                upd = upd + wd * p.data
            p.data -= lr * upd


# ---------------------------------------------------------------------------
# the loop

def _finite(x):
    return bool(np.isfinite(x))


def emit(records, fh, rec):
    records.append(rec)
    if fh is not None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()


def _eval_pass(model, task, cfg, rng, step, records, fh, with_entropy=True):
    model.training = False
    tot_ce = tot_acc = tot_vq = 0.0
    n = 0
    ent = []
    perp = []
    for b in range(cfg.eval_batches):
        x, y = task.sample("test", cfg.batch_size, rng)
        loss, parts, auxes = total_loss(model, x, y, cfg.gamma)
        tot_ce += parts["ce"]
        tot_acc += parts["acc"]
        tot_vq += parts["vq"]
        n += 1
        if b == 0:
            perp = [codebook_perplexity(a["z"], model.cfg.S) for a in auxes]
            if with_entropy:
                ent = [attn_entropy(a["Q"][0], a["K_hat"].data[0],
                                    a["V"][0], lay.local_bias.data,
                                    lay.cfg)
                       for a, lay in zip(auxes, model.layers())]
    rec = {"step": step, "split": "eval",
           "loss": tot_ce / n + cfg.gamma * tot_vq / n,
           "ce": tot_ce / n, "vq": tot_vq / n, "acc": tot_acc / n,
           "codebook_perplexity": perp,
           "attn_entropy": [round(e, 6) for e in ent],
           "lr": 0.0, "wallclock_ms": 0.0}
    emit(records, fh, rec)
    return rec


def train_loop(model, task, cfg: TrainConfig, metrics_path=None,
               stop_fn=None):
    """Run cfg.total_steps optimizer steps; returns the metrics records.

    task.sample(split, batch_size, rng) -> (inputs, targets). Metrics go
    one JSON object per line to metrics_path when given. stop_fn, when
    given, sees each train record and may return True to stop early.
    """
    rng = Rng(cfg.seed, "train")
    erng = Rng(cfg.seed, "eval")
    params = model.params()
    opt = AdamW(params, cfg)
    records = []
    fh = open(metrics_path, "w") if metrics_path is not None else None
    bad = 0
    last_step = 0
    try:
        for step in range(1, cfg.total_steps + 1):
            last_step = step
            t0 = time.perf_counter()
            x, y = task.sample("train", cfg.batch_size, rng)
            model.training = True
            try:
                loss, parts, auxes = total_loss(model, x, y, cfg.gamma)
                bad_step = not _finite(loss.data)
            except NumericsError:
                bad_step = True
            if bad_step:
                bad += 1
                if bad > 10:
                    raise RuntimeError(
                        "aborting: >10 consecutive non-finite losses")
                emit(records, fh, {"step": step, "split": "train",
                                   "event": "nonfinite_loss_skipped"})
                continue
            bad = 0
            grads = grad(loss, params)
            if not all(np.all(np.isfinite(g)) for g in grads):
                emit(records, fh, {"step": step, "split": "train",
                                   "event": "nonfinite_grads_skipped"})
                continue
            grads, gnorm = clip_grads(grads, cfg.grad_clip)
            lr = lr_at(cfg, step)
            opt.step(grads, lr)
            for layer, aux in zip(model.layers(), auxes):
                ema_update(layer.codebook, aux["K"].data, aux["z"])
            ms = (time.perf_counter() - t0) * 1000.0
            rec = {"step": step, "split": "train",
                   "loss": float(loss.data), "ce": parts["ce"],
                   "vq": parts["vq"], "acc": parts["acc"],
                   "codebook_perplexity":
                       [codebook_perplexity(a["z"], model.cfg.S)
                        for a in auxes],
                   "attn_entropy": [], "lr": lr,
                   "wallclock_ms": round(ms, 3)}
            emit(records, fh, rec)
            if cfg.eval_every > 0 and step % cfg.eval_every == 0:
                _eval_pass(model, task, cfg, erng.child(f"e{step}"), step,
                           records, fh)
                model.training = True
            # stop_fn sees the newest record (the eval one when step
            # landed on an eval boundary)
            if stop_fn is not None and stop_fn(records[-1]):
                break
        if cfg.eval_every > 0 and (not records
                                   or records[-1]["split"] != "eval"):
            _eval_pass(model, task, cfg, erng.child("final"), last_step,
                       records, fh)
    finally:
        model.training = False
        if fh is not None:
            fh.close()
    return records


# ---------------------------------------------------------------------------
# gradient checking

def assignment_margin(K, C):
    """Smallest gap between best and runner-up codeword distance."""
    k = K.reshape(-1, C.shape[1])
    d = ((k[:, None, :] - C[None, :, :]) ** 2).sum(2)
    if C.shape[0] < 2:
        return np.inf
    part = np.sort(np.sqrt(d), axis=1)
    return float((part[:, 1] - part[:, 0]).min())


def _rel_table(analytic, numeric, names):
    """Per-parameter max relative error with a small absolute floor.

    Central differences carry ~1e-10 absolute noise at 64-bit, so below
    1e-6 magnitude the comparison would measure the oracle, not the
    gradient.
    """
    out = {}
    for a, b, name in zip(analytic, numeric, names):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
        out[name] = float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
    return out


def gradcheck_model(make_model, make_batch, tol=1e-4, tries=100,
                    margin=1e-3, gamma=0.01, eps=1e-5, seed=0):
    """Check every parameter gradient of a full model against central
    finite differences.

    Quantization is frozen first (recorded shortcodes and key offsets are
    replayed), because that frozen map is the function whose derivative
    both the tape and the differencer compute; the straight-through rule
    defines the gradient at the requantization jump rather than
    approximating anything measurable there. Inputs are resampled until
    every key's assignment margin exceeds ``margin`` so the frozen codes
    are locally stable. Returns a report dict.
    """
    for attempt in range(1, tries + 1):
        model = make_model(seed + attempt)
        x, y = make_batch(seed + attempt)
        model.training = False
        _, auxes = model(x)      # seeds codebooks, records assignments
        mg = min(assignment_margin(a["K"].data, lay.codebook.C)
                 for a, lay in zip(auxes, model.layers()))
        if mg > margin:
            break
    else:
        return {"skipped": True, "tries": tries,
                "reason": f"no draw reached assignment margin {margin}"}

    frozen = [{"z": a["z"], "offset": a["K_hat"].data - a["K"].data}
              for a in auxes]
    model.impl = "dense"   # factored insists K_hat rows equal codewords,
    params = model.params()    # which perturbed parameters break

    def loss_fn():
        logits, aux2 = model(x, frozen=frozen)
        if model.cfg.head == "per_position_lm":
            B, L, C = logits.data.shape
            ce = cross_entropy(reshape(logits, (B * L, C)),
                               np.asarray(y).reshape(-1))
        else:
            ce = cross_entropy(logits, y)
        vq = None
        for layer, aux in zip(model.layers(), aux2):
            c = commit_loss(aux["K"], layer.codebook, aux["z"])
            vq = c if vq is None else vq + c
        return ce + gamma * (vq * (1.0 / len(aux2)))

    analytic = grad(loss_fn(), params)
    numeric = finite_diff(loss_fn, params, eps=eps)
    names = [p.name for p in params]
    table = _rel_table(analytic, numeric, names)
    worst = max(table, key=table.get)
    return {"skipped": False, "tries": attempt, "margin": mg, "tol": tol,
            "passed": max(table.values()) < tol,
            "params": table, "worst": (worst, table[worst])}
