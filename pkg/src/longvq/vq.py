"""Fixed-size codebook quantization with EMA statistics.

Keys are snapped to their nearest codeword; the straight-through rule
passes gradients to the keys unchanged and the codebook itself never
receives tape gradients. Codewords track assigned keys through
exponentially-averaged count/sum accumulators with Laplace-smoothed
normalization, updated once per optimizer step outside the graph.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, get_dtype, make_op, tmean

__all__ = [
    "Codebook", "assign", "assign_batch", "quantize_st", "ema_update",
    "commit_loss", "codebook_perplexity", "seed_codebook", "save_codebook",
    "load_codebook", "EMA_ETA", "EMA_EPSILON",
]

EMA_ETA = 0.99
EMA_EPSILON = 1e-5
_MAGIC = b"LVQC"
_VERSION = 1


@dataclass
class Codebook:
    C: np.ndarray          # (S, D) codewords
    ema_count: np.ndarray  # (S,) N_s accumulators, >= 0
    ema_sum: np.ndarray    # (S, D) m_s accumulators
    eta: float = EMA_ETA
    epsilon: float = EMA_EPSILON

    @property
    def S(self):
        return self.C.shape[0]

    @property
    def D(self):
        return self.C.shape[1]


def assign_batch(x, cb):
    """Nearest codeword per row of x (..., D); ties go to the lowest index."""
    x = np.asarray(x)
    if cb.S == 0:
        raise ValueError("empty codebook")
    flat = x.reshape(-1, x.shape[-1])
    # expanded squared distance; argmin keeps the first minimum
    d2 = (flat * flat).sum(-1, keepdims=True) \
        - 2.0 * flat @ cb.C.T + (cb.C * cb.C).sum(-1)
    return d2.argmin(-1).reshape(x.shape[:-1])


def assign(x, cb):
    """Shortcode of a single D-vector."""
    return int(assign_batch(np.asarray(x)[None], cb)[0])


def quantize_st(K, cb):
    """Straight-through quantization.

    Forward rows are exact codebook rows C[z]; backward passes the output
    gradient to K unchanged. Returns (K_hat, z).
    """
    z = assign_batch(K.data, cb)
    k_hat = cb.C[z].astype(K.data.dtype)
    out = make_op(k_hat, (K,), lambda g: (g,), "quantize_st")
    return out, z


def commit_loss(K, cb, z):
    """Mean squared error pulling keys toward their (frozen) codewords."""
    target = Tensor(cb.C[z].astype(K.data.dtype))
    diff = K - target
    return tmean(diff * diff)


def ema_update(cb, K_batch, z):
    """One EMA step over a batch of keys and their shortcodes.

    N_s <- eta*N_s + (1-eta)*count_s
    m_s <- eta*m_s + (1-eta)*sum_{z_i=s} K_i
    C_s <- m_s / N~_s with Laplace-smoothed N~_s; codes never hit keep
    their initialization (up to smoothing drift).
    """
    k = K_batch.data if isinstance(K_batch, Tensor) else np.asarray(K_batch)
    k = k.reshape(-1, cb.D)
    zf = np.asarray(z).reshape(-1)
    counts = np.bincount(zf, minlength=cb.S).astype(cb.ema_count.dtype)
    sums = np.zeros_like(cb.ema_sum)
    np.add.at(sums, zf, k)
    cb.ema_count = cb.eta * cb.ema_count + (1.0 - cb.eta) * counts
    cb.ema_sum = cb.eta * cb.ema_sum + (1.0 - cb.eta) * sums
    total = cb.ema_count.sum()
    smoothed = (cb.ema_count + cb.epsilon) / (total + cb.S * cb.epsilon) * total
    cb.C = cb.ema_sum / smoothed[:, None]


def codebook_perplexity(z, S):
    """exp(entropy) of the empirical shortcode distribution, in [1, S]."""
    zf = np.asarray(z).reshape(-1)
    p = np.bincount(zf, minlength=S) / max(zf.size, 1)
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def seed_codebook(K, S, rng, eta=EMA_ETA, epsilon=EMA_EPSILON,
                  max_candidates=4096):
    """Data-dependent init: distance-weighted seeding, no refinement passes.

    First codeword uniform from the rows of K; each next drawn with
    probability proportional to squared distance from the chosen set.
    """
    k = K.data if isinstance(K, Tensor) else np.asarray(K)
    k = np.asarray(k, dtype=np.float64).reshape(-1, k.shape[-1])
    m = k.shape[0]
    cap = max(max_candidates, 2 * S)
    if m > cap:
        k = k[rng.choice(m, cap, replace=False)]
        m = cap
    D = k.shape[1]
    C = np.empty((S, D))
    C[0] = k[int(rng.integers(0, m))]
    closest = ((k - C[0]) ** 2).sum(-1)
    for s in range(1, S):
        tot = closest.sum()
        if tot <= 1e-12:
            idx = int(rng.integers(0, m))
        else:
            idx = int(rng.choice(m, (), p=closest / tot))
        C[s] = k[idx]
        closest = np.minimum(closest, ((k - C[s]) ** 2).sum(-1))
    dtype = get_dtype()
    C = C.astype(dtype)
    return Codebook(C=C, ema_count=np.ones(S, dtype=dtype),
                    ema_sum=C.copy(), eta=eta, epsilon=epsilon)


def save_codebook(cb, path):
    """16-byte header {magic, version, S, D} then C, ema_count, ema_sum
    as little-endian float32."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, cb.S, cb.D))
        f.write(np.ascontiguousarray(cb.C, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cb.ema_count, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cb.ema_sum, dtype="<f4").tobytes())


def load_codebook(path, eta=EMA_ETA, epsilon=EMA_EPSILON):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad codebook magic {magic!r}")
        version, S, D = struct.unpack("<III", f.read(12))
        if version != _VERSION:
            raise ValueError(f"unsupported codebook version {version}")
        dtype = get_dtype()
        C = np.frombuffer(f.read(4 * S * D), dtype="<f4").reshape(S, D)
        count = np.frombuffer(f.read(4 * S), dtype="<f4")
        esum = np.frombuffer(f.read(4 * S * D), dtype="<f4").reshape(S, D)
    return Codebook(C=C.astype(dtype), ema_count=count.astype(dtype),
                    ema_sum=esum.astype(dtype), eta=eta, epsilon=epsilon)
