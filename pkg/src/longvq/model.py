"""Blocks, stacking, embeddings, and task heads.

One block is the gated quantized-key layer followed by a feed-forward
sublayer. Post-norm (default): Y = Norm(Layer(X)); Y' = Norm(Y + FFN(Y)).
Pre-norm: Y = Layer(Norm(X)); Y' = Y + FFN(Norm(Y)), with one extra norm
after the last block. The attention sublayer carries its own gated
residual, so no outer residual is added around it in either arrangement.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, LongVQLayer
from .tensor import (
    Tensor, batch_norm, dropout, gather_rows, get_dtype, layer_norm, matmul,
    scale_norm, silu, tmean,
)
from .vq import Codebook

__all__ = ["ModelConfig", "Norm", "Ffn", "Block", "Model", "param_count",
           "save_checkpoint", "load_checkpoint"]

NORM_KINDS = ("layer", "scale", "batch")
HEADS = ("mean_pool_classify", "per_position_lm")


@dataclass
class ModelConfig:
    depth: int
    d_model: int
    attn: AttentionConfig
    S: int
    head: str
    n_out: int
    vocab: int = 0          # token table when > 0 ...
    in_dim: int = 0         # ... or a linear map from channel values
    d_ffn: int = 0          # defaults to 2 * d_model
    norm_kind: str = "layer"
    pre_norm: bool = False
    n_state: int = 16
    dropout: float = 0.0
    ssm_enabled: bool = True    # False ablates the state branch: Z = silu(X)

    def __post_init__(self):
        if self.d_ffn == 0:
            self.d_ffn = 2 * self.d_model
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.d_ffn < self.d_model:
            raise ValueError("d_ffn must be >= d_model")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if (self.vocab > 0) == (self.in_dim > 0):
            raise ValueError("exactly one of vocab / in_dim must be set")
        if self.head == "per_position_lm" and not self.attn.causal:
            raise ValueError("per_position_lm needs causal attention")


class Norm:
    """layer / scale / batch normalization behind one interface."""

    def __init__(self, kind, d, prefix):
        self.kind = kind
        dt = get_dtype()
        if kind == "scale":
            g0 = np.asarray(np.sqrt(d), dtype=dt)
            self.gain = Tensor(g0, requires_grad=True, name=f"{prefix}.g")
            self.bias = None
            self.running = None
        else:
            self.gain = Tensor(np.ones(d, dtype=dt), requires_grad=True,
                               name=f"{prefix}.gain")
            self.bias = Tensor(np.zeros(d, dtype=dt), requires_grad=True,
                               name=f"{prefix}.bias")
            self.running = ({"mean": np.zeros(d, dtype=dt),
                             "var": np.ones(d, dtype=dt)}
                            if kind == "batch" else None)

    def __call__(self, x, training=False):
        if self.kind == "layer":
            return layer_norm(x, self.gain, self.bias)
        if self.kind == "scale":
            return scale_norm(x, self.gain)
        return batch_norm(x, self.gain, self.bias, self.running, training)

    def params(self):
        return [self.gain] if self.bias is None else [self.gain, self.bias]


class Ffn:
    """Position-wise Linear(d->f) -> silu -> Linear(f->d)."""

    def __init__(self, d, f, rng, prefix):
        dt = get_dtype()
        self.w1 = Tensor(rng.child("w1").normal((d, f), std=d ** -0.5,
                                                dtype=dt),
                         requires_grad=True, name=f"{prefix}.w1")
        self.b1 = Tensor(np.zeros(f, dtype=dt), requires_grad=True,
                         name=f"{prefix}.b1")
        self.w2 = Tensor(rng.child("w2").normal((f, d), std=f ** -0.5,
                                                dtype=dt),
                         requires_grad=True, name=f"{prefix}.w2")
        self.b2 = Tensor(np.zeros(d, dtype=dt), requires_grad=True,
                         name=f"{prefix}.b2")

    def __call__(self, y, drop=None):
        h = silu(matmul(y, self.w1) + self.b1)
        if drop is not None:
            h = drop(h)
        return matmul(h, self.w2) + self.b2

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]


class Block:
    def __init__(self, cfg: ModelConfig, rng, prefix, impl="factored"):
        self.cfg = cfg
        self.attn = LongVQLayer(cfg.d_model, cfg.attn, cfg.S,
                                rng.child("attn"), n_state=cfg.n_state,
                                prefix=f"{prefix}.attn",
                                ssm_enabled=cfg.ssm_enabled, impl=impl)
        self.norm1 = Norm(cfg.norm_kind, cfg.d_model, f"{prefix}.norm1")
        self.norm2 = Norm(cfg.norm_kind, cfg.d_model, f"{prefix}.norm2")
        self.ffn = Ffn(cfg.d_model, cfg.d_ffn, rng.child("ffn"),
                       f"{prefix}.ffn")

    def __call__(self, x, training=False, drop_rng=None, frozen=None):
        rate = self.cfg.dropout

        def drop(t):
            if drop_rng is None:
                return t
            return dropout(t, rate, drop_rng, training)

        if self.cfg.pre_norm:
            a, aux = self.attn(self.norm1(x, training), frozen=frozen)
            y = drop(a)
            y2 = y + self.ffn(self.norm2(y, training), drop=drop)
        else:
            a, aux = self.attn(x, frozen=frozen)
            y = self.norm1(drop(a), training)
            y2 = self.norm2(y + self.ffn(y, drop=drop), training)
        return y2, aux

    def params(self):
        return (self.attn.params() + self.norm1.params()
                + self.norm2.params() + self.ffn.params())


class Model:
    """Embedding -> depth x Block -> head.

    forward() returns (logits, auxes): one aux dict per block carrying
    the keys, quantized keys, and shortcodes for the commitment loss and
    the EMA codebook update.
    """

    def __init__(self, cfg: ModelConfig, rng, impl="factored"):
        self.cfg = cfg
        self.training = False
        dt = get_dtype()
        d = cfg.d_model
        er = rng.child("embed")
        if cfg.vocab > 0:
            self.embed_w = Tensor(er.normal((cfg.vocab, d), std=d ** -0.5,
                                            dtype=dt),
                                  requires_grad=True, name="embed.table")
            self.embed_b = None
        else:
            self.embed_w = Tensor(er.normal((cfg.in_dim, d),
                                            std=cfg.in_dim ** -0.5, dtype=dt),
                                  requires_grad=True, name="embed.w")
            self.embed_b = Tensor(np.zeros(d, dtype=dt), requires_grad=True,
                                  name="embed.b")
        self.blocks = [Block(cfg, rng.child(f"block{i}"), f"blocks.{i}",
                             impl=impl)
                       for i in range(cfg.depth)]
        self.final_norm = (Norm(cfg.norm_kind, d, "final_norm")
                           if cfg.pre_norm else None)
        self.head_w = Tensor(rng.child("head").normal((d, cfg.n_out),
                                                      std=d ** -0.5,
                                                      dtype=dt),
                             requires_grad=True, name="head.w")
        self.head_b = Tensor(np.zeros(cfg.n_out, dtype=dt),
                             requires_grad=True, name="head.b")
        self._drop_rng = rng.child("dropout")

    # -- plumbing ----------------------------------------------------------

    @property
    def impl(self):
        return self.blocks[0].attn.impl

    @impl.setter
    def impl(self, value):
        for b in self.blocks:
            b.attn.impl = value

    def params(self):
        ps = [self.embed_w] + ([self.embed_b] if self.embed_b is not None
                               else [])
        for b in self.blocks:
            ps += b.params()
        if self.final_norm is not None:
            ps += self.final_norm.params()
        ps += [self.head_w, self.head_b]
        return ps

    def params_dict(self):
        return {p.name: p for p in self.params()}

    def layers(self):
        return [b.attn for b in self.blocks]

    # -- forward -----------------------------------------------------------

    def embed(self, batch):
        if self.cfg.vocab > 0:
            idx = np.asarray(batch)
            if idx.ndim != 2:
                raise ValueError("token input must be (B, L)")
            return gather_rows(self.embed_w, idx)
        x = batch if isinstance(batch, Tensor) else Tensor(
            np.asarray(batch, dtype=get_dtype()))
        if x.data.ndim != 3 or x.data.shape[2] != self.cfg.in_dim:
            raise ValueError(f"real input must be (B, L, {self.cfg.in_dim})")
        return matmul(x, self.embed_w) + self.embed_b

    def forward(self, batch, frozen=None):
        h = self.embed(batch)
        auxes = []
        for i, blk in enumerate(self.blocks):
            h, aux = blk(h, training=self.training, drop_rng=self._drop_rng,
                         frozen=None if frozen is None else frozen[i])
            auxes.append(aux)
        if self.final_norm is not None:
            h = self.final_norm(h, self.training)
        if self.cfg.head == "mean_pool_classify":
            logits = matmul(tmean(h, axis=1), self.head_w) + self.head_b
        else:
            logits = matmul(h, self.head_w) + self.head_b
        return logits, auxes

    __call__ = forward

    # -- persistent state --------------------------------------------------

    def state_arrays(self):
        """Ordered name -> array map: parameters, then non-trained state
        (batch-norm running stats, codebooks)."""
        out = {p.name: p.data for p in self.params()}
        norms = []
        for i, b in enumerate(self.blocks):
            norms += [(f"blocks.{i}.norm1", b.norm1),
                      (f"blocks.{i}.norm2", b.norm2)]
        if self.final_norm is not None:
            norms.append(("final_norm", self.final_norm))
        for name, nm in norms:
            if nm.running is not None:
                out[f"{name}.running_mean"] = nm.running["mean"]
                out[f"{name}.running_var"] = nm.running["var"]
        for i, b in enumerate(self.blocks):
            cb = b.attn.codebook
            if cb is not None:
                out[f"blocks.{i}.attn.codebook.C"] = cb.C
                out[f"blocks.{i}.attn.codebook.ema_count"] = cb.ema_count
                out[f"blocks.{i}.attn.codebook.ema_sum"] = cb.ema_sum
        return out

    def load_state(self, arrays):
        state = self.state_arrays()
        for name, arr in arrays.items():
            if name.endswith((".codebook.C", ".codebook.ema_count",
                              ".codebook.ema_sum")):
                continue  # installed below
            if name not in state:
                raise ValueError(f"unexpected checkpoint entry '{name}'")
            if state[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for '{name}'")
            state[name][...] = arr.astype(state[name].dtype)
        missing = [n for n in state
                   if n not in arrays and ".codebook." not in n]
        if missing:
            raise ValueError(f"checkpoint missing entries: {missing}")
        for i, b in enumerate(self.blocks):
            key = f"blocks.{i}.attn.codebook.C"
            if key in arrays:
                want = (self.cfg.S, self.cfg.attn.z_dim)
                if arrays[key].shape != want:
                    raise ValueError(
                        f"codebook shape {arrays[key].shape} != {want}")
                dt = get_dtype()
                b.attn.codebook = Codebook(
                    C=arrays[key].astype(dt),
                    ema_count=arrays[f"blocks.{i}.attn.codebook.ema_count"]
                    .astype(dt),
                    ema_sum=arrays[f"blocks.{i}.attn.codebook.ema_sum"]
                    .astype(dt))


def param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for a ModelConfig."""
    d, f, n = cfg.d_model, cfg.d_ffn, cfg.n_state
    z, v, w = cfg.attn.z_dim, cfg.attn.v_dim, cfg.attn.window
    norm = 1 if cfg.norm_kind == "scale" else 2 * d
    ssm = d * n + 2 * d if cfg.ssm_enabled else 0
    gates = (d * v + v) + 2 * (d * z + z) + (d * v + v) \
        + (d * d + d) + (v * d + d)
    layer = ssm + gates + (2 * w + 1)
    ffn = d * f + f + f * d + d
    block = layer + 2 * norm + ffn
    embed = cfg.vocab * d if cfg.vocab > 0 else cfg.in_dim * d + d
    head = d * cfg.n_out + cfg.n_out
    total = embed + cfg.depth * block + head
    if cfg.pre_norm:
        total += norm
    return total


# ---------------------------------------------------------------------------
# checkpoints: one raw little-endian float32 blob + a JSON manifest sidecar

def save_checkpoint(path, model):
    arrays = model.state_arrays()
    manifest = {"format": "longvq-ckpt", "version": 1, "entries": []}
    off = 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            flat = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(flat.tobytes())
            manifest["entries"].append(
                {"name": name, "shape": list(arr.shape), "offset": off})
            off += flat.size * 4
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(path, model):
    with open(path + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "longvq-ckpt":
        raise ValueError(f"{path}: not a checkpoint manifest")
    size = os.path.getsize(path)
    blob = np.fromfile(path, dtype="<f4")
    arrays = {}
    for ent in manifest["entries"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"] // 4
        if ent["offset"] + count * 4 > size:
            raise ValueError(f"{path}: truncated at entry '{ent['name']}'")
        arrays[ent["name"]] = blob[start:start + count].reshape(shape)
    model.load_state(arrays)
    return model
