"""GroupFormer: a causal decoder backbone plus a non-causal group head.

Speech enters the backbone one group at a time: the G unit embeddings of a
group are concatenated and passed through a Linear-ELU-Linear adaptor, and
the result fills the ``<speech>`` slot in the token sequence. On the output
side, the hidden state ``z`` that precedes a slot is projected, prepended to
G learned queries, and run through a small bidirectional encoder whose
query outputs give G unit distributions at once.

Parameter names (the checkpoint schema)::

    unit_emb                (V_u, d_emb_unit)
    adaptor.w1, adaptor.b1  (G*d_emb_unit, d), (d,)
    adaptor.w2, adaptor.b2  (d, d), (d,)
    tok_emb                 (N, d)
    pos_emb                 (max_len, d)
    llm.blocks.{i}.*        see layers.block_param_shapes
    llm.ln_f.g, llm.ln_f.b  (d,)
    text_head               (d, N)
    gm.proj.w, gm.proj.b    (d, d_gm), (d_gm,)
    gm.queries              (G, d_gm)
    gm.pos_emb              (G+1, d_gm)
    gm.blocks.{i}.*         see layers.block_param_shapes
    gm.ln_f.g, gm.ln_f.b    (d_gm,)
    unit_head               (d_gm, V_u)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers
from .codec import GroupedUnitSequence
from .dialogue import RenderedSequence, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_gm: int = 64
    n_layers_gm: int = 2
    n_heads_gm: int = 4
    G: int = 5
    N: int = len(Vocabulary())
    V_u: int = 500
    d_emb_unit: int = 32
    max_len: int = 1024
    seed: int = 0
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.d_gm % self.n_heads_gm:
            raise ValueError(f"d_gm={self.d_gm} is not divisible by n_heads_gm={self.n_heads_gm}")
        if self.G < 1:
            raise ValueError("G must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, dg = self.d, self.d_gm
        shapes = {
            "unit_emb": (self.V_u, self.d_emb_unit),
            "adaptor.w1": (self.G * self.d_emb_unit, d),
            "adaptor.b1": (d,),
            "adaptor.w2": (d, d),
            "adaptor.b2": (d,),
            "tok_emb": (self.N, d),
            "pos_emb": (self.max_len, d),
        }
        for i in range(self.n_layers):
            shapes.update(layers.block_param_shapes(f"llm.blocks.{i}.", d))
        shapes.update({"llm.ln_f.g": (d,), "llm.ln_f.b": (d,), "text_head": (d, self.N)})
        shapes.update({
            "gm.proj.w": (d, dg),
            "gm.proj.b": (dg,),
            "gm.queries": (self.G, dg),
            "gm.pos_emb": (self.G + 1, dg),
        })
        for i in range(self.n_layers_gm):
            shapes.update(layers.block_param_shapes(f"gm.blocks.{i}.", dg))
        shapes.update({"gm.ln_f.g": (dg,), "gm.ln_f.b": (dg,), "unit_head": (dg, self.V_u)})
        return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Normal(0, init_std) matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = arr.astype(dtype)
    return params


@dataclass
class GroupFormer:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.config)
        shapes = self.config.param_shapes()
        if set(shapes) != set(self.params):
            missing = set(shapes) - set(self.params)
            extra = set(self.params) - set(shapes)
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def astype(self, dtype) -> "GroupFormer":
        cfg = ModelConfig(**{**self.config.to_json(), "dtype": np.dtype(dtype).name})
        return GroupFormer(cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "GroupFormer":
        return GroupFormer(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        """Write an ``.npz`` with little-endian float32 tensors and a
        ``__manifest__`` entry holding the config JSON."""
        manifest = {"format": "groupformer-npz/1", "config": self.config.to_json()}
        if extra:
            manifest.update(extra)
        blob = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
        tensors = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __manifest__=blob, **tensors)

    @classmethod
    def load(cls, path: str | Path) -> "GroupFormer":
        with np.load(path) as z:
            manifest = json.loads(bytes(z["__manifest__"]).decode())
            cfg = ModelConfig.from_json(manifest["config"])
            params = {k: z[k].astype(cfg.dtype) for k in z.files if k != "__manifest__"}
        return cls(cfg, params)


def read_manifest(path: str | Path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__manifest__"]).decode())


# ---------------------------------------------------------------- embeddings


def _group_array(groups, cfg: ModelConfig) -> np.ndarray:
    if isinstance(groups, GroupedUnitSequence):
        arr = groups.as_array()
    else:
        arr = np.asarray(groups, dtype=np.int64).reshape(-1, cfg.G)
    if arr.shape[1] != cfg.G:
        raise ValueError(f"groups have {arr.shape[1]} units, model expects G={cfg.G}")
    if arr.size and (arr.min() < 0 or arr.max() >= cfg.V_u):
        raise ValueError(f"unit id out of range [0, {cfg.V_u})")
    return arr


def _adaptor_forward(p, units):
    n, G = units.shape
    e = p["unit_emb"][units].reshape(n, -1)
    h = layers.linear_forward(e, p["adaptor.w1"], p["adaptor.b1"])
    a, elu_in = layers.elu_forward(h)
    out = layers.linear_forward(a, p["adaptor.w2"], p["adaptor.b2"])
    return out, (units, e, elu_in, a)


def _adaptor_backward(dout, cache, p, grads):
    units, e, elu_in, a = cache
    da = layers.linear_backward(dout, a, p["adaptor.w2"], grads, "adaptor.w2", "adaptor.b2")
    dh = layers.elu_backward(da, elu_in)
    de = layers.linear_backward(dh, e, p["adaptor.w1"], grads, "adaptor.w1", "adaptor.b1")
    de = de.reshape(units.shape[0], units.shape[1], -1)
    np.add.at(grads["unit_emb"], units.reshape(-1), de.reshape(-1, de.shape[-1]))


def embed_groups(model: GroupFormer, groups) -> np.ndarray:
    """Adapted embeddings, one row of width ``d`` per group."""
    units = _group_array(groups, model.config)
    return _adaptor_forward(model.params, units)[0]


def assemble_input(model: GroupFormer, r: RenderedSequence, adapted: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """Token embeddings with speech slots overwritten by adapted groups,
    plus learned positions."""
    if not isinstance(adapted, np.ndarray):
        adapted = np.concatenate(list(adapted), axis=0) if len(adapted) else np.zeros((0, model.config.d))
    pos = r.slot_positions
    if len(pos) != len(adapted):
        raise ValueError(f"{len(pos)} speech slots but {len(adapted)} adapted groups")
    if r.L > model.config.max_len:
        raise ValueError(f"sequence length {r.L} exceeds max_len {model.config.max_len}")
    p = model.params
    E = p["tok_emb"][r.tokens].copy()
    if len(pos):
        E[pos] = adapted
    return E + p["pos_emb"][: r.L]


def backbone_forward(model: GroupFormer, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cfg = model.config
    if E.shape[0] > cfg.max_len:
        raise ValueError(f"sequence length {E.shape[0]} exceeds max_len {cfg.max_len}")
    Z, _ = layers.stack_forward(E[None], model.params, "llm.", cfg.n_layers, cfg.n_heads, causal=True)
    Z = Z[0]
    return Z, Z @ model.params["text_head"]


def _group_model_forward(p, cfg: ModelConfig, z):
    S = z.shape[0]
    proj = layers.linear_forward(z, p["gm.proj.w"], p["gm.proj.b"])
    queries = np.broadcast_to(p["gm.queries"], (S, cfg.G, cfg.d_gm))
    x = np.concatenate([proj[:, None, :], queries], axis=1) + p["gm.pos_emb"]
    H, stack = layers.stack_forward(x, p, "gm.", cfg.n_layers_gm, cfg.n_heads_gm, causal=False)
    Hq = H[:, 1:, :]
    return Hq @ p["unit_head"], (z, stack, Hq)


def _group_model_backward(dlogits, cache, p, cfg: ModelConfig, grads):
    z, stack, Hq = cache
    d_gm = cfg.d_gm
    layers.accumulate(grads, "unit_head", Hq.reshape(-1, d_gm).T @ dlogits.reshape(-1, cfg.V_u))
    dH = np.zeros((Hq.shape[0], cfg.G + 1, d_gm), dtype=Hq.dtype)
    dH[:, 1:, :] = dlogits @ p["unit_head"].T
    dx = layers.stack_backward(dH, stack, p, "gm.", cfg.n_layers_gm, cfg.n_heads_gm, grads)
    layers.accumulate(grads, "gm.pos_emb", dx.sum(axis=0))
    layers.accumulate(grads, "gm.queries", dx[:, 1:, :].sum(axis=0))
    return layers.linear_backward(dx[:, 0, :], z, p["gm.proj.w"], grads, "gm.proj.w", "gm.proj.b")


def group_model_forward(model: GroupFormer, z: np.ndarray) -> np.ndarray:
    """G x V_u unit logits from one backbone state (or S x G x V_u for S states)."""
    single = z.ndim == 1
    z2 = z[None] if single else z
    logits, _ = _group_model_forward(model.params, model.config, z2)
    return logits[0] if single else logits


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    """Right-padded samples ready for the batched forward pass.

    ``target_mask[b, t]`` marks positions whose *token* is a text-loss
    target (it is predicted from row ``t - 1``).
    """

    tokens: np.ndarray
    target_mask: np.ndarray
    slot_b: np.ndarray
    slot_t: np.ndarray
    slot_units: np.ndarray
    group_mask: np.ndarray
    lengths: np.ndarray

    @property
    def n_slots(self) -> int:
        return len(self.slot_b)


def collate(samples: Sequence[RenderedSequence], pad_id: int, G: int) -> Batch:
    B = len(samples)
    T = max(s.L for s in samples)
    tokens = np.full((B, T), pad_id, dtype=np.int64)
    tmask = np.zeros((B, T), dtype=bool)
    sb, st, su, sm = [], [], [], []
    for b, s in enumerate(samples):
        tokens[b, : s.L] = s.tokens
        tmask[b, : s.L] = s.llm_mask
        if s.speech_slots:
            pos = s.slot_positions
            if pos.min() < 1:
                raise ValueError("a speech slot cannot sit at position 0")
            sb.append(np.full(len(pos), b))
            st.append(pos)
            su.append(s.slot_units())
            sm.append(np.asarray(s.group_mask, dtype=bool))
    cat = lambda xs, dt, shape: np.concatenate(xs).astype(dt) if xs else np.zeros(shape, dtype=dt)
    return Batch(
        tokens=tokens,
        target_mask=tmask,
        slot_b=cat(sb, np.int64, (0,)),
        slot_t=cat(st, np.int64, (0,)),
        slot_units=cat(su, np.int64, (0, G)),
        group_mask=cat(sm, bool, (0,)),
        lengths=np.array([s.L for s in samples]),
    )


@dataclass
class ForwardOutput:
    hidden_states: np.ndarray
    text_logits: np.ndarray
    group_logits: np.ndarray


def forward_batch(model: GroupFormer, batch: Batch, keep_cache: bool = False):
    """Teacher-forced forward. Returns ``(ForwardOutput, cache)``; the cache
    is ``None`` unless ``keep_cache``. Group logits for the slot at position
    ``t`` come from backbone row ``t - 1``."""
    cfg, p = model.config, model.params
    B, T = batch.tokens.shape
    if T > cfg.max_len:
        raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    E = p["tok_emb"][batch.tokens]
    ad_cache = None
    if batch.n_slots:
        adapted, ad_cache = _adaptor_forward(p, _group_array(batch.slot_units, cfg))
        E[batch.slot_b, batch.slot_t] = adapted
    E = E + p["pos_emb"][:T]
    Z, stack = layers.stack_forward(E, p, "llm.", cfg.n_layers, cfg.n_heads, causal=True)
    P = Z @ p["text_head"]
    gm_cache = None
    if batch.n_slots:
        zs = Z[batch.slot_b, batch.slot_t - 1]
        GL, gm_cache = _group_model_forward(p, cfg, zs)
    else:
        GL = np.zeros((0, cfg.G, cfg.V_u), dtype=Z.dtype)
    out = ForwardOutput(Z, P, GL)
    cache = (batch, ad_cache, stack, Z, gm_cache) if keep_cache else None
    return out, cache


def backward_batch(model: GroupFormer, cache, d_text_logits: np.ndarray, d_group_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every parameter, given the loss
    gradients w.r.t. both logit tensors."""
    cfg, p = model.config, model.params
    batch, ad_cache, stack, Z, gm_cache = cache
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    B, T = batch.tokens.shape
    layers.accumulate(grads, "text_head", Z.reshape(-1, cfg.d).T @ d_text_logits.reshape(-1, cfg.N))
    dZ = d_text_logits @ p["text_head"].T
    if batch.n_slots:
        dzs = _group_model_backward(d_group_logits, gm_cache, p, cfg, grads)
        np.add.at(dZ, (batch.slot_b, batch.slot_t - 1), dzs)
    dE = layers.stack_backward(dZ, stack, p, "llm.", cfg.n_layers, cfg.n_heads, grads)
    grads["pos_emb"][:T] += dE.sum(axis=0)
    is_text = np.ones((B, T), dtype=bool)
    if batch.n_slots:
        is_text[batch.slot_b, batch.slot_t] = False
        _adaptor_backward(dE[batch.slot_b, batch.slot_t], ad_cache, p, grads)
    np.add.at(grads["tok_emb"], batch.tokens[is_text], dE[is_text])
    return grads


def full_forward(model: GroupFormer, r: RenderedSequence) -> ForwardOutput:
    batch = collate([r], pad_id=0, G=model.config.G)
    out, _ = forward_batch(model, batch)
    return ForwardOutput(out.hidden_states[0], out.text_logits[0], out.group_logits)


# ---------------------------------------------------------------- incremental


class KVCache:
    """Per-layer keys/values for single-sequence incremental decoding."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.k: list[np.ndarray | None] = [None] * cfg.n_layers
        self.v: list[np.ndarray | None] = [None] * cfg.n_layers
        self.length = 0


def _attention_step(x, p, prefix, n_heads, cache: KVCache, layer: int):
    T_new, d = x.shape
    dh = d // n_heads
    q, k, v = np.split(x @ p[prefix + "wqkv"], 3, axis=-1)
    q, v = q + p[prefix + "bq"], v + p[prefix + "bv"]
    q, k, v = (t.reshape(T_new, n_heads, dh).transpose(1, 0, 2) for t in (q, k, v))
    if cache.k[layer] is not None:
        k = np.concatenate([cache.k[layer], k], axis=1)
        v = np.concatenate([cache.v[layer], v], axis=1)
    cache.k[layer], cache.v[layer] = k, v
    scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(dh)
    past = k.shape[1] - T_new
    allowed = np.arange(k.shape[1])[None, :] <= (past + np.arange(T_new))[:, None]
    probs = layers.softmax(np.where(allowed, scores, -np.inf))
    o = (probs @ v).transpose(1, 0, 2).reshape(T_new, d)
    return o @ p[prefix + "wo"] + p[prefix + "bo"]


def backbone_step(model: GroupFormer, cache: KVCache, rows: np.ndarray) -> np.ndarray:
    """Feed new input rows (without positions) and return their final
    hidden states; ``cache`` is advanced in place."""
    cfg, p = model.config, model.params
    T_new = rows.shape[0]
    start = cache.length
    if start + T_new > cfg.max_len:
        raise ValueError(f"sequence length {start + T_new} exceeds max_len {cfg.max_len}")
    x = rows + p["pos_emb"][start : start + T_new]
    for i in range(cfg.n_layers):
        pre = f"llm.blocks.{i}."
        h, _ = layers.layernorm_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        x = x + _attention_step(h, p, pre + "attn.", cfg.n_heads, cache, i)
        h, _ = layers.layernorm_forward(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u, _ = layers.gelu_forward(h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"])
        x = x + u @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
    cache.length += T_new
    Z, _ = layers.layernorm_forward(x, p["llm.ln_f.g"], p["llm.ln_f.b"])
    return Z


def input_rows(model: GroupFormer, r: RenderedSequence) -> np.ndarray:
    """Position-free input rows for a rendered prefix."""
    p = model.params
    E = p["tok_emb"][r.tokens].copy()
    if r.speech_slots:
        E[r.slot_positions] = embed_groups(model, r.slot_units())
    return E
