"""Losses, gradients, optimizer and learning-rate schedule.

The objective is the plain sum of two per-position means:

* text loss: next-token cross-entropy over the extended vocabulary on
  positions flagged by ``llm_mask`` (assistant turns only);
* group loss: per-unit cross-entropy over the unit vocabulary for every
  speech slot flagged by ``group_mask`` (user and assistant speech).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .model import Batch, GroupFormer, backward_batch, forward_batch

REFERENCE_PEAK_LR = 1.5e-4


@dataclass(frozen=True)
class LossBreakdown:
    loss_llm: float
    loss_group: float
    total: float
    n_llm_positions: int
    n_group_slots: int

    def to_json(self) -> dict:
        return {
            "loss_llm": self.loss_llm,
            "loss_group": self.loss_group,
            "total": self.total,
            "n_llm_positions": self.n_llm_positions,
            "n_group_slots": self.n_group_slots,
        }


def _llm_terms(text_logits, tokens, llm_mask):
    text_logits = np.asarray(text_logits)
    tokens = np.asarray(tokens)
    llm_mask = np.asarray(llm_mask, dtype=bool)
    if tokens.shape != llm_mask.shape or text_logits.shape[:-1] != tokens.shape:
        raise ValueError(
            f"shape mismatch: logits {text_logits.shape}, tokens {tokens.shape}, mask {llm_mask.shape}"
        )
    # row t predicts token t + 1
    logits = text_logits[..., :-1, :]
    targets = tokens[..., 1:]
    sel = llm_mask[..., 1:]
    return logits, targets, sel


def loss_llm(text_logits, tokens, llm_mask) -> float:
    """Mean next-token cross-entropy over positions whose token is flagged
    in ``llm_mask``; 0 when nothing is flagged."""
    logits, targets, sel = _llm_terms(text_logits, tokens, llm_mask)
    n = int(sel.sum())
    if n == 0:
        return 0.0
    logp = layers.log_softmax(logits[sel])
    return float(-logp[np.arange(n), targets[sel]].sum() / n)


def loss_group(group_logits, target_units, group_mask) -> float:
    """Mean per-unit cross-entropy over the flagged slots."""
    group_logits = np.asarray(group_logits)
    target_units = np.asarray(target_units)
    group_mask = np.asarray(group_mask, dtype=bool)
    if group_logits.shape[:-1] != target_units.shape or group_mask.shape != target_units.shape[:1]:
        raise ValueError(
            f"shape mismatch: logits {group_logits.shape}, targets {target_units.shape}, mask {group_mask.shape}"
        )
    n = int(group_mask.sum()) * target_units.shape[1]
    if n == 0:
        return 0.0
    logp = layers.log_softmax(group_logits[group_mask])
    tgt = target_units[group_mask]
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)
    return float(-picked.sum() / n)


def _ce_grad(logits, targets, n):
    g = layers.softmax(logits)
    np.put_along_axis(g, targets[..., None], np.take_along_axis(g, targets[..., None], -1) - 1.0, -1)
    return g / n


def losses_and_grads(out, batch: Batch, group_weight: float = 1.0):
    """Loss breakdown plus d(total)/d(text logits) and d(total)/d(group logits)."""
    logits, targets, sel = _llm_terms(out.text_logits, batch.tokens, batch.target_mask)
    n_llm = int(sel.sum())
    d_text = np.zeros_like(out.text_logits)
    if n_llm:
        d_text[..., :-1, :][sel] = _ce_grad(logits[sel], targets[sel], n_llm)
    l_llm = loss_llm(out.text_logits, batch.tokens, batch.target_mask)

    n_slots = int(batch.group_mask.sum())
    d_group = np.zeros_like(out.group_logits)
    if n_slots:
        n = n_slots * batch.slot_units.shape[1]
        d_group[batch.group_mask] = group_weight * _ce_grad(
            out.group_logits[batch.group_mask], batch.slot_units[batch.group_mask], n
        )
    l_group = loss_group(out.group_logits, batch.slot_units, batch.group_mask)
    total = l_llm + group_weight * l_group
    return LossBreakdown(l_llm, l_group, total, n_llm, n_slots), d_text, d_group


def evaluate_loss(model: GroupFormer, batch: Batch, group_weight: float = 1.0) -> LossBreakdown:
    out, _ = forward_batch(model, batch)
    return losses_and_grads(out, batch, group_weight)[0]


def backward(model: GroupFormer, batch: Batch, group_weight: float = 1.0) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Total loss and its exact gradient for every parameter tensor.

    Raises ``FloatingPointError`` naming the first tensor whose gradient is
    not finite.
    """
    out, cache = forward_batch(model, batch, keep_cache=True)
    lb, d_text, d_group = losses_and_grads(out, batch, group_weight)
    grads = backward_batch(model, cache, d_text, d_group)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    return lb, grads


def grad_check(
    model: GroupFormer,
    batch: Batch,
    eps: float = 1e-5,
    n_entries: int = 20,
    seed: int = 0,
    group_weight: float = 1.0,
    return_details: bool = False,
):
    """Compare analytic gradients with central differences.

    Checks ``n_entries`` random entries per tensor (all entries when the
    tensor is smaller) and returns the max relative error
    ``|a - b| / max(|a|, |b|, 1e-8)``. The model must be float64.
    """
    if model.dtype != np.float64:
        raise TypeError("grad_check needs a float64 model; use model.astype(np.float64)")
    _, grads = backward(model, batch, group_weight)
    rng = np.random.default_rng(seed)
    details = {}
    worst = 0.0
    for name in sorted(model.params):
        w = model.params[name]
        flat = w.reshape(-1)
        if flat.size <= n_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=n_entries, replace=False)
        err = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = evaluate_loss(model, batch, group_weight).total
            flat[i] = old - eps
            fm = evaluate_loss(model, batch, group_weight).total
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            ana = grads[name].reshape(-1)[i]
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            err = max(err, rel)
        details[name] = err
        worst = max(worst, err)
    return (worst, details) if return_details else worst


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    max_steps: int = 2000
    warmup_steps: int | None = None
    batch_size: int = 16
    seed: int = 0
    grad_clip: float | None = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    group_weight: float = 1.0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.warmup >= self.max_steps:
            raise ValueError("warmup must be shorter than max_steps")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(0.03 * self.max_steps))

    def to_json(self) -> dict:
        return {
            "peak_lr": self.peak_lr,
            "max_steps": self.max_steps,
            "warmup_steps": self.warmup_steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "grad_clip": self.grad_clip,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "adam_eps": self.adam_eps,
            "group_weight": self.group_weight,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "betas" in obj:
            obj["betas"] = tuple(obj["betas"])
        return cls(**obj)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``max_steps``."""
    w = cfg.warmup
    if step < w:
        return cfg.peak_lr * step / w
    progress = min(1.0, (step - w) / max(1, cfg.max_steps - w))
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def adamw_update(params, grads, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    b1, b2 = cfg.betas
    t = state.step + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    for name, w in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if w.ndim >= 2 and cfg.weight_decay:
            w -= lr * cfg.weight_decay * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    state.step = t


def train_step(model: GroupFormer, batch: Batch, state: AdamState, cfg: TrainConfig):
    """One AdamW update at the scheduled learning rate.

    Returns ``(model, state, LossBreakdown)``. A non-finite loss raises
    ``FloatingPointError`` before any parameter is touched.
    """
    lb, grads = backward(model, batch, cfg.group_weight)
    if not math.isfinite(lb.total):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    if cfg.grad_clip:
        clip_grads(grads, cfg.grad_clip)
    lr = cosine_lr(state.step, cfg)
    adamw_update(model.params, grads, state, lr, cfg)
    return model, state, lb
