"""Contrastive and cross-entropy losses, and an AdamW optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import NonFiniteError, Tensor


def _check_batch(za: Tensor, zb: Tensor, labels: np.ndarray, tau: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if za.shape != zb.shape or za.shape[0] != labels.size:
        raise nc.ShapeError(f"views {za.shape}, {zb.shape} with {labels.size} labels")
    if labels.size < 2:
        raise ValueError("contrastive batch needs at least two rows")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return labels


def _cross_view(za: Tensor, zb: Tensor, positives: np.ndarray, tau: float) -> Tensor:
    """Mean over both directions of -(1/|P_i|) sum_{j in P_i} log softmax_k(cos_ik / tau)."""
    n = za.shape[0]
    counts = positives.sum(axis=1, keepdims=True)
    weights = Tensor(positives / counts)
    sim = nc.scale(nc.cosine_similarity(za, zb), 1.0 / tau)
    a_to_b = nc.sum(weights * nc.log_softmax_rows(sim))
    b_to_a = nc.sum(weights * nc.log_softmax_rows(nc.transpose(sim)))
    return nc.scale(a_to_b + b_to_a, -1.0 / (2 * n))


def supcon_cross_view(za: Tensor, zb: Tensor, labels, tau: float = 0.07) -> Tensor:
    """Same-label rows of the other view are positives; every other-view row
    (the anchor's own counterpart included) is in the denominator."""
    labels = _check_batch(za, zb, labels, tau)
    if np.unique(labels).size < 2:
        raise ValueError("supervised contrast needs both classes in the batch")
    positives = (labels[:, None] == labels[None, :]).astype(np.float64)
    return _cross_view(za, zb, positives, tau)


def selfsup_cross_view(za: Tensor, zb: Tensor, labels=None, tau: float = 0.07) -> Tensor:
    """Only a node's own other-view row is positive."""
    n = za.shape[0]
    _check_batch(za, zb, np.zeros(n) if labels is None else labels, tau)
    return _cross_view(za, zb, np.eye(n), tau)


def weighted_cross_entropy(logits: Tensor, labels, class_weights=(1.0, 1.0)) -> Tensor:
    """sum_i w_{y_i} * (-log p_i[y_i]) / N."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.size != n:
        raise nc.ShapeError(f"{n} logit rows vs {labels.size} labels")
    w = np.asarray(class_weights, dtype=np.float64)
    pick = np.zeros((n, k))
    pick[np.arange(n), labels] = w[labels]
    return nc.scale(nc.sum(Tensor(pick) * nc.log_softmax_rows(logits)), -1.0 / n)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One in-place AdamW update; decay is applied to the weights before the
    bias-corrected adaptive step."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise nc.ShapeError(f"optimizer state for {name} has shape {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)
