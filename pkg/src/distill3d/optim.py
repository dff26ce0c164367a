"""Plain descent and adaptive-moments updates over a ParamStore."""

from __future__ import annotations

import numpy as np

from .gradcore import ParamStore

__all__ = ["Sgd", "Adam", "make_optimizer", "clip_global_norm", "global_norm"]


def global_norm(grads: dict) -> float:
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(sq))


def clip_global_norm(grads: dict, ceiling: float) -> tuple[dict, float]:
    """Scale all gradients so their joint norm is at most `ceiling`."""
    norm = global_norm(grads)
    if ceiling is not None and norm > ceiling and norm > 0:
        scale = ceiling / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Sgd:
    """Momentum-free descent; the default, so update rules stay transparent."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, store: ParamStore, grads: dict, trainable=None) -> float:
        """Apply updates; returns mean |update| over touched entries."""
        tot, cnt = 0.0, 0
        for name in store.names():
            if trainable is not None and name not in trainable:
                continue
            mult = store.lr_mult(name)
            if mult == 0.0:
                continue
            upd = (self.lr * mult) * grads[name]
            store.set(name, store[name] - upd)
            tot += float(np.abs(upd).sum())
            cnt += upd.size
        return tot / max(cnt, 1)


class Adam:
    """Adaptive-moments option (optimizer choice is a config knob)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, store: ParamStore, grads: dict, trainable=None) -> float:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self._t
        corr2 = 1.0 - b2 ** self._t
        tot, cnt = 0.0, 0
        for name in store.names():
            if trainable is not None and name not in trainable:
                continue
            mult = store.lr_mult(name)
            if mult == 0.0:
                continue
            g = grads[name]
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(store[name])
                self._m[name] = m
                self._v[name] = np.zeros_like(store[name])
            v = self._v[name]
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * (g * g)
            upd = (self.lr * mult) * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            store.set(name, store[name] - upd)
            tot += float(np.abs(upd).sum())
            cnt += upd.size
        return tot / max(cnt, 1)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
