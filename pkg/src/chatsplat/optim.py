"""Adaptive-moment and plain gradient-descent optimizers over named arrays.

Parameters and moment buffers stay float32 (what checkpoints store), the
update arithmetic runs in float64; each step is a deterministic function of
the float32 state and the gradient, so checkpoint/resume is bitwise exact.
"""

from __future__ import annotations

from typing import Dict

import numpy as np


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float = 0.05,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=np.float32) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float32) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if k not in grads:
                continue
            g = np.asarray(grads[k], np.float64).reshape(p.shape)
            m = self.beta1 * self.m[k].astype(np.float64) + (1 - self.beta1) * g
            v = self.beta2 * self.v[k].astype(np.float64) + (1 - self.beta2) * g * g
            self.m[k] = m.astype(np.float32)
            self.v[k] = v.astype(np.float32)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p[...] = (p.astype(np.float64) - update).astype(np.float32)

    def state_records(self, prefix: str) -> Dict[str, np.ndarray]:
        recs = {f"{prefix}.t": np.array([self.t], np.uint32)}
        for k in self.params:
            recs[f"{prefix}.m.{k}"] = self.m[k]
            recs[f"{prefix}.v.{k}"] = self.v[k]
        return recs

    def load_state_records(self, prefix: str, recs: Dict[str, np.ndarray]) -> None:
        key = f"{prefix}.t"
        if key not in recs:
            return
        self.t = int(recs[key][0])
        for k, p in self.params.items():
            self.m[k] = np.array(recs[f"{prefix}.m.{k}"], np.float32).reshape(p.shape)
            self.v[k] = np.array(recs[f"{prefix}.v.{k}"], np.float32).reshape(p.shape)


class SGD:
    """Plain gradient descent; kept for gradient-check debugging."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float = 0.05):
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, p in self.params.items():
            if k not in grads:
                continue
            g = np.asarray(grads[k], np.float64).reshape(p.shape)
            p[...] = (p.astype(np.float64) - self.lr * g).astype(np.float32)

    def state_records(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.t": np.array([self.t], np.uint32)}

    def load_state_records(self, prefix: str, recs: Dict[str, np.ndarray]) -> None:
        key = f"{prefix}.t"
        if key in recs:
            self.t = int(recs[key][0])


def make_optimizer(kind: str, params: Dict[str, np.ndarray], lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    if kind == "adam":
        return Adam(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
