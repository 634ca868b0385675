"""Rank-``r`` additive adapters on every projection, the TTT comparison baseline.

Each adapted weight ``W`` (acting as ``y = x W^T``) gains ``x A^T B^T`` with
``A: r x in`` drawn at random and ``B: out x r`` zero, so a fresh adapter
leaves the model unchanged.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

ATTENTION = ("wq", "wk", "wv", "wo")


def adapted_shapes(config):
    """``(in, out)`` of every adapted projection, keyed by backbone weight name."""
    d, m = config.d, config.m
    shapes = {}
    for i in range(config.L):
        p = f"layers.{i}."
        for n in ATTENTION:
            shapes[p + n] = (d, d)
        if config.ffn_kind == "mlp":
            shapes[p + "w_key"] = (d, m)
            shapes[p + "w_value"] = (m, d)
        else:
            shapes[p + "w_gate"] = (d, m)
            shapes[p + "w_up"] = (d, m)
            shapes[p + "w_down"] = (m, d)
    return shapes


class LowRankAdapter:
    def __init__(self, factors):
        self.factors = factors

    def parameters(self):
        out = {}
        for name, (A, B) in self.factors.items():
            out[name + ".A"] = A
            out[name + ".B"] = B
        return out

    def flat_grads(self, grads):
        out = {}
        for name, (dA, dB) in grads.items():
            out[name + ".A"] = dA
            out[name + ".B"] = dB
        return out

    def n_params(self):
        return int(sum(p.size for p in self.parameters().values()))

    def copy(self):
        return LowRankAdapter({k: (A.copy(), B.copy()) for k, (A, B) in self.factors.items()})


def lowrank_baseline_attach(backbone, r, seed=0):
    if r < 1:
        raise ShapeError("adapter rank must be >= 1")
    rng = np.random.default_rng(seed)
    factors = {}
    for name, (n_in, n_out) in adapted_shapes(backbone.config).items():
        A = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(r, n_in))
        factors[name] = (A, np.zeros((n_out, r)))
    return LowRankAdapter(factors)
