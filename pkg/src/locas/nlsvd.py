"""Non-linear SVD compression of a two-layer ReLU memory.

The compressor treats ``f(x) = V^T relu(K^T x)`` slot by slot. Scaling key
``i`` by ``c > 0`` and value ``i`` by ``1/c`` leaves ``f`` unchanged, so only
the key direction and the product of the key and value norms matter. Keys are
weighted by that product, the dominant directions of the weighted key matrix
become orthonormal probe keys, and each new value is obtained by querying the
original network at its probe. At every retained probe the reduced network
reproduces the original output exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import backbone as bbmod
from .errors import CapacityError, ShapeError
from .memory import LocasMlpMemory, mlp_append_slot
from .tensor_core import symmetric_evd


def relu_ffn(K, V, X):
    """``V^T relu(K^T x)`` for each row ``x`` of ``X``."""
    return np.maximum(np.asarray(X) @ K, 0.0) @ V


@dataclass
class CompressionReport:
    input_rank: int
    target_rank: int
    retained_rank: int
    composed_scalars: list
    top_eigenvalues: list
    gram_trace: float
    discarded_mass: float
    discarded_mass_fraction: float
    probe_max_error: float
    # key columns / value rows are the slot vectors that get normalized
    normalization: str = "key columns, value rows"
    layer: int | None = None
    token_index: int | None = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _orient(P, ref):
    """Flip each probe row so it points into the half-space of ``ref``."""
    for j in range(P.shape[0]):
        dot = P[j] @ ref
        if abs(dot) <= 1e-8 * np.linalg.norm(ref):
            dot = P[j, np.argmax(np.abs(P[j]))]
        if dot < 0:
            P[j] = -P[j]
    return P


def _orthonormalize(P):
    # modified Gram-Schmidt in row order keeps the leading directions fixed
    P = P.copy()
    for j in range(P.shape[0]):
        for k in range(j):
            P[j] -= (P[j] @ P[k]) * P[k]
        P[j] /= np.linalg.norm(P[j])
    return P


def nl_svd_compress(K, V, n, drop_threshold=1e-8):
    """Compress ``(K: d x m, V: m x d)`` to at most ``n`` slots.

    Returns ``(K_new: d x n', V_new: n' x d, report)``. Directions whose
    singular value falls below ``drop_threshold`` times the largest one are
    discarded, so ``n' <= n``.
    """
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    d, m = K.shape
    if V.shape != (m, d):
        raise ShapeError(f"value matrix must be {(m, d)}, got {V.shape}")
    if n > m:
        raise CapacityError(f"target rank n={n} exceeds current rank m={m}")
    if n > d:
        raise CapacityError(f"target rank n={n} exceeds hidden size d={d}")

    alpha = np.sqrt(np.sum(K * K, axis=0))
    beta = np.sqrt(np.sum(V * V, axis=1))
    s = alpha * beta
    Kbar = K / np.where(alpha > 0, alpha, 1.0)[None, :]
    Khat = Kbar * s[None, :]

    # same spectrum either way; decompose whichever Gram matrix is smaller
    if d <= m:
        U, lam = symmetric_evd(Khat @ Khat.T)
        weighted = (U * np.sqrt(np.maximum(lam, 0.0))[None, :]).T  # rows sigma_j u_j
    else:
        W, lam = symmetric_evd(Khat.T @ Khat)
        weighted = (Khat @ W).T
    gram_trace = float(np.sum(s * s))
    top = lam[:n]
    discarded = gram_trace - float(np.sum(top))
    frac = discarded / gram_trace if gram_trace > 0 else 0.0

    rows = weighted[:n]
    sig = np.sqrt(np.sum(rows * rows, axis=1))
    keep = sig > drop_threshold * sig[0] if n and sig[0] > 0 else np.zeros(n, dtype=bool)
    P = rows[keep] / sig[keep][:, None]
    if P.shape[0]:
        P = _orthonormalize(_orient(P, Khat.sum(axis=1)))
    K_new = P.T.copy()
    V_new = relu_ffn(K, V, P)
    check = probe_equivalence_check((K, V), (K_new, V_new))
    report = CompressionReport(
        input_rank=m, target_rank=n, retained_rank=int(P.shape[0]),
        composed_scalars=s.tolist(), top_eigenvalues=top.tolist(), gram_trace=gram_trace,
        discarded_mass=discarded, discarded_mass_fraction=float(min(max(frac, 0.0), 1.0)),
        probe_max_error=check.max_error,
    )
    return K_new, V_new, report


class ProbeCheck(NamedTuple):
    max_error: float
    n_probes: int

    @property
    def empty(self):
        return self.n_probes == 0


def probe_equivalence_check(original, reduced):
    """Largest elementwise gap between the two networks at the reduced network's probe keys."""
    K, V = original
    K_new, V_new = reduced
    if K_new.shape[0] != K.shape[0] or V_new.shape[0] != K_new.shape[1]:
        raise ShapeError("reduced memory does not match the original's hidden size")
    P = np.asarray(K_new).T
    if P.shape[0] == 0:
        return ProbeCheck(0.0, 0)
    err = np.abs(relu_ffn(K, V, P) - relu_ffn(K_new, V_new, P))
    return ProbeCheck(float(err.max()), P.shape[0])


def compress_memory(mem: LocasMlpMemory, n, drop_threshold=1e-8, token_index=None):
    reports = []
    for i, layer in enumerate(mem.layers):
        layer.K, layer.V, rep = nl_svd_compress(layer.K, layer.V, n, drop_threshold)
        rep.layer = i
        rep.token_index = token_index
        reports.append(rep)
    return reports


@dataclass
class CyclePolicy:
    n_capacity: int = 64
    n_target: int = 32
    cadence: str = "per-span"
    context: int = 128
    drop_threshold: float = 1e-8

    def __post_init__(self):
        if self.cadence not in ("per-token", "per-span"):
            raise ValueError(f"unknown cadence {self.cadence!r}")
        if self.n_target >= self.n_capacity:
            raise ValueError("n_target must be smaller than n_capacity")


@dataclass
class CycleLog:
    events: list = field(default_factory=list)
    ranks: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    @property
    def n_compressions(self):
        return len(self.events)

    def write_reports(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rep in self.reports:
                fh.write(rep.to_json() + "\n")


def run_expansion_compression_cycle(backbone, mem: LocasMlpMemory, tokens, policy: CyclePolicy):
    """Memorize a token stream slot by slot, compressing with NL-SVD on a schedule.

    ``tokens`` starts with its first context token (usually BOS); every later
    token is memorized once: the model sees up to ``policy.context`` preceding
    tokens, the hidden-state gradient of that token's log-likelihood is taken
    at the position that predicts it, and one slot is appended per layer.
    ``per-span`` compresses after every ``n_capacity`` tokens; ``per-token``
    compresses whenever a layer's rank exceeds ``n_target``.
    """
    if backbone.config.ffn_kind != "mlp":
        raise ShapeError("the expansion-compression cycle needs an MLP backbone")
    tokens = np.asarray(tokens)
    log = CycleLog()
    for j in range(len(tokens) - 1):
        lo = max(0, j + 1 - policy.context)
        window = tokens[lo:j + 2]
        pos = len(window) - 2
        grads, cache = bbmod.backward_hidden_grads(backbone, window, positions=[pos], memory=mem)
        acts = np.stack([c["A"][0, pos] for c in cache["layers"]])
        mlp_append_slot(mem, acts, grads[0])
        log.ranks.append(mem.ranks)
        processed = j + 1
        due = (policy.cadence == "per-token" and max(mem.ranks) > policy.n_target) or (
            policy.cadence == "per-span" and processed % policy.n_capacity == 0
        )
        if due:
            before = mem.ranks
            reports = compress_memory(mem, min(policy.n_target, min(before)), policy.drop_threshold, processed)
            log.reports.extend(reports)
            log.events.append({"token_index": processed, "r_before": before, "r_after": mem.ranks})
            log.ranks[-1] = mem.ranks
    return log
