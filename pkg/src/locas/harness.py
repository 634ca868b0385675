"""Streaming evaluation of test-time memorization on long documents.

A document is processed chunk by chunk. Each chunk is first scored with at
most ``window`` tokens of preceding context, then (for TTT methods) used to
update the memory or adapter. The score of a chunk therefore never reflects
training on that chunk.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import backbone as bbmod
from .errors import CapacityError, NumericalError, ShapeError
from .lowrank import LowRankAdapter, lowrank_baseline_attach
from .memory import (
    LocasMlpMemory,
    MemoryOptimizer,
    apply_update,
    default_lr,
    init_glu_memory,
    mlp_append_slot,
)

METHODS = ("trunc", "locas-mlp", "locas-glu", "lowrank-baseline")
CSV_HEADER = ("method", "doc_id", "position", "context_len", "nll", "ppl")


@dataclass
class RunConfig:
    chunk_size: int = 256
    window: int = 256
    method: str = "trunc"
    strategy: str = "topk"
    r: int = 16
    lr: float | None = None
    steps_per_chunk: int = 1
    seed: int = 0
    optimizer: str = "sgd"
    record_every: int | None = None
    reinit_per_chunk: bool = False
    epsilon: float = 1e-2
    mlp_update: str = "bp"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 1 <= self.chunk_size <= self.window:
            raise ShapeError("need 1 <= chunk_size <= window")
        if self.mlp_update not in ("bp", "nlsvd"):
            raise ValueError(f"unknown mlp_update {self.mlp_update!r}")

    @property
    def effective_lr(self):
        return default_lr(self.strategy) if self.lr is None else self.lr

    @property
    def label(self):
        if self.method == "locas-glu":
            return f"locas-glu:{self.strategy}"
        return self.method


@dataclass(frozen=True)
class EvalRecord:
    method: str
    doc_id: int
    position: int
    context_len: int
    nll: float
    ppl: float
    n_tokens: int = field(default=0, compare=False)

    def csv_row(self):
        return [self.method, str(self.doc_id), str(self.position), str(self.context_len),
                f"{self.nll:.6g}", f"{self.ppl:.6g}"]


def _tokens(document):
    if isinstance(document, np.ndarray):
        return document.astype(np.int64)
    return bbmod.encode_document(document)


def _chunks(n_targets, chunk, window):
    """Yield ``(in_lo, tgt_lo, tgt_hi)``: targets are ``s[tgt_lo:tgt_hi]``, inputs ``s[in_lo:tgt_hi-1]``."""
    for start in range(1, n_targets + 1, chunk):
        hi = min(start + chunk, n_targets + 1)
        yield max(0, start - window), start, hi


class _Learner:
    """Owns the memory or adapter of one TTT run and applies its updates."""

    def __init__(self, backbone, run: RunConfig):
        self.backbone = backbone
        self.run = run
        self.memory = None
        self.adapter = None
        self.opt = MemoryOptimizer(run.optimizer)
        self.rng = np.random.default_rng(run.seed)
        cfg = backbone.config
        if run.method == "locas-glu" and cfg.ffn_kind != "glu":
            raise ShapeError("locas-glu needs a GLU backbone")
        if run.method == "locas-glu" and run.r > cfg.m:
            raise CapacityError(f"r={run.r} exceeds backbone width m={cfg.m}")
        if run.method == "locas-mlp":
            self.memory = LocasMlpMemory.empty(cfg.L, cfg.d, run.epsilon)
        if run.method == "lowrank-baseline":
            self.adapter = lowrank_baseline_attach(backbone, run.r, seed=run.seed)

    @property
    def needs_init(self):
        return self.run.method == "locas-glu" and (self.memory is None or self.run.reinit_per_chunk)

    def forward(self, inputs):
        return bbmod.forward(self.backbone, inputs, memory=self.memory, adapter=self.adapter)

    def params(self):
        return self.adapter.parameters() if self.adapter is not None else self.memory.parameters()

    def _step(self, cache, dlogits):
        grads = bbmod.backward(cache, dlogits, want_backbone=False)
        lr = self.run.effective_lr
        if self.adapter is not None:
            self.opt.step(self.adapter.parameters(), self.adapter.flat_grads(grads.adapter), lr)
        else:
            apply_update(self.memory, grads, lr, self.opt)

    def initialize(self, seq, cache, weights):
        """First-chunk initialization of a Locas-GLU memory from the backbone's own pass."""
        trace = bbmod.trace_from_cache(cache)
        scored = np.flatnonzero(weights)
        hidden = [h[scored] for h in trace.ffn_hidden]
        trace = bbmod.ActivationTrace(ffn_input=trace.ffn_input, ffn_hidden=hidden)
        grads = positions = None
        if self.run.strategy == "normalized-activation":
            positions = _spread(scored, self.run.r)
            grads, _ = bbmod.backward_hidden_grads(self.backbone, seq, positions, cache=cache)
        self.memory = init_glu_memory(self.backbone, trace, self.run.r, self.run.strategy,
                                      seed=int(self.rng.integers(2**31)), hidden_grads=grads,
                                      positions=positions, epsilon=self.run.epsilon)

    def grow_mlp(self, seq, cache, nll, weights):
        """Append MLP slots for the hardest tokens of the chunk until ``r`` slots exist."""
        mem = self.memory
        budget = self.run.r - min(mem.ranks) if self.run.mlp_update == "bp" else self.run.r
        if budget <= 0:
            return
        scored = np.flatnonzero(weights)
        order = scored[np.argsort(-nll[scored], kind="stable")][:budget]
        grads, _ = bbmod.backward_hidden_grads(self.backbone, seq, positions=sorted(order.tolist()),
                                               memory=mem, cache=cache)
        acts = np.stack([c["A"][0] for c in cache["layers"]], axis=1)  # (T, L, d)
        for n, t in enumerate(sorted(order.tolist())):
            mlp_append_slot(mem, acts[t], grads[n])
        if self.run.mlp_update == "nlsvd":
            from .nlsvd import compress_memory

            target = min(self.run.r, self.backbone.config.d, min(mem.ranks))
            if max(mem.ranks) > target:
                compress_memory(mem, target)

    def memorize(self, seq, targets, weights, cache, logits, nll):
        run = self.run
        if run.method == "locas-mlp":
            self.grow_mlp(seq, cache, nll, weights)
            if run.mlp_update == "nlsvd":
                return
            cache = None
        for _ in range(run.steps_per_chunk):
            if cache is None:
                logits, cache = self.forward(seq[:-1])
            loss, dlogits = bbmod.lm_loss(logits, targets, weights)
            if not math.isfinite(loss):
                raise NumericalError("non-finite loss during memorization")
            self._step(cache, dlogits)
            cache = None


def _spread(positions, r):
    positions = np.asarray(positions)
    if r > len(positions):
        raise CapacityError(f"cannot pick {r} positions from a chunk of {len(positions)}")
    idx = np.linspace(0, len(positions) - 1, r).round().astype(int)
    return positions[idx].tolist()


def stream_eval(backbone, run: RunConfig, document, doc_id=0, return_state=False):
    """Score a document chunk by chunk; returns a list of :class:`EvalRecord`.

    Records are emitted every ``run.record_every`` target tokens (default:
    every chunk) and at the end; ``nll`` is the mean over the tokens since the
    previous record and ``ppl`` the running perplexity. With ``return_state``
    the result is ``(records, state)`` where ``state`` is the final memory or
    adapter (``None`` for truncation).
    """
    s = _tokens(document)
    n_targets = len(s) - 1
    if n_targets < 2 * run.chunk_size:
        raise ShapeError(f"document has {n_targets} tokens, need at least {2 * run.chunk_size}")
    if run.window + run.chunk_size - 1 > backbone.config.max_seq:
        raise ShapeError("window + chunk_size exceeds the backbone's max_seq")
    every = run.record_every or run.chunk_size
    learner = None if run.method == "trunc" else _Learner(backbone, run)

    records = []
    total = 0.0
    count = 0
    seg_sum = 0.0
    seg_n = 0
    seg_ctx = None
    next_record = every
    for in_lo, lo, hi in _chunks(n_targets, run.chunk_size, run.window):
        seq = s[in_lo:hi]
        inputs, targets = seq[:-1], seq[1:]
        weights = np.zeros(len(targets))
        weights[lo - 1 - in_lo:] = 1.0
        if learner is None or learner.needs_init:
            logits, cache = bbmod.forward(backbone, inputs)
        else:
            logits, cache = learner.forward(inputs)
        nll = bbmod.token_nll(logits, targets)
        chunk_nll = nll[weights > 0]
        if not np.all(np.isfinite(chunk_nll)):
            raise NumericalError(f"non-finite NLL at position {lo}")
        if seg_ctx is None:
            seg_ctx = lo - in_lo
        if learner is not None:
            if learner.needs_init:
                learner.initialize(seq, cache, weights)
                cache = None
            learner.memorize(seq, targets, weights, cache, logits, nll)

        for k, v in enumerate(chunk_nll):
            total += v
            count += 1
            seg_sum += v
            seg_n += 1
            pos = lo + k
            if pos >= next_record or pos == n_targets:
                records.append(EvalRecord(run.label, doc_id, pos, seg_ctx, seg_sum / seg_n,
                                          math.exp(total / count), seg_n))
                seg_sum, seg_n, seg_ctx = 0.0, 0, None
                next_record = pos + every
                if k + 1 < len(chunk_nll):
                    seg_ctx = lo + k + 1 - in_lo
    if return_state:
        state = None if learner is None else (learner.adapter if learner.adapter is not None else learner.memory)
        return records, state
    return records


def final_quarter_nll(records):
    """Token-weighted mean NLL of the records covering the last quarter of the document."""
    n = records[-1].position
    tail = [r for r in records if r.position > 0.75 * n]
    w = np.array([r.n_tokens for r in tail], dtype=np.float64)
    return float(np.sum(w * np.array([r.nll for r in tail])) / w.sum())


def records_to_csv(records, path=None):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow(rec.csv_row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def param_count(config, method, r):
    """Extra trainable scalars a method adds to a backbone with this config.

    ``config`` is a :class:`~locas.backbone.ModelConfig` or a mapping with
    ``L``, ``d``, ``m`` and optionally ``ffn_kind`` (default ``glu``).
    """
    if isinstance(config, dict):
        L, d, m, kind = config["L"], config["d"], config.get("m", 0), config.get("ffn_kind", "glu")
    else:
        L, d, m, kind = config.L, config.d, config.m, config.ffn_kind
    if method == "trunc":
        return 0
    if method == "locas-glu":
        return 3 * L * d * r
    if method == "locas-mlp":
        return 2 * L * d * r
    if method == "lowrank-baseline":
        n_ffn = 3 if kind == "glu" else 2
        return 8 * L * d * r + n_ffn * L * r * (d + m)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class AblationRow:
    strategy: str
    lr: float
    final_quarter_nll: float


@dataclass
class AblationTable:
    rows: list

    @property
    def ranking(self):
        return [row.strategy for row in sorted(self.rows, key=lambda r: r.final_quarter_nll)]

    def as_text(self):
        lines = ["strategy,lr,final_quarter_nll"]
        lines += [f"{r.strategy},{r.lr:.6g},{r.final_quarter_nll:.6g}" for r in self.rows]
        return "\n".join(lines) + "\n"


def ablate_init(backbone, document, strategies, r=16, seed=0, base: RunConfig | None = None, doc_id=0):
    """One Locas-GLU run per initialization strategy, sharing backbone, document and seed."""
    if not strategies:
        raise ValueError("strategies must not be empty")
    base = base or RunConfig()
    rows = []
    for strategy in strategies:
        run = replace(base, method="locas-glu", strategy=strategy, r=r, seed=seed,
                      lr=base.lr if base.lr is not None else None)
        recs = stream_eval(backbone, run, document, doc_id)
        rows.append(AblationRow(strategy, run.effective_lr, final_quarter_nll(recs)))
    return AblationTable(rows)


@dataclass
class WidthRow:
    r: int
    params: int
    final_quarter_nll: float


def sweep_width(backbone, document, r_values, base: RunConfig | None = None, doc_id=0):
    """Final-quarter NLL of Locas-GLU at each memory width ``r``."""
    if not r_values:
        raise ValueError("r_values must not be empty")
    base = base or RunConfig(method="locas-glu")
    for r in r_values:
        if r > backbone.config.m:
            raise CapacityError(f"r={r} exceeds backbone width m={backbone.config.m}")
    rows = []
    for r in r_values:
        run = replace(base, method="locas-glu", r=r)
        recs = stream_eval(backbone, run, document, doc_id)
        rows.append(WidthRow(r, param_count(backbone.config, "locas-glu", r), final_quarter_nll(recs)))
    return rows
