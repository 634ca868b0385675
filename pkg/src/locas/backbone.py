"""Tiny decoder-only transformer with hand-written reverse mode.

Pre-norm blocks (RMSNorm, rotary attention, FFN), no biases, untied output
head. The FFN is either a two-layer ReLU MLP (``ffn_kind="mlp"``) or a SiLU
GLU (``ffn_kind="glu"``). All FFN weight matrices are stored ``(m, d)`` with
one row per intermediate slot, so ``W_K[j]`` is the key of slot ``j`` and
``W_down[j]`` its output row.

A sideways memory and low-rank adapters can be threaded through
:func:`forward`; both are duck-typed so this module does not depend on them.
The memory must provide ``layer_forward(i, A) -> (out, cache)`` and
``layer_backward(i, dout, cache) -> (dA, grads)``; the adapter is a mapping
from weight name to a pair of factors ``(A, B)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import NumericalError, ShapeError
from .tensor_core import sigmoid

logger = logging.getLogger(__name__)

BOS = 256
EOS = 257
PAD = 258
BYTE_VOCAB = 259


@dataclass(frozen=True)
class ModelConfig:
    L: int = 2
    d: int = 64
    m: int = 256
    heads: int = 4
    vocab: int = BYTE_VOCAB
    ffn_kind: str = "mlp"
    max_seq: int = 512
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.L < 1 or self.m < 1 or self.d < 1:
            raise ShapeError("L, d and m must be positive")
        if self.d % self.heads:
            raise ShapeError(f"d={self.d} is not divisible by heads={self.heads}")
        if (self.d // self.heads) % 2:
            raise ShapeError("head dimension must be even for rotary encoding")
        if self.ffn_kind not in ("mlp", "glu"):
            raise ShapeError(f"unknown ffn_kind {self.ffn_kind!r}")

    @classmethod
    def default(cls, ffn_kind="mlp", **overrides):
        m = 256 if ffn_kind == "mlp" else 192
        return cls(**{"m": m, "ffn_kind": ffn_kind, **overrides})

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def head_dim(self):
        return self.d // self.heads

    def ffn_names(self):
        if self.ffn_kind == "mlp":
            return ("w_key", "w_value")
        return ("w_gate", "w_up", "w_down")


def weight_names(config: ModelConfig):
    """Parameter names in declaration (and checkpoint) order."""
    names = ["embed"]
    for i in range(config.L):
        p = f"layers.{i}."
        names += [p + "attn_norm", p + "wq", p + "wk", p + "wv", p + "wo", p + "ffn_norm"]
        names += [p + n for n in config.ffn_names()]
    names += ["final_norm", "head"]
    return names


def weight_shape(config: ModelConfig, name: str):
    d, m = config.d, config.m
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("embed", "head"):
        return (config.vocab, d)
    if leaf.endswith("norm"):
        return (1, d)
    if leaf in ("wq", "wk", "wv", "wo"):
        return (d, d)
    return (m, d)


@dataclass
class Backbone:
    config: ModelConfig
    weights: dict = field(repr=False)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, std: float = 0.02):
        rng = np.random.default_rng(seed)
        weights = {}
        # residual-writing projections get the usual depth-scaled init
        out_std = std / math.sqrt(2 * config.L)
        for name in weight_names(config):
            shape = weight_shape(config, name)
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("norm"):
                weights[name] = np.ones(shape)
            elif leaf in ("wo", "w_value", "w_down"):
                weights[name] = rng.normal(0.0, out_std, size=shape)
            else:
                weights[name] = rng.normal(0.0, std, size=shape)
        return cls(config, weights)

    def layer(self, i, name):
        return self.weights[f"layers.{i}.{name}"]

    def copy(self):
        return Backbone(self.config, {k: v.copy() for k, v in self.weights.items()})

    def checksum(self):
        """Order-sensitive digest of all weights, used to prove they were not touched."""
        import hashlib

        h = hashlib.sha256()
        for name in weight_names(self.config):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()


@dataclass
class ActivationTrace:
    """Per-layer FFN inputs ``A`` (``T x d``) and, for GLU, FFN intermediates ``M`` (``T x m``)."""

    ffn_input: list
    ffn_hidden: list


@dataclass
class Gradients:
    backbone: dict
    memory: list | None
    adapter: dict | None
    # gradient w.r.t. each layer's output hidden state, same layout as the input tokens
    hidden: list


# -- small differentiable pieces -------------------------------------------------


def _rms_forward(x, g, eps):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xh = x / r
    return xh * g, (xh, r)


def _rms_backward(dy, g, cache):
    xh, r = cache
    dg = np.sum(dy * xh, axis=tuple(range(dy.ndim - 1)))[None, :]
    dxh = dy * g
    dx = (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True)) / r
    return dx, dg


def _rope_tables(T, head_dim, base):
    half = head_dim // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.arange(T)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def _rope(x, cos, sin, inverse=False):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    if inverse:
        sin = -sin
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _linear(x, W, factors):
    y = x @ W.T
    if factors is not None:
        A, B = factors
        y = y + (x @ A.T) @ B.T
    return y


def _linear_backward(dy, x, W, factors, want_w):
    """Returns ``(dx, dW or None, (dA, dB) or None)`` for ``y = x W^T + x A^T B^T``."""
    dx = dy @ W
    dW = _outer_sum(dy, x) if want_w else None
    dfac = None
    if factors is not None:
        A, B = factors
        xa = x @ A.T
        dxa = dy @ B
        dx = dx + dxa @ A
        dfac = (_outer_sum(dxa, x), _outer_sum(dy, xa))
    return dx, dW, dfac


def _outer_sum(dy, x):
    n = math.prod(dy.shape[:-1])
    return dy.reshape(n, dy.shape[-1]).T @ x.reshape(n, x.shape[-1])


# -- forward / backward ----------------------------------------------------------


def _as_batch(tokens, config):
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq={config.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab):
        raise ShapeError("token id out of vocabulary range")
    return tokens.astype(np.int64), squeeze


def forward(backbone: Backbone, tokens, memory=None, adapter=None):
    """Run the model; returns ``(logits, cache)``.

    ``tokens`` may be 1-D ``(T,)`` or batched ``(B, T)``; logits follow the
    same layout with a trailing vocabulary axis. The cache feeds
    :func:`backward` and :func:`trace_from_cache`.
    """
    cfg = backbone.config
    toks, squeeze = _as_batch(tokens, cfg)
    if memory is not None and memory.n_layers != cfg.L:
        raise ShapeError(f"memory has {memory.n_layers} layers, backbone has {cfg.L}")
    Bsz, T = toks.shape
    H, dh = cfg.heads, cfg.head_dim
    cos, sin = _rope_tables(T, dh, cfg.rope_base)
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    fac = adapter.factors if adapter is not None else {}

    x = backbone.weights["embed"][toks]
    layers = []
    for i in range(cfg.L):
        p = f"layers.{i}."
        c = {"x_in": x}
        h1, c["rms1"] = _rms_forward(x, backbone.weights[p + "attn_norm"], cfg.norm_eps)
        c["h1"] = h1
        qkv = []
        for nm in ("wq", "wk", "wv"):
            y = _linear(h1, backbone.weights[p + nm], fac.get(p + nm))
            qkv.append(y.reshape(Bsz, T, H, dh).transpose(0, 2, 1, 3))
        q, k, v = qkv
        qr, kr = _rope(q, cos, sin), _rope(k, cos, sin)
        scores = (qr @ kr.transpose(0, 1, 3, 2)) / math.sqrt(dh)
        scores = np.where(mask, -np.inf, scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        P = np.exp(scores)
        P /= P.sum(axis=-1, keepdims=True)
        o = (P @ v).transpose(0, 2, 1, 3).reshape(Bsz, T, cfg.d)
        c.update(qr=qr, kr=kr, v=v, P=P, o=o)
        x1 = x + _linear(o, backbone.weights[p + "wo"], fac.get(p + "wo"))
        A, c["rms2"] = _rms_forward(x1, backbone.weights[p + "ffn_norm"], cfg.norm_eps)
        c["A"] = A
        if cfg.ffn_kind == "mlp":
            z = _linear(A, backbone.weights[p + "w_key"], fac.get(p + "w_key"))
            act = np.maximum(z, 0.0)
            f = _linear(act, backbone.weights[p + "w_value"].T, fac.get(p + "w_value"))
            c.update(z=z, hid=act)
        else:
            gz = _linear(A, backbone.weights[p + "w_gate"], fac.get(p + "w_gate"))
            uz = _linear(A, backbone.weights[p + "w_up"], fac.get(p + "w_up"))
            sg = sigmoid(gz)
            M = gz * sg * uz
            f = _linear(M, backbone.weights[p + "w_down"].T, fac.get(p + "w_down"))
            c.update(gz=gz, uz=uz, sg=sg, hid=M)
        if memory is not None:
            mo, c["mem"] = memory.layer_forward(i, A)
            f = f + mo
        x = x1 + f
        layers.append(c)

    hf, rmsf = _rms_forward(x, backbone.weights["final_norm"], cfg.norm_eps)
    logits = hf @ backbone.weights["head"].T
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    cache = {
        "tokens": toks, "squeeze": squeeze, "layers": layers, "hf": hf, "rmsf": rmsf,
        "cos": cos, "sin": sin, "memory": memory, "adapter": adapter, "backbone": backbone,
    }
    return (logits[0] if squeeze else logits), cache


def trace_from_cache(cache) -> ActivationTrace:
    sq = cache["squeeze"]
    pick = (lambda a: a[0]) if sq else (lambda a: a)
    return ActivationTrace(
        ffn_input=[pick(c["A"]) for c in cache["layers"]],
        ffn_hidden=[pick(c["hid"]) for c in cache["layers"]],
    )


def forward_with_trace(backbone: Backbone, tokens, memory=None, adapter=None):
    """Logits plus the per-layer FFN inputs/intermediates for every position."""
    logits, cache = forward(backbone, tokens, memory=memory, adapter=adapter)
    return logits, trace_from_cache(cache)


def backward(cache, dlogits, want_backbone=True):
    """Reverse-mode pass for a scalar loss whose logit gradient is ``dlogits``.

    Memory and adapter gradients are produced whenever those objects took part
    in the forward pass; backbone weight gradients only if ``want_backbone``.
    Nothing is updated in place.
    """
    bb = cache["backbone"]
    cfg = bb.config
    W = bb.weights
    memory, adapter = cache["memory"], cache["adapter"]
    fac = adapter.factors if adapter is not None else {}
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if cache["squeeze"]:
        dlogits = dlogits[None]
    Bsz, T = cache["tokens"].shape
    H, dh = cfg.heads, cfg.head_dim
    cos, sin = cache["cos"], cache["sin"]

    gb = {}
    ga = {}
    gm = [None] * cfg.L if memory is not None else None

    def keep(name, dW, dfac):
        if dW is not None:
            gb[name] = dW
        if dfac is not None:
            ga[name] = dfac

    if want_backbone:
        gb["head"] = _outer_sum(dlogits, cache["hf"])
    dhf = dlogits @ W["head"]
    dx, dg = _rms_backward(dhf, W["final_norm"], cache["rmsf"])
    if want_backbone:
        gb["final_norm"] = dg

    hidden = [None] * cfg.L
    for i in reversed(range(cfg.L)):
        p = f"layers.{i}."
        c = cache["layers"][i]
        hidden[i] = dx
        df = dx
        dA = np.zeros_like(c["A"])
        if memory is not None:
            dA_mem, gm[i] = memory.layer_backward(i, df, c["mem"])
            dA = dA + dA_mem
        if cfg.ffn_kind == "mlp":
            dact, dW, dfac = _linear_backward(df, c["hid"], W[p + "w_value"].T, fac.get(p + "w_value"), want_backbone)
            keep(p + "w_value", None if dW is None else dW.T, dfac)
            dz = dact * (c["z"] > 0)
            dA_f, dW, dfac = _linear_backward(dz, c["A"], W[p + "w_key"], fac.get(p + "w_key"), want_backbone)
            keep(p + "w_key", dW, dfac)
            dA = dA + dA_f
        else:
            dM, dW, dfac = _linear_backward(df, c["hid"], W[p + "w_down"].T, fac.get(p + "w_down"), want_backbone)
            keep(p + "w_down", None if dW is None else dW.T, dfac)
            gz, uz, sg = c["gz"], c["uz"], c["sg"]
            duz = dM * gz * sg
            dgz = dM * uz * sg * (1.0 + gz * (1.0 - sg))
            dA_g, dW, dfac = _linear_backward(dgz, c["A"], W[p + "w_gate"], fac.get(p + "w_gate"), want_backbone)
            keep(p + "w_gate", dW, dfac)
            dA_u, dW, dfac = _linear_backward(duz, c["A"], W[p + "w_up"], fac.get(p + "w_up"), want_backbone)
            keep(p + "w_up", dW, dfac)
            dA = dA + dA_g + dA_u
        dx1, dg = _rms_backward(dA, W[p + "ffn_norm"], c["rms2"])
        if want_backbone:
            gb[p + "ffn_norm"] = dg
        dx1 = dx1 + dx

        do, dW, dfac = _linear_backward(dx1, c["o"], W[p + "wo"], fac.get(p + "wo"), want_backbone)
        keep(p + "wo", dW, dfac)
        do = do.reshape(Bsz, T, H, dh).transpose(0, 2, 1, 3)
        P = c["P"]
        dv = P.transpose(0, 1, 3, 2) @ do
        dP = do @ c["v"].transpose(0, 1, 3, 2)
        dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) / math.sqrt(dh)
        dqr = dS @ c["kr"]
        dkr = dS.transpose(0, 1, 3, 2) @ c["qr"]
        dq = _rope(dqr, cos, sin, inverse=True)
        dk = _rope(dkr, cos, sin, inverse=True)
        dh1 = np.zeros_like(c["h1"])
        for nm, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
            dproj = dproj.transpose(0, 2, 1, 3).reshape(Bsz, T, cfg.d)
            dpart, dW, dfac = _linear_backward(dproj, c["h1"], W[p + nm], fac.get(p + nm), want_backbone)
            keep(p + nm, dW, dfac)
            dh1 = dh1 + dpart
        dxa, dg = _rms_backward(dh1, W[p + "attn_norm"], c["rms1"])
        if want_backbone:
            gb[p + "attn_norm"] = dg
        dx = dx1 + dxa

    if want_backbone:
        demb = np.zeros_like(W["embed"])
        np.add.at(demb, cache["tokens"].ravel(), dx.reshape(-1, cfg.d))
        gb["embed"] = demb

    if cache["squeeze"]:
        hidden = [h[0] for h in hidden]
    return Gradients(
        backbone=gb,
        memory=gm,
        adapter=ga if adapter is not None else None,
        hidden=hidden,
    )


# -- loss ------------------------------------------------------------------------


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def token_nll(logits, targets):
    """Per-position negative log-likelihood in nats."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    targets = np.asarray(targets)
    return -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


def lm_loss(logits, targets, weights=None):
    """Mean NLL over positions; with ``weights`` a weighted mean (zero weights skip positions).

    Returns ``(loss, dlogits)`` where ``dlogits`` is the gradient of the loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    if weights is None:
        weights = np.ones(targets.shape)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(np.sum(nll * weights) / total)
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    dlogits = (probs - onehot) * (weights / total)[..., None]
    return loss, dlogits


def backward_hidden_grads(backbone: Backbone, tokens, positions=None, memory=None, adapter=None, cache=None):
    """Per-token hidden-state gradients of the next-token log-likelihood.

    The model reads ``tokens[:-1]``. For every input position ``t`` in
    ``positions`` (default: all of them) the result holds ``G[t]`` of shape
    ``(L, d)``: the gradient of ``log p(tokens[t + 1] | tokens[:t + 1])`` with
    respect to each layer's output hidden state at position ``t``. Each
    position needs its own reverse pass so other positions' losses do not leak
    in. A ``cache`` from ``forward(backbone, tokens[:-1], ...)`` may be reused.

    Returns ``(grads, cache)``.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ShapeError("backward_hidden_grads expects a single sequence")
    T = tokens.shape[0] - 1
    positions = list(range(T)) if positions is None else list(positions)
    cfg = backbone.config
    if not positions:
        return np.zeros((0, cfg.L, cfg.d)), cache
    if cache is None:
        logits, cache = forward(backbone, tokens[:-1], memory=memory, adapter=adapter)
    else:
        if cache["tokens"].shape != (1, T):
            raise ShapeError("cache does not match tokens[:-1]")
        logits = cache["hf"][0] @ backbone.weights["head"].T
    probs = np.exp(log_softmax(logits))
    out = np.empty((len(positions), cfg.L, cfg.d))
    for n, t in enumerate(positions):
        if not 0 <= t < T:
            raise ShapeError(f"position {t} has no next token")
        dl = np.zeros((T, cfg.vocab))
        # d(-log p)/dlogits; negated below to get the ascent direction
        dl[t] = probs[t]
        dl[t, tokens[t + 1]] -= 1.0
        g = backward(cache, dl, want_backbone=False)
        out[n] = -np.stack([h[t] for h in g.hidden])
    return out, cache


# -- training --------------------------------------------------------------------


class Adam:
    """Adam with decoupled bookkeeping over a dict of arrays."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.95), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _cosine_lr(step, steps, lr, warmup):
    if step < warmup:
        return lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, steps - warmup)
    return lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def encode_document(doc):
    """Byte-level tokens with a leading BOS."""
    if isinstance(doc, str):
        doc = doc.encode("utf-8")
    return np.concatenate([[BOS], np.frombuffer(bytes(doc), dtype=np.uint8)]).astype(np.int64)


def train_tiny_backbone(corpus, config: ModelConfig, steps=2000, lr=3e-3, seed=0,
                        batch_size=2, seq_len=None, log_every=100, return_history=False):
    """Train a backbone on byte documents with Adam and cosine decay.

    ``corpus`` is a list of documents (``bytes``/``str`` or token arrays that
    already start with BOS). With ``steps=0`` the seeded initialization is
    returned unchanged. ``seq_len`` defaults to ``config.max_seq``; rotary
    attention trained on short windows does not extrapolate to longer ones.
    """
    if len(corpus) == 0:
        raise ShapeError("corpus must contain at least one document")
    docs = [np.asarray(d, dtype=np.int64) if isinstance(d, np.ndarray) else encode_document(d) for d in corpus]
    seq_len = config.max_seq if seq_len is None else min(seq_len, config.max_seq)
    model = Backbone.init(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(model.weights, lr=lr)
    lengths = np.array([len(d) for d in docs])
    if np.all(lengths < 2):
        raise ShapeError("documents are too short to train on")
    history = []
    warmup = max(1, min(100, steps // 10))
    for step in range(steps):
        batch = np.full((batch_size, seq_len + 1), PAD, dtype=np.int64)
        weights = np.zeros((batch_size, seq_len))
        for b in range(batch_size):
            doc = docs[rng.choice(len(docs), p=lengths / lengths.sum())]
            start = rng.integers(0, max(1, len(doc) - seq_len - 1) + 1)
            piece = doc[start:start + seq_len + 1]
            batch[b, :len(piece)] = piece
            weights[b, :len(piece) - 1] = 1.0
        logits, cache = forward(model, batch[:, :-1])
        loss, dlogits = lm_loss(logits, batch[:, 1:], weights)
        if not np.isfinite(loss):
            raise NumericalError(f"training diverged at step {step}")
        grads = backward(cache, dlogits)
        opt.step(model.weights, grads.backbone, lr=_cosine_lr(step, steps, lr, warmup))
        history.append(loss)
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.4f", step, loss)
    if return_history:
        return model, history
    return model
