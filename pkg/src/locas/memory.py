"""Sideways parametric memory attached next to each backbone FFN.

Two variants share one interface (``layer_forward`` / ``layer_backward``) so the
backbone can thread either through its forward and reverse passes:

* :class:`LocasMlpMemory` -- ``V^T relu(K^T A)``, grown one slot per memorized
  token from the token's normalized FFN input and its globally normalized
  hidden-state gradient.
* :class:`LocasGluMemory` -- ``tau * V^T (silu(G^T A) * K^T A)``, initialized by
  cloning backbone FFN rows chosen by activation importance, with ``V = 0``.

Keys and gates are stored ``(d, r)`` (one column per slot) and values ``(r, d)``
(one row per slot).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bbmod
from .errors import CapacityError, DegenerateActivation, NumericalError, ShapeError
from .tensor_core import global_normalize, normalize_columns, normalize_rows, sigmoid

STRATEGIES = ("topk", "bottomk", "random-selection", "gaussian", "normalized-activation")
CLONING = ("topk", "bottomk", "random-selection")

# per-strategy step sizes; normalized-activation needs a much smaller one
DEFAULT_LR = {"normalized-activation": 1e-6}
DEFAULT_CLONE_LR = 4e-3
DEFAULT_EPSILON = 1e-2


def default_lr(strategy):
    return DEFAULT_LR.get(strategy, DEFAULT_CLONE_LR)


@dataclass
class MlpSlots:
    K: np.ndarray  # (d, r)
    V: np.ndarray  # (r, d)

    @property
    def rank(self):
        return self.K.shape[1]


@dataclass
class GluSlots:
    G: np.ndarray  # (d, r)
    K: np.ndarray  # (d, r)
    V: np.ndarray  # (r, d)
    tau: float = 1.0
    selection: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def rank(self):
        return self.K.shape[1]


def _check_input(A, d):
    A = np.asarray(A, dtype=np.float64)
    if A.shape[-1] != d:
        raise ShapeError(f"input has dimension {A.shape[-1]}, memory expects {d}")
    return A


def mlp_forward(layer: MlpSlots, A):
    """``V^T relu(K^T A)`` for a single vector or a stack of row vectors."""
    A = _check_input(A, layer.K.shape[0])
    return np.maximum(A @ layer.K, 0.0) @ layer.V


def glu_forward(layer: GluSlots, A):
    """``V^T (silu(G^T A) * K^T A)``, *without* the output scale ``tau``."""
    A = _check_input(A, layer.K.shape[0])
    g = A @ layer.G
    return (g * sigmoid(g) * (A @ layer.K)) @ layer.V


def _clip_columns(M):
    norms = np.sqrt(np.sum(M * M, axis=0))
    return M / np.maximum(norms, 1.0)[None, :]


def _clip_rows(M):
    norms = np.sqrt(np.sum(M * M, axis=1))
    return M / np.maximum(norms, 1.0)[:, None]


class _MemoryBase:
    kind = ""
    matrices = ()

    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def d(self):
        return self.layers[0].K.shape[0]

    @property
    def ranks(self):
        return [layer.rank for layer in self.layers]

    def parameters(self):
        """Live references to every trainable matrix, keyed ``layers.{i}.{name}``."""
        return {f"layers.{i}.{n}": getattr(layer, n) for i, layer in enumerate(self.layers) for n in self.matrices}

    def n_params(self):
        return int(sum(p.size for p in self.parameters().values()))

    def flat_grads(self, layer_grads):
        return {f"layers.{i}.{n}": g[n] for i, g in enumerate(layer_grads) for n in self.matrices}

    def clip_weight_norms(self):
        """Rescale every slot vector whose L2 norm exceeds 1 back to norm 1.

        Slot vectors are the columns of the key/gate matrices and the rows of
        the value matrix. Updates happen in place so optimizer references stay valid.
        """
        for layer in self.layers:
            for n in self.matrices:
                M = getattr(layer, n)
                M[...] = _clip_rows(M) if n == "V" else _clip_columns(M)

    def copy(self):
        raise NotImplementedError


class LocasMlpMemory(_MemoryBase):
    kind = "mlp"
    matrices = ("K", "V")

    def __init__(self, layers, epsilon=DEFAULT_EPSILON):
        super().__init__(layers)
        self.epsilon = epsilon

    @classmethod
    def empty(cls, n_layers, d, epsilon=DEFAULT_EPSILON):
        return cls([MlpSlots(np.zeros((d, 0)), np.zeros((0, d))) for _ in range(n_layers)], epsilon)

    def copy(self):
        return LocasMlpMemory([MlpSlots(l.K.copy(), l.V.copy()) for l in self.layers], self.epsilon)

    def layer_forward(self, i, A):
        layer = self.layers[i]
        z = A @ layer.K
        a = np.maximum(z, 0.0)
        return a @ layer.V, (A, z, a)

    def layer_backward(self, i, dout, cache):
        layer = self.layers[i]
        A, z, a = cache
        dz = (dout @ layer.V.T) * (z > 0)
        grads = {"K": bbmod._outer_sum(A, dz), "V": bbmod._outer_sum(a, dout)}
        return dz @ layer.K.T, grads


def mlp_append_slot(mem: LocasMlpMemory, activations, gradients, epsilon=None):
    """Grow every layer by one slot memorizing a single token.

    ``activations`` holds the token's FFN input at each layer ``(L, d)`` and
    ``gradients`` the hidden-state gradient of its log-likelihood ``(L, d)``.
    Layer ``i`` gets key ``A_i / |A_i|`` and value ``epsilon * GN(G)_i`` where
    ``GN`` normalizes over all layers jointly, so at the memorized input the
    new slot adds exactly ``epsilon * |A_i| * GN(G)_i``.
    """
    eps = mem.epsilon if epsilon is None else epsilon
    A = np.asarray(activations, dtype=np.float64)
    if A.shape != (mem.n_layers, mem.d):
        raise ShapeError(f"activations must be {(mem.n_layers, mem.d)}, got {A.shape}")
    keys, norms, degenerate = normalize_rows(A, floor=0.0)
    if np.any(degenerate) or np.any(norms == 0):
        raise DegenerateActivation("cannot build a key from a zero activation")
    values = eps * global_normalize(gradients)
    for i, layer in enumerate(mem.layers):
        layer.K = np.concatenate([layer.K, keys[i][:, None]], axis=1)
        layer.V = np.concatenate([layer.V, values[i][None, :]], axis=0)


class LocasGluMemory(_MemoryBase):
    kind = "glu"
    matrices = ("G", "K", "V")

    @property
    def tau(self):
        return [layer.tau for layer in self.layers]

    def copy(self):
        return LocasGluMemory([
            GluSlots(l.G.copy(), l.K.copy(), l.V.copy(), l.tau, l.selection.copy()) for l in self.layers
        ])

    def layer_forward(self, i, A):
        layer = self.layers[i]
        g = A @ layer.G
        u = A @ layer.K
        sg = sigmoid(g)
        mix = g * sg * u
        return layer.tau * (mix @ layer.V), (A, g, u, sg, mix)

    def layer_backward(self, i, dout, cache):
        layer = self.layers[i]
        A, g, u, sg, mix = cache
        dmix = layer.tau * (dout @ layer.V.T)
        du = dmix * g * sg
        dg = dmix * u * sg * (1.0 + g * (1.0 - sg))
        grads = {
            "G": bbmod._outer_sum(A, dg),
            "K": bbmod._outer_sum(A, du),
            "V": layer.tau * bbmod._outer_sum(mix, dout),
        }
        return dg @ layer.G.T + du @ layer.K.T, grads


def clip_weight_norms(mem):
    mem.clip_weight_norms()


def activation_importance(hidden):
    """Mean absolute FFN intermediate activation per dimension over ``T`` tokens."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise ShapeError("activation importance needs a (T, m) trace with T >= 1")
    return np.mean(np.abs(hidden), axis=0)


def select_indices(alpha, r, strategy, rng=None):
    alpha = np.asarray(alpha, dtype=np.float64)
    m = alpha.shape[0]
    if r > m:
        raise CapacityError(f"cannot select r={r} of m={m} dimensions")
    if strategy == "topk":
        return np.argsort(-alpha, kind="stable")[:r]
    if strategy == "bottomk":
        return np.argsort(alpha, kind="stable")[:r]
    if strategy == "random-selection":
        rng = rng if rng is not None else np.random.default_rng(0)
        return np.sort(rng.choice(m, size=r, replace=False))
    raise ValueError(f"{strategy!r} is not a selection strategy")


def output_scale(w_down, r):
    """``tau = (1/r) * mean row norm of the backbone down-projection``."""
    if r < 1:
        raise CapacityError("output scale needs r >= 1")
    w_down = np.asarray(w_down, dtype=np.float64)
    return float(np.mean(np.sqrt(np.sum(w_down * w_down, axis=1))) / r)


def glu_init_from_backbone(w_gate, w_up, w_down, alpha, r, strategy="topk", seed=0):
    """Build one Locas-GLU layer from the backbone FFN at that layer.

    Cloning strategies copy the selected rows of ``w_up``/``w_gate`` as unit
    key/gate columns; ``gaussian`` draws them from ``N(0, 1/d)``. Values
    start at zero so the layer contributes nothing until trained.
    """
    m, d = np.shape(w_up)
    if r > m:
        raise CapacityError(f"r={r} exceeds backbone width m={m}")
    rng = np.random.default_rng(seed)
    if strategy in CLONING:
        sel = select_indices(alpha, r, strategy, rng)
        K = normalize_rows(np.asarray(w_up)[sel], floor=0.0)[0].T.copy()
        G = normalize_rows(np.asarray(w_gate)[sel], floor=0.0)[0].T.copy()
    elif strategy == "gaussian":
        sel = np.zeros(0, dtype=np.int64)
        G = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, r))
        K = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, r))
    else:
        raise ValueError(f"unknown or non-cloning strategy {strategy!r}")
    tau = output_scale(w_down, r) if r else 0.0
    return GluSlots(G=G, K=K, V=np.zeros((r, d)), tau=tau, selection=np.asarray(sel, dtype=np.int64))


def init_glu_memory(backbone, trace, r, strategy="topk", seed=0, hidden_grads=None, positions=None,
                    epsilon=DEFAULT_EPSILON):
    """Locas-GLU memory for every layer of a GLU backbone.

    ``trace`` is the backbone's :class:`~locas.backbone.ActivationTrace` on the
    first chunk. ``normalized-activation`` additionally needs the per-token
    hidden-state gradients ``hidden_grads[n]`` (``(L, d)``) at ``positions[n]``;
    it uses the normalized FFN input as both key and gate of slot ``n`` and the
    MLP value rule for its value.
    """
    cfg = backbone.config
    if cfg.ffn_kind != "glu":
        raise ShapeError("Locas-GLU initialization needs a GLU backbone")
    if r > cfg.m:
        raise CapacityError(f"r={r} exceeds backbone width m={cfg.m}")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    layers = []
    if strategy == "normalized-activation":
        if hidden_grads is None or positions is None or len(positions) != r:
            raise ShapeError("normalized-activation init needs r positions and their hidden gradients")
        values = np.stack([epsilon * global_normalize(g) for g in hidden_grads])  # (r, L, d)
        for i in range(cfg.L):
            A = np.asarray(trace.ffn_input[i])[list(positions)]
            keys, norms, degenerate = normalize_rows(A, floor=0.0)
            if np.any(norms == 0):
                raise DegenerateActivation("zero FFN input at a memorized position")
            layers.append(GluSlots(
                G=keys.T.copy(), K=keys.T.copy(), V=values[:, i, :].copy(),
                tau=output_scale(backbone.layer(i, "w_down"), r),
                selection=np.asarray(positions, dtype=np.int64),
            ))
        return LocasGluMemory(layers)
    for i in range(cfg.L):
        alpha = activation_importance(trace.ffn_hidden[i])
        layers.append(glu_init_from_backbone(
            backbone.layer(i, "w_gate"), backbone.layer(i, "w_up"), backbone.layer(i, "w_down"),
            alpha, r, strategy, seed=int(rng.integers(2**31)),
        ))
    return LocasGluMemory(layers)


# -- optimization ----------------------------------------------------------------


class MemoryOptimizer:
    """Plain SGD or Adam over a memory's parameters.

    State is keyed by parameter name and reset for any parameter whose shape
    changed (e.g. after MLP slots were appended or compressed).
    """

    def __init__(self, kind="sgd", betas=(0.9, 0.999), eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.b1, self.b2 = betas
        self.eps = eps
        self.state = {}

    def step(self, params, grads, lr):
        for name, g in grads.items():
            p = params[name]
            if self.kind == "sgd":
                p -= lr * g
                continue
            st = self.state.get(name)
            if st is None or st[0].shape != p.shape:
                st = self.state[name] = [np.zeros_like(p), np.zeros_like(p), 0]
            st[2] += 1
            st[0] *= self.b1
            st[0] += (1 - self.b1) * g
            st[1] *= self.b2
            st[1] += (1 - self.b2) * g * g
            mhat = st[0] / (1 - self.b1 ** st[2])
            vhat = st[1] / (1 - self.b2 ** st[2])
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


def memory_loss_and_grads(backbone, mem, tokens, weights=None, adapter=None):
    """Mean next-token NLL of ``tokens`` with the memory attached and its gradients."""
    tokens = np.asarray(tokens)
    logits, cache = bbmod.forward(backbone, tokens[..., :-1], memory=mem, adapter=adapter)
    loss, dlogits = bbmod.lm_loss(logits, tokens[..., 1:], weights)
    grads = bbmod.backward(cache, dlogits, want_backbone=False)
    return loss, grads


def apply_update(mem, grads, lr, optimizer, clip=True):
    optimizer.step(mem.parameters(), mem.flat_grads(grads.memory), lr)
    if clip:
        mem.clip_weight_norms()


def memory_grad_step(backbone, mem, tokens, lr=None, steps=1, optimizer="sgd", weights=None):
    """Gradient descent on the memory alone; backbone weights are never written.

    ``tokens`` is the chunk (its first token is context only). Returns the
    loss measured before each step; norms are clipped after every step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr is None:
        lr = DEFAULT_CLONE_LR
    opt = optimizer if isinstance(optimizer, MemoryOptimizer) else MemoryOptimizer(optimizer)
    history = []
    for _ in range(steps):
        loss, grads = memory_loss_and_grads(backbone, mem, tokens, weights)
        if not np.isfinite(loss):
            raise NumericalError("memory update produced a non-finite loss")
        history.append(loss)
        apply_update(mem, grads, lr, opt)
    return history


def combined_forward(backbone, mem, tokens):
    """Backbone forward with the memory's (scaled) output added to every FFN output."""
    return bbmod.forward_with_trace(backbone, tokens, memory=mem)
