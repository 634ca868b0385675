import numpy as np
import pytest

from locas import backbone as B
from locas.errors import CapacityError, DegenerateActivation, DegenerateGradient, ShapeError
from locas.memory import (
    GluSlots,
    LocasGluMemory,
    LocasMlpMemory,
    MlpSlots,
    MemoryOptimizer,
    activation_importance,
    glu_forward,
    glu_init_from_backbone,
    init_glu_memory,
    memory_grad_step,
    memory_loss_and_grads,
    mlp_append_slot,
    mlp_forward,
    output_scale,
    select_indices,
)

from oracles import central_difference, global_normalize_loop, rel_err, relu_ffn_loop


def glu_backbone(d=16, m=24, seed=0):
    cfg = B.ModelConfig(L=2, d=d, m=m, heads=2, ffn_kind="glu", max_seq=64)
    return B.Backbone.init(cfg, seed=seed, std=0.3)


def mlp_backbone(d=16, m=24, seed=0):
    cfg = B.ModelConfig(L=2, d=d, m=m, heads=2, ffn_kind="mlp", max_seq=64)
    return B.Backbone.init(cfg, seed=seed, std=0.3)


def first_chunk_trace(bb, toks):
    return B.forward_with_trace(bb, toks)[1]


def test_mlp_forward_matches_slot_loop():
    rng = np.random.default_rng(0)
    K, V = rng.normal(size=(8, 5)), rng.normal(size=(5, 8))
    x = rng.normal(size=8)
    np.testing.assert_allclose(mlp_forward(MlpSlots(K, V), x), relu_ffn_loop(K, V, x), atol=1e-13)


def test_glu_forward_with_zero_values_is_zero():
    rng = np.random.default_rng(1)
    layer = GluSlots(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), np.zeros((3, 6)), 0.5, np.arange(3))
    assert np.all(glu_forward(layer, rng.normal(size=(4, 6))) == 0)


def test_forward_rejects_wrong_width():
    layer = GluSlots(np.zeros((6, 2)), np.zeros((6, 2)), np.zeros((2, 6)), 1.0, np.arange(2))
    with pytest.raises(ShapeError):
        glu_forward(layer, np.zeros(5))


def test_activation_importance_and_selection():
    M = np.array([[1.0, -4.0, 0.5], [-1.0, 2.0, 0.5]])
    alpha = activation_importance(M)
    np.testing.assert_allclose(alpha, [1.0, 3.0, 0.5])
    assert select_indices(alpha, 2, "topk").tolist() == [1, 0]
    assert select_indices(alpha, 2, "bottomk").tolist() == [2, 0]
    picked = select_indices(alpha, 2, "random-selection", np.random.default_rng(0))
    assert len(set(picked.tolist())) == 2
    with pytest.raises(CapacityError):
        select_indices(alpha, 4, "topk")


def test_topk_ties_break_by_index():
    assert select_indices(np.array([1.0, 2.0, 2.0, 2.0]), 2, "topk").tolist() == [1, 2]


def test_output_scale():
    W = np.array([[3.0, 4.0], [0.0, 1.0]])
    assert output_scale(W, 2) == pytest.approx(1.5)
    with pytest.raises(CapacityError):
        output_scale(W, 0)


@pytest.mark.parametrize("strategy", ["topk", "bottomk", "random-selection"])
def test_cloning_copies_normalized_rows(strategy):
    rng = np.random.default_rng(2)
    w_gate, w_up, w_down = rng.normal(size=(10, 4)), rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    alpha = rng.random(10)
    layer = glu_init_from_backbone(w_gate, w_up, w_down, alpha, 3, strategy, seed=5)
    sel = layer.selection
    np.testing.assert_allclose(layer.K, (w_up[sel] / np.linalg.norm(w_up[sel], axis=1, keepdims=True)).T)
    np.testing.assert_allclose(layer.G, (w_gate[sel] / np.linalg.norm(w_gate[sel], axis=1, keepdims=True)).T)
    assert np.all(layer.V == 0)
    assert layer.tau == pytest.approx(np.mean(np.linalg.norm(w_down, axis=1)) / 3)
    if strategy == "topk":
        assert set(sel.tolist()) == set(np.argsort(-alpha)[:3].tolist())


def test_gaussian_init_statistics():
    rng = np.random.default_rng(3)
    d = 64
    layer = glu_init_from_backbone(rng.normal(size=(256, d)), rng.normal(size=(256, d)),
                                   rng.normal(size=(256, d)), np.ones(256), 128, "gaussian", seed=1)
    assert abs(np.var(layer.K) - 1 / d) < 0.1 / d
    assert np.all(layer.V == 0)
    assert layer.selection.size == 0


def test_init_glu_memory_rejects_bad_inputs():
    bb = glu_backbone()
    trace = first_chunk_trace(bb, np.arange(10))
    with pytest.raises(CapacityError):
        init_glu_memory(bb, trace, 25)
    with pytest.raises(ShapeError):
        init_glu_memory(mlp_backbone(), trace, 4)
    with pytest.raises(ShapeError):
        init_glu_memory(bb, trace, 4, "normalized-activation")


def test_normalized_activation_init():
    bb = glu_backbone()
    toks = np.random.default_rng(4).integers(0, 256, size=12)
    _, cache = B.forward(bb, toks[:-1])
    trace = B.trace_from_cache(cache)
    pos = [1, 5, 9]
    grads, _ = B.backward_hidden_grads(bb, toks, pos, cache=cache)
    mem = init_glu_memory(bb, trace, 3, "normalized-activation", hidden_grads=grads, positions=pos, epsilon=0.01)
    for i, layer in enumerate(mem.layers):
        A = trace.ffn_input[i][pos]
        np.testing.assert_allclose(layer.K, (A / np.linalg.norm(A, axis=1, keepdims=True)).T)
        np.testing.assert_array_equal(layer.G, layer.K)
        for n in range(3):
            np.testing.assert_allclose(layer.V[n], 0.01 * global_normalize_loop(grads[n])[i], rtol=1e-12)


def test_mlp_append_contract():
    rng = np.random.default_rng(5)
    L, d = 3, 8
    mem = LocasMlpMemory.empty(L, d, epsilon=0.01)
    A, G = rng.normal(size=(L, d)), rng.normal(size=(L, d))
    mlp_append_slot(mem, A, G)
    gn = global_normalize_loop(G)
    for i, layer in enumerate(mem.layers):
        out, _ = mem.layer_forward(i, A[i][None])
        np.testing.assert_allclose(out[0], 0.01 * np.linalg.norm(A[i]) * gn[i], atol=1e-12)
        away = -A[i]
        assert np.all(mem.layer_forward(i, away[None])[0] == 0)
    assert mem.ranks == [1, 1, 1]


def test_mlp_append_degenerate_inputs():
    mem = LocasMlpMemory.empty(2, 4)
    with pytest.raises(DegenerateGradient):
        mlp_append_slot(mem, np.ones((2, 4)), np.zeros((2, 4)))
    with pytest.raises(DegenerateActivation):
        mlp_append_slot(mem, np.zeros((2, 4)), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        mlp_append_slot(mem, np.ones((3, 4)), np.ones((3, 4)))
    assert mem.ranks == [0, 0]


def _glu_memory(bb, r=4, seed=0):
    trace = first_chunk_trace(bb, np.random.default_rng(seed).integers(0, 256, size=12))
    mem = init_glu_memory(bb, trace, r, "topk", seed=seed)
    for layer in mem.layers:
        layer.V[...] = np.random.default_rng(seed + 1).normal(scale=0.3, size=layer.V.shape)
    return mem


def _mlp_memory(bb, n=4, seed=0):
    rng = np.random.default_rng(seed)
    mem = LocasMlpMemory.empty(bb.config.L, bb.config.d, epsilon=0.5)
    for _ in range(n):
        mlp_append_slot(mem, rng.normal(size=(bb.config.L, bb.config.d)), rng.normal(size=(bb.config.L, bb.config.d)))
    return mem


@pytest.mark.parametrize("kind", ["mlp", "glu"])
def test_memory_gradients_match_differences(kind):
    bb = glu_backbone() if kind == "glu" else mlp_backbone()
    mem = _glu_memory(bb) if kind == "glu" else _mlp_memory(bb)
    toks = np.random.default_rng(9).integers(0, 256, size=10)
    _, grads = memory_loss_and_grads(bb, mem, toks)
    flat = mem.flat_grads(grads.memory)
    for name, P in mem.parameters().items():
        num = central_difference(lambda: memory_loss_and_grads(bb, mem, toks)[0], P)
        assert rel_err(flat[name], num) < 1e-6, name


def test_memory_step_leaves_backbone_untouched():
    bb = glu_backbone()
    before = bb.checksum()
    mem = _glu_memory(bb)
    hist = memory_grad_step(bb, mem, np.arange(20) % 7 + 97, lr=0.05, steps=8, optimizer="adam")
    assert bb.checksum() == before
    assert hist[-1] < hist[0]


def test_clipping_after_updates():
    bb = glu_backbone()
    mem = _glu_memory(bb)
    memory_grad_step(bb, mem, np.random.default_rng(0).integers(0, 256, size=16), lr=5.0, steps=5)
    for layer in mem.layers:
        assert np.all(np.linalg.norm(layer.G, axis=0) <= 1 + 1e-9)
        assert np.all(np.linalg.norm(layer.K, axis=0) <= 1 + 1e-9)
        assert np.all(np.linalg.norm(layer.V, axis=1) <= 1 + 1e-9)


def test_optimizer_resets_state_on_shape_change():
    opt = MemoryOptimizer("adam")
    p = {"w": np.zeros(3)}
    opt.step(p, {"w": np.ones(3)}, 0.1)
    np.testing.assert_allclose(p["w"], -0.1, rtol=1e-6)
    p["w"] = np.zeros(4)
    opt.step(p, {"w": np.ones(4)}, 0.1)
    np.testing.assert_allclose(p["w"], -0.1, rtol=1e-6)
    with pytest.raises(ValueError):
        MemoryOptimizer("lion")


def test_zero_value_memory_keeps_logits():
    bb = glu_backbone()
    toks = np.random.default_rng(6).integers(0, 256, size=(4, 9))
    mem = init_glu_memory(bb, first_chunk_trace(bb, toks[0]), 6, "topk")
    assert np.array_equal(B.forward(bb, toks, memory=mem)[0], B.forward(bb, toks)[0])


def test_copy_is_deep():
    bb = glu_backbone()
    mem = _glu_memory(bb)
    other = mem.copy()
    other.layers[0].V += 1
    assert not np.allclose(other.layers[0].V, mem.layers[0].V)
    assert isinstance(other, LocasGluMemory)
    assert mem.n_params() == 2 * 3 * 16 * 4
