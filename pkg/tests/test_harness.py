import numpy as np
import pytest

from locas import backbone as B
from locas.errors import CapacityError, ShapeError
from locas.harness import (
    CSV_HEADER,
    EvalRecord,
    RunConfig,
    _chunks,
    ablate_init,
    final_quarter_nll,
    param_count,
    records_to_csv,
    stream_eval,
    sweep_width,
)
from locas.lowrank import adapted_shapes, lowrank_baseline_attach

from oracles import glu_param_count_brute, lowrank_param_count_brute, rel_err, central_difference


def glu_backbone():
    cfg = B.ModelConfig(L=2, d=16, m=32, heads=2, ffn_kind="glu", max_seq=64)
    return B.Backbone.init(cfg, seed=2, std=0.2)


def mlp_backbone():
    cfg = B.ModelConfig(L=2, d=16, m=32, heads=2, ffn_kind="mlp", max_seq=64)
    return B.Backbone.init(cfg, seed=2, std=0.2)


DOC = bytes(np.random.default_rng(0).integers(97, 123, size=200).astype(np.uint8))
SMALL = dict(chunk_size=16, window=32)


def test_chunks_cover_every_target_once():
    spans = list(_chunks(100, 16, 32))
    covered = [t for _, lo, hi in spans for t in range(lo, hi)]
    assert covered == list(range(1, 101))
    for in_lo, lo, _ in spans:
        assert lo - in_lo <= 32


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(method="retrieval")
    with pytest.raises(ShapeError):
        RunConfig(chunk_size=64, window=32)
    assert RunConfig(method="locas-glu").label == "locas-glu:topk"
    assert RunConfig(strategy="normalized-activation").effective_lr == 1e-6
    assert RunConfig().effective_lr == 4e-3


def test_trunc_records_match_direct_scoring():
    bb = glu_backbone()
    recs = stream_eval(bb, RunConfig(**SMALL), DOC)
    toks = B.encode_document(DOC)
    # chunk 3 covers targets 49..64 with inputs from 17
    logits, _ = B.forward(bb, toks[17:64])
    nll = B.token_nll(logits, toks[18:65])[-16:]
    rec = [r for r in recs if r.position == 64][0]
    assert rec.nll == pytest.approx(nll.mean(), rel=1e-12)
    assert rec.context_len == 32
    assert sum(r.n_tokens for r in recs) == len(DOC)


def test_record_every_and_ppl():
    bb = glu_backbone()
    recs = stream_eval(bb, RunConfig(record_every=64, **SMALL), DOC)
    assert [r.position for r in recs] == [64, 128, 192, 200]
    total = sum(r.nll * r.n_tokens for r in recs) / len(DOC)
    assert recs[-1].ppl == pytest.approx(np.exp(total))


def test_document_too_short_and_window_too_long():
    bb = glu_backbone()
    with pytest.raises(ShapeError):
        stream_eval(bb, RunConfig(**SMALL), DOC[:20])
    with pytest.raises(ShapeError):
        stream_eval(bb, RunConfig(chunk_size=32, window=40), DOC)


@pytest.mark.parametrize("method,kw", [
    ("locas-glu", {}),
    ("lowrank-baseline", {}),
    ("locas-mlp", {"epsilon": 0.0}),
])
def test_lr_zero_reproduces_truncation(method, kw):
    bb = glu_backbone() if method != "locas-mlp" else mlp_backbone()
    base = stream_eval(bb, RunConfig(**SMALL), DOC)
    recs = stream_eval(bb, RunConfig(method=method, lr=0.0, r=4, **SMALL, **kw), DOC)
    assert [(r.position, r.nll) for r in recs] == [(r.position, r.nll) for r in base]


def test_score_then_memorize():
    bb = glu_backbone()
    run = RunConfig(method="locas-glu", lr=0.5, r=4, **SMALL)
    a = stream_eval(bb, run, DOC)
    changed = bytearray(DOC)
    changed[100:] = b"z" * 100
    b = stream_eval(bb, run, bytes(changed))
    # targets up to position 96 are scored before any chunk containing the change is memorized
    for ra, rb in zip(a, b):
        if ra.position <= 96:
            assert ra.nll == rb.nll


def test_ttt_lowers_nll_on_repetitive_text():
    bb = glu_backbone()
    doc = (b"the quick brown fox jumps over the lazy dog " * 8)[:320]
    base = final_quarter_nll(stream_eval(bb, RunConfig(**SMALL), doc))
    ttt = final_quarter_nll(stream_eval(bb, RunConfig(method="locas-glu", lr=0.05, optimizer="adam", r=8,
                                                      steps_per_chunk=2, **SMALL), doc))
    assert ttt < base


def test_stream_eval_is_deterministic():
    bb = glu_backbone()
    run = RunConfig(method="locas-glu", strategy="random-selection", lr=0.1, r=4, seed=3, **SMALL)
    assert records_to_csv(stream_eval(bb, run, DOC)) == records_to_csv(stream_eval(bb, run, DOC))


def test_return_state_and_backbone_untouched():
    bb = glu_backbone()
    before = bb.checksum()
    recs, mem = stream_eval(bb, RunConfig(method="locas-glu", lr=0.1, r=4, **SMALL), DOC, return_state=True)
    assert mem.ranks == [4, 4]
    assert bb.checksum() == before
    assert stream_eval(bb, RunConfig(**SMALL), DOC, return_state=True)[1] is None


def test_reinit_per_chunk_and_normalized_activation_run():
    bb = glu_backbone()
    for run in (RunConfig(method="locas-glu", reinit_per_chunk=True, r=4, **SMALL),
                RunConfig(method="locas-glu", strategy="normalized-activation", r=4, **SMALL)):
        recs = stream_eval(bb, run, DOC)
        assert all(np.isfinite(r.nll) for r in recs)


def test_mlp_memory_grows_and_compresses():
    bb = mlp_backbone()
    _, mem = stream_eval(bb, RunConfig(method="locas-mlp", r=6, **SMALL), DOC, return_state=True)
    assert mem.ranks == [6, 6]
    _, mem = stream_eval(bb, RunConfig(method="locas-mlp", r=6, mlp_update="nlsvd", **SMALL), DOC,
                         return_state=True)
    assert max(mem.ranks) <= 6


def test_glu_memory_needs_glu_backbone():
    with pytest.raises(ShapeError):
        stream_eval(mlp_backbone(), RunConfig(method="locas-glu", r=4, **SMALL), DOC)
    with pytest.raises(CapacityError):
        stream_eval(glu_backbone(), RunConfig(method="locas-glu", r=33, **SMALL), DOC)


def test_csv_format(tmp_path):
    recs = [EvalRecord("trunc", 0, 256, 0, 1.234567891, 3.43597, 256)]
    text = records_to_csv(recs, tmp_path / "out.csv")
    assert text == "method,doc_id,position,context_len,nll,ppl\ntrunc,0,256,0,1.23457,3.43597\n"
    assert (tmp_path / "out.csv").read_bytes() == text.encode()
    assert ",".join(CSV_HEADER) == text.splitlines()[0]


def test_final_quarter_nll_is_token_weighted():
    recs = [EvalRecord("t", 0, 100, 0, 9.0, 1.0, 100), EvalRecord("t", 0, 390, 0, 1.0, 1.0, 290),
            EvalRecord("t", 0, 400, 0, 3.0, 1.0, 10)]
    assert final_quarter_nll(recs) == pytest.approx((290 * 1.0 + 10 * 3.0) / 300)


def test_param_counts_match_allocations():
    assert param_count({"L": 3, "d": 8}, "locas-glu", 5) == glu_param_count_brute(3, 8, 5)
    assert param_count({"L": 3, "d": 8, "m": 20}, "lowrank-baseline", 5) == lowrank_param_count_brute(3, 8, 20, 5)
    assert param_count({"L": 3, "d": 8, "m": 20, "ffn_kind": "mlp"}, "lowrank-baseline", 5) == \
        lowrank_param_count_brute(3, 8, 20, 5, "mlp")
    assert param_count({"L": 3, "d": 8}, "trunc", 5) == 0
    with pytest.raises(ValueError):
        param_count({"L": 1, "d": 1}, "prefix", 1)


def test_param_count_equals_allocated_scalars():
    bb = glu_backbone()
    _, mem = stream_eval(bb, RunConfig(method="locas-glu", r=4, **SMALL), DOC, return_state=True)
    assert mem.n_params() == param_count(bb.config, "locas-glu", 4)
    assert lowrank_baseline_attach(bb, 4).n_params() == param_count(bb.config, "lowrank-baseline", 4)


def test_lowrank_adapter_gradients():
    bb = glu_backbone()
    adapter = lowrank_baseline_attach(bb, 2, seed=1)
    for A, Bm in adapter.factors.values():
        Bm[...] = np.random.default_rng(0).normal(scale=0.1, size=Bm.shape)
    toks = np.random.default_rng(4).integers(0, 256, size=9)

    def loss():
        return B.lm_loss(B.forward(bb, toks[:-1], adapter=adapter)[0], toks[1:])[0]

    logits, cache = B.forward(bb, toks[:-1], adapter=adapter)
    grads = adapter.flat_grads(B.backward(cache, B.lm_loss(logits, toks[1:])[1], want_backbone=False).adapter)
    params = adapter.parameters()
    for name in ("layers.0.wq.A", "layers.1.w_down.B", "layers.0.w_gate.A"):
        assert rel_err(grads[name], central_difference(loss, params[name])) < 1e-6


def test_lowrank_shapes_and_zero_init():
    bb = mlp_backbone()
    shapes = adapted_shapes(bb.config)
    assert shapes["layers.0.w_key"] == (16, 32) and shapes["layers.1.w_value"] == (32, 16)
    adapter = lowrank_baseline_attach(bb, 3)
    toks = np.arange(10)
    assert np.array_equal(B.forward(bb, toks, adapter=adapter)[0], B.forward(bb, toks)[0])
    with pytest.raises(ShapeError):
        lowrank_baseline_attach(bb, 0)


def test_ablation_and_width_sweep():
    bb = glu_backbone()
    table = ablate_init(bb, DOC, ["topk", "gaussian"], r=4, base=RunConfig(**SMALL))
    assert sorted(table.ranking) == ["gaussian", "topk"]
    assert table.as_text().startswith("strategy,lr,final_quarter_nll\n")
    rows = sweep_width(bb, DOC, [2, 4], base=RunConfig(method="locas-glu", **SMALL))
    assert [r.params for r in rows] == [3 * 2 * 16 * 2, 3 * 2 * 16 * 4]
    with pytest.raises(CapacityError):
        sweep_width(bb, DOC, [64], base=RunConfig(**SMALL))
    with pytest.raises(ValueError):
        ablate_init(bb, DOC, [])
