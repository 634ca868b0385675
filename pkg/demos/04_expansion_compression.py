"""Grow an MLP memory one token at a time and keep it bounded with NL-SVD."""
from locas import backbone as B
from locas.corpus import make_synthetic_corpus
from locas.memory import LocasMlpMemory
from locas.nlsvd import CyclePolicy, run_expansion_compression_cycle

model = B.Backbone.init(B.ModelConfig.default("mlp"), seed=0)
tokens = B.encode_document(make_synthetic_corpus(seed=0, n_docs=1)[0])[:257]

for cadence in ("per-span", "per-token"):
    mem = LocasMlpMemory.empty(model.config.L, model.config.d)
    log = run_expansion_compression_cycle(model, mem, tokens, CyclePolicy(n_capacity=64, n_target=32,
                                                                          cadence=cadence))
    peak = max(max(r) for r in log.ranks)
    print(f"{cadence}: {log.n_compressions} compressions, peak rank {peak}, final ranks {mem.ranks}")
    worst = max(rep.probe_max_error for rep in log.reports)
    kept = min(1 - rep.discarded_mass_fraction for rep in log.reports)
    print(f"  worst probe error {worst:.1e}, least mass kept {kept:.3f}")
