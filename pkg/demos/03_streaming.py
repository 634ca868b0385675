"""Train a tiny backbone, then stream one long document with and without a memory.

Takes a few minutes on one CPU core. Lower STEPS for a quicker (and weaker)
backbone.
"""
import time

from locas import backbone as B
from locas.corpus import make_synthetic_corpus
from locas.harness import RunConfig, final_quarter_nll, records_to_csv, stream_eval

STEPS = 600

train = make_synthetic_corpus(seed=1000, n_docs=16)
t = time.time()
model, hist = B.train_tiny_backbone(train, B.ModelConfig.default("glu"), steps=STEPS, seed=0,
                                    return_history=True)
print(f"trained {STEPS} steps in {time.time() - t:.0f}s, loss {hist[0]:.2f} -> {hist[-1]:.2f}")

doc = make_synthetic_corpus(seed=0, n_docs=1)[0]
print(doc[:160].decode(), "...")

runs = {
    "truncation": RunConfig(),
    "topk, sgd": RunConfig(method="locas-glu", strategy="topk"),
    "gaussian, sgd": RunConfig(method="locas-glu", strategy="gaussian"),
    "topk, adam": RunConfig(method="locas-glu", strategy="topk", optimizer="adam"),
    "lowrank, adam": RunConfig(method="lowrank-baseline", lr=1e-3, optimizer="adam"),
}
for name, run in runs.items():
    recs = stream_eval(model, run, doc)
    print(f"{name:15s} final-quarter NLL {final_quarter_nll(recs):.4f}")

# one CSV row per 256-token chunk
print(records_to_csv(recs).splitlines()[:3])
