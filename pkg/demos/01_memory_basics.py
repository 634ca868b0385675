"""Attach a fresh GLU memory to a backbone and watch it stay silent until trained."""
import numpy as np

from locas import backbone as B
from locas.harness import param_count
from locas.memory import init_glu_memory, memory_grad_step

cfg = B.ModelConfig.default("glu")
model = B.Backbone.init(cfg, seed=0)
prompt = B.encode_document(b"Qorvane the amber walked past Qorvane the amber.")

# first pass gives the FFN activations that rank the slots to clone
logits, cache = B.forward(model, prompt[:-1])
mem = init_glu_memory(model, B.trace_from_cache(cache), r=16, strategy="topk")
print("cloned slots, layer 0:", mem.layers[0].selection[:8], "...")
print("tau per layer:", np.round(mem.tau, 5))

# values start at zero, so the output is bit-for-bit unchanged
with_mem, _ = B.forward(model, prompt[:-1], memory=mem)
print("max |logit change| before training:", np.abs(with_mem - logits).max())

# a few memory-only steps on the prompt itself
before = model.checksum()
hist = memory_grad_step(model, mem, prompt, lr=0.05, steps=20, optimizer="adam")
print(f"prompt NLL {hist[0]:.3f} -> {hist[-1]:.3f}; backbone untouched: {model.checksum() == before}")

# every slot vector stays inside the unit ball
norms = [np.linalg.norm(layer.V, axis=1).max() for layer in mem.layers]
print("largest value-row norm:", max(norms))

# extra parameters at a large-model shape
print("locas-glu, L=28 d=2048 r=64:", param_count({"L": 28, "d": 2048}, "locas-glu", 64))
print("lowrank,   L=28 d=2048 m=6144 r=64:", param_count({"L": 28, "d": 2048, "m": 6144}, "lowrank-baseline", 64))
