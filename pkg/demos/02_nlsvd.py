"""Compress an over-complete ReLU memory and check what survives."""
import numpy as np

from locas.nlsvd import nl_svd_compress, probe_equivalence_check, relu_ffn

rng = np.random.default_rng(0)
d, m, n = 32, 96, 16

# a memory whose keys cluster around a few directions
centers = rng.normal(size=(d, 6))
K = centers[:, rng.integers(0, 6, size=m)] + 0.1 * rng.normal(size=(d, m))
V = rng.normal(size=(m, d)) * 0.1

K2, V2, report = nl_svd_compress(K, V, n)
print(f"rank {report.input_rank} -> {report.retained_rank}")
print(f"discarded mass fraction {report.discarded_mass_fraction:.2e}")
print("top eigenvalues:", np.round(report.top_eigenvalues[:8], 3))

# exact at the probes it keeps
print("probe error:", probe_equivalence_check((K, V), (K2, V2)).max_error)

# elsewhere it is only an approximation
X = rng.normal(size=(2000, d))
full, small = relu_ffn(K, V, X), relu_ffn(K2, V2, X)
rel = np.linalg.norm(full - small) / np.linalg.norm(full)
print(f"relative error on random inputs {rel:.3f}")

# moving weight between a key and its value does not change the result
Ks, Vs = K.copy(), V.copy()
Ks[:, 5] *= 10.0
Vs[5] /= 10.0
K3, V3, _ = nl_svd_compress(Ks, Vs, n)
print("change after rescaling slot 5:", max(np.abs(K3 - K2).max(), np.abs(V3 - V2).max()))
