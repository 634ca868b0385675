"""Sideways FFN memories for test-time training of a tiny byte-level transformer.

Modules
-------
tensor_core  activations, normalization helpers, Jacobi symmetric eigensolver
backbone     the decoder-only transformer, its reverse mode and a trainer
memory       MLP and GLU memories, their initializers and update rules
nlsvd        non-linear SVD compression of MLP memories
lowrank      low-rank adapter baseline
harness      streaming evaluation, ablations and parameter accounting
corpus       synthetic long documents with recurring entities
checkpoint   binary container for backbones and memories
"""
from .backbone import (
    Backbone,
    ModelConfig,
    backward,
    backward_hidden_grads,
    encode_document,
    forward,
    forward_with_trace,
    train_tiny_backbone,
)
from .checkpoint import load_checkpoint, load_memory, save_checkpoint, save_memory
from .corpus import make_synthetic_corpus
from .errors import (
    CapacityError,
    DegenerateActivation,
    DegenerateGradient,
    FormatError,
    LocasError,
    NumericalError,
    ShapeError,
)
from .harness import (
    RunConfig,
    ablate_init,
    final_quarter_nll,
    param_count,
    records_to_csv,
    stream_eval,
    sweep_width,
)
from .lowrank import lowrank_baseline_attach
from .memory import (
    LocasGluMemory,
    LocasMlpMemory,
    clip_weight_norms,
    init_glu_memory,
    memory_grad_step,
    mlp_append_slot,
)
from .nlsvd import CyclePolicy, nl_svd_compress, probe_equivalence_check, run_expansion_compression_cycle
from .tensor_core import global_normalize, symmetric_evd

__version__ = "0.1.0"
