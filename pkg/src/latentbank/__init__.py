"""Persistent latent memory adapters for a frozen encoder-decoder.

Six adapters attach a gradient-free memory state to a frozen toy
transformer: a soft prefix bank, memory cross-attention, a key-value
extension, a Hebbian associative matrix, a gated read and a slot memory.
Only read-side projections are trained; the state itself is accumulated at
inference time and evaluated with forgetting curves, knowledge curves and an
interference decomposition.
"""

from .adapters import MEMORY_METHODS, AdapterParams, MemoryHyper, MemoryState, MethodId, init_params, zero_state
from .backbone import BackboneConfig, FrozenBackbone, init_frozen
from .corpus import Conversation, SyntheticSpec, Tokenizer, build_tokenizer, generate_corpus, load_json
from .evaluation import EvalReport, LagBuckets, run_protocol
from .training import TrainConfig, TurnEncoder, type1_train, type2_accumulate

__version__ = "0.1.0"

__all__ = [
    "MEMORY_METHODS",
    "AdapterParams",
    "BackboneConfig",
    "Conversation",
    "EvalReport",
    "FrozenBackbone",
    "LagBuckets",
    "MemoryHyper",
    "MemoryState",
    "MethodId",
    "SyntheticSpec",
    "Tokenizer",
    "TrainConfig",
    "TurnEncoder",
    "build_tokenizer",
    "generate_corpus",
    "init_frozen",
    "init_params",
    "load_json",
    "run_protocol",
    "type1_train",
    "type2_accumulate",
    "zero_state",
]
