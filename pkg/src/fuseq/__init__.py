"""CPU sequence-to-sequence transformer inference engine.

Three pillars, each testable against an exact reference:

* operator fusion: six custom single-pass kernels plus six GEMMs per
  encoder layer, against a naive multi-pass reference set;
* hierarchical retrieve-and-rerank search over the output logits,
  against exhaustive softmax-and-sort counterparts;
* a static max-shape memory plan with lifetime-based buffer sharing and
  zero steady-state allocation, against an unshared baseline.
"""

from .decode import (BeamState, DecodeConfig, RetrieveResult, argmax_output,
                     beam_search_step, diverse_beam_search_step,
                     exhaustive_beam_search_step, logsumexp, perplexity, retrieve,
                     sample_top_k, sample_top_p)
from .engine import Hypothesis, Session
from .errors import (AliasingError, CapacityError, ConsistencyError, DimensionError,
                     EngineError, FormatError, FullMaskError, InputError,
                     ParameterError, PlanError)
from .memory_plan import (Arena, IntermediateSpec, MemoryPlan, allocation_count,
                          arena_acquire, build_plan)
from .model import (KVCache, ModelConfig, ModelWeights, encode, encoder_layer_forward,
                    make_random_weights, plan_intermediates)
from .ops import (FusedPassKind, fused_attention_softmax,
                  fused_bias_residual_activation, fused_bias_residual_layer_norm,
                  fused_layer_norm, naive_attention_softmax,
                  naive_bias_residual_activation, naive_layer_norm)
from .tensor import OpCounters, Tensor, gemm, gemm_batched, read_counters, reset_counters
from .weights_io import load_weights, save_weights

__version__ = "0.1.0"
