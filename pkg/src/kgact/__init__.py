"""kgact: memory-efficient KG recommender training.

Forward passes run on exact full-precision tensors; the activation context
each backward pass needs is stored in b-bit quantized form (uniform
per-row quantization with stochastic rounding) and dequantized lazily while
gradients are computed.
"""

from .precision import default_dtype, engine_dtype, set_default_dtype
from .quantize import (QuantConfig, QuantizedTensor, RandomStream,
                       dequantize_row, dequantize_tensor, nearest_round,
                       pack_bits, quantize_row, quantize_tensor,
                       quantizer_verification, stochastic_round, stored_bytes,
                       unpack_bits)
from .tensorops import BitMask, ShapeMismatchError, densify, mm, relu, spmm, spmm_t
from .tape import Tape, TapeUsageError, gradient_variance_probe
from .model import ModelConfig, ModelParams, embed, forward_all, init_params, score
from .data import (KgDataset, SynthSpec, build_adjacency, kcore_filter,
                   load_dataset, load_interactions, load_triples,
                   parse_synth_spec, sample_negatives, save_dataset,
                   split_interactions, synth_generate)
from .train import (AdamState, TrainConfig, adam_step, bench_memory,
                    compare_rounding, evaluate, memory_report, train_epoch,
                    train_run)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
