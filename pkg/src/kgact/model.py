"""Reference L-layer graph-convolution backbone over the unified KG.

Each layer computes ``E <- relu(spmm(A_hat, E) @ Theta)``; the readout is
the elementwise sum of the per-layer outputs (or just the last one). Scores
are plain dot products between readout rows.
"""

from dataclasses import dataclass, field

import numpy as np

from .precision import default_dtype
from .quantize import QuantConfig
from .tape import Tape, Wire
from .tensorops import mm, relu, spmm

AGG_SUM = "sum"
AGG_LAST = "last"


@dataclass
class ModelConfig:
    layers: int = 3
    dim: int = 64
    aggregation: str = AGG_SUM
    quant: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1:
            raise ValueError("layers and dim must be >= 1")
        if self.aggregation not in (AGG_SUM, AGG_LAST):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class ModelParams:
    entity_embeddings: np.ndarray          # E^(0), one row per graph node
    layer_weights: list[np.ndarray]        # L square matrices

    def as_dict(self) -> dict[str, np.ndarray]:
        d = {"E0": self.entity_embeddings}
        for i, w in enumerate(self.layer_weights):
            d[f"theta{i}"] = w
        return d

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "ModelParams":
        thetas = [d[f"theta{i}"] for i in range(len(d) - 1)]
        return cls(d["E0"], thetas)


def _xavier(rng, rows, cols, dtype):
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)


def init_params(num_nodes: int, cfg: ModelConfig, seed: int) -> ModelParams:
    """Xavier-uniform init, deterministic per seed."""
    rng = np.random.default_rng(seed)
    dtype = default_dtype()
    e0 = _xavier(rng, num_nodes, cfg.dim, dtype)
    thetas = [_xavier(rng, cfg.dim, cfg.dim, dtype) for _ in range(cfg.layers)]
    return ModelParams(e0, thetas)


def forward_all(tape: Tape, params: ModelParams, adjacency, cfg: ModelConfig) -> Wire:
    """Record the full L-layer pipeline on the tape; returns the readout wire.

    Parameters are registered in the tape's registry (never quantized);
    each layer leaves one quantized activation context (the spmm output
    consumed by the matmul backward) plus a one-bit ReLU mask.
    """
    if adjacency.shape[0] != adjacency.shape[1]:
        raise ValueError(f"adjacency must be square, got {adjacency.shape}")
    if adjacency.shape[0] != params.entity_embeddings.shape[0]:
        raise ValueError("adjacency size and embedding rows differ")
    e = tape.register_param("E0", params.entity_embeddings)
    for i, w in enumerate(params.layer_weights):
        tape.register_param(f"theta{i}", w)
    per_layer = []
    for i in range(cfg.layers):
        h = tape.record_spmm(adjacency, e)
        j = tape.record_mm(h, f"theta{i}")
        e = tape.record_relu(j)
        per_layer.append(e)
    if cfg.aggregation == AGG_LAST:
        return per_layer[-1]
    return tape.record_add(per_layer) if len(per_layer) > 1 else per_layer[0]


def embed(params: ModelParams, adjacency, cfg: ModelConfig) -> np.ndarray:
    """Inference readout: the same forward math with nothing recorded."""
    e = params.entity_embeddings
    per_layer = []
    for w in params.layer_weights:
        e, _ = relu(mm(spmm(adjacency, e), w))
        per_layer.append(e)
    if cfg.aggregation == AGG_LAST:
        return per_layer[-1]
    out = per_layer[0]
    for x in per_layer[1:]:
        out = out + x
    return out


def score(user_row: np.ndarray, item_row: np.ndarray) -> float:
    """Engagement score: inner product of two readout rows."""
    if user_row.shape != item_row.shape:
        raise ValueError(f"rows differ in width: {user_row.shape} vs {item_row.shape}")
    return float(user_row @ item_row)
