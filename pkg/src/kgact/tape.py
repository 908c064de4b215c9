"""Reverse-mode tape whose backward contexts are stored compressed.

Forward kernels always run on exact full-precision tensors; what each node
*saves* for the backward sweep is compressed: dense activations as b-bit
quantized tensors, ReLU predicates as one-bit masks, gathers as index lists,
and the adjacency as a single shared reference. During ``backward`` each
node dequantizes its context, emits gradients, and frees the context, so
after the sweep the retained context byte counter is exactly zero.

Byte accounting: ``peak_context_bytes`` is the high-water mark of stored
context payload (quantized codes + metadata, packed masks, index lists, the
exact margin scalars of the loss head, and the adjacency buffers counted
once). ``peak_fp32_equivalent_bytes`` is what the same contexts would
occupy with 32-bit pass-through storage; their ratio is the compression
figure reported by the trainer.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .precision import default_dtype
from .quantize import (QuantConfig, RandomStream, dequantize_tensor,
                       fp32_equivalent_bytes, quantize_tensor, stored_bytes)
from .tensorops import ShapeMismatchError, csr_nbytes, mm, relu, spmm, spmm_t

OP_SPMM = "spmm"
OP_MM = "mm"
OP_RELU = "relu"
OP_GATHER = "gather"
OP_BPR_LOSS = "bpr_loss"
OP_ADD = "add"


class TapeUsageError(RuntimeError):
    """The tape was driven outside its contract (e.g. backward with no loss)."""


@dataclass(frozen=True)
class Wire:
    """Handle for a recorded value: where it came from plus the live array."""
    ref: tuple          # ("node", idx) or ("param", name)
    value: np.ndarray


@dataclass
class TapeNode:
    kind: str
    inputs: tuple
    out_shape: tuple
    context: dict | None
    context_bytes: int
    fp32_equiv_bytes: int
    extra: dict = field(default_factory=dict)


class Tape:
    """Ordered record of forward ops, replayed in reverse for gradients."""

    def __init__(self, cfg: QuantConfig, stream: RandomStream | None = None,
                 dtype=None):
        self.cfg = cfg
        self.stream = stream
        self.dtype = np.dtype(dtype) if dtype is not None else default_dtype()
        self.nodes: list[TapeNode] = []
        self.params: dict[str, np.ndarray] = {}
        self.current_context_bytes = 0
        self.peak_context_bytes = 0
        self.current_fp32_equiv_bytes = 0
        self.peak_fp32_equiv_bytes = 0
        self._adj_owner = {}       # id(adjacency) -> owning node index
        self._loss_node = None
        self.loss_value = None

    # -- parameters ---------------------------------------------------------

    def register_param(self, name: str, value: np.ndarray) -> Wire:
        if name in self.params:
            raise TapeUsageError(f"parameter {name!r} already registered")
        self.params[name] = value
        return Wire(("param", name), value)

    # -- bookkeeping ---------------------------------------------------------

    def _push(self, node: TapeNode) -> Wire:
        self.nodes.append(node)
        self.current_context_bytes += node.context_bytes
        self.current_fp32_equiv_bytes += node.fp32_equiv_bytes
        self.peak_context_bytes = max(self.peak_context_bytes, self.current_context_bytes)
        self.peak_fp32_equiv_bytes = max(self.peak_fp32_equiv_bytes,
                                         self.current_fp32_equiv_bytes)
        return Wire(("node", len(self.nodes) - 1), node.extra.pop("_out"))

    def _quantize(self, x: np.ndarray):
        q = quantize_tensor(x, self.cfg, self.stream)
        return q, stored_bytes(q), fp32_equivalent_bytes(q)

    # -- recording -----------------------------------------------------------

    def record_spmm(self, adjacency, src: Wire) -> Wire:
        out = spmm(adjacency, src.value)
        key = id(adjacency)
        adj_bytes = 0
        if key not in self._adj_owner:
            self._adj_owner[key] = len(self.nodes)
            adj_bytes = csr_nbytes(adjacency)
        node = TapeNode(OP_SPMM, (src.ref,), out.shape, {"adjacency": adjacency},
                        adj_bytes, adj_bytes, {"_out": out})
        return self._push(node)

    def record_mm(self, src: Wire, param_name: str) -> Wire:
        if param_name not in self.params:
            raise TapeUsageError(f"unknown parameter {param_name!r}")
        theta = self.params[param_name]
        out = mm(src.value, theta)
        q, nbytes, eq = self._quantize(src.value)
        node = TapeNode(OP_MM, (src.ref,), out.shape, {"q": q},
                        nbytes, eq, {"_out": out, "param": param_name})
        return self._push(node)

    def record_relu(self, src: Wire) -> Wire:
        out, mask = relu(src.value)
        node = TapeNode(OP_RELU, (src.ref,), out.shape, {"mask": mask},
                        mask.nbytes, mask.nbytes, {"_out": out})
        return self._push(node)

    def record_add(self, srcs: list[Wire]) -> Wire:
        if not srcs:
            raise TapeUsageError("add needs at least one input")
        out = srcs[0].value
        for s in srcs[1:]:
            if s.value.shape != out.shape:
                raise ShapeMismatchError(
                    f"add: shapes differ, {out.shape} vs {s.value.shape}")
            out = out + s.value
        if len(srcs) == 1:
            out = out.copy()
        node = TapeNode(OP_ADD, tuple(s.ref for s in srcs), out.shape, None,
                        0, 0, {"_out": out})
        return self._push(node)

    def record_gather(self, src: Wire, indices) -> Wire:
        idx = np.asarray(indices, dtype=np.int32)
        if idx.size and (idx.min() < 0 or idx.max() >= src.value.shape[0]):
            raise IndexError(
                f"gather index out of range for {src.value.shape[0]} rows")
        out = src.value[idx]
        node = TapeNode(OP_GATHER, (src.ref,), out.shape, {"indices": idx},
                        idx.nbytes, idx.nbytes,
                        {"_out": out, "src_shape": src.value.shape})
        return self._push(node)

    def record_bpr_loss(self, users: Wire, positives: Wire, negatives: Wire,
                        l2: float) -> Wire:
        u, p, n = users.value, positives.value, negatives.value
        if not (u.shape == p.shape == n.shape):
            raise ShapeMismatchError(
                f"bpr: row blocks differ, {u.shape} / {p.shape} / {n.shape}")
        if self._loss_node is not None:
            raise TapeUsageError("tape already has a loss node")
        batch = u.shape[0]
        margins = (u * (p - n)).sum(axis=1)
        data = np.logaddexp(0, -margins).mean()
        reg = l2 * ((u * u).sum() + (p * p).sum() + (n * n).sum()) / batch
        loss = np.asarray(data + reg, dtype=u.dtype)

        # The margins are kept exactly (a few scalars, like the ReLU mask);
        # the row blocks are stored compressed. Every backward term is then
        # linear in a dequantized block with exact coefficients, so the
        # gradient estimator stays unbiased.
        qu, bu, eu = self._quantize(u)
        qp, bp, ep = self._quantize(p)
        qn, bn, en = self._quantize(n)
        ctx = {"qu": qu, "qp": qp, "qn": qn, "margins": margins}
        node = TapeNode(OP_BPR_LOSS, (users.ref, positives.ref, negatives.ref),
                        (), ctx, bu + bp + bn + margins.nbytes,
                        eu + ep + en + margins.nbytes,
                        {"_out": loss, "l2": l2, "batch": batch})
        wire = self._push(node)
        self._loss_node = wire.ref[1]
        self.loss_value = float(loss)
        return wire

    # -- backward ------------------------------------------------------------

    def _free(self, idx: int) -> None:
        node = self.nodes[idx]
        self.current_context_bytes -= node.context_bytes
        self.current_fp32_equiv_bytes -= node.fp32_equiv_bytes
        node.context = None

    def backward(self) -> dict[str, np.ndarray]:
        """Reverse sweep; returns gradients for every registered parameter."""
        if self._loss_node is None:
            raise TapeUsageError("backward needs a recorded loss node")
        if self._loss_node != len(self.nodes) - 1:
            raise TapeUsageError("the loss must be the last recorded node")

        node_grads: dict[int, np.ndarray] = {
            self._loss_node: np.asarray(1.0, dtype=self.dtype)}
        param_grads: dict[str, np.ndarray | None] = {k: None for k in self.params}

        def route(ref, g):
            kind, key = ref
            if kind == "param":
                param_grads[key] = g if param_grads[key] is None else param_grads[key] + g
            else:
                node_grads[key] = g if key not in node_grads else node_grads[key] + g

        for idx in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[idx]
            g = node_grads.pop(idx, None)
            if g is None:
                self._free(idx)
                continue
            if node.kind == OP_SPMM:
                route(node.inputs[0], spmm_t(node.context["adjacency"], g))
            elif node.kind == OP_MM:
                h_hat = dequantize_tensor(node.context["q"], self.dtype)
                name = node.extra["param"]
                route(("param", name), h_hat.T @ g)
                route(node.inputs[0], g @ self.params[name].T)
            elif node.kind == OP_RELU:
                route(node.inputs[0], g * node.context["mask"].to_bool())
            elif node.kind == OP_ADD:
                for ref in node.inputs:
                    route(ref, g)
            elif node.kind == OP_GATHER:
                scat = np.zeros(node.extra["src_shape"], dtype=g.dtype)
                np.add.at(scat, node.context["indices"], g)
                route(node.inputs[0], scat)
            elif node.kind == OP_BPR_LOSS:
                ctx = node.context
                batch = node.extra["batch"]
                l2 = node.extra["l2"]
                uh = dequantize_tensor(ctx["qu"], self.dtype)
                ph = dequantize_tensor(ctx["qp"], self.dtype)
                nh = dequantize_tensor(ctx["qn"], self.dtype)
                coef = (expit(-ctx["margins"]) / batch)[:, None]
                reg = np.asarray(2.0 * l2 / batch, dtype=self.dtype)
                route(node.inputs[0], g * (-coef * (ph - nh) + reg * uh))
                route(node.inputs[1], g * (-coef * uh + reg * ph))
                route(node.inputs[2], g * (coef * uh + reg * nh))
            else:  # pragma: no cover
                raise TapeUsageError(f"unknown op kind {node.kind!r}")
            self._free(idx)

        grads = {}
        for name, value in self.params.items():
            g = param_grads[name]
            grads[name] = g if g is not None else np.zeros_like(value)
        return grads


def validate_gradients(params: dict, grads: dict) -> None:
    """GradientSet invariants: aligned shapes, finite entries."""
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter has {value.shape}")
        if not np.isfinite(g).all():
            raise ValueError(f"gradient for {name} has non-finite entries")


def gradient_variance_probe(build, cfg: QuantConfig, trials: int, seed: int,
                            param_filter: str = "theta") -> dict:
    """Empirical per-parameter gradient variance under fresh quantization draws.

    ``build(tape)`` records the forward graph and loss for one fixed
    minibatch. The probe re-runs backward ``trials`` times, each time with
    fresh draws, and reports the mean-over-elements variance per matching
    parameter next to the exact-mode (pass-through) baseline gradients. With
    pass-through storage every trial is identical, so the reported variance
    is exactly zero.
    """
    if trials < 2:
        raise ValueError("need at least 2 trials to estimate a variance")
    base_tape = Tape(QuantConfig(bits=32, rounding=cfg.rounding), RandomStream(seed))
    build(base_tape)
    baseline = base_tape.backward()

    stream = RandomStream(seed)
    center: dict[str, np.ndarray] = {}
    sums: dict[str, np.ndarray] = {}
    sq: dict[str, np.ndarray] = {}
    for _ in range(trials):
        tape = Tape(cfg, stream)
        build(tape)
        grads = tape.backward()
        for name, g in grads.items():
            if not name.startswith(param_filter):
                continue
            g64 = g.astype(np.float64)
            if name not in sums:
                # centring on the first draw keeps identical draws at
                # exactly zero variance (the pass-through case)
                center[name] = g64.copy()
                sums[name] = np.zeros_like(g64)
                sq[name] = np.zeros_like(g64)
            dev = g64 - center[name]
            sums[name] += dev
            sq[name] += dev * dev
    variance = {}
    for name in sums:
        mean = sums[name] / trials
        variance[name] = float((sq[name] / trials - mean * mean).mean())
    return {
        "bits": cfg.bits,
        "trials": trials,
        "variance": variance,
        "mean_variance": float(np.mean(list(variance.values()))) if variance else 0.0,
        "baseline": {k: v for k, v in baseline.items() if k.startswith(param_filter)},
    }
