"""Adam training loop, top-K evaluation, and memory/accuracy reporting."""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import KgDataset, build_adjacency, sample_negatives
from .model import ModelConfig, ModelParams, embed, forward_all, init_params
from .quantize import QuantConfig, RandomStream, ROUND_NEAREST, ROUND_STOCHASTIC
from .tape import Tape, validate_gradients


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 20
    seed: int = 0
    quant: QuantConfig = field(default_factory=QuantConfig)
    l2: float = 1e-5
    eval_k: int = 20

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.eval_k < 1:
            raise ValueError("lr must be positive, batch and K at least 1")


class AdamState:
    """First/second moment accumulators with bias correction."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient/parameter shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def train_epoch(ds: KgDataset, adjacency, params: ModelParams,
                model_cfg: ModelConfig, cfg: TrainConfig, state: AdamState,
                stream: RandomStream, rng: np.random.Generator,
                max_steps: int | None = None) -> dict:
    """One pass over shuffled BPR batches; returns the epoch's ledger."""
    if len(ds.train) == 0:
        raise ValueError("dataset has no training interactions")
    triples = sample_negatives(ds, rng)
    order = rng.permutation(len(triples))
    triples = triples[order]
    param_dict = params.as_dict()
    losses = []
    peak = equiv_peak = 0
    retained = 0
    steps = 0
    for start in range(0, len(triples), cfg.batch_size):
        if max_steps is not None and steps >= max_steps:
            break
        batch = triples[start:start + cfg.batch_size]
        tape = Tape(cfg.quant, stream)
        readout = forward_all(tape, params, adjacency, model_cfg)
        u = tape.record_gather(readout, batch[:, 0])
        p = tape.record_gather(readout, ds.item_node(batch[:, 1]))
        n = tape.record_gather(readout, ds.item_node(batch[:, 2]))
        tape.record_bpr_loss(u, p, n, cfg.l2)
        peak = max(peak, tape.peak_context_bytes)
        equiv_peak = max(equiv_peak, tape.peak_fp32_equiv_bytes)
        grads = tape.backward()
        retained = max(retained, tape.current_context_bytes)
        if not np.isfinite(tape.loss_value):
            raise FloatingPointError(f"non-finite loss at step {state.step}")
        validate_gradients(param_dict, grads)
        adam_step(param_dict, grads, state, cfg.lr)
        losses.append(tape.loss_value)
        steps += 1
    return {
        "mean_loss": float(np.mean(losses)),
        "steps": steps,
        "peak_context_bytes": int(peak),
        "peak_fp32_equivalent_bytes": int(equiv_peak),
        "retained_context_bytes": int(retained),
    }


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _test_positives(ds: KgDataset) -> dict[int, list[int]]:
    by_user: dict[int, list[int]] = {}
    for u, i in ds.test:
        by_user.setdefault(int(u), []).append(int(i))
    return by_user


def _idcg(n_pos: int, k: int) -> float:
    return float(sum(1.0 / np.log2(r + 1) for r in range(1, min(n_pos, k) + 1)))


def evaluate_scores(ds: KgDataset, score_fn, k: int):
    """Top-K Recall/NDCG averaged over test users.

    ``score_fn(user_ids)`` returns an (n_users, num_items) score block; each
    user's train positives are removed from the candidate set before
    ranking. Ties break by item index (stable sort on negated scores).
    """
    test_pos = _test_positives(ds)
    users = sorted(test_pos)
    if not users:
        raise ValueError("test split is empty")
    train_pos = ds.train_positives()
    recalls = []
    ndcgs = []
    chunk = 256
    for lo in range(0, len(users), chunk):
        ids = users[lo:lo + chunk]
        scores = np.array(score_fn(np.asarray(ids, dtype=np.int64)), dtype=np.float64)
        for row, u in enumerate(ids):
            s = scores[row].copy()
            held = list(train_pos[u])
            if held:
                s[held] = -np.inf
            top = np.argsort(-s, kind="stable")[:k]
            pos = set(test_pos[u])
            hits = [r for r, item in enumerate(top, start=1) if int(item) in pos]
            recalls.append(len(hits) / len(pos))
            dcg = sum(1.0 / np.log2(r + 1) for r in hits)
            ndcgs.append(dcg / _idcg(len(pos), k))
    return float(np.mean(recalls)), float(np.mean(ndcgs))


def evaluate(ds: KgDataset, readout: np.ndarray, k: int):
    """Rank every item (minus train positives) by readout dot product."""
    item_emb = readout[ds.num_users:ds.num_users + ds.num_items]

    def score_fn(user_ids):
        return readout[user_ids] @ item_emb.T

    return evaluate_scores(ds, score_fn, k)


def popularity_scores(ds: KgDataset) -> np.ndarray:
    """Item scores from train interaction counts (a model-free baseline)."""
    counts = np.zeros(ds.num_items, dtype=np.float64)
    for _, i in ds.train:
        counts[i] += 1
    return counts


# ---------------------------------------------------------------------------
# Full runs and reports
# ---------------------------------------------------------------------------

def train_run(ds: KgDataset, model_cfg: ModelConfig, cfg: TrainConfig,
              adjacency=None, max_steps_per_epoch: int | None = None):
    """Train from scratch; returns (params, report).

    Everything in the report except the ``timing`` subtree is a pure
    function of (dataset, configs, seed).
    """
    if adjacency is None:
        adjacency = build_adjacency(ds)
    rng = np.random.default_rng(cfg.seed)
    stream = RandomStream(cfg.seed)
    params = init_params(ds.num_nodes, model_cfg, cfg.seed)
    state = AdamState(params.as_dict())
    loss_curve = []
    epoch_seconds = []
    peak = equiv_peak = 0
    retained = 0
    t_total = time.monotonic()
    for _ in range(cfg.epochs):
        t0 = time.monotonic()
        stats = train_epoch(ds, adjacency, params, model_cfg, cfg, state,
                            stream, rng, max_steps=max_steps_per_epoch)
        epoch_seconds.append(time.monotonic() - t0)
        loss_curve.append(stats["mean_loss"])
        peak = max(peak, stats["peak_context_bytes"])
        equiv_peak = max(equiv_peak, stats["peak_fp32_equivalent_bytes"])
        retained = max(retained, stats["retained_context_bytes"])
    total_seconds = time.monotonic() - t_total
    readout = embed(params, adjacency, model_cfg)
    recall, ndcg = evaluate(ds, readout, cfg.eval_k)
    steady = epoch_seconds[1:] if len(epoch_seconds) > 1 else epoch_seconds
    report = {
        "config": {
            "lr": cfg.lr, "batch_size": cfg.batch_size, "epochs": cfg.epochs,
            "seed": cfg.seed, "l2": cfg.l2, "eval_k": cfg.eval_k,
            "bits": cfg.quant.bits, "rounding": cfg.quant.rounding,
            "layers": model_cfg.layers, "dim": model_cfg.dim,
            "aggregation": model_cfg.aggregation,
            "num_users": ds.num_users, "num_items": ds.num_items,
            "num_entities": ds.num_entities,
        },
        "metrics": {f"recall_at_{cfg.eval_k}": recall,
                    f"ndcg_at_{cfg.eval_k}": ndcg, "k": cfg.eval_k},
        "memory": memory_report(peak, equiv_peak,
                                retained_context_bytes=retained),
        "loss_curve": loss_curve,
        "timing": {
            "epoch_seconds": epoch_seconds,
            "median_epoch_seconds": float(np.median(steady)) if steady else 0.0,
            "total_seconds": total_seconds,
        },
    }
    return params, report


def memory_report(peak_bytes: int, fp32_equivalent: int, **extra) -> dict:
    """Ledger fragment: actual vs pass-through bytes and their ratio."""
    frag = {
        "activation_bytes_peak": int(peak_bytes),
        "fp32_equivalent_bytes": int(fp32_equivalent),
        "compression_ratio": (fp32_equivalent / peak_bytes) if peak_bytes else 1.0,
    }
    frag.update(extra)
    return frag


def bench_memory(ds: KgDataset, model_cfg: ModelConfig, cfg: TrainConfig,
                 bits_list=(32, 8, 4, 2, 1)) -> list[dict]:
    """One optimizer step per bit width; reports the context-byte ledger."""
    rows = []
    for bits in bits_list:
        quant = QuantConfig(bits=bits, rounding=cfg.quant.rounding)
        run_cfg = replace(cfg, epochs=1, quant=quant)
        adjacency = build_adjacency(ds)
        rng = np.random.default_rng(run_cfg.seed)
        stream = RandomStream(run_cfg.seed)
        params = init_params(ds.num_nodes, model_cfg, run_cfg.seed)
        state = AdamState(params.as_dict())
        stats = train_epoch(ds, adjacency, params, model_cfg, run_cfg, state,
                            stream, rng, max_steps=1)
        row = {"bits": bits}
        row.update(memory_report(stats["peak_context_bytes"],
                                 stats["peak_fp32_equivalent_bytes"]))
        rows.append(row)
    return rows


def compare_rounding(ds: KgDataset, model_cfg: ModelConfig, cfg: TrainConfig,
                     seeds) -> dict:
    """Paired stochastic-vs-nearest runs sharing seeds, data order, and bits."""
    pairs = []
    sr_better = 0
    for seed in seeds:
        arm = {}
        for rounding in (ROUND_STOCHASTIC, ROUND_NEAREST):
            quant = QuantConfig(bits=cfg.quant.bits, rounding=rounding)
            run_cfg = replace(cfg, seed=int(seed), quant=quant)
            _, report = train_run(ds, model_cfg, run_cfg)
            arm[rounding] = report
        entry = {
            "seed": int(seed),
            "sr_final_loss": arm[ROUND_STOCHASTIC]["loss_curve"][-1],
            "nr_final_loss": arm[ROUND_NEAREST]["loss_curve"][-1],
            "sr_recall": arm[ROUND_STOCHASTIC]["metrics"][f"recall_at_{cfg.eval_k}"],
            "nr_recall": arm[ROUND_NEAREST]["metrics"][f"recall_at_{cfg.eval_k}"],
        }
        sr_better += entry["sr_final_loss"] <= entry["nr_final_loss"]
        pairs.append(entry)
    return {
        "bits": cfg.quant.bits,
        "pairs": pairs,
        "sr_final_loss_leq_nr": int(sr_better),
        "seeds": [int(s) for s in seeds],
    }
