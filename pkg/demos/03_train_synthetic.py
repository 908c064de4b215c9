#!/usr/bin/env python3
"""Train the recommender with compressed backward contexts.

Trains the same model twice on the default synthetic dataset: once with
full-precision context storage and once storing every dense context with
2-bit stochastic quantization. Forward passes are identical in both runs;
only what the backward pass reads differs, so the loss curves track each
other closely while the 2-bit run keeps a fraction of the bytes.
"""

from kgact import ModelConfig, QuantConfig, TrainConfig, parse_synth_spec, synth_generate
from kgact.train import train_run

ds = synth_generate(parse_synth_spec("default"), seed=0)

reports = {}
for bits in (32, 2):
    quant = QuantConfig(bits=bits)
    cfg = TrainConfig(batch_size=256, epochs=20, seed=0, quant=quant)
    _, reports[bits] = train_run(ds, ModelConfig(layers=3, dim=64, quant=quant), cfg)

print(f"{'epoch':>6} {'fp32 loss':>10} {'int2 loss':>10}")
for e, (a, b) in enumerate(zip(reports[32]["loss_curve"],
                               reports[2]["loss_curve"]), start=1):
    if e % 2 == 0:
        print(f"{e:>6} {a:>10.4f} {b:>10.4f}")

print()
for bits in (32, 2):
    rep = reports[bits]
    mem = rep["memory"]
    print(f"b={bits:>2}: Recall@20 {rep['metrics']['recall_at_20']:.4f}  "
          f"NDCG@20 {rep['metrics']['ndcg_at_20']:.4f}  "
          f"context {mem['activation_bytes_peak']:,} B "
          f"({mem['compression_ratio']:.2f}x)")
