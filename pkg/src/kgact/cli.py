"""Command-line entry point tying data, model, trainer, and verifiers together.

Commands: train, eval, bench-memory, verify-quant, compare-rounding,
gen-data. Flags mirror the knobs that matter for the experiments (--bits,
--rounding, --layers, --dim, --batch, --lr, --epochs, --seed). A key=value
config file can pre-set any long flag; KGACT_OUTDIR sets the default output
directory. Timing lives in its own report subtree so reports from identical
(seed, config) runs are byte-identical outside it.
"""

import argparse
import json
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (ConfigError, ParseError, build_adjacency, load_dataset,
                   parse_synth_spec, save_dataset, synth_generate)
from .model import ModelConfig, embed
from .quantize import QuantConfig, quantizer_verification
from .train import TrainConfig, bench_memory, compare_rounding, evaluate, train_run

BITS_CHOICES = (1, 2, 4, 8, 32)


def _outdir(args) -> str:
    out = args.outdir or os.environ.get("KGACT_OUTDIR", ".")
    os.makedirs(out, exist_ok=True)
    return out


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _add_data_flags(p):
    p.add_argument("--data", help="dataset directory (interactions.tsv, triples.tsv)")
    p.add_argument("--synthetic", help="'default' or key=value overrides", default=None)
    p.add_argument("--kcore", type=int, default=0,
                   help="apply k-core filtering to loaded interactions")


def _add_model_flags(p):
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--aggregation", choices=("sum", "last"), default="sum")
    p.add_argument("--bits", type=int, choices=BITS_CHOICES, default=32)
    p.add_argument("--rounding", choices=("stochastic", "nearest"), default="stochastic")


def _add_train_flags(p):
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--k", type=int, default=20, help="evaluation cutoff")


def _resolve_dataset(args):
    if args.data and args.synthetic:
        raise SystemExit("exactly one data source: pass --data or --synthetic, not both")
    if args.data:
        return load_dataset(args.data, seed=args.seed, kcore=args.kcore)
    spec = parse_synth_spec(args.synthetic or "default")
    return synth_generate(spec, seed=args.seed)


def _configs(args):
    quant = QuantConfig(bits=args.bits, rounding=args.rounding)
    model_cfg = ModelConfig(layers=args.layers, dim=args.dim,
                            aggregation=args.aggregation, quant=quant)
    train_cfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                            seed=args.seed, quant=quant, l2=args.l2, eval_k=args.k)
    return model_cfg, train_cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgact",
        description="Activation-compressed training for KG recommenders")
    parser.add_argument("--config", help="key=value file providing flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write report + checkpoint")
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_bench = sub.add_parser("bench-memory", help="context-byte ledger per bit width")
    p_verify = sub.add_parser("verify-quant", help="Monte-Carlo quantizer checks")
    p_cmp = sub.add_parser("compare-rounding", help="stochastic vs nearest twin runs")
    p_gen = sub.add_parser("gen-data", help="materialize a synthetic dataset")

    for p in (p_train, p_eval, p_bench, p_cmp, p_gen):
        _add_data_flags(p)
    for p in (p_train, p_eval, p_bench, p_verify, p_cmp, p_gen):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--outdir", help="output directory (default $KGACT_OUTDIR or .)")
    for p in (p_train, p_bench, p_cmp):
        _add_model_flags(p)
        _add_train_flags(p)
    p_train.add_argument("--out", default="run", help="output file prefix")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--k", type=int, default=20)
    p_eval.add_argument("--out", default="eval", help="output file prefix")
    p_bench.add_argument("--out", default="bench", help="output file prefix")
    p_verify.add_argument("--bits", default="1,2,4,8",
                          help="comma-separated bit widths to verify")
    p_verify.add_argument("--trials", type=int, default=100000)
    p_verify.add_argument("--rows", type=int, default=100)
    p_verify.add_argument("--dim", type=int, default=64)
    p_verify.add_argument("--out", default="verify", help="output file prefix")
    p_cmp.add_argument("--seeds", type=int, default=5, help="number of paired seeds")
    p_cmp.add_argument("--out", default="rounding", help="output file prefix")
    p_gen.add_argument("--out", default="dataset", help="output directory name")
    return parser


def _apply_config_file(parser, argv):
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    defaults = {}
    with open(known.config, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SystemExit(f"{known.config}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            defaults[key.strip().replace("-", "_")] = value.strip()
    known_dests = set()
    for action in parser._subparsers._group_actions[0].choices.values():
        usable = {}
        for key, value in defaults.items():
            for act in action._actions:
                if act.dest == key:
                    known_dests.add(key)
                    usable[key] = act.type(value) if act.type is not None else value
                    break
        action.set_defaults(**usable)
    unknown = set(defaults) - known_dests
    if unknown:
        raise SystemExit(f"{known.config}: unknown config keys {sorted(unknown)}")
    return argv


def cmd_train(args) -> int:
    ds = _resolve_dataset(args)
    model_cfg, train_cfg = _configs(args)
    params, report = train_run(ds, model_cfg, train_cfg)
    out = _outdir(args)
    prefix = os.path.join(out, args.out)
    write_json(prefix + ".report.json", report)
    save_checkpoint(prefix + ".ckpt", params, meta=report["config"])
    print(f"wrote {prefix}.report.json and {prefix}.ckpt")
    print(json.dumps(report["metrics"], sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    ds = _resolve_dataset(args)
    model_cfg = ModelConfig(layers=meta["layers"], dim=meta["dim"],
                            aggregation=meta["aggregation"])
    readout = embed(params, build_adjacency(ds), model_cfg)
    recall, ndcg = evaluate(ds, readout, args.k)
    payload = {"metrics": {f"recall_at_{args.k}": recall, f"ndcg_at_{args.k}": ndcg,
                           "k": args.k}, "checkpoint": args.checkpoint}
    path = os.path.join(_outdir(args), args.out + ".json")
    write_json(path, payload)
    print(json.dumps(payload["metrics"], sort_keys=True))
    return 0


def cmd_bench_memory(args) -> int:
    ds = _resolve_dataset(args)
    model_cfg, train_cfg = _configs(args)
    rows = bench_memory(ds, model_cfg, train_cfg)
    path = os.path.join(_outdir(args), args.out + ".json")
    write_json(path, {"rows": rows, "config": {"layers": args.layers, "dim": args.dim,
                                               "batch": args.batch, "seed": args.seed}})
    print(f"{'bits':>5} {'context bytes':>15} {'fp32 bytes':>12} {'ratio':>7}")
    for row in rows:
        print(f"{row['bits']:>5} {row['activation_bytes_peak']:>15} "
              f"{row['fp32_equivalent_bytes']:>12} {row['compression_ratio']:>7.2f}")
    return 0


def cmd_verify_quant(args) -> int:
    bits = tuple(int(b) for b in str(args.bits).split(","))
    for b in bits:
        if b not in (1, 2, 4, 8):
            raise SystemExit(f"verify-quant checks b-bit modes, got {b}")
    report = quantizer_verification(bits_list=bits, n_rows=args.rows, dim=args.dim,
                                    trials=args.trials, seed=args.seed)
    path = os.path.join(_outdir(args), args.out + ".json")
    write_json(path, report)
    for b, entry in report["bits"].items():
        print(f"b={b}: mean-dev/bound={entry['max_mean_dev_over_bound']:.3f} "
              f"var/bound={entry['max_row_var_over_bound']:.3f} "
              f"tightness=[{entry['tightness_min']:.3f},{entry['tightness_max']:.3f}] "
              f"{'PASS' if entry['passed'] else 'FAIL'}")
    print("passed" if report["passed"] else "failed")
    return 0 if report["passed"] else 1


def cmd_compare_rounding(args) -> int:
    ds = _resolve_dataset(args)
    model_cfg, train_cfg = _configs(args)
    report = compare_rounding(ds, model_cfg, train_cfg, seeds=range(args.seeds))
    path = os.path.join(_outdir(args), args.out + ".json")
    write_json(path, report)
    for pair in report["pairs"]:
        print(f"seed={pair['seed']} SR loss={pair['sr_final_loss']:.4f} "
              f"NR loss={pair['nr_final_loss']:.4f}")
    print(f"SR final loss <= NR in {report['sr_final_loss_leq_nr']}/{len(report['pairs'])} seeds")
    return 0


def cmd_gen_data(args) -> int:
    if args.data:
        raise SystemExit("gen-data generates synthetic data; --data does not apply")
    spec = parse_synth_spec(args.synthetic or "default")
    ds = synth_generate(spec, seed=args.seed)
    outdir = os.path.join(_outdir(args), args.out)
    save_dataset(ds, outdir)
    print(f"wrote dataset to {outdir} "
          f"({ds.num_users} users, {ds.num_items} items, {ds.num_entities} entities, "
          f"{len(ds.train)}/{len(ds.val)}/{len(ds.test)} train/val/test pairs)")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-memory": cmd_bench_memory,
    "verify-quant": cmd_verify_quant,
    "compare-rounding": cmd_compare_rounding,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ParseError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
