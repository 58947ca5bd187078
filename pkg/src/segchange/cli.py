"""Command line entry point: ``segchange {train,eval,synth-data,bench-attn,report}``."""
import argparse
import json
import logging
import os
import sys

from . import config as cfglib
from .dataio import SynthConfig, generate_synthetic, load_dataset, write_dataset
from .errors import ConfigError, SegChangeError
from .harness import bench_attention, evaluate, load_checkpoint, save_checkpoint, train


def cmd_train(args):
    cfg = cfglib.load_config(args.config)
    if not cfg.data.root:
        raise ConfigError("data.root must be set to train from the command line")
    prompt = cfg.data.prompt or None
    train_split = load_dataset(cfg.data.root, cfg.data.train_split, default_prompt=prompt)
    val_split = None
    if cfg.data.val_split:
        val_split = load_dataset(cfg.data.root, cfg.data.val_split, default_prompt=prompt)
    out_dir = args.out or cfg.out_dir or "runs"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(cfglib.serialize(cfg))
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(cfg, train_split, val_split, resume=resume, out_dir=out_dir)
    save_checkpoint(result.best, os.path.join(out_dir, "best.pt"))
    for entry in result.log:
        print(json.dumps(entry, sort_keys=True))
    print(f"best epoch {result.best_epoch}; checkpoints in {out_dir}", file=sys.stderr)


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    cfg = cfglib.from_flat_values(ckpt["config"])
    prompt = cfg.data.prompt or None
    split = load_dataset(args.data, args.split, default_prompt=prompt)
    result = evaluate(ckpt, split, args.threshold, cfg=cfg, dump_dir=args.dump_masks)
    text = result.report.to_json(indent=2)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)


def cmd_synth(args):
    splits = []
    for i, (name, n) in enumerate((("train", args.n), ("val", args.n_val), ("test", args.n_val))):
        if n > 0:
            cfg = SynthConfig(n_samples=n, height=args.size, width=args.size, seed=args.seed + i)
            splits.append(generate_synthetic(cfg, split=name))
    write_dataset(args.out, splits)
    print(f"wrote {sum(len(s) for s in splits)} samples to {args.out}")


def _csv(kind):
    def parse(text):
        return [kind(v) for v in text.split(",") if v.strip()]
    return parse


def cmd_bench(args):
    rows = bench_attention(args.sizes, args.modes, dim=args.dim, attn_dim=args.attn_dim,
                           repeats=args.repeats)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(rows, f, indent=2)
    for r in rows:
        print(f"{r['mode']:>16} n={r['n']:>6} evals={r['score_evals']:>10} time={r['time_s']:.5f}s")


def render_report(paths):
    lines = []
    metrics, bench = [], []
    for path in paths:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        if isinstance(data, list):
            bench.extend(data)
        else:
            metrics.append((os.path.basename(path), data))
    if metrics:
        lines += ["| run | F1 | IoU | OA (%) | TP | FP | FN | TN |",
                  "|---|---|---|---|---|---|---|---|"]
        for name, d in metrics:
            lines.append(f"| {name} | {d['f1']:.4f} | {d['iou']:.4f} | {100 * d['oa']:.2f} "
                         f"| {d['tp']} | {d['fp']} | {d['fn']} | {d['tn']} |")
    if bench:
        if lines:
            lines.append("")
        lines += ["| mode | n | score evaluations | time (s) |", "|---|---|---|---|"]
        for r in bench:
            lines.append(f"| {r['mode']} | {r['n']} | {r['score_evals']} | {r['time_s']:.5f} |")
    return "\n".join(lines) + "\n"


def cmd_report(args):
    text = render_report(args.inputs)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")


def build_parser():
    p = argparse.ArgumentParser(prog="segchange")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.add_argument("--out", help="output directory (default: out_dir from the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--dump-masks")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth-data", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--n-val", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench-attn", help="time the BEV attention variants")
    b.add_argument("--sizes", type=_csv(int), default=[256, 1024, 4096])
    b.add_argument("--modes", type=_csv(str), default=["additive_exact", "additive_linear"])
    b.add_argument("--dim", type=int, default=16)
    b.add_argument("--attn-dim", type=int, default=16)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="render JSON reports as a markdown table")
    r.add_argument("--in", dest="inputs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SegChangeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
