"""Command-line entry points.

Subcommands cover the whole workflow: synthesize a dataset, train, evaluate
a checkpoint, verify gradients, run the ablation table, dump attention maps
as grayscale rasters, and render a run report with figures.

Exit codes are part of the contract:
  0  success
  2  usage or I/O problem
  3  training aborted on non-finite values
  4  checkpoint missing or inconsistent
  5  verification (gradient check) failure
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import numerics as nm
from .harness import (
    ABLATION_VARIANTS,
    CheckpointError,
    SampleStore,
    TrainAbortError,
    TrainConfig,
    ablate,
    build_model,
    evaluate,
    load_checkpoint,
    train,
)
from .losses import total_loss
from .synthdata import (
    PRESETS,
    SceneConfig,
    generate_sample,
    load_manifest,
    load_sample,
    write_pgm,
)
from .synthdata import generate_dataset as _generate_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAIN_ABORT = 3
EXIT_CHECKPOINT = 4
EXIT_VERIFY = 5


def _write_resolved(out_dir: str, payload: dict) -> None:
    """Every command that owns an output directory records what it ran."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _parse_counts(text: str) -> dict[str, int]:
    counts = {}
    for part in text.split(","):
        if "=" not in part:
            raise ValueError(f"bad counts entry {part!r}; expected split=N")
        split, _, num = part.partition("=")
        counts[split.strip()] = int(num)
    return counts


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    if args.preset == "custom":
        cfg = SceneConfig()
    else:
        cfg = PRESETS[args.preset]
    if args.query_size or args.ref_size:
        cfg = replace(
            cfg,
            query_size=args.query_size or cfg.query_size,
            ref_size=args.ref_size or cfg.ref_size,
        )
    counts = _parse_counts(args.counts)
    manifest = _generate_dataset(args.seed, cfg, counts, args.out, preset=args.preset)
    _write_resolved(
        args.out,
        {
            "command": "gen-data",
            "seed": args.seed,
            "preset": args.preset,
            "counts": counts,
            "query_size": cfg.query_size,
            "ref_size": cfg.ref_size,
        },
    )
    total = sum(counts.values())
    print(f"wrote {total} samples to {args.out}")
    print(f"content_hash {manifest['content_hash']}")
    return EXIT_OK


# ------------------------------------------------------------------- train


_TRAIN_OVERRIDES = (
    "lr", "weight_decay", "batch_size", "epochs", "m_train", "n_tokens",
    "alpha", "seed", "eval_every", "channels", "heads",
)


def _resolve_train_config(args) -> TrainConfig:
    fields: dict = {}
    if args.config:
        with open(args.config) as f:
            fields.update(json.load(f))
    for name in _TRAIN_OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    return TrainConfig(**fields)


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--m", dest="m_train", type=int, help="refinement steps")
    p.add_argument("--tokens", dest="n_tokens", type=int)
    p.add_argument("--alpha", type=float, help="auxiliary loss weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--max-train-samples", type=int, default=None)
    p.add_argument("--max-val-samples", type=int, default=None)


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    _write_resolved(
        args.out,
        {"command": "train", "data": args.data, **cfg.as_dict()},
    )
    result = train(
        cfg,
        args.data,
        args.out,
        max_train_samples=args.max_train_samples,
        max_val_samples=args.max_val_samples,
        quiet=args.quiet,
    )
    print(json.dumps({"checkpoint": result.checkpoint_dir, "best": result.best}))
    return EXIT_OK


# -------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    model, cfg, extras = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    if manifest["query_size"] != extras["query_size"] or manifest["ref_size"] != extras["ref_size"]:
        raise CheckpointError(
            f"checkpoint expects {extras['query_size']}x{extras['ref_size']} rasters, "
            f"dataset provides {manifest['query_size']}x{manifest['ref_size']}"
        )
    store = SampleStore(args.data, args.split, manifest)
    m_eval = args.m if args.m is not None else cfg.m_train
    report = evaluate(model, store, m_eval, cfg)
    payload = {"split": args.split, "m_eval": m_eval, **report.as_dict()}
    text = json.dumps(payload, indent=1)
    print(text)
    if args.out:
        _write_resolved(
            args.out,
            {"command": "eval", "ckpt": args.ckpt, "data": args.data,
             "split": args.split, "m_eval": m_eval},
        )
        with open(os.path.join(args.out, "report.json"), "w") as f:
            f.write(text + "\n")
    return EXIT_OK


# -------------------------------------------------------------- grad-check


def cmd_grad_check(args) -> int:
    scene = SceneConfig(
        query_size=args.query_size,
        ref_size=args.ref_size,
        min_objects=2,
        max_objects=4,
    )
    sample = generate_sample(args.seed, scene)
    cfg = TrainConfig(
        m_train=args.m_train or 3,
        n_tokens=args.n_tokens or 8,
        channels=args.channels or 32,
        heads=args.heads or 4,
        seed=args.seed,
    )
    with nm.use_dtype(np.float64):
        model = build_model(cfg, scene.query_size, scene.ref_size)

        def build_loss():
            trace = model.forward(sample, cfg.m_train)
            return total_loss(trace, sample, cfg.alpha).node

        report = nm.grad_check(
            build_loss,
            model.registry,
            eps=args.eps,
            tol=args.tol,
            samples_per_param=args.samples_per_param,
        )
    print(report.summary())
    if not report.passed:
        worst = report.worst
        print(
            f"worst offender: {worst.name}[{worst.flat_index}] "
            f"analytic {worst.analytic:.10e} vs numeric {worst.numeric:.10e} "
            f"(rel err {worst.rel_err:.3e})",
            file=sys.stderr,
        )
        return EXIT_VERIFY
    return EXIT_OK


# ------------------------------------------------------------------ ablate


def cmd_ablate(args) -> int:
    cfg = _resolve_train_config(args)
    switches = [s.strip() for s in args.switches.split(",") if s.strip()]
    _write_resolved(
        args.out,
        {"command": "ablate", "data": args.data, "switches": switches, **cfg.as_dict()},
    )
    rows = ablate(
        cfg,
        args.data,
        args.out,
        switches,
        max_train_samples=args.max_train_samples,
        max_val_samples=args.max_val_samples,
    )
    # Step sweep of the already-trained full model: per-step metrics are a
    # function of unroll depth only, so row one carries every depth.
    sweep = [
        {"m_eval": j + 1,
         "acc25": rows[0]["acc25_per_step"][j],
         "acc50": rows[0]["acc50_per_step"][j]}
        for j in range(cfg.m_train)
    ]
    payload = {"rows": rows, "step_sweep": sweep}
    with open(os.path.join(args.out, "ablation.json"), "w") as f:
        json.dump(payload, f, indent=1)
    for row in rows:
        print(
            f"{row['variant']:<22s} acc25 {row['acc25']:0.3f} "
            f"acc50 {row['acc50']:0.3f} (m*={row['m_star']})"
        )
    return EXIT_OK


# ---------------------------------------------------------- dump-attention


def _to_u8(map2d: np.ndarray) -> np.ndarray:
    lo, hi = float(map2d.min()), float(map2d.max())
    if hi <= lo:
        return np.zeros(map2d.shape, dtype=np.uint8)
    return np.round((map2d - lo) / (hi - lo) * 255.0).astype(np.uint8)


def cmd_dump_attention(args) -> int:
    model, cfg, extras = load_checkpoint(args.ckpt)
    sample = load_sample(args.sample)
    m = args.m if args.m is not None else cfg.m_train
    with nm.no_grad():
        trace = model.forward(sample, m, record_attention=True)
    _write_resolved(
        args.out,
        {"command": "dump-attention", "ckpt": args.ckpt, "sample": args.sample, "m": m},
    )
    written = []
    for i, step in enumerate(trace.steps, start=1):
        _, h, w = step.agg_map.shape
        att = trace.attention[i - 1]  # (heads, n, h*w)
        for head in range(att.shape[0]):
            # One map per head: average the per-token attention rows.
            grid = att[head].mean(axis=0).reshape(h, w)
            path = os.path.join(args.out, f"step{i}_head{head}.pgm")
            write_pgm(path, _to_u8(grid))
            written.append(path)
        agg_path = os.path.join(args.out, f"step{i}_agg.pgm")
        write_pgm(agg_path, _to_u8(step.agg_map.array[0]))
        written.append(agg_path)
    print(f"wrote {len(written)} maps to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ report


def _load_ndjson(path: str) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    log_path = os.path.join(args.run, "train_log.ndjson")
    ablation_path = os.path.join(args.run, "ablation.json")
    have_log = os.path.isfile(log_path)
    have_ablation = os.path.isfile(ablation_path)
    if not have_log and not have_ablation:
        raise ValueError(f"nothing to report: no train_log.ndjson or ablation.json in {args.run}")

    os.makedirs(args.out, exist_ok=True)
    _write_resolved(args.out, {"command": "report", "run": args.run})
    written = []

    if have_log:
        records = _load_ndjson(log_path)
        train_recs = [r for r in records if r["split"] == "train"]
        val_recs = [r for r in records if r["split"] != "train"]

        fig, axes = plt.subplots(1, 2, figsize=(11, 4))
        axes[0].plot(
            [r["epoch"] for r in train_recs],
            [r["loss_total"] for r in train_recs],
            label="train",
        )
        if val_recs:
            axes[0].plot(
                [r["epoch"] for r in val_recs],
                [r["loss_total"] for r in val_recs],
                label="val",
            )
        axes[0].set_xlabel("epoch")
        axes[0].set_ylabel("total loss")
        axes[0].legend()
        axes[0].set_title("loss")

        if val_recs:
            steps = len(val_recs[-1]["acc25_per_step"])
            for j in range(steps):
                axes[1].plot(
                    [r["epoch"] for r in val_recs],
                    [r["acc25_per_step"][j] for r in val_recs],
                    label=f"step {j + 1}",
                )
            axes[1].set_xlabel("epoch")
            axes[1].set_ylabel("val Acc@0.25")
            axes[1].legend(fontsize=8)
            axes[1].set_title("accuracy by refinement step")
        fig.tight_layout()
        curve_path = os.path.join(args.out, "training_curves.png")
        fig.savefig(curve_path, dpi=120)
        plt.close(fig)
        written.append(curve_path)

        csv_path = os.path.join(args.out, "metrics.csv")
        steps = max(
            (len(r["acc25_per_step"]) for r in records if r["acc25_per_step"]),
            default=0,
        )
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            header = ["epoch", "split", "loss_total", "loss_det", "loss_token", "loss_sam"]
            header += [f"acc25_step{j + 1}" for j in range(steps)]
            header += [f"acc50_step{j + 1}" for j in range(steps)]
            writer.writerow(header)
            for r in records:
                row = [r["epoch"], r["split"], r["loss_total"], r["loss_det"],
                       r["loss_token"], r["loss_sam"]]
                for key in ("acc25_per_step", "acc50_per_step"):
                    vals = r[key] or []
                    row += list(vals) + [""] * (steps - len(vals))
                writer.writerow(row)
        written.append(csv_path)

    if have_ablation:
        with open(ablation_path) as f:
            payload = json.load(f)
        rows = payload["rows"]
        fig, ax = plt.subplots(figsize=(7, 4))
        names = [r["variant"] for r in rows]
        ax.bar(names, [r["acc25"] for r in rows], label="Acc@0.25")
        ax.bar(names, [r["acc50"] for r in rows], width=0.5, label="Acc@0.50")
        ax.set_ylabel("accuracy")
        ax.set_title("ablation comparison")
        ax.legend()
        plt.setp(ax.get_xticklabels(), rotation=30, ha="right", fontsize=8)
        fig.tight_layout()
        ab_path = os.path.join(args.out, "ablation.png")
        fig.savefig(ab_path, dpi=120)
        plt.close(fig)
        written.append(ab_path)

    for path in written:
        print(path)
    return EXIT_OK


# -------------------------------------------------------------- dispatcher


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recot",
        description="Recurrent cross-view localization: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a paired-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", required=True, help="e.g. train=2000,val=200,test=200")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--preset", choices=("custom",) + tuple(sorted(PRESETS)), default="custom")
    p.add_argument("--query-size", type=int, default=None)
    p.add_argument("--ref-size", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--m", type=int, default=None, help="refinement steps at eval")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="verify tape gradients on a toy setup")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples-per-param", type=int, default=4)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--tokens", dest="n_tokens", type=int, default=None)
    p.add_argument("--m", dest="m_train", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--query-size", type=int, default=16)
    p.add_argument("--ref-size", type=int, default=32)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train the full model and switch variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.add_argument(
        "--switches",
        default="no_rfem,no_M,no_l_sam,no_l_token",
        help=f"comma list from {sorted(set(ABLATION_VARIANTS) - {'full'})}",
    )
    _add_train_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attention", help="write attention maps as PGM files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="one sample directory")
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=None)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("report", help="render figures and CSV from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.func(args)
    except TrainAbortError as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return EXIT_TRAIN_ABORT
    except CheckpointError as e:
        print(f"error: checkpoint: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
