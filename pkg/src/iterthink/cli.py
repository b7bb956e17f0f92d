"""Command-line front end: ``iterthink {train,eval,analyze,plot,replicate-stability,datagen}``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import CheckpointError, checkpoint_from_model, load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, save_config
from .data import dump_instances, random_instances
from .layers import ConfigurationError
from .training import (
    METRICS_HEADER,
    DivergenceError,
    EpochRecord,
    extrapolation_sweep,
    lr_at,
    train,
    write_metrics_csv,
    write_sweep_csv,
)

log = logging.getLogger("iterthink")

FIXED_POINT_DISTANCE = 1e-6


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


# commands ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
        cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    result = train(cfg.model_spec(), cfg.train_config(early_stop_acc=args.early_stop))
    write_metrics_csv(result.records, out / "metrics.csv")
    best = result.best_model()
    best.reconverge()
    save_checkpoint(checkpoint_from_model(best, cfg, result.best_optimizer, result.best_epoch, kind="best"), out / "best.ckpt")
    final = result.model
    final.reconverge()
    save_checkpoint(checkpoint_from_model(final, cfg, result.optimizer, result.best_epoch, kind="final",
                                          last_epoch=result.records[-1].epoch), out / "final.ckpt")
    rec = result.records[result.best_epoch]
    print(f"best epoch {result.best_epoch}: val_acc {rec.val_acc:.4f} val_loss {rec.val_loss:.5f}")
    return 0


def cmd_eval(args) -> int:
    model, _, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    m_list = args.sweep if args.sweep else [args.iters if args.iters else cfg.m_train]
    rows = extrapolation_sweep(model, args.bits, args.count, m_list, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, args.count, args.bits, out / "sweep.csv")
    for m, acc in rows:
        print(f"M={m} accuracy={acc:.4f}")
    return 0


def _probe_input(bits: int, count: int, seed: int) -> np.ndarray:
    return random_instances(bits, count, seed)[0][:, None, :].astype(np.float64)


def cmd_analyze(args) -> int:
    model, _, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    model.reconverge()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variant = model.spec.variant
    status = 0
    if args.mode == "spectral":
        audit = analysis.audit_spectral_norms(model)
        analysis.write_json(audit.to_json(), out / "spectral.json")
        for e in audit.entries:
            print(f"{e['layer']}: {e['norm']:.6f}{' (constrained)' if e['constrained'] else ''}")
    elif args.mode == "certify":
        cert = analysis.certify_lipschitz(model, args.bits)
        analysis.write_json(cert.to_json(), out / "certificate.json")
        print(f"K = {cert.K:.6f}")
        if cert.K >= 1:
            log.warning("%s map is not certified contractive (K = %.4f >= 1)", variant, cert.K)
    elif args.mode == "contraction":
        x = _probe_input(args.bits, 1, args.seed)
        rep = analysis.verify_contraction(model, x, args.pairs, args.seed)
        analysis.write_json({"max_ratio": rep.max_ratio, "pairs": args.pairs}, out / "contraction.json")
        print(f"max ratio {rep.max_ratio:.6f}")
    elif args.mode == "fixedpoint":
        x = _probe_input(args.bits, 1, args.seed)
        rep = analysis.probe_model_fixed_point(model, x, args.starts, args.tol, args.max_iters, args.seed)
        analysis.write_json(rep.to_json(), out / "fixedpoint.json")
        worst = max(max(r) for r in rep.distances)
        print(f"converged={rep.converged} max distance {worst:.3e} decay {rep.decay:.6f}")
        if variant == "DTL" and not (rep.converged and worst < FIXED_POINT_DISTANCE):
            print("fixed point not unique within tolerance", file=sys.stderr)
            status = 1
    elif args.mode == "growth":
        x = _probe_input(args.bits, args.count, args.seed)
        tr = analysis.growth_trace(model, x, args.iters or cfg.m_train)
        analysis.write_json({"ratios": [r if math.isfinite(r) else "inf" for r in tr.ratios],
                             "overflow": tr.overflow, "overflow_iteration": tr.overflow_iteration}, out / "growth.json")
        print(" ".join(f"{r:.4f}" for r in tr.ratios))
    elif args.mode == "overthink":
        m_list = args.sweep or [cfg.m_train]
        rep = analysis.overthinking_scan(model, args.bits, args.count, m_list, args.seed, args.threshold)
        analysis.write_json({"table": [[m, a] for m, a in rep.table], "peak": rep.peak, "final": rep.final,
                             "flagged": rep.flagged, "threshold": rep.threshold}, out / "overthink.json")
        print(f"peak {rep.peak:.4f} final {rep.final:.4f} overthinking={rep.flagged}")
    return status


def cmd_plot(args) -> int:
    from .plotting import plot_csv

    try:
        svg = plot_csv(args.input, args.x, args.y, args.group)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    Path(args.out).write_text(svg)
    return 0


STABILITY_HEADER = ["variant", "width", "run", "seed"] + METRICS_HEADER


def cmd_replicate_stability(args) -> int:
    base = _load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for width in args.widths:
        path = out / f"stability_w{width}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STABILITY_HEADER)
            for variant in args.variants:
                for run in range(args.runs):
                    seed = args.seed + run
                    cfg = replace(base, variant=variant, width=width, precision=args.precision, seed=seed)
                    if args.epochs is not None:
                        cfg = replace(cfg, epochs=args.epochs)
                    if args.dataset_size is not None:
                        cfg = replace(cfg, dataset_size=args.dataset_size)
                    cfg.validate()
                    tcfg = cfg.train_config()
                    records: list[EpochRecord] = []
                    event = None
                    try:
                        result = train(cfg.model_spec(), tcfg, on_epoch=records.append)
                    except DivergenceError as exc:
                        event = exc.epoch if exc.epoch is not None else len(records)
                    else:
                        if args.save_checkpoints:
                            ckdir = out / "checkpoints"
                            ckdir.mkdir(exist_ok=True)
                            final = result.model
                            final.reconverge()
                            save_checkpoint(checkpoint_from_model(final, cfg, result.optimizer, result.best_epoch,
                                                                  kind="final", last_epoch=records[-1].epoch),
                                            ckdir / f"{variant}_w{width}_run{run}.ckpt")
                    if event is not None:
                        # the diverging epoch and everything after it count as diverged
                        for e in range(len(records), tcfg.epochs):
                            records.append(EpochRecord(e, math.nan, math.nan, records[-1].val_acc if records else 0.0,
                                                       lr_at(e, tcfg), True))
                    for r in records:
                        w.writerow([variant, width, run, seed, r.epoch, repr(r.train_loss), repr(r.val_loss),
                                    repr(r.val_acc), repr(r.lr), int(r.diverged)])
                    fh.flush()
                    first = next((r.epoch for r in records if r.diverged), None)
                    summary.append([variant, width, run, seed, "" if first is None else first,
                                    repr(records[-1].val_acc), repr(max(r.val_acc for r in records))])
                    log.info("%s w=%d run %d: diverged at %s, final val_acc %.4f", variant, width, run,
                             first, records[-1].val_acc)
    with open(out / "stability_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "width", "run", "seed", "first_divergence_epoch", "final_val_acc", "best_val_acc"])
        w.writerows(summary)
    return 0


def cmd_datagen(args) -> int:
    bits, targets = random_instances(args.bits, args.count, args.seed)
    if args.out and args.out != "-":
        with open(args.out, "w") as fh:
            dump_instances(bits, targets, fh)
    else:
        dump_instances(bits, targets, sys.stdout)
    return 0


# parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iterthink", description="Recurrent prefix-sum networks: train, evaluate, certify.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and write metrics and checkpoints")
    t.add_argument("--config", help="JSON run config (defaults when omitted)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--early-stop", type=float, default=None, metavar="ACC",
                   help="stop once validation accuracy reaches ACC")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--bits", type=int, default=32)
    e.add_argument("--count", type=int, default=10000)
    g = e.add_mutually_exclusive_group()
    g.add_argument("--iters", type=int)
    g.add_argument("--sweep", type=_int_list, help='comma-separated iteration counts, e.g. "30,100,300"')
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="diagnostics of the recurrent map")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--mode", required=True, choices=["spectral", "certify", "contraction", "fixedpoint", "growth", "overthink"])
    a.add_argument("--bits", type=int, default=32)
    a.add_argument("--count", type=int, default=100)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--pairs", type=int, default=200)
    a.add_argument("--starts", type=int, default=5)
    a.add_argument("--tol", type=float, default=1e-10)
    a.add_argument("--max-iters", type=int, default=10000)
    a.add_argument("--iters", type=int)
    a.add_argument("--sweep", type=_int_list)
    a.add_argument("--threshold", type=float, default=0.1)
    a.add_argument("--out", default=".")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plot", help="SVG line chart from a CSV file")
    pl.add_argument("--input", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--x", required=True)
    pl.add_argument("--y", required=True)
    pl.add_argument("--group")
    pl.set_defaults(func=cmd_plot)

    r = sub.add_parser("replicate-stability", help="repeated seeded training across widths")
    r.add_argument("--widths", type=_int_list, required=True)
    r.add_argument("--runs", type=int, default=3)
    r.add_argument("--precision", choices=["f32", "f64"], default="f32")
    r.add_argument("--variants", type=lambda s: [v.strip() for v in s.split(",") if v.strip()], default=["DTR"])
    r.add_argument("--config", help="base JSON run config")
    r.add_argument("--epochs", type=int)
    r.add_argument("--dataset-size", type=int)
    r.add_argument("--seed", type=int, default=0, help="seed of the first run; later runs count up")
    r.add_argument("--save-checkpoints", action="store_true", help="also write each run's final checkpoint")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_replicate_stability)

    d = sub.add_parser("datagen", help="dump instances as bits<TAB>target lines")
    d.add_argument("--bits", type=int, default=32)
    d.add_argument("--count", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="-")
    d.set_defaults(func=cmd_datagen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
