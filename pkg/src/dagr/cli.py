"""Command-line entry point: ``dagr {gradcheck,flow,train,diagnose,robustness}``.

Exit codes: 0 success, 1 failed check or domain error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checks import gradient_suite
from .config import RunConfig, parse_config
from .data import generate_dataset
from .diagnostics import geometry_report
from .errors import CheckFailed, ConfigError, DagrError
from .flow import run_flow
from .io import ReportEnvelope, read_embedding_dump, write_csv, write_embedding_dump
from .trainer import embeddings, estimate_modality_gap, robustness_sweep, train

log = logging.getLogger("dagr")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _epoch_list(text: str) -> list[int]:
    try:
        vals = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("epochs must be >= 0")
    return vals


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an unsigned integer, got {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults for every missing key)")
    common.add_argument("--seed", type=_seed, help="override the config seed")
    common.add_argument("--out", default="dagr-out", help="output directory (default: %(default)s)")
    common.add_argument("--threads", type=_positive_int, default=1,
                        help="worker threads for independent runs; never changes results")

    p = _Parser(prog="dagr", description="Geometry-regularized multimodal training toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every gradient")
    for name, what in (("flow", "steps"), ("train", "epochs")):
        sp = sub.add_parser(name, parents=[common],
                            help="particle flow on the sphere" if name == "flow" else "train on synthetic data")
        sp.add_argument("--dump-embeddings", type=_epoch_list, default=[], metavar="LIST",
                        help=f"comma-separated {what} at which to write embedding dumps")
    sp = sub.add_parser("diagnose", parents=[common], help="geometry report for an embedding dump")
    sp.add_argument("--input", help="embedding dump CSV (overrides diagnose.input)")
    sub.add_parser("robustness", parents=[common], help="test-time corruption sweeps")
    return p


def _envelope(command: str, cfg: RunConfig, results: dict) -> ReportEnvelope:
    return ReportEnvelope(command, cfg.echo(), cfg["seed"], results)


def cmd_gradcheck(cfg: RunConfig, args, out: Path) -> int:
    g = cfg["gradcheck"]
    summary = gradient_suite(B=g["B"], d=g["d"], M=g["M"], trials=g["trials"], hinge_margin=g["hinge_margin"],
                             step=g["step"], tol=g["tol"], t=cfg["t"], tau=cfg["tau"], seed=cfg["seed"],
                             corrupt=g["debug_corrupt_gradient"])
    _envelope("gradcheck", cfg, summary.to_dict()).write(out / "gradcheck.json")
    print(f"gradcheck: max relative error {summary.max_error:.3e} (tol {summary.tol:.1e})")
    if not summary.passed:
        worst = max(summary.checks, key=summary.checks.get)
        raise CheckFailed(f"gradient check failed: {worst} has relative error {summary.checks[worst]:.3e}")
    return EXIT_OK


def cmd_flow(cfg: RunConfig, args, out: Path) -> int:
    fcfg = cfg.flow_config()
    wanted = set(args.dump_embeddings)

    def on_step(step, state):
        if step in wanted:
            write_embedding_dump(out / f"flow_embeddings_step{step}.csv", state)

    rec, _ = run_flow(fcfg, on_step=on_step)
    results = rec.to_dict()
    results["final_eff_rank"] = [series[-1] for series in zip(*rec.eff_rank)] if rec.eff_rank else []
    _envelope("flow", cfg, results).write(out / "flow.json")
    (out / "flow.csv").write_text(rec.to_csv(), encoding="utf-8")
    print(f"flow: {fcfg.steps} steps, final effective rank {results['final_eff_rank']}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    tcfg = cfg.train_config()
    data = generate_dataset(cfg.data_config())
    wanted = set(args.dump_embeddings)

    def on_epoch(epoch, model):
        if epoch in wanted:
            write_embedding_dump(out / f"train_embeddings_epoch{epoch}.csv", embeddings(data[1], model))

    report, _, _ = train(data, tcfg, on_epoch=on_epoch)
    results = report.to_dict()
    if cfg["estimate_gap"]:
        gap = estimate_modality_gap(data, tcfg)
        report.delta_hat = gap["delta_hat"]
        results = report.to_dict()
        results["gap"] = gap
    _envelope("train", cfg, results).write(out / "train.json")
    write_csv(out / "train.csv", report.csv_rows())
    print(f"train: fused test accuracy {report.fused_acc[-1]:.4f} after {tcfg.epochs} epochs")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, args, out: Path) -> int:
    source = args.input or cfg["diagnose"]["input"]
    if not source:
        raise ConfigError("diagnose needs an embedding dump: pass --input or set diagnose.input", key="diagnose.input")
    s = read_embedding_dump(source)
    d = cfg["diagnose"]
    rep = geometry_report(s, cfg["tau"], cfg["t"], d["ks"], d["normalize_sem"], cfg["seed"])
    results = {"input": str(source), "modalities": s.modality_names, "n_samples": s.B, **rep.to_dict()}
    _envelope("diagnose", cfg, results).write(out / "diagnose.json")
    print(f"diagnose: {s.M} modalities x {s.B} samples, effective rank {rep.effective_rank}")
    return EXIT_OK


def _robustness_cell(cfg: RunConfig, seed: int) -> dict:
    tcfg = cfg.train_config(seed)
    tcfg.diag_every = 0
    data = generate_dataset(cfg.data_config(seed))
    _, model, _ = train(data, tcfg)
    return {"seed": seed, "sweeps": [robustness_sweep(data, model, spec) for spec in cfg.corruption_specs()]}


def cmd_robustness(cfg: RunConfig, args, out: Path) -> int:
    seeds = [cfg["seed"]] if args.seed is not None else list(cfg["robustness"]["seeds"])
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        cells = list(pool.map(lambda s: _robustness_cell(cfg, s), seeds))
    target = cfg["robustness"]["target"]
    summary, rows = {}, [["kind", "severity", "target_unimodal_mean", "fused_mean"]]
    for k, spec in enumerate(cfg.corruption_specs()):
        uni = np.mean([[u[target] for u in c["sweeps"][k]["unimodal"]] for c in cells], axis=0)
        fused = np.mean([c["sweeps"][k]["fused"] for c in cells], axis=0)
        summary[spec.kind] = {
            "severity": list(spec.severities),
            "target_unimodal_mean": uni.tolist(),
            "fused_mean": fused.tolist(),
            "max_severity_not_better": bool(uni[int(np.argmax(spec.severities))] <= uni[int(np.argmin(spec.severities))]),
        }
        rows += [[spec.kind, float(s), float(a), float(f)] for s, a, f in zip(spec.severities, uni, fused)]
    _envelope("robustness", cfg, {"seeds": seeds, "target": target, "summary": summary, "cells": cells}).write(out / "robustness.json")
    write_csv(out / "robustness.csv", rows)
    print(f"robustness: {len(summary)} corruption kinds over {len(seeds)} seeds")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "flow": cmd_flow,
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "robustness": cmd_robustness,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("DAGR_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](cfg, args, Path(args.out))
    except ConfigError as exc:
        print(f"dagr: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailed as exc:
        print(f"dagr: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except DagrError as exc:
        print(f"dagr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
