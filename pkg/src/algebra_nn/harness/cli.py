"""Command line entry point: ``algebra-nn {train,prune,bench,report,selftest}``.

Outputs go to ``--out``, else ``$ALGEBRA_NN_OUT``, else ``./runs``. The exit
status is 0 only when every check a subcommand performs passes.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from ..algebra import AlgebraId
from ..cost import layer_cost
from ..nn.serialize import CheckpointError
from ..pruning import sparsity_csv, sparsity_report
from . import bench as B
from .config import ExperimentConfig
from .data import DatasetError
from .selftest import run_all
from .train import NonFiniteLossError, build_model, load_checkpoint, run_cost, train

OUT_ENV = "ALGEBRA_NN_OUT"
EXIT_OK, EXIT_FAIL, EXIT_ERROR, EXIT_NONFINITE = 0, 1, 2, 3


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.override(args.set or [])


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config (defaults used when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--out", help="output directory")


def cmd_train(args, prune: bool = False) -> int:
    cfg = _load_config(args)
    if prune:
        if args.sparsity is not None:
            cfg = cfg.override([f"prune.final_sparsity={args.sparsity}"])
        if args.criterion:
            cfg = cfg.override([f"prune.criterion={args.criterion}"])
        if cfg.prune.final_sparsity <= 0:
            print("prune: final sparsity must be > 0 (use --sparsity)", file=sys.stderr)
            return EXIT_FAIL
    out = _out_dir(args) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    try:
        result = train(cfg, out)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    if prune and result.mask is not None:
        model = result.model
        rows = sparsity_report(result.mask, model.layer_specs(), model.weight_layer)
        layers = {model.weight_layer(n) for n in result.mask.prunable}
        (out / "sparsity.csv").write_text(sparsity_csv(rows, layers))
    print(f"{cfg.name}: algebra {result.model.algebra.tag} steps {cfg.steps} "
          f"loss {result.final_loss:.4f} eval {result.eval_metric:.4f} "
          f"({result.seconds:.1f}s) -> {out}")
    return EXIT_OK


def _real_twin(spec):
    dim = AlgebraId.parse(spec.algebra).dim
    if spec.kind not in ("linear", "conv2d", "gru"):
        return None
    return dataclasses.replace(spec, algebra=AlgebraId.parse("R"), tuples_in=spec.tuples_in * dim,
                               tuples_out=spec.tuples_out * dim)


def cost_csv(model, mask=None) -> str:
    """Cost report plus ``density`` and ``param_ratio`` (vs the real layer of equal width)."""
    specs = model.layer_specs()
    report = run_cost(model, mask)
    density, ratio = [], []
    twin_total = own_total = 0
    for spec, row in zip(specs, report.rows):
        density.append(row.multiplies / row.values_loaded if row.values_loaded else "")
        twin = _real_twin(spec)
        if twin is None:
            ratio.append("")
            continue
        twin_params = layer_cost(twin).real_params
        ratio.append(row.real_params / twin_params)
        twin_total += twin_params
        own_total += row.real_params
    density.append(report.multiplies / report.values_loaded if report.values_loaded else "")
    ratio.append(own_total / twin_total if twin_total else "")
    return report.to_csv({"density": density, "param_ratio": ratio})


def cmd_report(args) -> int:
    mask = None
    if args.checkpoint:
        model, cfg, mask = load_checkpoint(args.checkpoint)
    else:
        cfg = _load_config(args)
        model = build_model(cfg)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    text = cost_csv(model, mask)
    (out / "cost.csv").write_text(text)
    print(text, end="")
    if mask is not None:
        rows = sparsity_report(mask, model.layer_specs(), model.weight_layer)
        layers = {model.weight_layer(n) for n in mask.prunable}
        sp = sparsity_csv(rows, layers)
        (out / "sparsity.csv").write_text(sp)
        print(sp, end="")
    return EXIT_OK


def _parse_shape(item: str) -> tuple[str, tuple[int, ...]]:
    kernel, _, dims = item.partition("=")
    if kernel not in B.KERNELS or not dims:
        raise argparse.ArgumentTypeError(f"shape must look like matvec=64x64, got {item!r}")
    return kernel, tuple(int(d) for d in dims.split("x"))


def cmd_bench(args) -> int:
    algebras = args.algebra or None
    kernels = args.kernel or B.KERNELS
    shapes = dict(args.shape or [])
    rows = B.sweep(algebras, kernels, shapes, args.repetitions, args.seed)
    text = B.rows_to_csv(rows)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(text)
    print(text, end="")
    bad = [r for r in rows if r.counted_multiplies is not None and r.counted_multiplies != r.predicted_multiplies]
    for r in bad:
        print(f"FAIL {r.algebra} {r.kernel}: counted {r.counted_multiplies} != predicted "
              f"{r.predicted_multiplies}", file=sys.stderr)
    return EXIT_FAIL if bad else EXIT_OK


def cmd_selftest(args) -> int:
    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="algebra-nn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="train with gradual magnitude pruning")
    _add_config_args(p)
    p.add_argument("--sparsity", type=float, help="final sparsity (overrides prune.final_sparsity)")
    p.add_argument("--criterion", choices=["frobenius", "determinant", "min_eigenvalue", "max_eigenvalue",
                                           "component"])
    p.set_defaults(func=lambda a: cmd_train(a, prune=True))

    p = sub.add_parser("bench", help="time and count multiplies of the product kernels")
    p.add_argument("--algebra", action="append", help="algebra tag, repeatable (default: all)")
    p.add_argument("--kernel", action="append", choices=B.KERNELS)
    p.add_argument("--shape", action="append", type=_parse_shape, metavar="KERNEL=AxB[xC]")
    p.add_argument("--repetitions", type=int, default=5, help="timed runs; 0 = analytic columns only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="per-layer cost report for a config or checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="checkpoint written by train/prune")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run built-in invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CheckpointError, DatasetError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
