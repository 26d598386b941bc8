"""Command line entry point: ``debiasrec <verb> [options]``.

Verbs:
    prepare   build or load a dataset and save it as a bundle directory
    train     train one method at one grid point and save a checkpoint
    evaluate  score a saved checkpoint on a bundle's test split
    sweep     grid search over methods and seeds (or over uniform-data ratios)
    ablate    grid search over the learned-debiaser ablation variants
    report    print result tables with their per-column winners
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from .data import load_bundle, save_bundle
from .errors import DebiasError
from .meta import load_checkpoint, save_checkpoint, write_learned_parameters
from .metrics import popularity_slices
from .mf import FactorModel
from .simulation import SimulationSpec, generate_simulation_with_truth, save_simulation

# spec fields exposed as flags; tuples take several values
SPEC_FLAGS = {f.name: f for f in fields(ex.ExperimentSpec)}


def _add_spec_flags(p: argparse.ArgumentParser, only=None):
    p.add_argument("--config", help="key = value config file; flags override its values")
    for name, f in SPEC_FLAGS.items():
        if only is not None and name not in only:
            continue
        flag = "--" + name.replace("_", "-")
        default = f.default
        if isinstance(default, tuple):
            kind = int if name == "seeds" else (str if name == "methods" else float)
            p.add_argument(flag, nargs="+", type=kind, default=None)
        elif isinstance(default, bool):
            p.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"), default=None)
        else:
            p.add_argument(flag, type=type(default), default=None)


def spec_from_args(args) -> ex.ExperimentSpec:
    base = ex.spec_from_kv(ex.read_kv(args.config)) if getattr(args, "config", None) else ex.ExperimentSpec()
    overrides = {}
    for name in SPEC_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = tuple(val) if isinstance(val, list) else val
    return replace(base, **overrides)


def cmd_prepare(args):
    spec = spec_from_args(args)
    out = Path(args.out)
    if spec.dataset == "simulation":
        bundle, scores = generate_simulation_with_truth(
            SimulationSpec(seed=spec.data_seed, latent_dim=spec.sim_latent_dim, preference_scale=spec.sim_scale)
        )
        bundle = ex.subsample_uniform(bundle, spec.uniform_ratio, spec.data_seed)
        save_simulation(bundle, scores, out)
    else:
        bundle = ex.load_dataset(spec)
        save_bundle(bundle, out)
    print(f"wrote {out}: train={len(bundle.train)} uniform={len(bundle.uniform)} "
          f"validation={len(bundle.validation)} test={len(bundle.test)} fingerprint={bundle.fingerprint()}")


def cmd_train(args):
    spec = spec_from_args(args)
    if len(spec.methods) != 1:
        raise ex.ConfigError("train takes exactly one --methods value")
    spec.validate()
    bundle = ex.load_dataset(spec)
    spec.validate(bundle.feedback_kind)
    method = spec.methods[0]
    params = {"lr": spec.lrs[0], "weight_decay": spec.weight_decays[0], "meta_lr": spec.meta_lrs[0], "w2_init": spec.w2_inits[0]}
    out_dir = Path(spec.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    ex.write_kv(out_dir / "config.txt", ex.spec_to_kv(spec))
    for seed in spec.seeds:
        out = ex.train_method(method, bundle, params, seed, spec)
        stem = f"{method}_seed{seed}"
        ex._write_csv(out_dir / "traces" / f"{stem}.csv", out.trace)
        path = out_dir / f"{stem}.npz"
        if out.meta is not None:
            save_checkpoint(path, out.model, out.meta, None, out.best_epoch or spec.epochs, seed)
            write_learned_parameters(out_dir / f"{stem}_params.txt", out.meta)
        else:
            out.model.save(path)
        row = ex._metric_row(out.model, bundle, spec)
        print(f"{stem}: best_epoch={out.best_epoch} val={out.val_score:.4f} " + " ".join(f"{k}={v:.4f}" for k, v in row.items() if v is not None))


def _load_model(path) -> FactorModel:
    with np.load(path) as z:
        has_meta = "phi1" in z.files
    return load_checkpoint(path)[0] if has_meta else FactorModel.load(path)


def cmd_evaluate(args):
    bundle = load_bundle(args.bundle)
    model = _load_model(args.checkpoint)
    report = popularity_slices(model, bundle, args.top_fraction, ks=tuple(args.k))
    row = report.as_row()
    for key, val in row.items():
        print(f"{key} = {'' if val is None else f'{val:.6f}'}")
    if args.out:
        ex._write_csv(args.out, [row])


def cmd_sweep(args):
    spec = spec_from_args(args)
    if args.uniform_ratios:
        rows = ex.uniform_ratio_sweep(spec, args.uniform_ratios)
        _print_table(rows, ["ratio", "n_uniform", "method"] + [k for k in rows[0] if k.endswith("_mean")])
        return
    res = ex.run(spec)
    _print_results(res.output / "results.csv")


def cmd_ablate(args):
    spec = ex.ablation_spec(spec_from_args(args))
    res = ex.run(spec)
    _print_results(res.output / "results.csv")


def cmd_report(args):
    for d in args.runs:
        path = Path(d) / "results.csv" if Path(d).is_dir() else Path(d)
        print(f"# {path}")
        _print_results(path)


def _print_results(path):
    rows = ex.read_csv(path)
    _print_table(rows, list(rows[0]))


def _print_table(rows, columns):
    def fmt(v):
        if isinstance(v, int) or (isinstance(v, str) and v.lstrip("-").isdigit()):
            return str(v)
        try:
            return f"{float(v):.4f}"
        except (TypeError, ValueError):
            return str(v)

    cells = [[str(c) for c in columns]] + [[fmt(r.get(c, "")) if c != "method" else str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[j]) for row in cells) for j in range(len(columns))]
    for row in cells:
        print("  ".join(val.ljust(w) for val, w in zip(row, widths)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="debiasrec", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="verb", required=True)

    sp = sub.add_parser("prepare", help="build or load a dataset bundle")
    _add_spec_flags(sp, only={"dataset", "data_dir", "data_seed", "uniform_ratio", "sim_latent_dim", "sim_scale"})
    sp.add_argument("--out", required=True, help="bundle directory to write")
    sp.set_defaults(fn=cmd_prepare)

    sp = sub.add_parser("train", help="train one method at one grid point")
    _add_spec_flags(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a bundle")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", nargs="+", type=int, default=[5])
    sp.add_argument("--top-fraction", type=float, default=0.2)
    sp.add_argument("--out", help="optional CSV file for the metrics row")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("sweep", help="grid search over methods and seeds")
    _add_spec_flags(sp)
    sp.add_argument("--uniform-ratios", nargs="+", type=float, help="rerun at these fractions of the uniform split")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("ablate", help="grid search over the ablation variants")
    _add_spec_flags(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("report", help="print result tables")
    sp.add_argument("runs", nargs="+", help="run directories or results.csv files")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except DebiasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
