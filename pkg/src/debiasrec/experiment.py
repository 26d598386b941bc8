"""Grid-searched experiments over baselines and the learned debiaser.

An :class:`ExperimentSpec` names a dataset, the methods to compare, the
hyper-parameter grid and the replicate seeds.  :func:`run` trains every
(method, seed, grid point), keeps the best grid point per seed on
validation NDCG@k, and writes a self-contained run directory:

    config.txt           resolved spec (reloadable with ``--config``)
    manifest.txt         config, seeds, dataset fingerprint, checkpoint list
    runs.csv             one row per trained grid point
    results.csv          mean and std over seeds per method, plus a winner row
    traces/*.csv         per-epoch trace of each selected run
    checkpoints/*.npz    selected model (and meta model) per method and seed
    plots/*.csv          weight-vs-popularity and popularity-slice series
"""

from __future__ import annotations

import csv
import itertools
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .data import DatasetBundle, Interactions, load_bundle, load_explicit, matrix_to_triples, read_kv, write_kv
from .errors import ConfigError
from .framework import (
    DebiasConfig,
    config_doubly_robust,
    config_imputation,
    config_ips,
    config_ips_variant,
    config_negative_weighting,
    config_position_ips,
    estimate_position_propensity,
    estimate_propensity_naive_bayes,
    fit_debiased,
    weight_mean_square,
)
from .meta import TrainerConfig, save_checkpoint, train_autodebias, write_learned_parameters
from .metrics import evaluate, popular_items, popularity_slices
from .mf import FactorModel, rng_streams, sgd_fit
from .simulation import SimulationSpec, generate_simulation

SCHEMA_VERSION = 1
DEFAULT_GRID = (1e-4, 1e-3, 1e-2, 1e-1)

METHODS = (
    "mf_biased",
    "mf_uniform",
    "mf_combine",
    "ips",
    "dr",
    "imputation",
    "neg_weight",
    "ips_variant",
    "pos_ips",
    "autodebias",
    "autodebias_w1",
    "autodebias_w1m",
)
META_VARIANTS = {"autodebias": "full", "autodebias_w1": "w1", "autodebias_w1m": "w1m"}
LIST_ONLY = {"pos_ips"}
NAMED_DATASETS = ("simulation", "yahoo", "coat")
FEEDBACK_KIND = {"simulation": "list", "yahoo": "explicit", "coat": "explicit"}
RAW_FILES = {
    "yahoo": ("ydata-ymusic-rating-study-v1-0-train.txt", "ydata-ymusic-rating-study-v1-0-test.txt"),
    "coat": ("train.ascii", "test.ascii"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: str = "simulation"  # simulation | yahoo | coat | path to a saved bundle
    methods: tuple = ("mf_biased", "autodebias")
    lrs: tuple = DEFAULT_GRID
    weight_decays: tuple = DEFAULT_GRID
    meta_lrs: tuple = (1e-3,)
    w2_inits: tuple = (1.0,)
    seeds: tuple = (0, 1, 2, 3, 4)
    output: str = "runs/experiment"
    data_dir: str = ""
    data_seed: int = 0
    uniform_ratio: float = 1.0
    epochs: int = 30
    batch_size: int = 512
    pair_batch_size: int = 512
    dim: int = 10
    loss: str = "logistic"
    k: int = 5
    imputation_weight: float = 1.0
    negative_weight: float = 1.0
    position_propensity: str = "estimated"  # estimated | sqrt
    top_fraction: float = 0.2
    sim_latent_dim: int = 3
    sim_scale: float = 3.0
    save_checkpoints: bool = True

    def validate(self, feedback_kind=None):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.methods:
            raise ConfigError("at least one method is required")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; expected a subset of {list(METHODS)}")
        for name in ("lrs", "meta_lrs", "w2_inits"):
            vals = getattr(self, name)
            if not vals or any(not (v > 0 and math.isfinite(v)) for v in vals):
                raise ConfigError(f"{name} must be a non-empty list of positive values")
        if not self.weight_decays or any(v < 0 for v in self.weight_decays):
            raise ConfigError("weight_decays must be a non-empty list of non-negative values")
        if not 0.0 < self.uniform_ratio <= 1.0:
            raise ConfigError("uniform_ratio must lie in (0, 1]")
        if self.position_propensity not in ("estimated", "sqrt"):
            raise ConfigError("position_propensity must be 'estimated' or 'sqrt'")
        kind = feedback_kind or FEEDBACK_KIND.get(self.dataset)
        if kind is not None and kind != "list":
            bad = sorted(set(self.methods) & LIST_ONLY)
            if bad:
                raise ConfigError(f"{bad} need list feedback, but {self.dataset!r} is {kind!r}")

    def grid(self, method) -> list[dict]:
        """Hyper-parameter points searched for ``method``."""
        base = [{"lr": lr, "weight_decay": wd} for lr, wd in itertools.product(self.lrs, self.weight_decays)]
        if method not in META_VARIANTS:
            return base
        w2s = self.w2_inits if META_VARIANTS[method] != "w1" else (1.0,)
        return [dict(p, meta_lr=mlr, w2_init=w2) for p in base for mlr in self.meta_lrs for w2 in w2s]


# -- spec files ----------------------------------------------------------------


def _format(val) -> str:
    if isinstance(val, tuple):
        return ", ".join(_format(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def spec_to_kv(spec: ExperimentSpec) -> dict:
    out = {"schema_version": SCHEMA_VERSION}
    out.update({k: _format(v) for k, v in asdict(spec).items()})
    return out


def _parse_field(f, text: str):
    default = f.default
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        kind = type(default[0]) if default else str
        if f.name == "seeds":
            kind = int
        elif f.name in ("lrs", "weight_decays", "meta_lrs", "w2_inits"):
            kind = float
        return tuple(kind(t) for t in items)
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"{f.name}: expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    return type(default)(text)


def spec_from_kv(values: dict, base: ExperimentSpec | None = None) -> ExperimentSpec:
    values = dict(values)
    version = values.pop("schema_version", None)
    if version is not None and int(version) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema {version}, expected {SCHEMA_VERSION}")
    known = {f.name: f for f in fields(ExperimentSpec)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    try:
        parsed = {k: _parse_field(known[k], v) for k, v in values.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return replace(base or ExperimentSpec(), **parsed)


def load_spec(path, **overrides) -> ExperimentSpec:
    spec = spec_from_kv(read_kv(path))
    return replace(spec, **{k: v for k, v in overrides.items() if v is not None})


# -- datasets --------------------------------------------------------------------


def _raw_dir(spec: ExperimentSpec) -> Path:
    root = spec.data_dir or os.environ.get("DEBIASREC_DATA", "data")
    return Path(root) / spec.dataset if not spec.data_dir else Path(spec.data_dir)


def load_dataset(spec: ExperimentSpec) -> DatasetBundle:
    """Build or load the bundle named by ``spec.dataset``, then apply ``uniform_ratio``."""
    if spec.dataset == "simulation":
        bundle = generate_simulation(
            SimulationSpec(seed=spec.data_seed, latent_dim=spec.sim_latent_dim, preference_scale=spec.sim_scale)
        )
    elif spec.dataset in RAW_FILES:
        d = _raw_dir(spec)
        biased, unbiased = (d / name for name in RAW_FILES[spec.dataset])
        if not biased.exists() or not unbiased.exists():
            raise ConfigError(f"{spec.dataset} files not found under {d}")
        if spec.dataset == "coat":
            with tempfile.TemporaryDirectory() as tmp:
                tb, tu = Path(tmp) / "train.txt", Path(tmp) / "test.txt"
                matrix_to_triples(biased, tb)
                matrix_to_triples(unbiased, tu)
                bundle = load_explicit(tb, tu, seed=spec.data_seed, id_base=0)
        else:
            bundle = load_explicit(biased, unbiased, seed=spec.data_seed)
    else:
        path = Path(spec.dataset)
        if not (path / "meta.txt").exists():
            raise ConfigError(f"unknown dataset {spec.dataset!r}: not {NAMED_DATASETS} nor a bundle directory")
        bundle = load_bundle(path)
    return subsample_uniform(bundle, spec.uniform_ratio, spec.data_seed)


def subsample_uniform(bundle: DatasetBundle, ratio, seed) -> DatasetBundle:
    """Keep a nested ``ratio`` fraction of the uniform split.

    The order is one fixed permutation per seed, so larger ratios keep a
    superset of the examples kept by smaller ones; 1.0 is the identity.
    """
    if ratio >= 1.0:
        return bundle
    n = len(bundle.uniform)
    keep = max(1, round(ratio * n)) if n else 0
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED])).permutation(n)
    return bundle.with_splits(uniform=bundle.uniform[np.sort(perm[:keep])])


def negative_label(bundle: DatasetBundle) -> float:
    return -1.0 if (bundle.train.labels < 0).any() or bundle.feedback_kind != "implicit" else 0.0


# -- single runs -----------------------------------------------------------------


@dataclass
class RunOutcome:
    method: str
    seed: int
    params: dict
    model: FactorModel
    trace: list
    best_epoch: int | None
    val_score: float
    meta: object = None
    s_w1: float | None = None
    extra: dict = field(default_factory=dict)


def _static_config(method, bundle: DatasetBundle, spec: ExperimentSpec) -> DebiasConfig:
    train, nu, ni = bundle.train, bundle.n_users, bundle.n_items
    n = len(train)
    O = bundle.observation()
    neg = negative_label(bundle)
    if method in ("ips", "dr", "ips_variant"):
        q = estimate_propensity_naive_bayes(train, bundle.uniform, nu, ni)
        if method == "ips":
            return config_ips(q, n, nu, ni)
        if method == "dr":
            return config_doubly_robust(q, O, float(np.mean(bundle.uniform.labels)), n, nu, ni)
        return config_ips_variant(q, O, n, nu, ni, negative_label=neg)
    if method == "imputation":
        return config_imputation(spec.imputation_weight, float(np.mean(bundle.uniform.labels)), n, nu, ni)
    if method == "neg_weight":
        return config_negative_weighting(spec.negative_weight / (nu * ni), O, negative_label=neg)
    if method == "pos_ips":
        if spec.position_propensity == "sqrt":
            return config_position_ips(lambda p: 1.0 / np.sqrt(p))
        return config_position_ips(estimate_position_propensity(train))
    raise ConfigError(f"{method} is not a fixed-weight method")


def _strip_positions(data: Interactions) -> Interactions:
    return Interactions(data.users, data.items, data.labels)


def train_method(method, bundle: DatasetBundle, params: dict, seed, spec: ExperimentSpec) -> RunOutcome:
    """Train one (method, grid point, seed) and score its best epoch on validation."""
    common = dict(lr=params["lr"], weight_decay=params["weight_decay"], epochs=spec.epochs, seed=seed)
    meta = s_w1 = None
    if method in META_VARIANTS:
        cfg = TrainerConfig(
            meta_lr=params["meta_lr"],
            w2_init=params["w2_init"],
            batch_size=spec.batch_size,
            pair_batch_size=spec.pair_batch_size,
            dim=spec.dim,
            loss=spec.loss,
            k=spec.k,
            **common,
        ).variant(META_VARIANTS[method])
        res = train_autodebias(bundle, cfg)
        model, trace, best_epoch, meta = res.model, res.trace, res.best_epoch, res.meta
        s_w1 = weight_mean_square(meta.as_config(bundle.observation(), cfg.use_pairs), bundle.train)
    else:
        init = FactorModel.init(bundle.n_users, bundle.n_items, spec.dim, seed=seed, rng=rng_streams(seed)["init"])
        fit_args = dict(common, batch_size=spec.batch_size, validation=bundle.validation, k=spec.k)
        if method in ("mf_biased", "mf_uniform", "mf_combine"):
            data = {
                "mf_biased": bundle.train,
                "mf_uniform": bundle.uniform,
                "mf_combine": Interactions.concat([_strip_positions(bundle.train), bundle.uniform]),
            }[method]
            res = sgd_fit(init, data, spec.loss, **fit_args)
            s_w1 = float(len(data))
        else:
            config = _static_config(method, bundle, spec)
            res = fit_debiased(init, bundle.train, config, spec.loss, pair_batch_size=spec.pair_batch_size, **fit_args)
            s_w1 = weight_mean_square(config, bundle.train)
        model, trace, best_epoch = res.model, res.trace, res.best_epoch
    key = f"val_ndcg@{spec.k}"
    scores = [row[key] for row in trace if key in row]
    val = max(scores) if scores else -math.inf
    return RunOutcome(method, seed, dict(params), model, trace, best_epoch, val, meta, s_w1)


# -- experiments -----------------------------------------------------------------


def _metric_row(model, bundle, spec) -> dict:
    report = evaluate(model, bundle.test, ks=(spec.k,))
    return {"nll": report.nll, "auc": report.auc, f"ndcg@{spec.k}": report.ndcg_at[spec.k]}


def select_best(outcomes: list[RunOutcome]) -> RunOutcome:
    """Highest validation score; earlier grid points win ties."""
    best = outcomes[0]
    for out in outcomes[1:]:
        if out.val_score > best.val_score:
            best = out
    return best


def summarize(rows: list[dict], metrics) -> dict:
    out = {}
    for name in metrics:
        vals = np.array([r[name] for r in rows if r.get(name) is not None], dtype=np.float64)
        out[f"{name}_mean"] = float(vals.mean()) if vals.size else None
        out[f"{name}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return out


def winners(table: list[dict], columns) -> dict:
    """Best method per ``*_mean`` column (higher is better for every metric)."""
    out = {"method": "winner"}
    for col in columns:
        scored = [(r[col], r["method"]) for r in table if r.get(col) is not None]
        out[col] = max(scored, key=lambda t: t[0])[1] if scored else ""
    return out


def _write_csv(path, rows, columns=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _cell(r.get(k)) for k in columns})
    return path


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ExperimentResult:
    table: list  # one summary row per method
    runs: list  # one row per trained grid point
    selected: dict  # (method, seed) -> RunOutcome
    bundle: DatasetBundle
    output: Path | None = None

    def metric(self, method, name) -> float:
        for row in self.table:
            if row["method"] == method:
                return row[f"{name}_mean"]
        raise KeyError(method)

    def per_seed(self, method, name) -> list:
        return [r[name] for r in self.runs if r["method"] == method and r["selected"]]


def run(spec: ExperimentSpec, bundle: DatasetBundle | None = None, write=True) -> ExperimentResult:
    spec.validate()
    bundle = load_dataset(spec) if bundle is None else bundle
    spec.validate(bundle.feedback_kind)
    out_dir = Path(spec.output) if write else None
    metric_names = ("nll", "auc", f"ndcg@{spec.k}")
    run_rows, selected, table = [], {}, []
    for method in spec.methods:
        seed_rows = []
        for seed in spec.seeds:
            outcomes = [train_method(method, bundle, p, seed, spec) for p in spec.grid(method)]
            best = select_best(outcomes)
            selected[(method, seed)] = best
            for out in outcomes:
                row = {"method": method, "seed": seed, **out.params, "best_epoch": out.best_epoch,
                       "val_score": out.val_score, "s_w1": out.s_w1, "selected": out is best}
                row.update(_metric_row(out.model, bundle, spec))
                run_rows.append(row)
                if out is best:
                    seed_rows.append(row)
        table.append({"method": method, "n_seeds": len(spec.seeds), **summarize(seed_rows, metric_names)})
    result = ExperimentResult(table, run_rows, selected, bundle, out_dir)
    if write:
        write_run_dir(result, spec)
    return result


def write_run_dir(result: ExperimentResult, spec: ExperimentSpec):
    d = result.output
    d.mkdir(parents=True, exist_ok=True)
    write_kv(d / "config.txt", spec_to_kv(spec))
    mean_cols = [k for k in result.table[0] if k.endswith("_mean")]
    _write_csv(d / "results.csv", result.table + [winners(result.table, mean_cols)])
    _write_csv(d / "runs.csv", result.runs)
    checkpoints = []
    for (method, seed), out in sorted(result.selected.items(), key=lambda kv: (spec.methods.index(kv[0][0]), kv[0][1])):
        stem = f"{method}_seed{seed}"
        _write_csv(d / "traces" / f"{stem}.csv", out.trace)
        if spec.save_checkpoints:
            (d / "checkpoints").mkdir(exist_ok=True)
            path = d / "checkpoints" / f"{stem}.npz"
            if out.meta is not None:
                save_checkpoint(path, out.model, out.meta, None, out.best_epoch or spec.epochs, seed)
                write_learned_parameters(d / "checkpoints" / f"{stem}_params.txt", out.meta)
            else:
                out.model.save(path)
            checkpoints.append(str(path.relative_to(d)))
    write_plot_data(result, spec)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": "config.txt",
        "seeds": _format(tuple(spec.seeds)),
        "dataset": spec.dataset,
        "fingerprint": result.bundle.fingerprint(),
        "checkpoints": ", ".join(checkpoints),
    }
    write_kv(d / "manifest.txt", manifest)


def weight_popularity(meta, bundle: DatasetBundle) -> tuple[np.ndarray, np.ndarray]:
    """(training frequency, learned w1 item factor) per item."""
    freq = np.bincount(bundle.train.items, minlength=bundle.n_items)
    return freq, meta.w1_factors()["item"]


def popularity_correlation(meta, bundle: DatasetBundle) -> float:
    """Spearman correlation between learned item weights and item popularity."""
    freq, w = weight_popularity(meta, bundle)
    return float(spearmanr(w, freq)[0])


def write_plot_data(result: ExperimentResult, spec: ExperimentSpec):
    d = result.output / "plots"
    bundle = result.bundle
    slice_rows = []
    for (method, seed), out in sorted(result.selected.items(), key=lambda kv: (spec.methods.index(kv[0][0]), kv[0][1])):
        if method == "autodebias" and seed == spec.seeds[0]:
            freq, w = weight_popularity(out.meta, bundle)
            popular = popular_items(bundle.train, bundle.n_items, spec.top_fraction)
            rows = [{"item": i, "popularity": int(freq[i]), "weight": float(w[i]), "popular": int(popular[i])}
                    for i in range(bundle.n_items)]
            _write_csv(d / "weight_popularity.csv", rows)
        if method in ("autodebias", "mf_biased"):
            report = popularity_slices(out.model, bundle, spec.top_fraction, ks=(spec.k,))
            for name, sub in report.slices.items():
                slice_rows.append({"method": method, "seed": seed, "slice": name, f"ndcg@{spec.k}": sub.ndcg_at.get(spec.k)})
    if slice_rows:
        _write_csv(d / "slices.csv", slice_rows)


def uniform_ratio_sweep(spec: ExperimentSpec, ratios, bundle: DatasetBundle | None = None, write=True) -> list[dict]:
    """Rerun the experiment with nested fractions of the uniform split."""
    base = load_dataset(replace(spec, uniform_ratio=1.0)) if bundle is None else bundle
    rows = []
    for ratio in sorted(ratios):
        sub_spec = replace(spec, uniform_ratio=ratio, output=str(Path(spec.output) / f"ratio_{ratio:g}"))
        sub = subsample_uniform(base, ratio, spec.data_seed)
        res = run(sub_spec, sub, write=write)
        for row in res.table:
            rows.append({"ratio": ratio, "n_uniform": len(sub.uniform), **row})
    if write:
        _write_csv(Path(spec.output) / "ratio_sweep.csv", rows)
    return rows


def ablation_spec(spec: ExperimentSpec) -> ExperimentSpec:
    return replace(spec, methods=("mf_biased", "autodebias_w1", "autodebias_w1m", "autodebias"))
