"""Command-line surface: data generation, training, method comparison,
ablation sweeps, forward-timing studies, and numerical verification.

Every subcommand reads one YAML config (overridable with ``--set``)
and writes its artifacts under the config's ``run_dir``.  Report CSVs
hold raw per-grid rows and are byte-reproducible for fixed seeds; wall
times go to separate timing files so reports stay comparable.
"""

import argparse
import copy
import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import yaml

from .autodiff import value_of
from .ddm import (
    FactorizationFailure,
    NumericalBreakdown,
    apply_T,
    build,
    fgmres,
    stationary_solve,
)
from .fem import assemble_poisson
from .loss import VARIANTS, LossConfig, brute_force_rho
from .meshgen import read_mesh, write_mesh
from .mggnn import featurize, forward, init_params, load_checkpoint
from .partition import read_decomposition, write_decomposition
from .sparse import CsrMatrix
from .svg import Series, write_chart
from .train import (
    TrainConfig,
    TrainingAborted,
    load_dataset,
    make_dataset,
    model_config,
    train,
)
from .verify import run_all

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

WORKERS_ENV = "ORASLEARN_WORKERS"

# method labels; the learned one-level entry is the two-level model with
# its coarse correction switched off, which is not the same construction
# as a model trained without a coarse level, hence the explicit label
METHOD_RAS1 = "ras-1level"
METHOD_RAS2 = "ras-2level"
METHOD_LEARNED1 = "learned-1level-nocoarse"
METHOD_LEARNED2 = "learned-2level"
METHODS = (METHOD_RAS1, METHOD_RAS2, METHOD_LEARNED1, METHOD_LEARNED2)

ABLATE_AXES = {
    "heads": ("interface", "interpolation", "both"),
    "loss": VARIANTS,
    "sparsity": ("neighbors", "own-only"),
    "layers": (1, 2, 3, 4, 5, 6),
    "arch": ("mggnn", "unet"),
}

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "run_dir": "runs/default",
    "data": {
        "train_grids": 30,
        "node_min": 800,
        "node_max": 1000,
        "delta": 1,
        "test_grids": 10,
        "test_node_min": 950,
        "test_node_max": 1050,
        "test_sizes": None,
        "test_per_size": 3,
    },
    "train": {
        "epochs": 3,
        "batch": 10,
        "lr": 5e-4,
        "heads": "both",
        "sparsity": "neighbors",
        "layers": 4,
        "arch": "mggnn",
        "hidden": 128,
        "hops": 3,
        "clip_norm": 0.0,
    },
    "loss": {
        "K": 10,
        "m": 100,
        "gamma": 1e-2,
        "variant": "softmax_trace",
    },
    "eval": {
        "tol": 1e-8,
        "stationary_max_iter": 500,
        "fgmres_max_iter": 300,
        "dense_rho_max": 1500,
    },
    "scaling": {
        "sizes": [1000, 4000, 16000],
        "runs": 5,
    },
}


class ConfigError(ValueError):
    """The configuration file or an override is unusable."""


# ---------------------------------------------------------------------------
# configuration


def _coerce(default, value, path: str):
    """Align ``value`` with the default's numeric type.

    YAML reads unpunctuated scientific notation like ``5e-4`` as a
    string, so numeric fields accept strings that parse cleanly.
    """
    if isinstance(default, bool) or not isinstance(default, (int, float)):
        return value
    if isinstance(value, bool):
        raise ConfigError(f"{path} must be a number")
    try:
        if isinstance(default, int):
            as_float = float(value)
            if not as_float.is_integer():
                raise ValueError
            return int(as_float)
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path} must be a number: {value!r}") from exc


def _merge(base: dict, update: dict, path: str) -> None:
    for key, val in update.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{here} must be a mapping")
            _merge(base[key], val, here)
        else:
            base[key] = _coerce(base[key], val, here)


def _apply_override(cfg: dict, item: str) -> None:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key.path=value: {item!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value {raw!r}: {exc}") from exc
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key: {key}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    if isinstance(node[parts[-1]], dict):
        raise ConfigError(f"{key} is a section, not a value")
    node[parts[-1]] = _coerce(node[parts[-1]], value, key)


def load_config(path, overrides=()) -> dict:
    """Resolved configuration: defaults, then file, then overrides."""
    try:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if loaded is None:
        loaded = {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    cfg = copy.deepcopy(DEFAULTS)
    _merge(cfg, loaded, "")
    for item in overrides:
        _apply_override(cfg, item)
    # constructing the typed configs validates field values early
    try:
        train_config(cfg)
        _check_sections(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _check_sections(cfg: dict) -> None:
    if int(cfg["workers"]) < 1:
        raise ValueError("workers must be positive")
    data, ev, sc = cfg["data"], cfg["eval"], cfg["scaling"]
    if min(data["test_grids"], data["test_node_min"], data["test_per_size"]) < 1:
        raise ValueError("test set counts must be positive")
    if data["test_node_max"] < data["test_node_min"]:
        raise ValueError("test_node_max must be at least test_node_min")
    if data["test_sizes"] is not None:
        sizes = data["test_sizes"]
        if not sizes or any(int(s) < 1 for s in sizes):
            raise ValueError("test_sizes must be a list of positive sizes")
    if ev["tol"] <= 0:
        raise ValueError("eval tol must be positive")
    if min(ev["stationary_max_iter"], ev["fgmres_max_iter"]) < 1:
        raise ValueError("solver budgets must be positive")
    if ev["dense_rho_max"] < 0:
        raise ValueError("dense_rho_max must be nonnegative")
    if not sc["sizes"] or any(int(s) < 1 for s in sc["sizes"]):
        raise ValueError("scaling sizes must be positive")
    if sc["runs"] < 1:
        raise ValueError("scaling runs must be positive")


def loss_config(cfg: dict) -> LossConfig:
    sec = cfg["loss"]
    return LossConfig(
        K=sec["K"], m=sec["m"], gamma=sec["gamma"], variant=sec["variant"]
    )


def train_config(cfg: dict) -> TrainConfig:
    data, tr = cfg["data"], cfg["train"]
    return TrainConfig(
        n_grids=data["train_grids"],
        node_min=data["node_min"],
        node_max=data["node_max"],
        delta=data["delta"],
        epochs=tr["epochs"],
        batch=tr["batch"],
        lr=tr["lr"],
        heads=tr["heads"],
        sparsity=tr["sparsity"],
        layers=tr["layers"],
        arch=tr["arch"],
        hidden=tr["hidden"],
        hops=tr["hops"],
        clip_norm=tr["clip_norm"],
        loss=loss_config(cfg),
    )


def resolve_workers(cfg: dict) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is not None:
        try:
            workers = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer: {raw!r}") from exc
    else:
        workers = int(cfg["workers"])
    if workers < 1:
        raise ConfigError("worker count must be positive")
    return workers


def _run_path(cfg: dict, *parts) -> str:
    return os.path.join(cfg["run_dir"], *parts)


# ---------------------------------------------------------------------------
# report model


@dataclass
class EvalRow:
    """One method evaluated on one grid."""

    grid: int
    n: int
    S: int
    method: str
    stationary_iters: int
    fgmres_iters: int
    rho: object
    wall_seconds: float
    variant: str = ""


@dataclass
class EvalReport:
    """Raw per-grid evaluation rows.

    Each (grid, method, variant) triple appears at most once;
    ``sentinel_fraction`` is the share of rows where either solver
    exhausted its budget.
    """

    rows: list
    stationary_sentinel: int
    fgmres_sentinel: int

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            key = (row.grid, row.method, row.variant)
            if key in seen:
                raise ValueError(f"duplicate report row: {key}")
            seen.add(key)

    def sentinel_fraction(self) -> float:
        if not self.rows:
            return 0.0
        bad = sum(
            row.stationary_iters >= self.stationary_sentinel
            or row.fgmres_iters >= self.fgmres_sentinel
            for row in self.rows
        )
        return bad / len(self.rows)


def write_report(path, report: EvalReport, extra_fields=()) -> None:
    """Deterministic per-grid CSV; wall times are written separately."""
    fields = list(extra_fields) + [
        "grid", "n", "S", "method", "stationary_iters", "fgmres_iters", "rho",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in report.rows:
            front = [getattr(row, name) for name in extra_fields]
            writer.writerow(front + [
                row.grid, row.n, row.S, row.method,
                row.stationary_iters, row.fgmres_iters,
                "" if row.rho is None else repr(float(row.rho)),
            ])


def write_timings(path, report: EvalReport, extra_fields=()) -> None:
    fields = list(extra_fields) + ["grid", "method", "wall_seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in report.rows:
            front = [getattr(row, name) for name in extra_fields]
            writer.writerow(front + [row.grid, row.method,
                                     repr(float(row.wall_seconds))])


# ---------------------------------------------------------------------------
# evaluation


def _learned_matrices(a: CsrMatrix, d, params, mcfg):
    """Interface matrices and interpolation operator from one forward pass."""
    out = forward(a, d, params, mcfg)
    l_mats = []
    for pat, vals, dofs in zip(
        out.interface_patterns, out.interface_values, d.overlap_sets
    ):
        k = dofs.shape[0]
        l_mats.append(
            CsrMatrix.from_coo(pat.rows, pat.cols, value_of(vals), (k, k))
        )
    p_mat = CsrMatrix.from_coo(
        out.interp_pattern.rows,
        out.interp_pattern.cols,
        np.asarray(value_of(out.interp_values), dtype=np.float64),
        (d.n, d.S),
    )
    return l_mats, p_mat


def _dense_rho(op, n: int) -> float:
    t = np.empty((n, n))
    basis = np.eye(n)
    for j in range(n):
        t[:, j] = apply_T(op, basis[:, j])
    return brute_force_rho(t)


def _operator_for(method: str, a, d, learned):
    if method == METHOD_RAS1:
        return build(a, d, levels="one")
    if method == METHOD_RAS2:
        return build(a, d, levels="two")
    l_mats, p_mat = learned
    if method == METHOD_LEARNED1:
        return build(a, d, L=l_mats, levels="one")
    if method == METHOD_LEARNED2:
        return build(a, d, L=l_mats, P=p_mat, levels="two")
    raise ValueError(f"unknown method: {method}")


def evaluate_grid(grid: int, system, d, params, mcfg, ev: dict, seed: int,
                  methods=METHODS) -> list:
    """Rows for every method on one grid; budget exhaustion is recorded
    as the solver's sentinel count and the sweep continues."""
    a = system.A
    n = a.n_rows
    rng = np.random.default_rng((seed, 7001, grid))
    b = rng.normal(size=n)
    b /= np.linalg.norm(b)
    stat_sentinel = ev["stationary_max_iter"] + 1
    fg_sentinel = ev["fgmres_max_iter"] + 1
    if params is None and (METHOD_LEARNED1 in methods
                           or METHOD_LEARNED2 in methods):
        raise ValueError("learned methods need a checkpoint")
    learned = (
        _learned_matrices(a, d, params, mcfg) if params is not None else None
    )
    rows = []
    for method in methods:
        start = time.perf_counter()
        rho = None
        try:
            op = _operator_for(method, a, d, learned)
            _, stat = stationary_solve(
                op, b, tol=ev["tol"], max_iter=ev["stationary_max_iter"]
            )
            try:
                _, fg = fgmres(
                    op, b, tol=ev["tol"], max_iter=ev["fgmres_max_iter"]
                )
            except NumericalBreakdown:
                fg = fg_sentinel
            if n <= ev["dense_rho_max"]:
                rho = _dense_rho(op, n)
        except FactorizationFailure:
            stat, fg = stat_sentinel, fg_sentinel
        rows.append(EvalRow(
            grid=grid, n=n, S=d.S, method=method,
            stationary_iters=int(stat), fgmres_iters=int(fg), rho=rho,
            wall_seconds=time.perf_counter() - start,
        ))
    return rows


def _eval_task(payload):
    grid, data_dir, ckpt, ev, seed, methods = payload
    mesh = read_mesh(os.path.join(data_dir, f"grid_{grid:04d}.mesh"))
    system = assemble_poisson(mesh)
    d = read_decomposition(
        os.path.join(data_dir, f"grid_{grid:04d}.part"), system.A
    )
    params = mcfg = None
    if ckpt is not None:
        params, mcfg, _ = load_checkpoint(ckpt)
    return evaluate_grid(grid, system, d, params, mcfg, ev, seed,
                         tuple(methods))


def run_eval(data_dir, ckpt, ev: dict, seed: int, workers: int = 1,
             methods=METHODS, log=None) -> EvalReport:
    """Evaluate every method on every grid of a persisted dataset.

    Grids fan out to a process pool when ``workers`` exceeds one; rows
    always assemble in (grid, method) order.
    """
    items = load_dataset(data_dir)
    params = mcfg = None
    if ckpt is not None:
        params, mcfg, _ = load_checkpoint(ckpt)
    rows = []
    if workers > 1:
        payloads = [
            (grid, data_dir, ckpt, ev, seed, methods)
            for grid in range(len(items))
        ]
        with ProcessPoolExecutor(workers) as pool:
            for chunk in pool.map(_eval_task, payloads):
                rows.extend(chunk)
    else:
        for grid, (_, system, d) in enumerate(items):
            rows.extend(evaluate_grid(
                grid, system, d, params, mcfg, ev, seed, methods
            ))
            if log is not None:
                log(f"grid {grid} done")
    return EvalReport(
        rows=rows,
        stationary_sentinel=ev["stationary_max_iter"] + 1,
        fgmres_sentinel=ev["fgmres_max_iter"] + 1,
    )


def _iteration_chart(report: EvalReport, attr: str, title: str, path) -> None:
    by_method = {}
    for row in report.rows:
        by_method.setdefault(row.method, []).append(
            (row.n, getattr(row, attr))
        )
    series = []
    for method in sorted(by_method):
        pairs = sorted(by_method[method])
        sizes = sorted({n for n, _ in pairs})
        mean, lo, hi = [], [], []
        for n in sizes:
            vals = [v for m, v in pairs if m == n]
            mean.append(sum(vals) / len(vals))
            lo.append(min(vals))
            hi.append(max(vals))
        series.append(Series(
            label=method, x=[float(n) for n in sizes],
            mean=mean, lo=lo, hi=hi,
        ))
    write_chart(path, series, title=title, xlabel="problem size (DoFs)",
                ylabel="iterations")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict, log=print) -> int:
    tcfg = train_config(cfg)
    seed = cfg["seed"]
    train_dir = _run_path(cfg, "data", "train")
    make_dataset(tcfg, seed=seed, out_dir=train_dir, log=log)
    log(f"wrote {tcfg.n_grids} training grids to {train_dir}")

    data = cfg["data"]
    test_dir = _run_path(cfg, "data", "test")
    os.makedirs(test_dir, exist_ok=True)
    if data["test_sizes"]:
        batches = [
            (int(size), data["test_per_size"], seed + 1 + i)
            for i, size in enumerate(data["test_sizes"])
        ]
    else:
        batches = [(None, data["test_grids"], seed + 1)]
    count = 0
    for size, grids, batch_seed in batches:
        sub = TrainConfig(
            n_grids=grids,
            node_min=size if size else data["test_node_min"],
            node_max=size if size else data["test_node_max"],
            delta=data["delta"],
        )
        for mesh, _, d in make_dataset(sub, seed=batch_seed, log=log):
            write_mesh(os.path.join(test_dir, f"grid_{count:04d}.mesh"), mesh)
            write_decomposition(
                os.path.join(test_dir, f"grid_{count:04d}.part"), d
            )
            count += 1
    log(f"wrote {count} test grids to {test_dir}")
    return EXIT_OK


def cmd_train(cfg: dict, log=print) -> int:
    tcfg = train_config(cfg)
    train_dir = _run_path(cfg, "data", "train")
    if not os.path.isdir(train_dir):
        raise ConfigError(f"no training data under {train_dir}; "
                          "run gen-data first")
    dataset = load_dataset(train_dir)
    workers = resolve_workers(cfg)
    out_dir = _run_path(cfg, "model")
    _, history = train(
        tcfg, dataset, seed=cfg["seed"], out_dir=out_dir, workers=workers,
        log=log,
    )
    log(f"final mean loss {history[-1]['mean_loss']:.6f}; "
        f"checkpoint in {out_dir}")
    return EXIT_OK


def cmd_eval(cfg: dict, log=print) -> int:
    test_dir = _run_path(cfg, "data", "test")
    if not os.path.isdir(test_dir):
        raise ConfigError(f"no test data under {test_dir}; run gen-data first")
    ckpt = _run_path(cfg, "model", "model.ckpt")
    if not os.path.isfile(ckpt):
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    out_dir = _run_path(cfg, "eval")
    os.makedirs(out_dir, exist_ok=True)
    report = run_eval(
        test_dir, ckpt, cfg["eval"], cfg["seed"],
        workers=resolve_workers(cfg), log=log,
    )
    write_report(os.path.join(out_dir, "report.csv"), report)
    write_timings(os.path.join(out_dir, "timings.csv"), report)
    _iteration_chart(
        report, "stationary_iters", "stationary iterations to 1e-8",
        os.path.join(out_dir, "stationary.svg"),
    )
    _iteration_chart(
        report, "fgmres_iters", "preconditioned FGMRES iterations to 1e-8",
        os.path.join(out_dir, "fgmres.svg"),
    )
    means = {}
    for row in report.rows:
        means.setdefault(row.method, []).append(row.stationary_iters)
    for method in METHODS:
        vals = means.get(method)
        if vals:
            log(f"{method}: mean stationary {sum(vals) / len(vals):.2f} "
                f"over {len(vals)} grids")
    frac = report.sentinel_fraction()
    log(f"report in {out_dir}; sentinel fraction {frac:.2f}")
    return EXIT_DIVERGED if frac > 0.5 else EXIT_OK


def _ablate_train_config(cfg: dict, axis: str, variant) -> TrainConfig:
    sub = copy.deepcopy(cfg)
    if axis == "heads":
        sub["train"]["heads"] = variant
    elif axis == "loss":
        sub["loss"]["variant"] = variant
    elif axis == "sparsity":
        sub["train"]["sparsity"] = variant
    elif axis == "layers":
        sub["train"]["layers"] = variant
    elif axis == "arch":
        sub["train"]["arch"] = variant
    else:
        raise ConfigError(f"unknown ablation axis: {axis}")
    return train_config(sub)


def cmd_ablate(cfg: dict, axis: str, log=print) -> int:
    if axis not in ABLATE_AXES:
        raise ConfigError(f"unknown ablation axis: {axis}")
    train_dir = _run_path(cfg, "data", "train")
    test_dir = _run_path(cfg, "data", "test")
    if not (os.path.isdir(train_dir) and os.path.isdir(test_dir)):
        raise ConfigError("run gen-data first")
    dataset = load_dataset(train_dir)
    workers = resolve_workers(cfg)
    out_dir = _run_path(cfg, "ablate")
    os.makedirs(out_dir, exist_ok=True)

    all_rows = []
    baseline = run_eval(
        test_dir, None, cfg["eval"], cfg["seed"], workers=workers,
        methods=(METHOD_RAS1, METHOD_RAS2),
    )
    for row in baseline.rows:
        row.variant = "classical"
        all_rows.append(row)

    for variant in ABLATE_AXES[axis]:
        tcfg = _ablate_train_config(cfg, axis, variant)
        model_dir = _run_path(cfg, "ablate", f"{axis}-{variant}", "model")
        log(f"training variant {axis}={variant}")
        train(tcfg, dataset, seed=cfg["seed"], out_dir=model_dir,
              workers=workers, log=log)
        report = run_eval(
            test_dir, os.path.join(model_dir, "model.ckpt"), cfg["eval"],
            cfg["seed"], workers=workers, methods=(METHOD_LEARNED2,),
        )
        for row in report.rows:
            row.variant = str(variant)
            all_rows.append(row)
        vals = [r.stationary_iters for r in report.rows]
        log(f"{axis}={variant}: mean stationary {sum(vals) / len(vals):.2f}")

    combined = EvalReport(
        rows=all_rows,
        stationary_sentinel=cfg["eval"]["stationary_max_iter"] + 1,
        fgmres_sentinel=cfg["eval"]["fgmres_max_iter"] + 1,
    )
    write_report(os.path.join(out_dir, f"{axis}.csv"), combined,
                 extra_fields=("variant",))
    write_timings(os.path.join(out_dir, f"{axis}-timings.csv"), combined,
                  extra_fields=("variant",))
    frac = combined.sentinel_fraction()
    log(f"ablation table in {out_dir}; sentinel fraction {frac:.2f}")
    return EXIT_DIVERGED if frac > 0.5 else EXIT_OK


def cmd_scaling(cfg: dict, log=print) -> int:
    sizes = cfg["scaling"]["sizes"]
    runs = cfg["scaling"]["runs"]
    seed = cfg["seed"]
    mcfg = model_config(train_config(cfg))
    params = init_params(mcfg, seed=seed)
    out_dir = _run_path(cfg, "scaling")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, size in enumerate(sizes):
        sub = TrainConfig(n_grids=1, node_min=int(size), node_max=int(size))
        ((_, system, d),) = make_dataset(sub, seed=seed + 9000 + i, log=log)
        a = system.A
        start = time.perf_counter()
        gp = featurize(a, d, mcfg.interp_mode)
        featurize_seconds = time.perf_counter() - start
        for run in range(runs):
            start = time.perf_counter()
            forward(a, d, params, mcfg, graph=gp)
            rows.append({
                "n_target": int(size),
                "n": a.n_rows,
                "S": d.S,
                "run": run,
                "forward_seconds": time.perf_counter() - start,
                "featurize_seconds": featurize_seconds,
            })
        med = float(np.median(
            [r["forward_seconds"] for r in rows if r["n_target"] == size]
        ))
        log(f"n={a.n_rows}: median forward {med:.3f}s over {runs} runs")
    path = os.path.join(out_dir, "scaling.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]),
                                lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    medians = [
        (
            float(np.median([r["n"] for r in rows if r["n_target"] == size])),
            float(np.median(
                [r["forward_seconds"] for r in rows if r["n_target"] == size]
            )),
        )
        for size in sizes
    ]
    write_chart(
        os.path.join(out_dir, "scaling.svg"),
        [Series(
            label="forward pass",
            x=[n for n, _ in medians],
            mean=[t for _, t in medians],
        )],
        title="model forward time vs problem size",
        xlabel="problem size (DoFs)",
        ylabel="median seconds",
        x_log=True,
    )
    log(f"timings in {path}")
    return EXIT_OK


def cmd_verify(cfg: dict, log=print) -> int:
    out_dir = _run_path(cfg, "verify")
    os.makedirs(out_dir, exist_ok=True)
    results = run_all(cfg["seed"])
    path = os.path.join(out_dir, "verify.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "passed", "detail", "seconds"])
        for res in results:
            writer.writerow([
                res.name, res.passed, res.detail, repr(float(res.seconds))
            ])
    for res in results:
        log(f"{'PASS' if res.passed else 'FAIL'} {res.name}: {res.detail}")
    return EXIT_OK if all(res.passed for res in results) else 1


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oraslearn",
        description="learned two-level Schwarz preconditioners",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "gen-data": "generate and persist training and test grids",
        "train": "train a model on the generated dataset",
        "eval": "compare classical and learned methods on the test set",
        "ablate": "train and evaluate variants along one design axis",
        "scaling": "time model forward passes across problem sizes",
        "verify": "run the numerical verification suites",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML config path")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            dest="overrides", help="override one config value (dotted path)",
        )
        if name == "ablate":
            p.add_argument(
                "--axis", required=True, choices=sorted(ABLATE_AXES),
                help="which design axis to sweep",
            )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.axis)
        if args.command == "scaling":
            return cmd_scaling(cfg)
        return cmd_verify(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
