"""Dataset generation and gradient training of the two-level network.

Grids are random convex-polygon meshes with Lloyd partitions; the
optimizer minimizes the spectral surrogate of the two-level error
propagator over mini-batches with Adam.  Ablation switches select which
head feeds the operator (learned interface values, learned
interpolation, or both), the interpolation sparsity, the layer count,
and the architecture variant.
"""

import dataclasses
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from oraslearn import autodiff as ad
from oraslearn import mggnn
from oraslearn.autodiff import value_of
from oraslearn.ddm import FactorizationFailure
from oraslearn.fem import assemble_poisson
from oraslearn.loss import LossConfig, NumericalOverflow, learned_operator, loss_eval
from oraslearn.meshgen import MeshFailure, random_convex_polygon, read_mesh, \
    triangulate, write_mesh
from oraslearn.mggnn import ForwardOutput, ModelConfig
from oraslearn.partition import (
    InvalidGraph,
    SparsityPattern,
    classical_P,
    default_subdomain_count,
    extend_overlap,
    lloyd_aggregate,
    read_decomposition,
    write_decomposition,
)
from oraslearn.sparse import pattern_rows

HEAD_CHOICES = ("interface", "interpolation", "both")


class TrainingAborted(RuntimeError):
    """Raised when too many grids in one epoch failed to produce a loss."""


@dataclass
class TrainConfig:
    """Dataset and optimization hyperparameters."""

    n_grids: int = 1000
    node_min: int = 800
    node_max: int = 1000
    epochs: int = 20
    batch: int = 10
    lr: float = 5e-4
    delta: int = 1
    heads: str = "both"
    sparsity: str = "neighbors"
    layers: int = 4
    arch: str = "mggnn"
    hidden: int = 128
    hops: int = 3
    clip_norm: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if min(self.n_grids, self.node_min, self.epochs, self.batch) < 1:
            raise ValueError("counts must be positive")
        if self.node_max < self.node_min:
            raise ValueError("node_max must be at least node_min")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.delta < 0:
            raise ValueError("overlap must be nonnegative")
        if self.heads not in HEAD_CHOICES:
            raise ValueError(f"unknown heads switch: {self.heads}")
        if not 1 <= self.layers <= 6:
            raise ValueError("layers must be in 1..6")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be nonnegative")
        # delegate sparsity/arch validation
        ModelConfig(interp_mode=self.sparsity, arch=self.arch)


def model_config(cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(
        hidden=cfg.hidden,
        layers=cfg.layers,
        hops=cfg.hops,
        interp_mode=cfg.sparsity,
        arch=cfg.arch,
    )


# ---------------------------------------------------------------------------
# dataset


def _make_grid(cfg: TrainConfig, seed: int, g: int, attempt: int):
    rng = np.random.default_rng((seed, g, attempt))
    n_vertices = int(rng.integers(4, 9))
    target = int(rng.integers(cfg.node_min, cfg.node_max + 1))
    poly = random_convex_polygon(n_vertices, seed=(seed, g, attempt, 1))
    mesh = triangulate(poly, target, seed=(seed, g, attempt, 2))
    system = assemble_poisson(mesh)
    n = system.A.n_rows
    S = default_subdomain_count(n)
    assign = lloyd_aggregate(system.A, S, seed=(seed, g, attempt, 3))
    d = extend_overlap(assign, system.A, cfg.delta)
    return mesh, system, d


def make_dataset(cfg: TrainConfig, seed: int, out_dir=None, log=None) -> list:
    """Generate ``cfg.n_grids`` meshed and partitioned systems.

    Deterministic for a given seed; grids whose mesh or partition fails
    are regenerated with a bumped sub-seed (reported through ``log``).
    With ``out_dir`` set, each grid is persisted as a mesh file plus a
    decomposition dump.
    """
    items = []
    for g in range(cfg.n_grids):
        attempt = 0
        while True:
            try:
                item = _make_grid(cfg, seed, g, attempt)
                break
            except (MeshFailure, InvalidGraph) as exc:
                if log is not None:
                    log(f"grid {g} attempt {attempt} regenerated: {exc}")
                attempt += 1
                if attempt > 20:
                    raise
        items.append(item)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for g, (mesh, _, d) in enumerate(items):
            write_mesh(os.path.join(out_dir, f"grid_{g:04d}.mesh"), mesh)
            write_decomposition(os.path.join(out_dir, f"grid_{g:04d}.part"), d)
    return items


def load_dataset(path) -> list:
    """Read back grids persisted by :func:`make_dataset`."""
    names = sorted(
        f[: -len(".mesh")] for f in os.listdir(path) if f.endswith(".mesh")
    )
    if not names:
        raise FileNotFoundError(f"no mesh files under {path}")
    items = []
    for name in names:
        mesh = read_mesh(os.path.join(path, f"{name}.mesh"))
        system = assemble_poisson(mesh)
        d = read_decomposition(os.path.join(path, f"{name}.part"), system.A)
        items.append((mesh, system, d))
    return items


# ---------------------------------------------------------------------------
# head ablations


def apply_head_ablation(out: ForwardOutput, d, heads: str) -> ForwardOutput:
    """Replace head outputs per the ablation switch.

    "interface" keeps learned interface values and swaps in the
    classical interpolation; "interpolation" zeroes every interface
    matrix; "both" returns the output untouched.
    """
    if heads == "both":
        return out
    if heads == "interpolation":
        zeros = [np.zeros(pat.size) for pat in out.interface_patterns]
        return dataclasses.replace(out, interface_values=zeros)
    if heads == "interface":
        cp = classical_P(d)
        pattern = SparsityPattern(pattern_rows(cp), cp.col_idx.copy())
        return dataclasses.replace(
            out,
            interp_pattern=pattern,
            interp_values=cp.values.copy(),
            fallback_rows=0,
        )
    raise ValueError(f"unknown heads switch: {heads}")


# ---------------------------------------------------------------------------
# optimizer


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Scale the whole gradient so its global 2-norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            out[k] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


# ---------------------------------------------------------------------------
# training


def grid_gradient(system_a, d, gp, params, mcfg: ModelConfig,
                  lcfg: LossConfig, heads: str, sample_seed):
    """Loss and parameter gradients for one grid; None grads on skip.

    Returns (loss value, grads dict, skip reason).  Failures that a bad
    parameter draw can cause (overflow in the power chain, a singular
    subdomain system) are reported as skips rather than raised.
    """
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    try:
        try:
            out = mggnn.forward(system_a, d, leaves, mcfg, graph=gp)
            out = apply_head_ablation(out, d, heads)
            t_apply, p = learned_operator(system_a, d, out, levels="two")
            val = loss_eval(t_apply, p, system_a, lcfg, seed=sample_seed)
        except (NumericalOverflow, FactorizationFailure) as exc:
            return None, None, str(exc)
        loss_val = float(value_of(val))
        if not np.isfinite(loss_val):
            return None, None, f"non-finite loss {loss_val}"
        # a fully constant loss (own-only interpolation on a grid with
        # no interfaces) contributes a zero gradient, not a failure
        if isinstance(val, ad.Var):
            ad.backward(tape, val)
        # leaves outside the active graph (e.g. the interface head on a
        # single-subdomain grid) carry a zero gradient
        grads = {
            k: leaf.grad.copy() if leaf.grad is not None
            else np.zeros_like(value_of(leaf))
            for k, leaf in leaves.items()
        }
        return loss_val, grads, None
    finally:
        # Var and tape form cycles; free the graph deterministically
        # instead of waiting on the cycle collector
        tape.release()


def _grid_task(payload):
    idx, args = payload
    return idx, grid_gradient(*args)


def batch_gradient(batch, dataset, graphs, params, mcfg, lcfg, heads,
                   sample_seeds, pool=None):
    """Averaged gradient over a batch of grid indices.

    Per-grid gradients are reduced in ascending index order, so the
    result is invariant to the order of ``batch`` and to how the work
    is distributed.
    """
    payloads = [
        (idx, (dataset[idx][1].A, dataset[idx][2], graphs[idx], params,
               mcfg, lcfg, heads, sample_seeds[idx]))
        for idx in batch
    ]
    if pool is None:
        results = [_grid_task(p) for p in payloads]
    else:
        results = list(pool.map(_grid_task, payloads))
    results.sort(key=lambda r: r[0])
    total: dict = {}
    losses, skips = [], []
    for idx, (loss_val, grads, reason) in results:
        if grads is None:
            skips.append((idx, reason))
            continue
        losses.append((idx, loss_val))
        for k, g in grads.items():
            total[k] = total.get(k, 0.0) + g
    if losses:
        total = {k: g / len(losses) for k, g in total.items()}
    return total, losses, skips


def write_history(path, history: list) -> None:
    lines = ["epoch,mean_loss,wall_seconds,skips"]
    for row in history:
        lines.append(
            f"{row['epoch']},{float(row['mean_loss'])!r},"
            f"{float(row['wall_seconds'])!r},{row['skips']}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _atomic_checkpoint(path, params, config, extra):
    tmp = f"{path}.tmp"
    mggnn.save_checkpoint(tmp, params, config, extra=extra)
    os.replace(tmp, path)


def train(cfg: TrainConfig, dataset: list, seed: int = 0, out_dir=None,
          init_seed: int = 0, workers: int = 1, log=None):
    """Minimize the surrogate loss over the dataset; returns (params, history).

    Grids are shuffled each epoch with a seeded generator; per-epoch
    checkpoints (and a final ``model.ckpt``) are written atomically
    under ``out_dir``.  A grid whose loss evaluation fails is skipped;
    more than 20% skips in one epoch aborts training.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    mcfg = model_config(cfg)
    params = mggnn.init_params(mcfg, seed=init_seed)
    graphs = [
        mggnn.featurize(system.A, d, mcfg.interp_mode)
        for _, system, d in dataset
    ]
    optimizer = Adam(cfg.lr)
    history = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            order = np.random.default_rng((seed, epoch)).permutation(len(dataset))
            # fixed per-grid sample draws: epoch means stay comparable
            # (common random numbers), shuffling still randomizes batches
            sample_seeds = {int(idx): (seed, int(idx)) for idx in order}
            epoch_losses, epoch_skips = [], []
            for lo in range(0, len(order), cfg.batch):
                batch = [int(i) for i in order[lo : lo + cfg.batch]]
                grads, losses, skips = batch_gradient(
                    batch, dataset, graphs, params, mcfg, cfg.loss,
                    cfg.heads, sample_seeds, pool=pool,
                )
                epoch_losses.extend(losses)
                epoch_skips.extend(skips)
                for idx, reason in skips:
                    if log is not None:
                        log(f"epoch {epoch} grid {idx} skipped: {reason}")
                if losses:
                    if cfg.clip_norm > 0:
                        grads = clip_gradients(grads, cfg.clip_norm)
                    params = optimizer.step(params, grads)
            if len(epoch_skips) > 0.2 * len(dataset):
                raise TrainingAborted(
                    f"epoch {epoch}: {len(epoch_skips)} of {len(dataset)} "
                    "grids skipped"
                )
            epoch_losses.sort(key=lambda r: r[0])
            mean_loss = (
                sum(v for _, v in epoch_losses) / len(epoch_losses)
                if epoch_losses else float("nan")
            )
            row = {
                "epoch": epoch,
                "mean_loss": mean_loss,
                "wall_seconds": time.perf_counter() - start,
                "skips": len(epoch_skips),
            }
            history.append(row)
            if log is not None:
                log(
                    f"epoch {epoch}: mean loss {mean_loss:.6f}, "
                    f"{row['skips']} skips"
                )
            if out_dir is not None:
                _atomic_checkpoint(
                    os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.ckpt"),
                    params, mcfg,
                    {"epoch": epoch, "mean_loss": mean_loss},
                )
    finally:
        if pool is not None:
            pool.shutdown()
    if out_dir is not None:
        _atomic_checkpoint(
            os.path.join(out_dir, "model.ckpt"), params, mcfg,
            {"epochs": cfg.epochs},
        )
        write_history(os.path.join(out_dir, "history.csv"), history)
    return params, history
