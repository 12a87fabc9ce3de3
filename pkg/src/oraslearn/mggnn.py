"""Two-level graph network emitting interface values and interpolation weights.

The model runs message passing simultaneously on the fine DoF graph and
on the coarse subdomain graph, with learned cross-level messages in both
directions.  Two edge-output heads read off the final features: one
produces per-subdomain interface matrices ``L_i`` on their allowed
sparsity, the other produces interpolation weights whose rows are
normalized to sum to one.

All tensor work goes through :mod:`oraslearn.autodiff` ops, so the same
code path serves gradient-based training (``Var`` parameters) and plain
inference (ndarray parameters).
"""

import dataclasses
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from oraslearn import autodiff as ad
from oraslearn.autodiff import value_of
from oraslearn.partition import (
    Decomposition,
    SparsityPattern,
    interface_sparsity,
    interp_sparsity,
)
from oraslearn.sparse import CsrMatrix, pattern_rows

ROW_SUM_FLOOR = 1e-8


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``arch`` selects simultaneous two-level updates ("mggnn") or a
    sequential coarse-then-fine sweep per layer ("unet"); both use the
    same parameter set.  ``interp_mode`` picks the interpolation
    sparsity ("neighbors" or "own-only").
    """

    hidden: int = 128
    layers: int = 4
    hops: int = 3
    interp_mode: str = "neighbors"
    arch: str = "mggnn"

    def __post_init__(self):
        if self.arch not in ("mggnn", "unet"):
            raise ValueError(f"unknown architecture: {self.arch}")
        if self.interp_mode not in ("neighbors", "own-only"):
            raise ValueError(f"unknown interpolation mode: {self.interp_mode}")
        if self.layers < 1 or self.hops < 1 or self.hidden < 1:
            raise ValueError("layers, hops and hidden must be positive")


@dataclass
class GraphPair:
    """Fine/coarse graph data plus cached index maps for the heads.

    Node and edge feature fields hold raw features after
    :func:`featurize` and current (possibly ``Var``) features inside the
    network.  Everything else is constant structure.
    """

    n_fine: int
    n_coarse: int
    x_fine: object
    x_coarse: object
    e_fine: object
    e_coarse: object
    e_cross: object
    m_fine: object
    m_coarse: object
    fine_rows: np.ndarray
    fine_cols: np.ndarray
    coarse_rows: np.ndarray
    coarse_cols: np.ndarray
    cross_fine: np.ndarray
    cross_coarse: np.ndarray
    interp_mode: str
    # interface-head maps: union pattern in global DoF coordinates,
    # transpose permutation, positions into the fine edge list, and for
    # each subdomain its local pattern plus positions into the union
    iface_rows: np.ndarray
    iface_cols: np.ndarray
    iface_swap: np.ndarray
    iface_edge_pos: np.ndarray
    iface_patterns: list
    iface_index: list
    # interpolation-head maps
    interp_pattern: SparsityPattern
    interp_edge_pos: np.ndarray
    interp_degree: np.ndarray


@dataclass
class ForwardOutput:
    """Head outputs aligned with their sparsity patterns.

    ``interface_values[i]`` matches ``interface_patterns[i]`` (local
    overlap-set coordinates); ``interp_values`` matches
    ``interp_pattern`` (fine DoF x subdomain).  Values are ndarrays or
    ``Var`` depending on the parameters passed to :func:`forward`.
    ``fallback_rows`` counts interpolation rows that hit the uniform
    fallback because their pre-normalization sum was below the floor.
    """

    interface_patterns: list
    interface_values: list
    interp_pattern: SparsityPattern
    interp_values: object
    fallback_rows: int


def _propagation_matrix(s: sp.csr_matrix) -> sp.csr_matrix:
    """Symmetric normalization of |A| with unit self-loops.

    The self-loops join the adjacency before normalization, so the
    result has spectral norm at most one and repeated filtering cannot
    amplify feature magnitudes.
    """
    b = abs(s).tocsr()
    b.setdiag(1.0)
    deg = np.asarray(b.sum(axis=1)).ravel()
    d = sp.diags(1.0 / np.sqrt(deg))
    return (d @ b @ d).tocsr()


def featurize(a: CsrMatrix, d: Decomposition, interp_mode: str = "neighbors") -> GraphPair:
    """Build the two-level graph data for one decomposed system.

    Fine node feature: interface indicator.  Coarse node features pool
    fine ones through the binary aggregation operator.  Edge features
    are the corresponding operator entries; cross edges start at the
    uniform interpolation weight of their row.
    """
    n, S = a.n_rows, d.S
    x_fine = np.zeros((n, 1))
    for nodes in d.interface_nodes:
        x_fine[nodes, 0] = 1.0
    r0 = d.R0.to_scipy()
    x_coarse = np.asarray(r0 @ x_fine)

    m_fine = _propagation_matrix(a.to_scipy())
    m_coarse = _propagation_matrix(d.coarse_A.to_scipy())

    fine_rows, fine_cols = pattern_rows(a), a.col_idx
    e_fine = a.values[:, None].copy()
    coarse_rows, coarse_cols = pattern_rows(d.coarse_A), d.coarse_A.col_idx
    e_coarse = d.coarse_A.values[:, None].copy()

    cross = interp_sparsity(d, "neighbors")
    deg = np.bincount(cross.rows, minlength=n)
    e_cross = (1.0 / deg[cross.rows])[:, None]

    pats = interface_sparsity(d)
    glob_p, glob_q, counts = [], [], []
    for i, pat in enumerate(pats):
        dofs = d.overlap_sets[i]
        glob_p.append(dofs[pat.rows])
        glob_q.append(dofs[pat.cols])
        counts.append(pat.size)
    all_p = np.concatenate(glob_p) if glob_p else np.zeros(0, dtype=np.int64)
    all_q = np.concatenate(glob_q) if glob_q else np.zeros(0, dtype=np.int64)
    key, inverse = np.unique(all_p * n + all_q, return_inverse=True)
    iface_rows, iface_cols = key // n, key % n
    iface_swap = np.searchsorted(key, iface_cols * n + iface_rows)
    if key.size and not np.array_equal(key[iface_swap], iface_cols * n + iface_rows):
        raise ValueError("interface pattern is not symmetric")
    iface_edge_pos = a.find_entries(iface_rows, iface_cols)
    iface_index = [
        np.asarray(part, dtype=np.int64)
        for part in np.split(inverse, np.cumsum(counts)[:-1])
    ] if counts else []

    if interp_mode == "own-only":
        head_pat = interp_sparsity(d, "own-only")
        interp_edge_pos = np.searchsorted(
            cross.rows * S + cross.cols, head_pat.rows * S + head_pat.cols
        )
    elif interp_mode == "neighbors":
        head_pat = cross
        interp_edge_pos = np.arange(cross.size)
    else:
        raise ValueError(f"unknown interpolation mode: {interp_mode}")

    return GraphPair(
        n_fine=n,
        n_coarse=S,
        x_fine=x_fine,
        x_coarse=x_coarse,
        e_fine=e_fine,
        e_coarse=e_coarse,
        e_cross=e_cross,
        m_fine=m_fine,
        m_coarse=m_coarse,
        fine_rows=fine_rows,
        fine_cols=fine_cols,
        coarse_rows=coarse_rows,
        coarse_cols=coarse_cols,
        cross_fine=cross.rows,
        cross_coarse=cross.cols,
        interp_mode=interp_mode,
        iface_rows=iface_rows,
        iface_cols=iface_cols,
        iface_swap=iface_swap,
        iface_edge_pos=iface_edge_pos,
        iface_patterns=pats,
        iface_index=iface_index,
        interp_pattern=head_pat,
        interp_edge_pos=interp_edge_pos,
        interp_degree=deg[head_pat.rows].astype(np.float64),
    )


# ---------------------------------------------------------------------------
# parameters


def _init_linear(rng, params, name, fan_in, fan_out, zero=False, scale=1.0):
    if zero:
        w = np.zeros((fan_in, fan_out))
        b = np.zeros(fan_out)
    else:
        k = scale / np.sqrt(fan_in)
        w = rng.uniform(-k, k, size=(fan_in, fan_out))
        b = rng.uniform(-k, k, size=fan_out)
    params[f"{name}.w"] = w
    params[f"{name}.b"] = b


def _init_mlp(rng, params, prefix, dims, zero_last=False, out_scale=1.0):
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        _init_linear(
            rng, params, f"{prefix}.l{i}", dims[i], dims[i + 1],
            zero=zero_last and last,
            scale=out_scale if last else 1.0,
        )


def _init_tagconv(rng, params, prefix, c_in, c_out, hops):
    k = 1.0 / np.sqrt(c_in * (hops + 1))
    for j in range(hops + 1):
        params[f"{prefix}.w{j}"] = rng.uniform(-k, k, size=(c_in, c_out))
    params[f"{prefix}.b"] = rng.uniform(-k, k, size=c_out)


# Cross-level messages are summed, so a coarse node accumulates one
# term per fine node of its aggregate (about n/S of them) and the terms
# correlate through the shared MLP; without damping the coarse stream
# grows by the aggregate size each layer.  The output layers of the
# message MLPs therefore start small enough to hold every stream near
# the encoder scale (measured on generated training-size problems).
MSG_TO_COARSE_INIT_SCALE = 0.01
MSG_TO_FINE_INIT_SCALE = 0.25


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameter dictionary of named float64 arrays.

    The final layer of each output head starts at zero, so a freshly
    initialized model emits zero interface values and classical
    unit-sum interpolation rows.
    """
    rng = np.random.default_rng(seed)
    h = config.hidden
    params: dict = {}
    _init_mlp(rng, params, "node_enc", [1, h, h, h])
    _init_mlp(rng, params, "edge_enc", [1, h, h, h])
    for i in range(config.layers):
        p = f"layer{i}"
        _init_tagconv(rng, params, f"{p}.tag_fine", h, h, config.hops)
        _init_tagconv(rng, params, f"{p}.tag_coarse", h, h, config.hops)
        _init_mlp(rng, params, f"{p}.to_fine", [3 * h, h, h],
                  out_scale=MSG_TO_FINE_INIT_SCALE)
        _init_mlp(rng, params, f"{p}.to_coarse", [3 * h, h, h],
                  out_scale=MSG_TO_COARSE_INIT_SCALE)
        _init_tagconv(rng, params, f"{p}.out_fine", 2 * h, h, config.hops)
        _init_tagconv(rng, params, f"{p}.out_coarse", 2 * h, h, config.hops)
    _init_mlp(rng, params, "head_iface", [3 * h, h, h, 1], zero_last=True)
    _init_mlp(rng, params, "head_interp", [3 * h, h, h, 1], zero_last=True)
    return params


def param_count(params: dict) -> int:
    return int(sum(value_of(v).size for v in params.values()))


# ---------------------------------------------------------------------------
# network blocks


def _linear(x, params, name):
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _encoder(x, params, prefix):
    """Three linear layers, each followed by ReLU."""
    h = x
    for i in range(3):
        h = ad.relu(_linear(h, params, f"{prefix}.l{i}"))
    return h


def _head_mlp(x, params, prefix):
    """Edge post-processing: two hidden ReLU layers, linear scalar out."""
    h = ad.relu(_linear(x, params, f"{prefix}.l0"))
    h = ad.relu(_linear(h, params, f"{prefix}.l1"))
    out = _linear(h, params, f"{prefix}.l2")
    # collapse the trailing singleton: (m, 1) @ (1,) -> (m,)
    return ad.matmul(out, np.ones(1))


def tagconv(x, m, params, prefix, hops):
    """Polynomial graph convolution y = sum_j M^j X W_j + b.

    ``m`` is a constant propagation matrix; powers are applied by
    repeated multiplication, never formed explicitly.
    """
    h = x
    acc = ad.matmul(h, params[f"{prefix}.w0"])
    for j in range(1, hops + 1):
        h = ad.spmm_const(m, h)
        acc = ad.add(acc, ad.matmul(h, params[f"{prefix}.w{j}"]))
    return ad.add(acc, params[f"{prefix}.b"])


def cross_message(x_src, x_dst, dst_idx, src_idx, edge_feat, params, prefix):
    """Sum-aggregated cross-level messages onto destination nodes.

    Each edge contributes f([x_dst, x_src, e]) with f a two-layer MLP
    (hidden ReLU); nodes with no incoming edge receive the zero vector.
    """
    n_dst = value_of(x_dst).shape[0]
    if dst_idx.shape[0] == 0:
        return np.zeros((n_dst, value_of(params[f"{prefix}.l1.w"]).shape[1]))
    xin = ad.concat(
        [ad.gather_rows(x_dst, dst_idx), ad.gather_rows(x_src, src_idx), edge_feat],
        axis=1,
    )
    h = ad.relu(_linear(xin, params, f"{prefix}.l0"))
    msg = _linear(h, params, f"{prefix}.l1")
    return ad.scatter_rows(msg, dst_idx, n_dst)


def mggnn_layer(gp: GraphPair, params, prefix: str, hops: int, arch: str = "mggnn") -> GraphPair:
    """One two-level update; returns a GraphPair with new node features.

    "mggnn" updates both levels simultaneously from the previous
    features; "unet" sweeps coarse first and feeds the updated coarse
    features into the fine update, reusing identical parameter shapes.
    """
    def fine_from_coarse(x1):
        return cross_message(
            x1, gp.x_fine, gp.cross_fine, gp.cross_coarse, gp.e_cross,
            params, f"{prefix}.to_fine",
        )

    def coarse_from_fine(x0):
        return cross_message(
            x0, gp.x_coarse, gp.cross_coarse, gp.cross_fine, gp.e_cross,
            params, f"{prefix}.to_coarse",
        )

    same0 = tagconv(gp.x_fine, gp.m_fine, params, f"{prefix}.tag_fine", hops)
    same1 = tagconv(gp.x_coarse, gp.m_coarse, params, f"{prefix}.tag_coarse", hops)
    if arch == "unet":
        cat1 = ad.concat([coarse_from_fine(gp.x_fine), same1], axis=1)
        new1 = tagconv(cat1, gp.m_coarse, params, f"{prefix}.out_coarse", hops)
        cat0 = ad.concat([same0, fine_from_coarse(new1)], axis=1)
        new0 = tagconv(cat0, gp.m_fine, params, f"{prefix}.out_fine", hops)
    else:
        cat0 = ad.concat([same0, fine_from_coarse(gp.x_coarse)], axis=1)
        cat1 = ad.concat([coarse_from_fine(gp.x_fine), same1], axis=1)
        new0 = tagconv(cat0, gp.m_fine, params, f"{prefix}.out_fine", hops)
        new1 = tagconv(cat1, gp.m_coarse, params, f"{prefix}.out_coarse", hops)
    return dataclasses.replace(gp, x_fine=new0, x_coarse=new1)


def forward(
    a: CsrMatrix,
    d: Decomposition,
    params: dict,
    config: ModelConfig,
    graph: GraphPair = None,
) -> ForwardOutput:
    """Run the network and read off both heads.

    Interface head: endpoint features and the edge feature of every
    allowed interface position feed an edge MLP; directed outputs are
    symmetrized and scattered into each subdomain's local pattern.
    Interpolation head: the same construction over cross-level edges
    plus a uniform per-row prior, then each fine row is normalized to
    unit sum, falling back to the uniform row (and counting it) when
    the raw sum is below 1e-8 in magnitude.  In "own-only" mode the
    single allowed entry per row normalizes to exactly one for any
    parameters, so the head is skipped and the 0/1 assignment
    interpolation is returned directly.
    """
    gp = graph if graph is not None else featurize(a, d, config.interp_mode)
    if gp.interp_mode != config.interp_mode:
        raise ValueError("graph was featurized with a different interp_mode")

    x0 = _encoder(gp.x_fine, params, "node_enc")
    x1 = _encoder(gp.x_coarse, params, "node_enc")
    ef = _encoder(gp.e_fine, params, "edge_enc")
    ec = _encoder(gp.e_coarse, params, "edge_enc")
    ex = _encoder(gp.e_cross, params, "edge_enc")
    cur = dataclasses.replace(gp, x_fine=x0, x_coarse=x1, e_fine=ef, e_coarse=ec, e_cross=ex)
    for i in range(config.layers):
        cur = mggnn_layer(cur, params, f"layer{i}", config.hops, config.arch)

    if gp.iface_rows.shape[0]:
        xin = ad.concat(
            [
                ad.gather_rows(cur.x_fine, gp.iface_rows),
                ad.gather_rows(cur.x_fine, gp.iface_cols),
                ad.gather_rows(ef, gp.iface_edge_pos),
            ],
            axis=1,
        )
        w = _head_mlp(xin, params, "head_iface")
        w = ad.scale(ad.add(w, ad.gather_rows(w, gp.iface_swap)), 0.5)
    else:
        w = np.zeros(0)
    iface_vals = [ad.gather_rows(w, idx) for idx in gp.iface_index]

    if config.interp_mode == "own-only":
        interp_vals = np.ones(gp.n_fine)
        fallback = 0
    else:
        rows = gp.interp_pattern.rows
        xin = ad.concat(
            [
                ad.gather_rows(cur.x_fine, rows),
                ad.gather_rows(cur.x_coarse, gp.interp_pattern.cols),
                ad.gather_rows(ex, gp.interp_edge_pos),
            ],
            axis=1,
        )
        v = _head_mlp(xin, params, "head_interp")
        # uniform prior: a zero head emits the classical unit-sum row
        # and keeps a nonzero gradient through the normalization
        v = ad.add(v, 1.0 / gp.interp_degree)
        sums = ad.scatter_rows(v, rows, gp.n_fine)
        bad = np.abs(value_of(sums)) < ROW_SUM_FLOOR
        fallback = int(bad.sum())
        safe = ad.where_mask(bad, np.ones(gp.n_fine), sums)
        factor = ad.gather_rows(ad.reciprocal(safe), rows)
        interp_vals = ad.where_mask(
            bad[rows], 1.0 / gp.interp_degree, ad.mul(v, factor)
        )

    return ForwardOutput(
        interface_patterns=gp.iface_patterns,
        interface_values=iface_vals,
        interp_pattern=gp.interp_pattern,
        interp_values=interp_vals,
        fallback_rows=fallback,
    )


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, params: dict, config: ModelConfig, extra: dict = None) -> None:
    """Write parameters as named float64 arrays with a JSON manifest.

    The container is a zip with fixed timestamps, so identical inputs
    produce byte-identical files.
    """
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(config),
        "extra": extra or {},
        "arrays": [
            {"name": k, "shape": list(value_of(v).shape)} for k, v in params.items()
        ],
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as z:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        z.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        for k, v in params.items():
            arr = np.ascontiguousarray(value_of(v), dtype=np.float64)
            info = zipfile.ZipInfo(f"arrays/{k}.bin", date_time=_ZIP_EPOCH)
            z.writestr(info, arr.tobytes())


def load_checkpoint(path):
    """Read back (params, config, extra) written by save_checkpoint."""
    with zipfile.ZipFile(path, "r") as z:
        manifest = json.loads(z.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version: {manifest.get('version')}"
            )
        params = {}
        for entry in manifest["arrays"]:
            raw = z.read(f"arrays/{entry['name']}.bin")
            params[entry["name"]] = (
                np.frombuffer(raw, dtype=np.float64).reshape(entry["shape"]).copy()
            )
    config = ModelConfig(**manifest["config"])
    return params, config, manifest.get("extra", {})
