"""Graph partitioning into overlapping subdomains.

Subdomains come from Lloyd aggregation on the matrix graph: farthest-point
seeding on hop distance, then alternating multi-source BFS assignment and
recentering, with a balance bound enforced by re-seeding.  Overlap is the
standard recursion that adds the one-hop neighborhood delta times.  The
module also builds the restriction operators, the piecewise-constant
interpolation with partition-of-unity weights, the coarse (aggregated)
operator, and the sparsity patterns that constrain learned operators.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .sparse import CsrMatrix


class InvalidGraph(ValueError):
    """Raised when the matrix graph does not meet a partitioning precondition."""


@dataclass
class SparsityPattern:
    """Allowed nonzero positions as parallel (rows, cols) index arrays."""

    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        if self.rows.shape != self.cols.shape:
            raise ValueError("rows and cols must have equal length")
        pairs = np.stack([self.rows, self.cols])
        if np.unique(pairs, axis=1).shape[1] != self.rows.shape[0]:
            raise ValueError("duplicate positions in sparsity pattern")

    @property
    def size(self) -> int:
        return self.rows.shape[0]


@dataclass
class Decomposition:
    """Non-overlapping assignment plus overlap-extended subdomain data.

    ``assign`` maps each DoF to its owning subdomain; ``overlap_sets[i]``
    is the sorted DoF list of subdomain i after ``delta`` rounds of
    one-hop extension; ``interface_nodes[i]`` are members with a graph
    neighbor outside the subdomain.  ``R0`` is the S x n binary
    aggregation operator and ``coarse_A = R0 A R0^T``.  The fine operator
    ``A`` rides along because the sparsity patterns depend on its graph.
    """

    S: int
    assign: np.ndarray
    overlap_sets: list
    delta: int
    interface_nodes: list
    coarse_A: CsrMatrix
    R0: CsrMatrix
    A: CsrMatrix

    @property
    def n(self) -> int:
        return self.assign.shape[0]


def default_subdomain_count(n: int) -> int:
    """Roughly 100 nodes per subdomain."""
    return max(1, math.ceil(n / 100))


def _binary_pattern(a: CsrMatrix) -> sp.csr_matrix:
    m = a.to_scipy().copy()
    m.data = np.ones_like(m.data)
    return m


def _multi_source_bfs(adj: sp.csr_matrix, sources: np.ndarray, labels=None):
    """Hop distances (and optionally min-label ownership) from sources.

    When two sources reach a node in the same round, the smaller label
    wins, which makes the result independent of traversal order.
    """
    n = adj.shape[0]
    indptr, indices = adj.indptr, adj.indices
    dist = np.full(n, -1, dtype=np.int64)
    own = np.full(n, -1, dtype=np.int64)
    dist[sources] = 0
    if labels is not None:
        own[sources] = labels
    frontier = np.asarray(sources, dtype=np.int64)
    d = 0
    while frontier.size:
        d += 1
        counts = indptr[frontier + 1] - indptr[frontier]
        starts = indptr[frontier]
        nbr = indices[_ranges(starts, counts)]
        src_label = np.repeat(own[frontier], counts)
        fresh = dist[nbr] == -1
        nbr = nbr[fresh]
        src_label = src_label[fresh]
        if nbr.size == 0:
            break
        # first occurrence after (node, label) sort = min label per node
        order = np.lexsort((src_label, nbr))
        nbr, src_label = nbr[order], src_label[order]
        keep = np.ones(nbr.shape[0], dtype=bool)
        keep[1:] = nbr[1:] != nbr[:-1]
        frontier = nbr[keep]
        dist[frontier] = d
        own[frontier] = src_label[keep]
    return dist, own


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of arange(s, s + c) for each start/count pair."""
    total = int(counts.sum())
    out = np.ones(total, dtype=np.int64)
    ends = np.cumsum(counts)
    out[0] = starts[0] if starts.size else 0
    out[ends[:-1]] = starts[1:] - starts[:-1] - counts[:-1] + 1
    return np.cumsum(out)


def _recenter(adj, assign, centers):
    """Move each center to its aggregate's most interior node."""
    n = adj.shape[0]
    erow = np.repeat(np.arange(n), np.diff(adj.indptr))
    ecol = adj.indices
    cross = assign[erow] != assign[ecol]
    boundary = np.unique(erow[cross])
    if boundary.size == 0:
        return centers
    inner = sp.csr_matrix(
        (np.ones((~cross).sum()), (erow[~cross], ecol[~cross])), shape=(n, n)
    )
    dist, _ = _multi_source_bfs(inner, boundary)
    order = np.lexsort((np.arange(n), -dist, assign))
    grouped = assign[order]
    first = np.ones(n, dtype=bool)
    first[1:] = grouped[1:] != grouped[:-1]
    new_centers = centers.copy()
    new_centers[grouped[first]] = order[first]
    return new_centers


def lloyd_aggregate(a: CsrMatrix, S: int, seed: int) -> np.ndarray:
    """Partition the graph of ``a`` into S connected aggregates.

    Deterministic for a fixed seed.  Aggregate sizes are kept within
    [n/(4S), 4n/S] by re-seeding the offenders.
    """
    n = a.n_rows
    if not 1 <= S <= n:
        raise ValueError(f"need 1 <= S <= {n}, got {S}")
    adj = _binary_pattern(a)
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp != 1:
        raise InvalidGraph("matrix graph is disconnected")
    rng = np.random.default_rng(seed)

    centers = np.empty(S, dtype=np.int64)
    centers[0] = rng.integers(n)
    dist, _ = _multi_source_bfs(adj, centers[:1])
    for k in range(1, S):
        centers[k] = int(np.argmax(dist))
        dk, _ = _multi_source_bfs(adj, centers[k : k + 1])
        dist = np.minimum(dist, dk)

    assign = None
    lo = n / (4 * S)
    hi = 4 * n / S
    for _ in range(30):
        for _ in range(10):
            _, new_assign = _multi_source_bfs(adj, centers, np.arange(S))
            if assign is not None and np.array_equal(new_assign, assign):
                break
            assign = new_assign
            centers = _recenter(adj, assign, centers)
        sizes = np.bincount(assign, minlength=S)
        if sizes.min() >= lo and sizes.max() <= hi:
            return assign
        # re-seed: move the smallest aggregate's center into the largest
        # aggregate, at the node farthest from that aggregate's center
        small = int(np.argmin(sizes))
        big = int(np.argmax(sizes))
        dist, _ = _multi_source_bfs(adj, centers[big : big + 1])
        dist[assign != big] = -1
        centers[small] = int(np.argmax(dist))
        assign = None
    raise InvalidGraph("aggregate balance not attained")


def extend_overlap(assign: np.ndarray, a: CsrMatrix, delta: int) -> Decomposition:
    """Grow each subdomain by its one-hop neighborhood ``delta`` times."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    assign = np.asarray(assign, dtype=np.int64)
    n = assign.shape[0]
    S = int(assign.max()) + 1
    adj = _binary_pattern(a)
    r0 = sp.csr_matrix(
        (np.ones(n), (assign, np.arange(n))), shape=(S, n)
    )
    member = r0.copy()
    for _ in range(delta):
        member = ((member + member @ adj) > 0).astype(np.float64).tocsr()
    member.sort_indices()
    overlap_sets = [
        member.indices[member.indptr[i] : member.indptr[i + 1]].astype(np.int64)
        for i in range(S)
    ]
    interface = []
    for i in range(S):
        inside = np.zeros(n, dtype=bool)
        inside[overlap_sets[i]] = True
        has_outside = (adj @ (~inside).astype(np.float64)) > 0
        interface.append(np.nonzero(inside & has_outside)[0])
    coarse = CsrMatrix.from_scipy((r0 @ a.to_scipy() @ r0.T).tocsr())
    return Decomposition(
        S=S,
        assign=assign,
        overlap_sets=overlap_sets,
        delta=delta,
        interface_nodes=interface,
        coarse_A=coarse,
        R0=CsrMatrix.from_scipy(r0),
        A=a,
    )


def restrictions(d: Decomposition) -> dict:
    """Selection operators R_i and their owned-row variants R̃_i.

    R_i picks the rows of subdomain i's overlap set; R̃_i keeps the same
    pattern but zeroes rows for DoFs the subdomain does not own, so that
    sum_i R̃_i^T R_i = I.
    """
    r_list, rt_list = [], []
    for i in range(d.S):
        dofs = d.overlap_sets[i]
        k = dofs.shape[0]
        rows = np.arange(k)
        r = CsrMatrix.from_coo(rows, dofs, np.ones(k), (k, d.n))
        owned = (d.assign[dofs] == i).astype(np.float64)
        rt = r.with_values(owned)
        r_list.append(r)
        rt_list.append(rt)
    return {"R": r_list, "R_tilde": rt_list}


def classical_P(d: Decomposition) -> CsrMatrix:
    """Piecewise-constant interpolation with equal weights per row.

    Row v has a nonzero for every subdomain whose overlap set contains v,
    each 1/multiplicity, so rows sum to one.
    """
    rows = np.concatenate(d.overlap_sets)
    cols = np.repeat(
        np.arange(d.S), [s.shape[0] for s in d.overlap_sets]
    )
    mult = np.bincount(rows, minlength=d.n).astype(np.float64)
    return CsrMatrix.from_coo(rows, cols, 1.0 / mult[rows], (d.n, d.S))


def interp_sparsity(d: Decomposition, mode: str = "neighbors") -> SparsityPattern:
    """Allowed interpolation nonzeros per fine node.

    ``neighbors`` permits the columns of the node's own subdomain and of
    every subdomain owning one of its graph neighbors; ``own-only``
    permits just the node's own column.
    """
    if mode == "own-only":
        return SparsityPattern(np.arange(d.n), d.assign.copy())
    if mode != "neighbors":
        raise ValueError(f"unknown interpolation sparsity mode: {mode}")
    a = d.A
    erow = np.repeat(np.arange(d.n), np.diff(a.row_ptr))
    pairs = np.stack([erow, d.assign[a.col_idx]])
    own = np.stack([np.arange(d.n), d.assign])
    uniq = np.unique(np.concatenate([pairs, own], axis=1), axis=1)
    return SparsityPattern(uniq[0], uniq[1])


def interface_sparsity(d: Decomposition) -> list:
    """Per-subdomain allowed positions for learned interface values.

    Positions are in local overlap-set coordinates: diagonal entries of
    interface nodes plus graph edges between interface nodes.
    """
    patterns = []
    a = d.A
    erow = np.repeat(np.arange(d.n), np.diff(a.row_ptr))
    ecol = a.col_idx
    for i in range(d.S):
        dofs = d.overlap_sets[i]
        local = np.full(d.n, -1, dtype=np.int64)
        local[dofs] = np.arange(dofs.shape[0])
        on_iface = np.zeros(d.n, dtype=bool)
        on_iface[d.interface_nodes[i]] = True
        keep = on_iface[erow] & on_iface[ecol] & (erow != ecol)
        rows = np.concatenate([local[erow[keep]], local[d.interface_nodes[i]]])
        cols = np.concatenate([local[ecol[keep]], local[d.interface_nodes[i]]])
        patterns.append(SparsityPattern(rows, cols))
    return patterns


def coarse_graph(d: Decomposition, a: CsrMatrix, x0: np.ndarray):
    """Aggregate the operator and node features with the binary R0."""
    r0 = d.R0.to_scipy()
    a1 = CsrMatrix.from_scipy((r0 @ a.to_scipy() @ r0.T).tocsr())
    x1 = r0 @ np.asarray(x0, dtype=np.float64)
    return a1, x1


def write_decomposition(path, d: Decomposition) -> None:
    """Text dump: assignment array, then each subdomain's overlap set."""
    lines = [f"S {d.S} delta {d.delta} n {d.n}"]
    lines.append("assign " + " ".join(str(i) for i in d.assign))
    for i in range(d.S):
        lines.append(
            f"overlap {i} " + " ".join(str(j) for j in d.overlap_sets[i])
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_decomposition(path, a: CsrMatrix) -> Decomposition:
    """Rebuild a decomposition from its text dump and the fine operator.

    The overlap sets are regenerated from the stored assignment and
    verified against the dumped ones, which catches a mismatched
    operator.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = lines[0].split()
    S, delta, n = int(header[1]), int(header[3]), int(header[5])
    if a.n_rows != n:
        raise ValueError(f"operator has {a.n_rows} rows, dump expects {n}")
    tokens = lines[1].split()
    if tokens[0] != "assign" or len(tokens) != n + 1:
        raise ValueError("malformed assignment line")
    assign = np.array([int(t) for t in tokens[1:]], dtype=np.int64)
    d = extend_overlap(assign, a, delta)
    if d.S != S:
        raise ValueError(f"dump declares {S} subdomains, assignment has {d.S}")
    for i, line in enumerate(lines[2 : 2 + S]):
        stored = np.array([int(t) for t in line.split()[2:]], dtype=np.int64)
        if not np.array_equal(stored, d.overlap_sets[i]):
            raise ValueError(f"overlap set {i} does not match the operator")
    return d
