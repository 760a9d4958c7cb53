"""Weighted graphs, the trace-exponential acyclicity function, and edge bookkeeping.

Convention used throughout the package: ``W[j, i]`` is the coefficient of
parent ``j`` in the structural equation of child ``i``, so a batch obeys
``X = X @ W + U`` and an edge ``j -> i`` lives at row ``j``, column ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError

H_TOL = 1e-8
DEFAULT_EDGE_THRESHOLD = 0.3


def _square_matrix(M, name="matrix"):
    arr = np.asarray(M, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidArgumentError(f"{name} must be square, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise InvalidArgumentError(f"{name} must have at least one row")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def _pattern(a):
    """Boolean edge mask from an AdjacencyMatrix, WeightedGraph or raw array."""
    if isinstance(a, AdjacencyMatrix):
        return a.entries.astype(bool)
    if isinstance(a, WeightedGraph):
        return a.weights != 0
    arr = np.asarray(a)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidArgumentError(f"adjacency must be square, got shape {arr.shape}")
    return arr != 0


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Dense ``d x d`` weight matrix with a binarization threshold.

    The stored array is a read-only copy, so instances can be shared freely.
    """

    weights: np.ndarray
    edge_threshold: float = DEFAULT_EDGE_THRESHOLD

    def __post_init__(self):
        W = _square_matrix(self.weights, "weights").copy()
        if np.any(np.diag(W) != 0):
            raise InvalidArgumentError("weights must have a zero diagonal (no self-loops)")
        if not (self.edge_threshold >= 0):
            raise InvalidArgumentError("edge_threshold must be nonnegative")
        W.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "edge_threshold", float(self.edge_threshold))

    @classmethod
    def zeros(cls, d, edge_threshold=DEFAULT_EDGE_THRESHOLD):
        return cls(np.zeros((d, d)), edge_threshold)

    @property
    def d(self):
        return self.weights.shape[0]

    def with_weights(self, weights):
        return WeightedGraph(weights, self.edge_threshold)

    def adjacency(self):
        return threshold_edges(self)

    def __eq__(self, other):
        if not isinstance(other, WeightedGraph):
            return NotImplemented
        return (self.edge_threshold == other.edge_threshold
                and np.array_equal(self.weights, other.weights))

    __hash__ = None

    def __repr__(self):
        return (f"WeightedGraph(d={self.d}, edges={int(np.count_nonzero(self.weights))}, "
                f"edge_threshold={self.edge_threshold})")


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    """Binary ``d x d`` edge indicator; ``entries[j, i] == 1`` means ``j -> i``."""

    entries: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.entries)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise InvalidArgumentError(f"adjacency must be square, got shape {A.shape}")
        if not np.all((A == 0) | (A == 1)):
            raise InvalidArgumentError("adjacency entries must be 0 or 1")
        A = A.astype(np.int8)
        if np.any(np.diag(A)):
            raise InvalidArgumentError("adjacency must have a zero diagonal")
        A.setflags(write=False)
        object.__setattr__(self, "entries", A)

    @classmethod
    def empty(cls, d):
        return cls(np.zeros((d, d), dtype=np.int8))

    @property
    def d(self):
        return self.entries.shape[0]

    @property
    def n_edges(self):
        return int(np.count_nonzero(self.entries))

    def edges(self):
        """Sorted list of ``(parent, child)`` pairs."""
        return [(int(j), int(i)) for j, i in zip(*np.nonzero(self.entries))]

    def parents(self, child):
        return np.flatnonzero(self.entries[:, child])

    def __eq__(self, other):
        if not isinstance(other, AdjacencyMatrix):
            return NotImplemented
        return np.array_equal(self.entries, other.entries)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class StructuralDelta:
    """Entrywise difference of two adjacencies: +1 addition, -1 deletion."""

    entries: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.entries)
        if not np.all((D == -1) | (D == 0) | (D == 1)):
            raise InvalidArgumentError("delta entries must lie in {-1, 0, +1}")
        D = D.astype(np.int8)
        D.setflags(write=False)
        object.__setattr__(self, "entries", D)

    @property
    def d(self):
        return self.entries.shape[0]

    @property
    def change_count(self):
        return int(np.count_nonzero(self.entries))

    def additions(self):
        return [(int(j), int(i)) for j, i in zip(*np.nonzero(self.entries == 1))]

    def deletions(self):
        return [(int(j), int(i)) for j, i in zip(*np.nonzero(self.entries == -1))]


def matrix_exponential(M):
    """Matrix exponential by Pade scaling-and-squaring (scipy's ``expm``)."""
    return scipy.linalg.expm(_square_matrix(M, "M"))


def acyclicity_value(W):
    """``tr(exp(W * W)) - d``; zero exactly when the support of W is acyclic."""
    W = _square_matrix(W, "W")
    E = scipy.linalg.expm(W * W)
    return float(np.trace(E) - W.shape[0])


def acyclicity_gradient(W):
    """Analytic gradient ``exp(W * W).T * 2W`` of :func:`acyclicity_value`."""
    W = _square_matrix(W, "W")
    E = scipy.linalg.expm(W * W)
    return E.T * (2.0 * W)


def _cyclic_core(mask):
    """Nodes left after repeatedly stripping nodes with no in- or no out-edges.

    Every node on a directed cycle survives, and so does every node on a
    path that closes one; the core is empty iff the pattern is acyclic.
    """
    m = mask.astype(np.int32)
    alive = np.ones(m.shape[0], dtype=bool)
    indeg = m.sum(axis=0)
    outdeg = m.sum(axis=1)
    while True:
        dead = alive & ((indeg == 0) | (outdeg == 0))
        if not dead.any():
            return np.flatnonzero(alive)
        alive &= ~dead
        indeg = indeg - m[dead].sum(axis=0)
        outdeg = outdeg - m[:, dead].sum(axis=1)


def acyclicity_value_and_gradient(W, skip_if_dag=True):
    """Return ``(h, grad)`` evaluating the exponential only where cycles can exist.

    Closed walks, and every path that closes one, live inside the cyclic
    core, so ``h`` and its gradient are computed exactly from the core
    submatrix; both are zero when the support is a DAG.  With
    ``skip_if_dag=False`` the full-matrix exponential is used instead.
    """
    W = np.asarray(W, dtype=float)
    if not skip_if_dag:
        E = scipy.linalg.expm(W * W)
        return float(np.trace(E) - W.shape[0]), E.T * (2.0 * W)
    grad = np.zeros_like(W)
    core = _cyclic_core(W != 0)
    if core.size == 0:
        return 0.0, grad
    ix = np.ix_(core, core)
    block = W[ix]
    E = scipy.linalg.expm(block * block)
    grad[ix] = E.T * (2.0 * block)
    return float(np.trace(E) - core.size), grad


def threshold_edges(g, edge_threshold=None):
    """Binarize a weighted graph: 1 where ``|W| > edge_threshold``."""
    if not isinstance(g, WeightedGraph):
        g = WeightedGraph(g, DEFAULT_EDGE_THRESHOLD if edge_threshold is None else edge_threshold)
    eps = g.edge_threshold if edge_threshold is None else float(edge_threshold)
    if eps < 0:
        raise InvalidArgumentError("edge_threshold must be nonnegative")
    A = (np.abs(g.weights) > eps).astype(np.int8)
    np.fill_diagonal(A, 0)
    return AdjacencyMatrix(A)


def _acyclic_mask(mask):
    # Kahn's algorithm, peeling all current sources at once.
    d = mask.shape[0]
    m = mask.astype(np.int64)
    alive = np.ones(d, dtype=bool)
    indeg = m.sum(axis=0)
    while True:
        sources = alive & (indeg == 0)
        if not sources.any():
            break
        alive &= ~sources
        indeg = indeg - m[sources].sum(axis=0)
    return not alive.any()


def is_dag(a):
    """True iff the edge pattern has no directed cycle (topological peeling)."""
    return _acyclic_mask(_pattern(a))


def topological_order(a):
    """A topological order of the pattern (ties broken by node index), or None if cyclic."""
    mask = _pattern(a)
    d = mask.shape[0]
    indeg = mask.sum(axis=0).astype(np.int64)
    ready = sorted(int(v) for v in np.flatnonzero(indeg == 0))
    order = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for c in np.flatnonzero(mask[v]):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(int(c))
        ready.sort()
    return order if len(order) == d else None


def find_cycle(a):
    """Return the node sequence of one directed cycle, or None if acyclic.

    Deterministic: nodes with no in- or out-edges inside the remaining set are
    stripped first, then a walk from the lowest surviving node follows the
    lowest-index successor until a node repeats.
    """
    mask = _pattern(a).copy()
    d = mask.shape[0]
    alive = np.ones(d, dtype=bool)
    while True:
        sub = mask & alive[:, None] & alive[None, :]
        dead = alive & ((sub.sum(axis=0) == 0) | (sub.sum(axis=1) == 0))
        if not dead.any():
            break
        alive &= ~dead
    if not alive.any():
        return None
    sub = mask & alive[:, None] & alive[None, :]
    node = int(np.flatnonzero(alive)[0])
    seen = {}
    path = []
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = int(np.flatnonzero(sub[node])[0])
    return path[seen[node]:]


def project_acyclic(W, edge_threshold):
    """Zero entries with ``|W| <= edge_threshold`` then break any surviving cycle.

    Cycles are broken by repeatedly zeroing the smallest-magnitude edge on a
    detected cycle.  Returns a new array whose support is a DAG.
    """
    W = np.array(W, dtype=float)
    W[np.abs(W) <= edge_threshold] = 0.0
    np.fill_diagonal(W, 0.0)
    while True:
        cycle = find_cycle(W != 0)
        if cycle is None:
            return W
        arcs = list(zip(cycle, cycle[1:] + cycle[:1]))
        j, i = min(arcs, key=lambda e: (abs(W[e]), e))
        W[j, i] = 0.0


def structural_delta(a_now, a_prev):
    """``a_now - a_prev`` as a :class:`StructuralDelta`."""
    A1 = _pattern(a_now).astype(np.int8)
    A0 = _pattern(a_prev).astype(np.int8)
    if A1.shape != A0.shape:
        raise InvalidArgumentError(f"dimension mismatch: {A1.shape} vs {A0.shape}")
    return StructuralDelta(A1 - A0)


def structural_hamming_distance(a, b):
    """Number of ordered pairs whose edge indicator differs."""
    A, B = _pattern(a), _pattern(b)
    if A.shape != B.shape:
        raise InvalidArgumentError(f"dimension mismatch: {A.shape} vs {B.shape}")
    return int(np.count_nonzero(A != B))
