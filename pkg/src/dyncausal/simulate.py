"""Synthetic dynamic causal systems: random DAGs, a single structural change, SEM streams.

Batches ``t = 1 .. t_star`` are generated under ``w_before`` and batches
``t > t_star`` under ``w_after``, so the first batch that carries the change
is ``t_star + 1`` and a detection at time ``t`` has delay ``t - t_star >= 1``.
In lagged mode this is exactly ``X(t) = W(t-1)^T X(t-1) + U(t)`` with the
graph switching at ``t_star``; every row of a batch is an independent chain
started from the zero state.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError
from .graph import WeightedGraph, is_dag, topological_order

MODES = ("contemporaneous", "lagged")


@dataclass(frozen=True)
class SimConfig:
    n: int = 50
    p: float = 0.1
    delta: float = 0.5
    sigma: float = 0.1
    k: int = 3
    T: int = 500
    t_star: int = 250
    n_batch: int = 20
    mode: str = "contemporaneous"
    seed: int = 0
    signed: bool = True

    def __post_init__(self):
        if int(self.n) < 1:
            raise ConfigurationError("n must be a positive integer")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError("p must lie in [0, 1]")
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")
        if not self.sigma >= 0:
            raise ConfigurationError("sigma must be nonnegative")
        if not 1 <= self.t_star < self.T:
            raise ConfigurationError("require 1 <= t_star < T")
        if not 0 <= self.k <= self.n * (self.n - 1) // 2:
            raise ConfigurationError("require 0 <= k <= n(n-1)/2")
        if int(self.n_batch) < 1:
            raise ConfigurationError("n_batch must be a positive integer")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    @property
    def edge_threshold(self):
        return self.delta / 2.0

    def replace(self, **changes):
        return SimConfig(**{**asdict(self), **changes})


class Flip(NamedTuple):
    parent: int
    child: int
    kind: str  # "added" or "deleted"


@dataclass(frozen=True, eq=False)
class GroundTruth:
    w_before: WeightedGraph
    w_after: WeightedGraph
    flipped: list = field(default_factory=list)
    t_star: int | None = None

    @property
    def k(self):
        return len(self.flipped)

    def to_dict(self):
        return {
            "w_before": self.w_before.weights.tolist(),
            "w_after": self.w_after.weights.tolist(),
            "edge_threshold": self.w_before.edge_threshold,
            "flipped": [f._asdict() for f in self.flipped],
            "t_star": self.t_star,
        }

    @classmethod
    def from_dict(cls, d):
        eps = d.get("edge_threshold", 0.3)
        return cls(
            WeightedGraph(np.array(d["w_before"], dtype=float), eps),
            WeightedGraph(np.array(d["w_after"], dtype=float), eps),
            [Flip(int(f["parent"]), int(f["child"]), f["kind"]) for f in d["flipped"]],
            d.get("t_star"),
        )


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    """One ``N x n`` data matrix observed at time ``t``."""

    t: int
    data: np.ndarray

    def __post_init__(self):
        X = np.array(self.data, dtype=float)
        if X.ndim != 2:
            raise InvalidArgumentError(f"batch data must be 2-D, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidArgumentError("batch data contains non-finite entries")
        X.setflags(write=False)
        object.__setattr__(self, "data", X)

    @property
    def n(self):
        return self.data.shape[1]

    @property
    def n_rows(self):
        return self.data.shape[0]


def _random_dag(n, p, delta, rng, signed=True):
    if not 0.0 <= p <= 1.0:
        raise InvalidArgumentError("p must lie in [0, 1]")
    if not delta > 0:
        raise InvalidArgumentError("delta must be positive")
    order = rng.permutation(n)
    upper = np.triu(rng.random((n, n)) < p, k=1)
    mags = rng.uniform(delta, 2 * delta, size=(n, n))
    signs = rng.choice((-1.0, 1.0), size=(n, n)) if signed else np.ones((n, n))
    M = np.where(upper, mags * signs, 0.0)
    W = np.zeros((n, n))
    W[np.ix_(order, order)] = M
    return W, [int(v) for v in order]


def generate_random_dag(n, p, delta, rng, signed=True, edge_threshold=None):
    """Random weighted DAG under a uniformly random node ordering.

    Every forward pair of the ordering carries an edge with probability ``p``;
    magnitudes are uniform on ``[delta, 2 delta]`` with an independent random
    sign unless ``signed=False``.
    """
    W, _ = _random_dag(n, p, delta, rng, signed)
    eps = delta / 2.0 if edge_threshold is None else edge_threshold
    return WeightedGraph(W, eps)


def inject_change(g, k, delta, rng, order=None, signed=True, t_star=None):
    """Flip ``k`` uniformly chosen forward slots of ``order``.

    A slot holding an edge is deleted; an empty slot gains an edge of
    magnitude ``delta`` with random sign.  ``order`` defaults to the
    lowest-index topological order of ``g``.
    """
    n = g.d
    if order is None:
        order = topological_order(g)
    order = [int(v) for v in order]
    if sorted(order) != list(range(n)):
        raise ConfigurationError("order must be a permutation of the nodes")
    pos = np.empty(n, dtype=int)
    pos[order] = np.arange(n)
    W = np.array(g.weights)
    rows, cols = np.nonzero(W)
    if np.any(pos[rows] >= pos[cols]):
        raise ConfigurationError("graph has an edge against the supplied order")
    n_slots = n * (n - 1) // 2
    if not 0 <= k <= n_slots:
        raise ConfigurationError(f"k={k} infeasible: {n_slots} orientable slots")
    a, b = np.triu_indices(n, k=1)
    chosen = np.sort(rng.choice(n_slots, size=k, replace=False)) if k else []
    flipped = []
    for s in chosen:
        j, i = order[a[s]], order[b[s]]
        if W[j, i] != 0:
            W[j, i] = 0.0
            flipped.append(Flip(j, i, "deleted"))
        else:
            sign = rng.choice((-1.0, 1.0)) if signed else 1.0
            W[j, i] = sign * delta
            flipped.append(Flip(j, i, "added"))
    after = g.with_weights(W)
    if not is_dag(after):
        raise ConfigurationError("change produced a cyclic graph")
    return GroundTruth(g, after, flipped, t_star)


def step_sem(g, x_prev, sigma, rng):
    """One lagged SEM step ``W^T x_prev + u``; rows of a 2-D ``x_prev`` step independently."""
    x_prev = np.asarray(x_prev, dtype=float)
    if x_prev.shape[-1] != g.d or x_prev.ndim not in (1, 2):
        raise InvalidArgumentError(f"state shape {x_prev.shape} does not match d={g.d}")
    if not np.all(np.isfinite(x_prev)):
        raise InvalidArgumentError("state contains non-finite entries")
    return x_prev @ g.weights + sigma * rng.standard_normal(x_prev.shape)


def _propagator(W):
    # Row form of x = W^T x + u is X = X W + U, hence X = U (I - W)^{-1}.
    d = W.shape[0]
    return np.linalg.solve(np.eye(d) - W, np.eye(d))


def sample_contemporaneous(g, sigma, n_batch, rng, t=0):
    """Batch of ``n_batch`` exact solutions of ``x = W^T x + u``, ``u ~ N(0, sigma^2 I)``."""
    if not is_dag(g):
        raise InvalidArgumentError("contemporaneous sampling needs an acyclic graph")
    U = sigma * rng.standard_normal((n_batch, g.d))
    return ObservationBatch(t, U @ _propagator(g.weights))


def generate_stream(cfg):
    """Generate ``T`` batches and the ground truth for one configuration.

    The whole output is a pure function of ``cfg`` (seeded generator).
    """
    rng = np.random.default_rng(cfg.seed)
    W0, order = _random_dag(cfg.n, cfg.p, cfg.delta, rng, cfg.signed)
    g0 = WeightedGraph(W0, cfg.edge_threshold)
    truth = inject_change(g0, cfg.k, cfg.delta, rng, order=order,
                          signed=cfg.signed, t_star=cfg.t_star)
    batches = []
    if cfg.mode == "lagged":
        state = np.zeros((cfg.n_batch, cfg.n))
        for t in range(1, cfg.T + 1):
            g = truth.w_before if t <= cfg.t_star else truth.w_after
            state = step_sem(g, state, cfg.sigma, rng)
            batches.append(ObservationBatch(t, state))
    else:
        props = (_propagator(truth.w_before.weights), _propagator(truth.w_after.weights))
        for t in range(1, cfg.T + 1):
            P = props[0] if t <= cfg.t_star else props[1]
            U = cfg.sigma * rng.standard_normal((cfg.n_batch, cfg.n))
            batches.append(ObservationBatch(t, U @ P))
    return batches, truth


def stream_to_dict(batches, truth, cfg=None):
    return {
        "config": asdict(cfg) if cfg is not None else None,
        "ground_truth": truth.to_dict() if truth is not None else None,
        "batches": [{"t": b.t, "data": b.data.tolist()} for b in batches],
    }


def stream_from_dict(d):
    cfg = SimConfig(**d["config"]) if d.get("config") else None
    truth = GroundTruth.from_dict(d["ground_truth"]) if d.get("ground_truth") else None
    batches = [ObservationBatch(int(b["t"]), np.array(b["data"], dtype=float))
               for b in d["batches"]]
    return batches, truth, cfg


def save_stream(path, batches, truth, cfg=None):
    with open(path, "w") as fh:
        json.dump(stream_to_dict(batches, truth, cfg), fh)


def load_stream(path):
    """Inverse of :func:`save_stream`; returns ``(batches, truth, cfg)``."""
    with open(path) as fh:
        return stream_from_dict(json.load(fh))
