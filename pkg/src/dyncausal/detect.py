"""Sequential structural-change detection over a stream of batches.

Each step computes the residual of the new batch against ``W(t-1)``, feeds
its mean squared entry to a CUSUM, lowers the temporal-smoothness weight
after an alarm, re-solves the per-step problem, and confirms candidate edge
additions (t-test) and deletions (F-test) before enforcing them.  The
carried estimate always has exactly the confirmed support, so the confirmed
graph is acyclic after every step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.stats

from .errors import ConfigurationError, ConstraintInfeasibleError, InvalidArgumentError
from .graph import AdjacencyMatrix, WeightedGraph, is_dag, threshold_edges
from .solver import SolverConfig, SolverState, regression_targets, solve_static, solve_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CusumState:
    """Running CUSUM statistic ``S`` with drift ``c`` and alarm threshold ``eta``."""

    c: float
    eta: float
    S: float = 0.0
    alarmed: bool = False

    def __post_init__(self):
        if not self.S >= 0:
            raise InvalidArgumentError("CUSUM statistic must be nonnegative")
        if not self.eta >= 0:
            raise InvalidArgumentError("CUSUM threshold must be nonnegative")

    def reset(self):
        return replace(self, S=0.0, alarmed=False)


@dataclass(frozen=True)
class EdgeTestConfig:
    alpha_add: float = 0.05
    alpha_rem: float = 0.05

    def __post_init__(self):
        for name in ("alpha_add", "alpha_rem"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1)")


@dataclass(frozen=True)
class DetectorConfig:
    """Knobs of the sequential loop that the per-step solver does not own."""

    gamma: float = 0.1          # lambda2 multiplier while an alarm is active
    restore_after: int = 10     # alarm-free steps before lambda2 returns to baseline
    test_window: int = 25       # batches pooled for the edge tests
    reset_on_alarm: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if self.restore_after < 1 or self.test_window < 1:
            raise ConfigurationError("restore_after and test_window must be >= 1")


class DetectionEvent(NamedTuple):
    t: int
    parent: int
    child: int
    kind: str  # "added" or "deleted"
    statistic: float
    threshold_used: float

    @property
    def edge(self):
        return (self.parent, self.child)


class TestOutcome(NamedTuple):
    """``decision`` is None when the test is indeterminate (too few rows)."""

    decision: bool | None
    statistic: float
    threshold: float


def residual(X, w_prev, mode="contemporaneous", X_prev=None):
    """``responses - regressors @ W(t-1)`` for one batch."""
    Z, Y = regression_targets(X, X_prev, mode)
    W = np.asarray(getattr(w_prev, "weights", w_prev), dtype=float)
    if W.shape != (Y.shape[1], Y.shape[1]):
        raise InvalidArgumentError(f"W shape {W.shape} does not match batch width {Y.shape[1]}")
    return Y - Z @ W


def residual_score(r):
    """Mean squared residual entry, so scores do not depend on batch size."""
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise InvalidArgumentError("residual contains non-finite entries")
    return float(np.mean(r * r))


def cusum_update(state, r):
    """One CUSUM step on a residual matrix; returns ``(new_state, alarm)``."""
    score = residual_score(r)
    S = max(0.0, state.S + score - state.c)
    alarm = S > state.eta
    return replace(state, S=S, alarmed=alarm), alarm


def calibrate_cusum(h0_scores, alpha, horizon, n_boot=1000, rng=None):
    """Drift and threshold from change-free scores.

    ``c`` is the mean score.  ``eta`` is the smallest threshold exceeded by
    at most an ``alpha`` fraction of ``n_boot`` bootstrap replays.  Each
    replay resamples the warm-up set to get its own drift ``c*`` and then
    runs the CUSUM on ``horizon`` fresh draws, so the threshold also covers
    the error of estimating ``c`` from a finite prefix (a plain replay
    around the exact sample mean under-covers badly for short warm-ups).
    """
    scores = np.asarray(h0_scores, dtype=float)
    if scores.size < 50:
        raise ConfigurationError(f"need at least 50 warm-up scores, got {scores.size}")
    if not np.all(np.isfinite(scores)):
        raise InvalidArgumentError("warm-up scores must be finite")
    if not 0 < alpha <= 1:
        raise InvalidArgumentError("alpha must lie in (0, 1]")
    if horizon < 1:
        raise InvalidArgumentError("horizon must be positive")
    c = float(scores.mean())
    rng = np.random.default_rng(rng)
    m = scores.size
    c_star = rng.choice(scores, size=(n_boot, m), replace=True).mean(axis=1)
    S = np.zeros(n_boot)
    peak = np.zeros(n_boot)
    for _ in range(int(horizon)):
        S = np.maximum(0.0, S + rng.choice(scores, size=n_boot) - c_star)
        np.maximum(peak, S, out=peak)
    peak.sort()
    # Alarms are S > eta, so eta = peak[k-1] leaves n_boot - k replays alarming.
    k = math.ceil(n_boot * (1.0 - alpha) - 1e-9)
    eta = float(peak[k - 1]) if k >= 1 else 0.0
    return c, max(eta, 0.0)


def _columns(regressors, responses, child, parents):
    Z = np.asarray(regressors, dtype=float)
    Y = np.asarray(responses, dtype=float)
    if Z.ndim != 2 or Y.ndim != 2 or Z.shape[0] != Y.shape[0]:
        raise InvalidArgumentError("regressors and responses must be 2-D with equal rows")
    return Z[:, list(parents)], Y[:, child]


def _ols(Xs, y):
    """Coefficients, RSS and ``(X^T X)^{-1}``; None when the design is singular."""
    if Xs.shape[1] == 0:
        return np.zeros(0), float(y @ y), np.zeros((0, 0))
    G = Xs.T @ Xs
    if np.linalg.matrix_rank(G) < G.shape[0]:
        return None
    Ginv = np.linalg.inv(G)
    beta = Ginv @ (Xs.T @ y)
    r = y - Xs @ beta
    return beta, float(r @ r), Ginv


def _zero_tol(y):
    return 1e-12 * max(1.0, float(y @ y))


def _candidate_parents(w_hat, child, j):
    if w_hat is None:
        return []
    M = np.asarray(getattr(w_hat, "weights", getattr(w_hat, "entries", w_hat)))
    return [int(k) for k in np.flatnonzero(M[:, child]) if k != j and k != child]


def edge_appearance_test(regressors, responses, w_hat, edge, alpha_add):
    """t-test of a new edge ``j -> i``.

    Refits child ``i`` by least squares (no intercept) on its current parents
    in ``w_hat`` plus ``j``.  Degrees of freedom ``N - p - 1`` with ``p`` the
    number of other parents.  A zero residual rejects iff the coefficient is
    nonzero (``t = +inf``).
    """
    j, i = edge
    parents = _candidate_parents(w_hat, i, j) + [j]
    Xs, y = _columns(regressors, responses, i, parents)
    dof = Xs.shape[0] - len(parents)
    if dof < 1:
        return TestOutcome(None, math.nan, math.nan)
    crit = float(scipy.stats.t.ppf(1.0 - alpha_add / 2.0, dof))
    fit = _ols(Xs, y)
    if fit is None:
        return TestOutcome(None, math.nan, crit)
    beta, rss, Ginv = fit
    coef = float(beta[-1])
    if rss <= _zero_tol(y):
        if abs(coef) <= 1e-12:
            return TestOutcome(False, 0.0, crit)
        return TestOutcome(True, math.copysign(math.inf, coef), crit)
    se = math.sqrt(rss / dof * Ginv[-1, -1])
    t_stat = coef / se
    return TestOutcome(bool(abs(t_stat) > crit), t_stat, crit)


def edge_disappearance_test(regressors, responses, edge, alpha_rem, w_hat=None):
    """Partial F-test for dropping parent ``j`` of child ``i``.

    Compares the fit on the other parents (taken from ``w_hat``) with and
    without ``j``; removal is signalled when F falls below the upper
    ``alpha_rem`` critical value of ``F(1, N - p - 1)``.
    """
    j, i = edge
    others = _candidate_parents(w_hat, i, j)
    X_full, y = _columns(regressors, responses, i, others + [j])
    dof = X_full.shape[0] - len(others) - 1
    if dof < 1:
        return TestOutcome(None, math.nan, math.nan)
    crit = float(scipy.stats.f.ppf(1.0 - alpha_rem, 1, dof))
    full = _ols(X_full, y)
    reduced = _ols(X_full[:, :-1], y)
    if full is None or reduced is None:
        return TestOutcome(None, math.nan, crit)
    rss_with, rss_without = full[1], reduced[1]
    gain = max(rss_without - rss_with, 0.0)
    if rss_with <= _zero_tol(y):
        F = 0.0 if gain <= _zero_tol(y) else math.inf
    else:
        F = gain / (rss_with / dof)
    return TestOutcome(bool(F < crit), F, crit)


@dataclass
class Diagnostics:
    """Per-step traces of one sequential run."""

    t: list = field(default_factory=list)
    score: list = field(default_factory=list)
    S: list = field(default_factory=list)
    alarm: list = field(default_factory=list)
    lambda2: list = field(default_factory=list)
    outer_iters: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)
    n_candidates: list = field(default_factory=list)
    n_edges: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    warmup_events: list = field(default_factory=list)
    monitor_start: int | None = None
    c: float | None = None
    eta: float | None = None

    @property
    def first_alarm(self):
        for t, a in zip(self.t, self.alarm):
            if a and (self.monitor_start is None or t >= self.monitor_start):
                return t
        return None


class SequentialDetector:
    """Stateful one-stream detector; call :meth:`step` once per batch in time order."""

    def __init__(self, d, solver_cfg=None, edge_cfg=None, cusum=None, mode="contemporaneous",
                 config=None, w_init=None):
        self.solver_cfg = solver_cfg or SolverConfig()
        self.edge_cfg = edge_cfg or EdgeTestConfig()
        self.config = config or DetectorConfig()
        if mode not in ("contemporaneous", "lagged"):
            raise InvalidArgumentError(f"unknown mode {mode!r}")
        self.mode = mode
        self.d = d
        eps = self.solver_cfg.edge_threshold
        W0 = np.zeros((d, d)) if w_init is None else np.array(getattr(w_init, "weights", w_init))
        g0 = WeightedGraph(W0, eps)
        self.confirmed = threshold_edges(g0).entries.astype(np.int8).copy()
        if not is_dag(self.confirmed):
            raise InvalidArgumentError("initial graph must be acyclic after thresholding")
        W0 = np.where(self.confirmed == 1, W0, 0.0)
        self.state = SolverState(WeightedGraph(W0, eps), 0.0, self.solver_cfg.rho0)
        self.cusum = cusum
        self.lambda2 = self.solver_cfg.lambda2
        self.calm_steps = 0
        self.alarm_time = None
        self.prev_batch = None
        self.window = []
        self.diagnostics = Diagnostics()

    @property
    def weights(self):
        return self.state.w_prev

    @property
    def adjacency(self):
        return AdjacencyMatrix(self.confirmed)

    def _targets(self, batch):
        X = np.asarray(getattr(batch, "data", batch), dtype=float)
        if self.mode == "lagged":
            prev = self.prev_batch if self.prev_batch is not None else np.zeros_like(X)
            return regression_targets(X, prev, "lagged")
        return regression_targets(X, None, "contemporaneous")

    def step(self, batch, emit=True):
        """Process one batch; returns the confirmed events at this time."""
        t = int(getattr(batch, "t", len(self.diagnostics.t) + 1))
        Z, Y = self._targets(batch)
        self.prev_batch = Y
        diag = self.diagnostics
        W_prev = self.state.w_prev.weights
        r = Y - Z @ W_prev
        score = residual_score(r)

        alarm = False
        if self.cusum is not None:
            self.cusum, alarm = cusum_update(self.cusum, r)
            if alarm:
                if self.alarm_time is None:
                    self.alarm_time = t
                self.lambda2 = self.solver_cfg.lambda2 * self.config.gamma
                self.calm_steps = 0
                if self.config.reset_on_alarm:
                    self.cusum = self.cusum.reset()
            else:
                self.calm_steps += 1
                if self.calm_steps >= self.config.restore_after and self.alarm_time is not None:
                    self.lambda2 = self.solver_cfg.lambda2
                    self.alarm_time = None

        self.window.append((t, Z, Y))
        del self.window[:-self.config.test_window]

        diag.t.append(t)
        diag.score.append(score)
        diag.S.append(self.cusum.S if self.cusum is not None else math.nan)
        diag.alarm.append(bool(alarm))
        diag.lambda2.append(self.lambda2)

        cfg = self.solver_cfg.replace(lambda2=self.lambda2)
        try:
            g, new_state = solve_step(Y, self.state, cfg, regressors=Z)
        except ConstraintInfeasibleError as exc:
            log.warning("t=%d: solve failed (%s); keeping previous W", t, exc)
            diag.failures.append(t)
            diag.outer_iters.append(cfg.max_outer)
            diag.inner_iters.append(0)
            diag.n_candidates.append(0)
            diag.n_edges.append(int(self.confirmed.sum()))
            return []
        diag.outer_iters.append(new_state.outer_iters_used)
        diag.inner_iters.append(new_state.inner_iters_used)

        events = self._confirm(t, g.weights, W_prev)
        W_next = np.array(g.weights)
        A_est = (np.abs(W_next) > cfg.edge_threshold)
        keep_prev = (self.confirmed == 1) & ~A_est
        W_next[keep_prev] = W_prev[keep_prev]
        W_next[self.confirmed == 0] = 0.0
        # Warm-start W only: carrying the final penalty forward ratchets rho
        # upward step after step until the per-step solve cannot move.
        self.state = SolverState(WeightedGraph(W_next, cfg.edge_threshold), 0.0, cfg.rho0)
        diag.n_edges.append(int(self.confirmed.sum()))
        if not emit:
            diag.warmup_events.extend(events)
            return []
        return events

    def _test_data(self):
        # Rolling window of the last ``test_window`` batches; testing on the
        # single batch that proposed a candidate would be badly selection-biased.
        Z = np.vstack([w[1] for w in self.window])
        Y = np.vstack([w[2] for w in self.window])
        return Z, Y

    def _confirm(self, t, W_new, W_prev):
        eps = self.solver_cfg.edge_threshold
        A_est = (np.abs(W_new) > eps).astype(np.int8)
        adds = list(zip(*np.nonzero((A_est == 1) & (self.confirmed == 0))))
        dels = list(zip(*np.nonzero((A_est == 0) & (self.confirmed == 1))))
        self.diagnostics.n_candidates.append(len(adds) + len(dels))
        if not adds and not dels:
            return []
        Z, Y = self._test_data()
        events = []
        for j, i in dels:
            out = edge_disappearance_test(Z, Y, (j, i), self.edge_cfg.alpha_rem, w_hat=self.confirmed)
            if out.decision:
                self.confirmed[j, i] = 0
                events.append(DetectionEvent(t, int(j), int(i), "deleted", out.statistic, out.threshold))
        # Strongest additions first, so a cycle-creating weaker one is the one skipped.
        adds.sort(key=lambda e: (-abs(W_new[e]), e))
        for j, i in adds:
            out = edge_appearance_test(Z, Y, self.confirmed, (j, i), self.edge_cfg.alpha_add)
            if out.decision:
                self.confirmed[j, i] = 1
                if not is_dag(self.confirmed):
                    self.confirmed[j, i] = 0
                    continue
                events.append(DetectionEvent(t, int(j), int(i), "added", out.statistic, out.threshold))
        return events


def initial_fit(batches, solver_cfg=None, mode="contemporaneous"):
    """Static estimate of ``W(0)`` from pooled batches (no temporal prior).

    The fit is one-off, so it always runs at the default convergence
    settings even when ``solver_cfg`` loosens them for the per-step solves;
    on strongly scaled data a loose tolerance stops after a few tiny steps
    and leaves most edges out of ``W(0)``.
    """
    base = SolverConfig()
    solver_cfg = (solver_cfg or base).replace(inner_tol=min((solver_cfg or base).inner_tol, base.inner_tol),
                                              project_h=base.project_h)
    Ys = [np.asarray(getattr(b, "data", b), dtype=float) for b in batches]
    Y = np.vstack(Ys)
    if mode == "lagged":
        Z = np.vstack([np.zeros_like(Ys[0])] + Ys[:-1])
        return solve_static(Y, solver_cfg, regressors=Z)
    return solve_static(Y, solver_cfg)


def run_sequential(stream, solver_cfg=None, edge_cfg=None, cusum=None, *, mode="contemporaneous",
                   detector_cfg=None, w_init=None, n_init=50, n_calib=100, horizon=None,
                   far_alpha=0.05, n_boot=1000, seed=0, stop=None):
    """Run the detector over a whole stream.

    With ``cusum`` given as ``(c, eta)`` or a :class:`CusumState`, monitoring
    starts at the first batch from ``w_init`` (zeros if omitted).  Otherwise
    the first ``n_init`` batches fit ``W(0)``, the next ``n_calib`` batches
    run the detector without monitoring to collect change-free scores, and
    ``(c, eta)`` are calibrated at ``far_alpha`` over ``horizon`` steps
    (default: the remaining stream length).  Events found during warm-up are
    kept in ``diagnostics.warmup_events`` only.

    ``stop``, if given, is called as ``stop(t, events, diagnostics)`` after
    every monitored step; returning True ends the run early.

    Returns ``(events, diagnostics)``.
    """
    solver_cfg = solver_cfg or SolverConfig()
    stream = list(stream)
    if not stream:
        raise InvalidArgumentError("empty stream")
    d = np.asarray(getattr(stream[0], "data", stream[0])).shape[1]
    events = []
    if cusum is not None:
        state = cusum if isinstance(cusum, CusumState) else CusumState(float(cusum[0]), float(cusum[1]))
        det = SequentialDetector(d, solver_cfg, edge_cfg, state, mode, detector_cfg, w_init)
        det.diagnostics.monitor_start = int(getattr(stream[0], "t", 1))
        det.diagnostics.c, det.diagnostics.eta = state.c, state.eta
        for b in stream:
            events.extend(det.step(b))
            if stop is not None and stop(det.diagnostics.t[-1], events, det.diagnostics):
                break
        return events, det.diagnostics

    if len(stream) <= n_init + n_calib:
        raise ConfigurationError("stream too short for the requested warm-up")
    if n_calib < 50:
        raise ConfigurationError("calibration needs at least 50 batches")
    g0 = initial_fit(stream[:n_init], solver_cfg, mode) if w_init is None else w_init
    det = SequentialDetector(d, solver_cfg, edge_cfg, None, mode, detector_cfg, g0)
    if mode == "lagged":
        det.prev_batch = np.asarray(getattr(stream[n_init - 1], "data", stream[n_init - 1]))
    for b in stream[n_init:n_init + n_calib]:
        det.step(b, emit=False)
    scores = det.diagnostics.score[-n_calib:]
    rest = stream[n_init + n_calib:]
    c, eta = calibrate_cusum(scores, far_alpha, horizon or len(rest), n_boot=n_boot, rng=seed)
    det.cusum = CusumState(c, eta)
    det.diagnostics.c, det.diagnostics.eta = c, eta
    det.diagnostics.monitor_start = int(getattr(rest[0], "t", n_init + n_calib + 1))
    for b in rest:
        events.extend(det.step(b))
        if stop is not None and stop(det.diagnostics.t[-1], events, det.diagnostics):
            break
    return events, det.diagnostics


def write_events_jsonl(path_or_file, events):
    """One JSON object per line: t, parent, child, kind, statistic, threshold_used."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w") if own else path_or_file
    try:
        for e in events:
            fh.write(json.dumps(_event_record(e)) + "\n")
    finally:
        if own:
            fh.close()


def _event_record(e):
    rec = e._asdict()
    for key in ("statistic", "threshold_used"):
        v = rec[key]
        if not math.isfinite(v):
            rec[key] = "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return rec


def read_events_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(DetectionEvent(int(rec["t"]), int(rec["parent"]), int(rec["child"]),
                                          rec["kind"], float(rec["statistic"]),
                                          float(rec["threshold_used"])))
    return out


def edge_config_dict(cfg):
    return asdict(cfg)
