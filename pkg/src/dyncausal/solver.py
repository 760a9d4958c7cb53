"""Per-step sparse, temporally smoothed least squares under the acyclicity constraint.

At each time step the solver minimizes::

    0.5 ||Y - Z W||_F^2 + lambda1 ||W||_1 + 0.5 lambda2 ||W - W_prev||_F^2
    subject to tr(exp(W * W)) - d = 0

with an augmented Lagrangian (dual ``alpha``, penalty ``rho``).  The inner
problem is solved by proximal gradient with soft-thresholding and
backtracking, or by L-BFGS-B on the split ``W = W+ - W-`` with
``W+, W- >= 0``.  The default ``inner="auto"`` runs proximal gradient for
the first round (cheap when warm-started near a DAG) and L-BFGS-B once the
penalty has to grow, where proximal steps become tiny.  Both decrease the
augmented-Lagrangian value monotonically within an outer iteration.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.optimize

from .errors import ConfigurationError, ConstraintInfeasibleError, InvalidArgumentError
from .graph import H_TOL, WeightedGraph, acyclicity_value_and_gradient, project_acyclic


@dataclass(frozen=True)
class SolverConfig:
    lambda1: float = 0.05
    lambda2: float = 1.0
    rho0: float = 1.0
    rho_growth: float = 10.0
    rho_max: float = 1e16
    h_target: float = H_TOL
    max_outer: int = 100
    max_inner: int = 500
    inner_tol: float = 1e-6
    backtrack: float = 0.5
    edge_threshold: float = 0.3
    inner: str = "auto"
    stop_on_projected: bool = True
    project_h: float = 1e-4
    precondition: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be nonnegative")
        if not self.rho0 > 0:
            raise ConfigurationError("rho0 must be positive")
        if not self.rho_growth > 1:
            raise ConfigurationError("rho_growth must exceed 1")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ConfigurationError("iteration caps must be at least 1")
        if not (self.h_target > 0 and self.inner_tol > 0):
            raise ConfigurationError("tolerances must be positive")
        if not 0 < self.backtrack < 1:
            raise ConfigurationError("backtrack factor must lie in (0, 1)")
        if not self.project_h >= 0:
            raise ConfigurationError("project_h must be nonnegative")
        if self.edge_threshold < 0:
            raise ConfigurationError("edge_threshold must be nonnegative")
        if self.inner not in ("auto", "lbfgsb", "proximal"):
            raise ConfigurationError("inner must be 'auto', 'lbfgsb' or 'proximal'")

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SolverState:
    """Warm-start carrier between consecutive solves."""

    w_prev: WeightedGraph
    alpha: float = 0.0
    rho: float = 1.0
    last_objective: float = math.nan
    outer_iters_used: int = 0
    inner_iters_used: int = 0

    @classmethod
    def initial(cls, d, cfg=None):
        cfg = cfg or SolverConfig()
        return cls(WeightedGraph.zeros(d, cfg.edge_threshold), 0.0, cfg.rho0)


def regression_targets(X_now, X_prev=None, mode="contemporaneous"):
    """Return ``(regressors, responses)`` for one step.

    Contemporaneous mode regresses a batch on itself; lagged mode regresses
    ``X(t)`` on ``X(t-1)``.
    """
    Y = _data(X_now)
    if mode == "contemporaneous":
        return Y, Y
    if mode != "lagged":
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    if X_prev is None:
        raise InvalidArgumentError("lagged mode needs the previous batch")
    Z = _data(X_prev)
    if Z.shape != Y.shape:
        raise InvalidArgumentError(f"previous batch shape {Z.shape} != {Y.shape}")
    return Z, Y


def _data(X):
    return np.asarray(getattr(X, "data", X), dtype=float)


def _weights(W):
    return np.asarray(getattr(W, "weights", W), dtype=float)


def objective(W, X, w_prev, lambda1, lambda2, regressors=None):
    """``0.5||X - Z W||^2 + lambda1 ||W||_1 + 0.5 lambda2 ||W - W_prev||^2`` with ``Z`` = regressors or X."""
    W, Y, Wp = _weights(W), _data(X), _weights(w_prev)
    Z = Y if regressors is None else _data(regressors)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape != Wp.shape:
        raise InvalidArgumentError("W and w_prev must be square of equal size")
    if Z.shape[1] != W.shape[0] or Y.shape[1] != W.shape[1] or Z.shape[0] != Y.shape[0]:
        raise InvalidArgumentError("data shapes do not conform with W")
    R = Y - Z @ W
    return float(0.5 * np.sum(R * R) + lambda1 * np.abs(W).sum()
                 + 0.5 * lambda2 * np.sum((W - Wp) ** 2))


def _soft(V, thresh):
    return np.sign(V) * np.maximum(np.abs(V) - thresh, 0.0)


class _Problem:
    """Smooth part of the augmented Lagrangian with cached Gram matrices."""

    def __init__(self, Z, Y, Wp, lambda1, lambda2):
        self.G = Z.T @ Z
        self.B = Z.T @ Y
        self.yy = float(np.sum(Y * Y))
        self.Wp = Wp
        self.l1 = lambda1
        self.l2 = lambda2
        self.L0 = float(np.linalg.eigvalsh(self.G)[-1]) + lambda2 if self.G.size else lambda2
        # Row scaling for the proximal steps: parents with large variance get
        # proportionally smaller steps, so low-variance rows still move.
        diag = np.diag(self.G) + lambda2
        floor = float(diag.max()) * 1e-12 if diag.size and diag.max() > 0 else 1.0
        self.P = (1.0 / np.maximum(diag, floor))[:, None]
        S = np.sqrt(self.P)
        self.L0_scaled = (float(np.linalg.eigvalsh(S * self.G * S.T)[-1]) + lambda2 * float(self.P.max())
                          if self.G.size else 1.0)

    def smooth(self, W, alpha, rho):
        # Oversized backtracking trials can overflow the exponential.
        with np.errstate(over="ignore", invalid="ignore"):
            GW = self.G @ W
            h, dh = acyclicity_value_and_gradient(W)
            D = W - self.Wp
            f = (0.5 * np.sum(W * GW) - np.sum(W * self.B) + 0.5 * self.yy
                 + 0.5 * self.l2 * np.sum(D * D) + alpha * h + 0.5 * rho * h * h)
            grad = GW - self.B + self.l2 * D + (alpha + rho * h) * dh
        if not (math.isfinite(f) and np.all(np.isfinite(grad))):
            return math.inf, None, math.inf
        return f, grad, h


def _proximal_gradient(prob, W, alpha, rho, cfg, history=None):
    """Monotone ISTA with backtracking; returns ``(W, h, iterations)``.

    With ``cfg.precondition`` the step is scaled per row by the inverse
    diagonal of the Gram matrix (a proximal step in the matching weighted
    norm, so soft-thresholding uses the same per-row scale).
    """
    d = W.shape[0]
    diag = np.eye(d, dtype=bool)
    P = prob.P if cfg.precondition else np.ones((d, 1))
    L = prob.L0_scaled if cfg.precondition else prob.L0
    f, grad, h = prob.smooth(W, alpha, rho)
    F = f + prob.l1 * np.abs(W).sum()
    if history is not None:
        history.append(F)
    step = 1.0 / max(L, 1e-12)
    it = 0
    for it in range(1, cfg.max_inner + 1):
        while True:
            W_new = _soft(W - step * P * grad, step * P * prob.l1)
            W_new[diag] = 0.0
            f_new, grad_new, h_new = prob.smooth(W_new, alpha, rho)
            D = W_new - W
            if f_new < math.inf and f_new <= (f + np.sum(grad * D) + np.sum(D * D / P) / (2 * step)
                                              + 1e-15 * abs(f)):
                break
            step *= cfg.backtrack
            if step < 1e-300:
                return W, h, it
        F_new = f_new + prob.l1 * np.abs(W_new).sum()
        if history is not None:
            history.append(F_new)
        done = F - F_new <= cfg.inner_tol * max(1.0, abs(F))
        W, f, grad, h, F = W_new, f_new, grad_new, h_new, F_new
        if done:
            break
        step = step / cfg.backtrack if step * L < 1.0 else step
    return W, h, it


def _lbfgsb(prob, W, alpha, rho, cfg, history=None):
    """L-BFGS-B on the nonnegative split of W; returns ``(W, h, iterations)``."""
    d = W.shape[0]
    dd = d * d
    off = ~np.eye(d, dtype=bool).ravel()
    # Array bounds: scipy converts a list of pairs element by element, which
    # costs more than the optimization itself at d = 50.
    upper = np.tile(np.where(off, np.inf, 0.0), 2)
    bounds = scipy.optimize.Bounds(np.zeros(2 * dd), upper)
    l1 = prob.l1

    def fun(w):
        Wc = (w[:dd] - w[dd:]).reshape(d, d)
        f, grad, _ = prob.smooth(Wc, alpha, rho)
        if grad is None:
            return 1e300, np.zeros(2 * dd)
        g = grad.ravel()
        return f + l1 * w.sum(), np.concatenate((g + l1, l1 - g))

    w0 = np.concatenate((np.maximum(W, 0).ravel(), np.maximum(-W, 0).ravel()))
    callback = None
    if history is not None:
        history.append(fun(w0)[0])
        callback = lambda wk: history.append(fun(wk)[0])
    res = scipy.optimize.minimize(
        fun, w0, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
        options={"maxiter": cfg.max_inner, "ftol": cfg.inner_tol})
    W_new = (res.x[:dd] - res.x[dd:]).reshape(d, d)
    h = acyclicity_value_and_gradient(W_new)[0]
    return W_new, h, int(res.nit)


def solve_step(X, state, cfg=None, regressors=None, history=None):
    """Solve one time step warm-started at ``state.w_prev``.

    Returns the projected estimate ``W(t)`` (entries ``<= edge_threshold``
    zeroed, residual cycles broken) and the updated state.  ``history``, if
    a list, receives one list of augmented-Lagrangian values per outer
    iteration.

    Raises :class:`ConstraintInfeasibleError` if ``h(W) <= h_target`` is not
    reached within ``max_outer`` outer iterations.
    """
    cfg = cfg or SolverConfig()
    Y = _data(X)
    Z = Y if regressors is None else _data(regressors)
    Wp = np.array(state.w_prev.weights)
    d = Wp.shape[0]
    if Y.ndim != 2 or Y.shape[1] != d or Z.shape != Y.shape:
        raise InvalidArgumentError(f"batch shape {Y.shape} does not match d={d}")
    prob = _Problem(Z, Y, Wp, cfg.lambda1, cfg.lambda2)

    inners = {"lbfgsb": (_lbfgsb, _lbfgsb), "proximal": (_proximal_gradient, _proximal_gradient),
              "auto": (_proximal_gradient, _lbfgsb)}[cfg.inner]
    W = Wp.copy()
    alpha, rho = state.alpha, state.rho
    h = math.inf  # no progress reference before the first solve
    best_W, best_h = W, math.inf
    inner_total = 0
    outer = 0
    while True:
        if h <= cfg.h_target:
            break
        if outer >= cfg.max_outer:
            raise ConstraintInfeasibleError(
                f"acyclicity {best_h:.3g} above target {cfg.h_target:.3g} "
                f"after {cfg.max_outer} outer iterations",
                best_weights=best_W, best_h=best_h)
        # Re-solve from the last accepted iterate with a growing penalty
        # until the constraint violation shrinks by a factor of four.
        while True:
            outer += 1
            trace = [] if history is not None else None
            inner = inners[0] if outer == 1 else inners[1]
            W_new, h_new, used = inner(prob, W, alpha, rho, cfg, trace)
            inner_total += used
            if trace is not None:
                history.append(trace)
            if (h_new <= cfg.h_target or h_new <= 0.25 * h or rho >= cfg.rho_max
                    or outer >= cfg.max_outer):
                break
            rho = min(rho * cfg.rho_growth, cfg.rho_max)
        W, h = W_new, h_new
        if h < best_h:
            best_W, best_h = W, h
        if cfg.stop_on_projected and cfg.h_target < h <= cfg.project_h:
            # Entries at or below the edge threshold are discarded by the
            # final projection; once the rest is acyclic the solve is done.
            strong = np.where(np.abs(W) > cfg.edge_threshold, W, 0.0)
            if acyclicity_value_and_gradient(strong)[0] <= cfg.h_target:
                break
        alpha += rho * h
        if h > cfg.h_target and rho >= cfg.rho_max:
            outer = cfg.max_outer

    W_out = project_acyclic(W, cfg.edge_threshold)
    g = WeightedGraph(W_out, cfg.edge_threshold)
    new_state = SolverState(
        w_prev=g, alpha=alpha, rho=rho,
        last_objective=objective(W_out, Y, Wp, cfg.lambda1, cfg.lambda2, regressors=Z),
        outer_iters_used=outer, inner_iters_used=inner_total)
    return g, new_state


def solve_static(X, cfg=None, regressors=None):
    """Batch fit from a cold start with no temporal prior (``lambda2 = 0``)."""
    cfg = (cfg or SolverConfig()).replace(lambda2=0.0)
    d = _data(X).shape[1]
    g, _ = solve_step(X, SolverState.initial(d, cfg), cfg, regressors=regressors)
    return g
