"""Closed-form detection-delay bounds used to annotate experiment outputs.

The lower bound counts post-change *samples*; the harness advances one batch
of ``n_batch`` samples per time step, so :func:`to_steps` divides by the
batch size before a bound is compared with step-indexed delays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import InvalidArgumentError


def delay_lower_bound(sigma, Delta, alpha):
    """``(2 sigma^2 / Delta^2) ln(1/alpha)``."""
    if not Delta > 0:
        raise InvalidArgumentError("Delta must be positive")
    if not sigma >= 0:
        raise InvalidArgumentError("sigma must be nonnegative")
    if not 0 < alpha <= 1:
        raise InvalidArgumentError("alpha must lie in (0, 1]")
    return 2.0 * sigma**2 / Delta**2 * math.log(1.0 / alpha)


def delay_upper_bound(eta, mu, c):
    """``eta / (mu - c)``; undefined unless the post-change mean score exceeds ``c``."""
    if not mu > c:
        raise InvalidArgumentError(f"upper bound needs mu > c (got mu={mu}, c={c})")
    if not eta >= 0:
        raise InvalidArgumentError("eta must be nonnegative")
    return eta / (mu - c)


def scaled_bounds(n, sigma, delta, alpha, eta, c_prime=0.0, C1=1.0, C2=1.0):
    """Network-size scaled bounds ``(C1 sigma^2 n ln(1/alpha) / delta^2, C2 eta n / (delta - c'))``."""
    if not delta > 0:
        raise InvalidArgumentError("delta must be positive")
    if not delta > c_prime:
        raise InvalidArgumentError(f"scaled upper bound needs delta > c' (got {delta} <= {c_prime})")
    if not 0 < alpha <= 1:
        raise InvalidArgumentError("alpha must lie in (0, 1]")
    if n < 1 or not sigma >= 0 or not eta >= 0:
        raise InvalidArgumentError("need n >= 1, sigma >= 0, eta >= 0")
    lb = C1 * sigma**2 * n * math.log(1.0 / alpha) / delta**2
    ub = C2 * eta * n / (delta - c_prime)
    return lb, ub


def to_steps(samples, n_batch):
    """Convert a per-sample delay to time steps of ``n_batch`` samples each."""
    if n_batch < 1:
        raise InvalidArgumentError("n_batch must be positive")
    return samples / n_batch


@dataclass(frozen=True)
class BoundsReport:
    sigma: float
    Delta: float
    alpha: float
    n: int
    delta: float
    eta: float | None = None
    mu: float | None = None
    c: float | None = None
    c_prime: float = 0.0
    C1: float = 1.0
    C2: float = 1.0
    beta: float | None = None  # detection confidence; recorded, not used by any formula
    tau_lb: float = math.nan
    tau_ub: float = math.nan
    tau_lb_scaled: float = math.nan
    tau_ub_scaled: float = math.nan

    def to_dict(self):
        return asdict(self)


def bounds_report(sigma, Delta, alpha, n, delta, eta=None, mu=None, c=None,
                  c_prime=0.0, C1=1.0, C2=1.0, beta=None):
    """Evaluate every bound that the supplied inputs define; the rest stay NaN."""
    lb = delay_lower_bound(sigma, Delta, alpha)
    ub = delay_upper_bound(eta, mu, c) if None not in (eta, mu, c) and mu > c else math.nan
    lbs, ubs = scaled_bounds(n, sigma, delta, alpha, eta if eta is not None else 0.0, c_prime, C1, C2)
    if eta is None:
        ubs = math.nan
    return BoundsReport(sigma, Delta, alpha, n, delta, eta, mu, c, c_prime, C1, C2, beta,
                        lb, ub, lbs, ubs)
