"""Monte Carlo trials, parameter sweeps, and their CSV / JSON / SVG outputs.

Delays are counted in time steps (batch index): a detection at time ``t``
has delay ``t - t_star``.  A trial is *detected* at the first confirmed
event on a truly flipped edge with the correct kind; trials without one
by the horizon are *censored* and excluded from the mean delay (the count
is reported).  Per-trial seeds are ``base_seed + trial_index``, the same
at every sweep point.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .bounds import delay_lower_bound, delay_upper_bound, scaled_bounds, to_steps
from .detect import DetectorConfig, EdgeTestConfig, run_sequential
from .errors import ConfigurationError, InvalidArgumentError
from .simulate import SimConfig, generate_stream
from .solver import SolverConfig

log = logging.getLogger(__name__)

CSV_HEADER = ["axis", "value", "mean_delay", "std_delay", "n_censored", "far", "mdr",
              "tau_lb", "tau_ub", "trials"]
AXES = {"n": "n", "sigma": "sigma", "σ": "sigma", "delta": "delta", "δ": "delta"}

INTERPRETATIONS = {
    "delay_unit": "time steps (batches of n_batch samples); per-sample bounds divided by n_batch",
    "detection": "first confirmed event on a truly flipped edge with the correct kind",
    "censoring": "censored trials excluded from mean/std; count reported in n_censored",
    "false_alarm": "any CUSUM alarm or confirmed event at t <= t_star (batches up to t_star are pre-change)",
    "tau_lb": "lower bound with Delta = delta, alpha = calibration FAR target, in steps",
    "tau_ub": "median over trials of eta / (mu - c), mu = mean score from t_star+1 to the first post-change alarm",
}


def default_solver_config():
    """Per-step solver settings used by trials.

    Compared with a batch fit the L1 weight is smaller: on a single batch of
    ``n_batch`` rows a weight of 0.05 shrinks confirmed edges far more than
    the pooled warm-up fit does, so the residual score drifts upward during
    monitoring and the prefix-calibrated CUSUM over-alarms.  The inner
    tolerance is looser because each step is warm-started next to its optimum,
    and a step stops as soon as its thresholded support is acyclic: only that
    support feeds the edge tests, and a tight constraint solve per step costs
    roughly fifty times more.
    """
    return SolverConfig(lambda1=0.01, inner_tol=1e-3, project_h=math.inf)


@dataclass(frozen=True)
class TrialProtocol:
    """Warm-up and calibration layout of a trial.

    Batches ``1..n_init`` fit ``W(0)``; batches ``n_init+1 .. n_init+n_calib``
    supply change-free CUSUM scores; monitoring starts right after.

    With ``stop_early`` a trial ends once it has both a confirmed true flip
    and a post-change alarm.  The detector is causal, so delays, false
    alarms and the upper-bound score are unchanged; only precision/recall
    are then measured at ``stopped_at`` instead of the horizon.
    """

    far_alpha: float = 0.05
    n_init: int = 50
    n_calib: int = 100
    n_boot: int = 1000
    stop_early: bool = False

    def __post_init__(self):
        if not 0 < self.far_alpha <= 1:
            raise ConfigurationError("far_alpha must lie in (0, 1]")
        if self.n_init < 1 or self.n_calib < 50 or self.n_boot < 1:
            raise ConfigurationError("need n_init >= 1, n_calib >= 50, n_boot >= 1")

    @property
    def monitor_start(self):
        return self.n_init + self.n_calib + 1


@dataclass
class TrialResult:
    seed: int
    delay_confirmed: int | None       # None = censored
    delay_alarm: int | None           # None = censored
    false_alarm: bool
    precision: float | None
    recall: float | None
    runtime_ms: float
    k: int = 0
    n_events: int = 0
    c: float | None = None
    eta: float | None = None
    mu: float | None = None
    failed: bool = False
    error: str | None = None
    n_solver_failures: int = 0
    stopped_at: int | None = None
    events: list = field(default_factory=list)

    @property
    def censored(self):
        return self.delay_confirmed is None

    @property
    def tau_ub(self):
        if None in (self.eta, self.mu, self.c) or not self.mu > self.c:
            return None
        return delay_upper_bound(self.eta, self.mu, self.c)

    def to_dict(self, with_events=False):
        d = asdict(self)
        if not with_events:
            d.pop("events")
        else:
            d["events"] = [e._asdict() for e in self.events]
        return d


def _net_flips(events, after):
    net = {}
    for e in events:
        if e.t > after:
            net[(e.parent, e.child)] = net.get((e.parent, e.child), 0) + (1 if e.kind == "added" else -1)
    return {edge: ("added" if v > 0 else "deleted") for edge, v in net.items() if v != 0}


def run_trial(cfg, solver_cfg=None, edge_cfg=None, *, detector_cfg=None, protocol=None):
    """Generate one stream, calibrate on its prefix, run detection, score it."""
    protocol = protocol or TrialProtocol()
    solver_cfg = (solver_cfg or default_solver_config()).replace(edge_threshold=cfg.edge_threshold)
    if cfg.t_star < protocol.monitor_start:
        raise ConfigurationError(
            f"t_star={cfg.t_star} leaves no monitored pre-change steps "
            f"(monitoring starts at {protocol.monitor_start})")
    t0 = time.perf_counter()
    batches, truth = generate_stream(cfg)
    horizon = cfg.t_star - protocol.monitor_start + 1
    flips = {(f.parent, f.child): f.kind for f in truth.flipped}

    def done(t, events, diag):
        if t <= cfg.t_star or not diag.alarm or not any(
                a for u, a in zip(diag.t, diag.alarm) if u > cfg.t_star):
            return False
        return any(e.t > cfg.t_star and flips.get((e.parent, e.child)) == e.kind for e in events)

    events, diag = run_sequential(
        batches, solver_cfg, edge_cfg, mode=cfg.mode, detector_cfg=detector_cfg,
        n_init=protocol.n_init, n_calib=protocol.n_calib, horizon=horizon,
        far_alpha=protocol.far_alpha, n_boot=protocol.n_boot, seed=cfg.seed,
        stop=done if protocol.stop_early and flips else None)
    runtime_ms = (time.perf_counter() - t0) * 1e3
    last_t = diag.t[-1]
    delay_confirmed = next((e.t - cfg.t_star for e in events
                            if e.t > cfg.t_star and flips.get((e.parent, e.child)) == e.kind), None)
    post_alarms = [t for t, a in zip(diag.t, diag.alarm) if a and t > cfg.t_star]
    delay_alarm = post_alarms[0] - cfg.t_star if post_alarms else None
    false_alarm = (any(a and diag.monitor_start <= t <= cfg.t_star for t, a in zip(diag.t, diag.alarm))
                   or any(e.t <= cfg.t_star for e in events))

    found = _net_flips(events, cfg.t_star)
    correct = sum(1 for edge, kind in found.items() if flips.get(edge) == kind)
    precision = correct / len(found) if found else None
    recall = correct / len(flips) if flips else None

    end = post_alarms[0] if post_alarms else last_t
    post = [s for t, s in zip(diag.t, diag.score) if cfg.t_star < t <= end]
    mu = float(np.mean(post)) if post else None
    return TrialResult(
        seed=cfg.seed, delay_confirmed=delay_confirmed, delay_alarm=delay_alarm,
        false_alarm=bool(false_alarm), precision=precision, recall=recall,
        runtime_ms=runtime_ms, k=truth.k, n_events=len(events), c=diag.c, eta=diag.eta,
        mu=mu, n_solver_failures=len(diag.failures),
        stopped_at=last_t if last_t < cfg.T else None, events=list(events))


def compute_far_mdr(results, T_window):
    """Empirical false-alarm rate and missed-detection rate within ``T_window`` steps.

    Failed trials are excluded from both rates.  MDR is NaN when no trial
    carries a change.
    """
    results = list(results)
    if not results:
        raise InvalidArgumentError("no trial results")
    ok = [r for r in results if not r.failed]
    if not ok:
        return math.nan, math.nan
    far = sum(r.false_alarm for r in ok) / len(ok)
    bearing = [r for r in ok if r.k > 0]
    if not bearing:
        return far, math.nan
    missed = sum(r.delay_confirmed is None or r.delay_confirmed > T_window for r in bearing)
    return far, missed / len(bearing)


@dataclass(frozen=True)
class SweepSpec:
    base: SimConfig = field(default_factory=SimConfig)
    axis: str = "n"
    values: tuple = (10, 20, 30, 40, 50)
    trials_per_point: int = 20
    base_seed: int = 0
    solver: SolverConfig = field(default_factory=default_solver_config)
    edge: EdgeTestConfig = field(default_factory=EdgeTestConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    protocol: TrialProtocol = field(default_factory=TrialProtocol)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigurationError(f"axis must be one of n, sigma, delta (got {self.axis!r})")
        object.__setattr__(self, "axis", AXES[self.axis])
        if len(self.values) == 0:
            raise ConfigurationError("sweep values must be non-empty")
        object.__setattr__(self, "values", tuple(self.values))
        if self.trials_per_point < 1:
            raise ConfigurationError("trials_per_point must be >= 1")
        for v in self.values:
            self.point_config(v, 0)  # validate every point up front

    def point_config(self, value, trial):
        value = int(value) if self.axis == "n" else float(value)
        if self.axis == "n" and value != float(value):
            raise ConfigurationError("n values must be integers")
        return self.base.replace(**{self.axis: value, "seed": self.base_seed + trial})

    def to_dict(self):
        return {
            "base": asdict(self.base), "axis": self.axis, "values": list(self.values),
            "trials_per_point": self.trials_per_point, "base_seed": self.base_seed,
            "solver": asdict(self.solver), "edge": asdict(self.edge),
            "detector": asdict(self.detector), "protocol": asdict(self.protocol),
        }


@dataclass
class SweepPoint:
    axis: str
    value: float
    mean_delay: float
    std_delay: float
    n_detected: int
    n_censored: int
    n_failed: int
    far: float
    mdr: float
    tau_lb: float
    tau_ub: float
    trials: int
    mean_alarm_delay: float
    results: list = field(default_factory=list)

    def csv_row(self):
        return [self.axis, _fmt(self.value), _fmt(self.mean_delay), _fmt(self.std_delay),
                str(self.n_censored), _fmt(self.far), _fmt(self.mdr), _fmt(self.tau_lb),
                _fmt(self.tau_ub), str(self.trials)]


@dataclass
class SweepSummary:
    spec: SweepSpec | None
    points: list = field(default_factory=list)

    @property
    def mean_delays(self):
        return np.array([p.mean_delay for p in self.points])

    @property
    def values(self):
        return np.array([p.value for p in self.points], dtype=float)


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".10g")


def _failed_result(cfg, exc):
    return TrialResult(seed=cfg.seed, delay_confirmed=None, delay_alarm=None, false_alarm=False,
                       precision=None, recall=None, runtime_ms=0.0, k=cfg.k,
                       failed=True, error=f"{type(exc).__name__}: {exc}")


def _trial_task(args):
    cfg, solver, edge, detector, protocol = args
    try:
        return run_trial(cfg, solver, edge, detector_cfg=detector, protocol=protocol)
    except Exception as exc:  # recorded, never dropped
        log.warning("trial seed=%d failed: %s", cfg.seed, exc)
        return _failed_result(cfg, exc)


def summarize_point(axis, value, results, cfg, protocol):
    """Aggregate trial results at one sweep point (also annotates bounds)."""
    ok = [r for r in results if not r.failed]
    delays = np.array([r.delay_confirmed for r in ok if r.delay_confirmed is not None], dtype=float)
    alarms = np.array([r.delay_alarm for r in ok if r.delay_alarm is not None], dtype=float)
    mean = float(delays.mean()) if delays.size else math.nan
    std = float(delays.std(ddof=1)) if delays.size > 1 else (0.0 if delays.size else math.nan)
    far, mdr = compute_far_mdr(results, cfg.T - cfg.t_star)
    lb = to_steps(delay_lower_bound(cfg.sigma, cfg.delta, protocol.far_alpha), cfg.n_batch)
    ubs = [r.tau_ub for r in ok if r.tau_ub is not None]
    ub = float(np.median(ubs)) if ubs else math.nan
    return SweepPoint(axis, value, mean, std, int(delays.size), len(ok) - int(delays.size),
                      len(results) - len(ok), far, mdr, lb, ub, len(results),
                      float(alarms.mean()) if alarms.size else math.nan, list(results))


def run_sweep(spec, workers=None, progress=None):
    """Run every (value, trial) pair of ``spec``; results are ordered by (point, trial)."""
    tasks = [(spec.point_config(v, i), spec.solver, spec.edge, spec.detector, spec.protocol)
             for v in spec.values for i in range(spec.trials_per_point)]
    workers = workers if workers is not None else (os.cpu_count() or 1)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial_task, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_trial_task(task))
            if progress is not None:
                progress(len(results), len(tasks))
    summary = SweepSummary(spec)
    m = spec.trials_per_point
    for idx, v in enumerate(spec.values):
        chunk = results[idx * m:(idx + 1) * m]
        summary.points.append(summarize_point(spec.axis, v, chunk, spec.point_config(v, 0),
                                              spec.protocol))
    return summary


def csv_text(summary):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in summary.points:
        w.writerow(p.csv_row())
    return buf.getvalue()


def manifest(summary):
    """JSON-serializable description of the run (no wall-clock timestamps)."""
    spec = summary.spec
    points = []
    for p in summary.points:
        cfg = spec.point_config(p.value, 0) if spec is not None else None
        scaled = None
        if cfg is not None and p.results:
            etas = [r.eta for r in p.results if r.eta is not None]
            eta = float(np.median(etas)) if etas else 0.0
            lb, ub = scaled_bounds(cfg.n, cfg.sigma, cfg.delta, spec.protocol.far_alpha, eta)
            scaled = {"tau_lb_scaled": to_steps(lb, cfg.n_batch), "tau_ub_scaled": ub,
                      "constants": {"C1": 1.0, "C2": 1.0, "c_prime": 0.0}}
        points.append({
            "value": p.value, "mean_delay": _json_num(p.mean_delay),
            "std_delay": _json_num(p.std_delay), "n_detected": p.n_detected,
            "n_censored": p.n_censored, "n_failed": p.n_failed, "far": _json_num(p.far),
            "mdr": _json_num(p.mdr), "tau_lb": _json_num(p.tau_lb), "tau_ub": _json_num(p.tau_ub),
            "mean_alarm_delay": _json_num(p.mean_alarm_delay), "scaled_bounds": scaled,
            "seeds": [r.seed for r in p.results],
            "trials": [r.to_dict() for r in p.results],
        })
    return {
        "tool": "dyncausal", "version": __version__,
        "spec": spec.to_dict() if spec is not None else None,
        "seed_rule": "seed = base_seed + trial_index (same seeds at every point)",
        "interpretations": INTERPRETATIONS,
        "csv_header": CSV_HEADER,
        "points": points,
    }


def _json_num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def json_safe(obj):
    """Recursively map NaN to None and infinities to the strings "inf"/"-inf"."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _plot_svg(summary, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = [p for p in summary.points if not math.isnan(p.mean_delay)]
    with matplotlib.rc_context({"svg.hashsalt": "dyncausal", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        x = [p.value for p in pts]
        ax.errorbar(x, [p.mean_delay for p in pts], yerr=[p.std_delay for p in pts],
                    marker="o", capsize=3, label="mean delay")
        lbs = [p.tau_lb for p in pts]
        ax.plot(x, lbs, linestyle="--", color="gray", label="lower bound")
        label = {"n": "n (nodes)", "sigma": "noise std", "delta": "edge change magnitude"}
        ax.set_xlabel(label.get(summary.points[0].axis, summary.points[0].axis))
        ax.set_ylabel("detection delay (steps)")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_outputs(summary, out_dir, stem="sweep"):
    """Write ``<stem>.csv``, ``<stem>.json`` and (if any point) ``<stem>.svg``; returns the paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    paths = {"csv": os.path.join(out_dir, f"{stem}.csv"),
             "manifest": os.path.join(out_dir, f"{stem}.json")}
    written = []
    try:
        _atomic_write(paths["csv"], csv_text(summary))
        written.append(paths["csv"])
        _atomic_write(paths["manifest"], json.dumps(json_safe(manifest(summary)), indent=2, allow_nan=False) + "\n")
        written.append(paths["manifest"])
        if any(not math.isnan(p.mean_delay) for p in summary.points):
            paths["svg"] = os.path.join(out_dir, f"{stem}.svg")
            _plot_svg(summary, paths["svg"])
            written.append(paths["svg"])
    except (OSError, ValueError) as exc:
        for p in written:
            if os.path.exists(p):
                os.unlink(p)
        raise OSError(f"failed writing outputs to {out_dir}: {exc}") from exc
    return paths
