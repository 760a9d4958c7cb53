import io
import json
import math

import numpy as np
import pytest
from scipy import stats

from dyncausal.detect import (
    CusumState, DetectionEvent, DetectorConfig, EdgeTestConfig, calibrate_cusum, cusum_update,
    edge_appearance_test, edge_disappearance_test, read_events_jsonl, residual, residual_score,
    run_sequential, write_events_jsonl,
)
from dyncausal.errors import ConfigurationError, InvalidArgumentError
from dyncausal.graph import WeightedGraph, is_dag
from dyncausal.harness import default_solver_config
from dyncausal.simulate import SimConfig, generate_stream, sample_contemporaneous

from oracles import ols_no_intercept

X4 = np.array([[1.0], [2.0], [3.0], [4.0]])
Y4 = np.array([[1.0], [2.0], [2.0], [4.0]])


def _pair(x, y):
    """Two-column design: column 0 is the regressor, column 1 the child."""
    Z = np.column_stack([np.ravel(x), np.zeros(len(np.ravel(x)))])
    Y = np.column_stack([np.zeros(len(np.ravel(y))), np.ravel(y)])
    return Z, Y


class TestResidual:
    def test_zero_weights(self, rng):
        X = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(residual(X, np.zeros((3, 3))), X)

    def test_exact_weights_noiseless(self):
        W = np.zeros((3, 3))
        W[0, 1], W[1, 2] = 0.8, -0.6
        X = np.zeros((4, 3))
        X[:, 0] = [1.0, -2.0, 0.5, 3.0]
        X[:, 1] = 0.8 * X[:, 0]
        X[:, 2] = -0.6 * X[:, 1]
        r = residual(X, W)
        # Only the root keeps its exogenous value; children are explained exactly.
        np.testing.assert_array_equal(r[:, 0], X[:, 0])
        np.testing.assert_allclose(r[:, 1:], 0.0, atol=1e-15)

    def test_chain_noise_level(self):
        W = np.zeros((2, 2))
        W[0, 1] = 0.5
        X = sample_contemporaneous(WeightedGraph(W), 0.1, 1000, np.random.default_rng(0)).data
        assert residual_score(residual(X, W)) == pytest.approx(0.01, rel=0.2)

    def test_lagged(self, rng):
        X0, X1 = rng.standard_normal((2, 6, 3))
        W = rng.standard_normal((3, 3))
        np.testing.assert_allclose(residual(X1, W, "lagged", X0), X1 - X0 @ W)

    def test_shape_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            residual(rng.standard_normal((5, 3)), np.zeros((4, 4)))


class TestCusum:
    def test_score_at_drift(self):
        r = np.full((2, 2), 1.0)
        state, alarm = cusum_update(CusumState(c=1.0, eta=5.0), r)
        assert state.S == 0.0 and not alarm

    def test_pinned_at_zero(self):
        state = CusumState(c=1.0, eta=5.0)
        for _ in range(10):
            state, alarm = cusum_update(state, np.full((3, 3), 0.5))
            assert state.S == 0.0 and not alarm

    def test_first_alarm_at_sixth_update(self):
        state = CusumState(c=1.0, eta=5.0)
        r = np.array([[2.0, 0.0]])  # mean square exactly 2
        alarms = []
        for _ in range(7):
            state, alarm = cusum_update(state, r)
            alarms.append(alarm)
        assert alarms.index(True) == 5
        assert state.alarmed

    def test_nonnegative_random(self, rng):
        state = CusumState(c=1.0, eta=3.0)
        for _ in range(200):
            state, alarm = cusum_update(state, rng.standard_normal((4, 4)) * rng.uniform(0, 2))
            assert state.S >= 0.0
            assert alarm == (state.S > 3.0) == state.alarmed

    def test_non_finite(self):
        with pytest.raises(InvalidArgumentError):
            cusum_update(CusumState(1.0, 1.0), np.array([[np.inf]]))

    def test_reset(self):
        s = CusumState(1.0, 1.0, S=4.0, alarmed=True).reset()
        assert s.S == 0.0 and not s.alarmed


class TestCalibration:
    def test_constant_scores(self):
        c, eta = calibrate_cusum(np.full(60, 0.3), 0.05, 100)
        assert c == pytest.approx(0.3)
        assert eta == pytest.approx(0.0, abs=1e-12)

    def test_alpha_one(self, rng):
        _, eta = calibrate_cusum(rng.normal(1, 0.1, 80), 1.0, 50, rng=0)
        assert eta == 0.0

    def test_insufficient(self):
        with pytest.raises(ConfigurationError):
            calibrate_cusum(np.ones(49), 0.05, 10)

    def test_bootstrap_self_check(self):
        rng = np.random.default_rng(11)
        scores = rng.normal(1.0, 0.1, 100)
        c, eta = calibrate_cusum(scores, 0.05, 250, rng=1)
        assert c == pytest.approx(scores.mean())
        # Replay oracle: resample each replicate's drift and path from the warm-up set.
        check = np.random.default_rng(2)
        alarms = 0
        for _ in range(1000):
            c_star = check.choice(scores, scores.size).mean()
            S = np.maximum.accumulate(np.zeros(1))[0]
            hit = False
            for s in check.choice(scores, 250):
                S = max(0.0, S + s - c_star)
                hit |= S > eta
            alarms += hit
        assert alarms / 1000 <= 0.05 + 2 * math.sqrt(0.05 * 0.95 / 1000)

    def test_fresh_stream_far(self):
        # Independent warm-up sets and fresh streams from the true distribution.
        rng = np.random.default_rng(5)
        alarms = 0
        n = 300
        for i in range(n):
            warm = rng.normal(1.0, 0.1, 100)
            c, eta = calibrate_cusum(warm, 0.05, 100, n_boot=400, rng=i)
            S = np.maximum.accumulate(np.zeros(1))[0]
            for s in rng.normal(1.0, 0.1, 100):
                S = max(0.0, S + s - c)
                if S > eta:
                    alarms += 1
                    break
        assert alarms / n <= 0.05 + 3 * math.sqrt(0.05 * 0.95 / n)


class TestEdgeTests:
    def test_four_point_t(self):
        Z, Y = _pair(X4, Y4)
        out = edge_appearance_test(Z, Y, None, (0, 1), 0.05)
        # Closed form: W = 27/30, RSS = 7/10, SE^2 = (7/30)/30  =>  t = 27/sqrt(7).
        assert out.statistic == pytest.approx(27 / math.sqrt(7), abs=1e-6)
        assert out.statistic == pytest.approx(10.21, abs=5e-3)
        assert out.threshold == pytest.approx(stats.t.ppf(0.975, 3), abs=1e-12)
        assert out.threshold == pytest.approx(3.182, abs=1e-3)
        assert out.decision is True

    def test_four_point_f_equals_t_squared(self):
        Z, Y = _pair(X4, Y4)
        t = edge_appearance_test(Z, Y, None, (0, 1), 0.05).statistic
        out = edge_disappearance_test(Z, Y, (0, 1), 0.05)
        assert out.statistic == pytest.approx(729 / 7, abs=1e-6)
        assert out.statistic == pytest.approx(t * t, rel=1e-9)
        assert out.decision is False

    def test_ols_oracle_agreement(self, rng):
        Z = rng.standard_normal((40, 4))
        Y = np.zeros((40, 4))
        Y[:, 3] = 0.7 * Z[:, 0] - 0.4 * Z[:, 1] + 0.3 * rng.standard_normal(40)
        w_hat = np.zeros((4, 4))
        w_hat[1, 3] = 1
        out = edge_appearance_test(Z, Y, w_hat, (0, 3), 0.05)
        beta, rss = ols_no_intercept(Z[:, [1, 0]], Y[:, 3])
        dof = 40 - 2
        G_inv = np.linalg.inv(Z[:, [1, 0]].T @ Z[:, [1, 0]])
        assert out.statistic == pytest.approx(beta[1] / math.sqrt(rss / dof * G_inv[1, 1]), rel=1e-9)
        w_full = w_hat.copy()
        w_full[0, 3] = 1
        f_out = edge_disappearance_test(Z, Y, (0, 3), 0.05, w_hat=w_full)
        assert f_out.statistic == pytest.approx(out.statistic**2, rel=1e-9)
        _, rss_red = ols_no_intercept(Z[:, [1]], Y[:, 3])
        assert f_out.statistic == pytest.approx((rss_red - rss) / (rss / dof), rel=1e-9)

    def test_zero_response(self, rng):
        Z, Y = _pair(rng.standard_normal(10), np.zeros(10))
        out = edge_appearance_test(Z, Y, None, (0, 1), 0.05)
        assert out.decision is False and out.statistic == 0.0

    def test_zero_residual_convention(self):
        x = np.array([1.0, 2.0, 3.0])
        Z, Y = _pair(x, 2 * x)
        out = edge_appearance_test(Z, Y, None, (0, 1), 0.05)
        assert out.decision is True and out.statistic == math.inf

    def test_equal_rss_removes(self):
        Z, Y = _pair(np.zeros(6), np.arange(6.0))
        # A zero regressor is rank-deficient: indeterminate rather than a decision.
        assert edge_disappearance_test(Z, Y, (0, 1), 0.05).decision is None
        Z, Y = _pair(np.ones(6), np.zeros(6))
        out = edge_disappearance_test(Z, Y, (0, 1), 0.05)
        assert out.statistic == 0.0 and out.decision is True

    def test_null_removal_rate(self):
        rng = np.random.default_rng(3)
        removed = 0
        for _ in range(500):
            Z, Y = _pair(rng.standard_normal(30), rng.standard_normal(30))
            removed += bool(edge_disappearance_test(Z, Y, (0, 1), 0.05).decision)
        assert removed / 500 >= 0.90

    def test_indeterminate_when_too_few_rows(self):
        Z, Y = _pair([1.0], [2.0])
        assert edge_appearance_test(Z, Y, None, (0, 1), 0.05).decision is None
        assert edge_disappearance_test(Z, Y, (0, 1), 0.05).decision is None

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            EdgeTestConfig(alpha_add=0.0)
        with pytest.raises(ConfigurationError):
            EdgeTestConfig(alpha_rem=1.0)
        with pytest.raises(ConfigurationError):
            DetectorConfig(gamma=0.0)


class TestEventLog:
    def test_roundtrip(self, tmp_path):
        events = [DetectionEvent(251, 3, 7, "added", 4.5, 2.0),
                  DetectionEvent(260, 1, 2, "deleted", 0.1, 3.9),
                  DetectionEvent(261, 0, 2, "added", math.inf, 2.0)]
        path = tmp_path / "ev.jsonl"
        write_events_jsonl(path, events)
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        first = json.loads(lines[0])
        assert set(first) == {"t", "parent", "child", "kind", "statistic", "threshold_used"}
        assert read_events_jsonl(path) == events

    def test_stream_target(self):
        buf = io.StringIO()
        write_events_jsonl(buf, [DetectionEvent(1, 0, 1, "added", 1.0, 1.0)])
        assert json.loads(buf.getvalue())["kind"] == "added"


def _run(cfg, **kw):
    batches, truth = generate_stream(cfg)
    solver = default_solver_config().replace(edge_threshold=cfg.edge_threshold)
    events, diag = run_sequential(batches, solver, mode=cfg.mode, horizon=cfg.t_star - 150 + 1,
                                  seed=cfg.seed, **kw)
    return events, diag, truth


@pytest.fixture(scope="module")
def default_run():
    cfg = SimConfig(n=20, mode="lagged", T=330, t_star=250, seed=3)
    return cfg, *_run(cfg)


class TestRunSequential:

    def test_invariants(self, default_run):
        cfg, events, diag, truth = default_run
        monitored = [s for s in diag.S if not math.isnan(s)]
        assert monitored and all(s >= 0 for s in monitored)
        assert diag.monitor_start == 151
        assert all(e.t >= diag.monitor_start for e in events)
        # lambda2 below baseline only after an alarm.
        base = default_solver_config().lambda2
        seen_alarm = False
        for a, l2 in zip(diag.alarm, diag.lambda2):
            seen_alarm |= a
            if l2 < base:
                assert seen_alarm

    def test_events_are_transitions(self, default_run):
        cfg, events, diag, truth = default_run
        # Replay the events on top of the static estimate: each must flip the state.
        state = {}
        for e in events:
            before = state.get(e.edge, None)
            if before is not None:
                assert before != (e.kind == "added")
            state[e.edge] = e.kind == "added"

    def test_true_change_detected(self, default_run):
        cfg, events, diag, truth = default_run
        flips = {(f.parent, f.child) for f in truth.flipped}
        assert any(e.t > cfg.t_star for e in events)
        assert not any(e.t <= cfg.t_star and e.edge in flips for e in events)

    def test_change_free_quiet(self):
        quiet = 0
        for seed in range(5):
            cfg = SimConfig(n=10, k=0, mode="lagged", T=251, t_star=250, seed=seed)
            events, diag, _ = _run(cfg)
            quiet += not events and diag.first_alarm is None
        assert quiet >= 4

    def test_confirmed_graph_acyclic(self):
        from dyncausal.detect import SequentialDetector, initial_fit
        cfg = SimConfig(n=12, p=0.3, mode="lagged", T=40, t_star=20, seed=1)
        batches, _ = generate_stream(cfg)
        solver = default_solver_config().replace(edge_threshold=cfg.edge_threshold)
        w0 = initial_fit(batches[:10], solver, mode="lagged")
        det = SequentialDetector(cfg.n, solver, mode="lagged", cusum=CusumState(0.0, 1e-9), w_init=w0)
        det.step(batches[9], emit=False)
        for b in batches[10:]:
            det.step(b)
            assert is_dag(det.adjacency)
            assert np.array_equal(np.abs(det.weights.weights) > 0, det.adjacency.entries == 1)
