import numpy as np
import pytest

from dyncausal.errors import ConfigurationError, InvalidArgumentError
from dyncausal.graph import (
    WeightedGraph, acyclicity_value, is_dag, structural_hamming_distance, threshold_edges,
)
from dyncausal.simulate import (
    ObservationBatch, SimConfig, generate_random_dag, generate_stream, sample_contemporaneous, step_sem,
)
from dyncausal.solver import SolverConfig, SolverState, objective, regression_targets, solve_static, solve_step

from oracles import ols_no_intercept


class TestObjective:
    def test_zero_weights(self, rng):
        X = rng.standard_normal((7, 3))
        Z = np.zeros((3, 3))
        assert objective(Z, X, Z, 0.3, 2.0) == pytest.approx(0.5 * np.sum(X**2))

    def test_zero_data(self, rng):
        W = rng.standard_normal((3, 3))
        assert objective(W, np.zeros((4, 3)), np.zeros((3, 3)), 0.7, 0.0) == pytest.approx(0.7 * np.abs(W).sum())

    def test_hand_example(self):
        X = np.array([[1.0, 2.0]])
        W = np.array([[0.0, 2.0], [0.0, 0.0]])
        # XW = (0, 2), residual (1, 0): 0.5 * 1 + 1 * |2| + (2 / 2) * 2^2 = 6.5
        assert objective(W, X, np.zeros((2, 2)), 1.0, 2.0) == pytest.approx(6.5)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            objective(np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((2, 2)), 0.1, 0.1)


class TestRegressionTargets:
    def test_contemporaneous(self, rng):
        X = rng.standard_normal((5, 3))
        Z, Y = regression_targets(X)
        assert np.array_equal(Z, X) and np.array_equal(Y, X)

    def test_lagged(self, rng):
        X0, X1 = rng.standard_normal((2, 5, 3))
        Z, Y = regression_targets(X1, X0, "lagged")
        assert np.array_equal(Z, X0) and np.array_equal(Y, X1)

    def test_lagged_needs_previous(self, rng):
        with pytest.raises(InvalidArgumentError):
            regression_targets(rng.standard_normal((5, 3)), None, "lagged")

    def test_lagged_zero_regressors_give_zero(self, rng):
        Y = rng.standard_normal((20, 3))
        cfg = SolverConfig(lambda1=1e-4, lambda2=0.0)
        g, _ = solve_step(Y, SolverState.initial(3, cfg), cfg, regressors=np.zeros_like(Y))
        assert not g.weights.any()

    def test_lagged_chain_weight(self):
        # x1 -> x2 with weight 0.5; each step regresses X(t) on X(t-1).
        W = np.zeros((2, 2))
        W[0, 1] = 0.5
        g = WeightedGraph(W)
        rng = np.random.default_rng(0)
        sigma = 0.01
        prev = np.zeros((1, 2))
        Z, Y = [], []
        for _ in range(501):
            cur = step_sem(g, prev, sigma, rng)
            Z.append(prev[0])
            Y.append(cur[0])
            prev = cur
        Z, Y = np.array(Z[1:]), np.array(Y[1:])
        beta, _ = ols_no_intercept(Z[:, :1], Y[:, 1])
        se = sigma / np.sqrt(Z[:, 0] @ Z[:, 0])
        assert abs(beta[0] - 0.5) < 4 * se
        # The objective is O(sigma^2) here, so the stopping tolerance is tightened.
        cfg = SolverConfig(lambda1=1e-6, lambda2=0.0, inner_tol=1e-14)
        fit = solve_static(Y, cfg, regressors=Z)
        assert fit.weights[0, 1] == pytest.approx(beta[0], abs=1e-3)


def _noiseless_contemporaneous(seed, d=6, N=200):
    rng = np.random.default_rng(seed)
    g = generate_random_dag(d, 0.4, 0.5, rng, edge_threshold=0.25)
    X = sample_contemporaneous(g, 1.0, N, rng).data
    return g, X


class TestSolveStep:
    @pytest.mark.parametrize("inner", ["auto", "proximal"])
    def test_recovers_known_dag(self, inner):
        # The acyclicity-constrained program is nonconvex; a minority of
        # draws end in a local optimum with a reversed or missing edge.
        cfg = SolverConfig(lambda1=0.01, lambda2=0.0, edge_threshold=0.25, inner=inner)
        exact = 0
        for seed in range(30):
            g, X = _noiseless_contemporaneous(seed)
            fit = solve_static(X, cfg)
            exact += structural_hamming_distance(threshold_edges(fit), threshold_edges(g)) == 0
        assert exact >= 24

    def test_huge_penalties_give_zero(self, rng):
        X = rng.standard_normal((30, 4))
        big = 1e6 * np.sum(X**2)
        cfg = SolverConfig(lambda1=big, lambda2=big)
        g, _ = solve_step(X, SolverState.initial(4, cfg), cfg)
        assert np.max(np.abs(g.weights)) <= 1e-6

    def test_fixed_point_under_warm_start(self):
        g0, X = _noiseless_contemporaneous(3)
        cfg = SolverConfig(lambda1=0.01, lambda2=1.0, edge_threshold=0.25, inner_tol=1e-10)
        state = SolverState.initial(6, cfg)
        # Each solve contracts towards the fixed point of the temporal prior.
        g, state = solve_step(X, state, cfg)
        for _ in range(200):
            prev = g.weights
            g, state = solve_step(X, state, cfg)
            if np.linalg.norm(g.weights - prev) <= 1e-9:
                break
        g2, state2 = solve_step(X, state, cfg)
        assert np.linalg.norm(g2.weights - g.weights) <= 1e-6
        assert state2.outer_iters_used <= 2

    def test_constraint_satisfied(self):
        cfg = SolverConfig(edge_threshold=0.25)
        for seed in range(5):
            _, X = _noiseless_contemporaneous(seed, d=8, N=40)
            g, state = solve_step(X, SolverState.initial(8, cfg), cfg)
            assert acyclicity_value(g.weights) <= cfg.h_target
            assert is_dag(threshold_edges(g))
            assert 1 <= state.outer_iters_used <= cfg.max_outer

    @pytest.mark.parametrize("inner", ["proximal", "auto", "lbfgsb"])
    def test_inner_loop_monotone(self, inner):
        _, X = _noiseless_contemporaneous(4, d=7, N=50)
        cfg = SolverConfig(inner=inner, edge_threshold=0.25)
        history = []
        solve_step(X, SolverState.initial(7, cfg), cfg, history=history)
        assert history
        for trace in history:
            diffs = np.diff(trace)
            assert np.all(diffs <= 1e-9 * np.maximum(1.0, np.abs(trace[:-1]))), trace

    def test_warm_start_economy(self):
        cfg = SimConfig(n=10, p=0.3, k=0, T=16, t_star=15, mode="contemporaneous", seed=5)
        batches, _ = generate_stream(cfg)
        scfg = SolverConfig(edge_threshold=cfg.edge_threshold, lambda1=0.01)
        state = SolverState.initial(cfg.n, scfg)
        outers = []
        for b in batches:
            _, state = solve_step(b, state, scfg)
            outers.append(state.outer_iters_used)
        assert np.median(outers[1:]) < outers[0]

    def test_temporal_prior_limit(self, rng):
        g, X = _noiseless_contemporaneous(6)
        prev = WeightedGraph(np.where(g.weights != 0, g.weights * 0.5, 0.0), 0.1)
        dists = []
        for l2 in (1.0, 10.0, 100.0, 1000.0):
            cfg = SolverConfig(lambda1=0.01, lambda2=l2, edge_threshold=0.1)
            fit, _ = solve_step(X[:20], SolverState(w_prev=prev), cfg)
            dists.append(np.linalg.norm(fit.weights - prev.weights))
        assert all(a >= b for a, b in zip(dists, dists[1:])), dists

    def test_l1_limit(self):
        _, X = _noiseless_contemporaneous(7, d=8, N=60)
        counts = []
        for l1 in (0.01, 0.1, 1.0, 10.0, 100.0):
            cfg = SolverConfig(lambda1=l1, lambda2=0.0, edge_threshold=0.25)
            counts.append(threshold_edges(solve_static(X, cfg)).n_edges)
        assert all(a >= b for a, b in zip(counts, counts[1:])), counts
        assert counts[-1] == 0

    def test_dimension_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            solve_step(rng.standard_normal((5, 3)), SolverState.initial(4))

    def test_accepts_batch_object(self, rng):
        b = ObservationBatch(1, rng.standard_normal((10, 3)))
        g, _ = solve_step(b, SolverState.initial(3))
        assert g.d == 3

    def test_deterministic(self):
        _, X = _noiseless_contemporaneous(8)
        cfg = SolverConfig(edge_threshold=0.25)
        a = solve_static(X, cfg).weights
        b = solve_static(X.copy(), cfg).weights
        assert np.array_equal(a, b)


@pytest.mark.parametrize("bad", [dict(lambda1=-1.0), dict(lambda2=-1.0), dict(rho0=0.0), dict(rho_growth=1.0),
                                 dict(max_outer=0), dict(max_inner=0), dict(inner_tol=0.0),
                                 dict(h_target=0.0), dict(inner="newton"),
                                 dict(project_h=-1.0)])
def test_config_validation(bad):
    with pytest.raises((ConfigurationError, InvalidArgumentError)):
        SolverConfig(**bad)
