"""Forward, backward-adjoint, augmented, and ResNet integration."""

import math

import numpy as np
import pytest

from odenets.errors import ConfigError, DomainError, SolverFailure
from odenets.gradients import model_output
from odenets.model import ModelConfig, Params, init_params, initial_state, readout
from odenets.solvers import (
    SolverSpec,
    Trajectory,
    discretize_resnet_forward,
    forward_terminal_states,
    solve_augmented,
    solve_backward_adjoint,
    solve_forward,
    trajectory_to_csv,
)


def scalar_model(rate: float = 1.0, activation: str = "identity"):
    """n=1 model with effective field rate sigma_w W / sqrt(n) = rate."""
    cfg = ModelConfig(n=1, d=1, horizon=1.0, activation=activation)
    p = Params(U=np.array([[1.0]]), W=np.array([[rate]]), v=np.array([1.0]))
    return cfg, p


X1 = np.array([1.0])


class TestSolverSpec:
    def test_validation(self):
        with pytest.raises(ConfigError):
            SolverSpec(method="euler", steps=0)
        with pytest.raises(ConfigError):
            SolverSpec(method="adaptive", rel_tol=-1.0)
        with pytest.raises(ConfigError):
            SolverSpec(method="leapfrog")


class TestForward:
    def test_euler_compound_interest(self):
        cfg, p = scalar_model()
        tr = solve_forward(cfg, p, X1, SolverSpec(method="euler", steps=100))
        assert tr.terminal_state[0] == pytest.approx((1 + 0.01) ** 100, abs=1e-12)

    def test_rk4_exponential_oracle(self):
        # The order-4 oracle: RK4 on xdot = x multiplies by the truncated
        # exponential each step, so the terminal value is known exactly.
        cfg, p = scalar_model()
        L = 10
        h = 1.0 / L
        growth = sum(h**k / math.factorial(k) for k in range(5))
        tr = solve_forward(cfg, p, X1, SolverSpec(method="rk4", steps=L))
        assert tr.terminal_state[0] == pytest.approx(growth**L, abs=1e-12)
        assert abs(tr.terminal_state[0] - math.e) < 3e-6

    def test_zero_initial_state_stays_zero(self):
        cfg = ModelConfig(n=8, d=3, activation="softplus-shifted", seed=1)
        p = init_params(cfg)
        tr = solve_forward(cfg, p, np.zeros(3), SolverSpec(method="rk4", steps=16))
        np.testing.assert_allclose(tr.states, 0.0)

    def test_adaptive_matches_e(self):
        cfg, p = scalar_model()
        tr = solve_forward(
            cfg, p, X1, SolverSpec(method="adaptive", rel_tol=1e-10, abs_tol=1e-12)
        )
        assert tr.terminal_state[0] == pytest.approx(math.e, abs=1e-9)
        assert tr.times[0] == 0.0 and tr.times[-1] == 1.0

    def test_adaptive_step_exhaustion(self):
        cfg, p = scalar_model()
        with pytest.raises(SolverFailure) as err:
            solve_forward(
                cfg, p, X1,
                SolverSpec(method="adaptive", rel_tol=1e-13, abs_tol=1e-15,
                           max_steps=3),
            )
        assert err.value.last_time is not None

    def test_order_of_accuracy_slopes(self):
        cfg = ModelConfig(n=16, d=4, activation="softplus-shifted", seed=3)
        p = init_params(cfg)
        x = np.array([0.8, -0.2, 0.4, 0.1])
        ref = solve_forward(
            cfg, p, x, SolverSpec(method="adaptive", rel_tol=1e-10, abs_tol=1e-12)
        ).terminal_state
        for method, window in (("euler", (-1.2, -0.8)), ("rk4", (-4.5, -3.5))):
            Ls = [8, 16, 32, 64] if method == "rk4" else [32, 64, 128, 256]
            errs = [
                np.linalg.norm(
                    solve_forward(cfg, p, x, SolverSpec(method=method, steps=L))
                    .terminal_state - ref
                )
                for L in Ls
            ]
            slope = np.polyfit(np.log(Ls), np.log(errs), 1)[0]
            assert window[0] <= slope <= window[1], (method, slope, errs)


class TestBackward:
    def test_zero_weight_constant_adjoint(self):
        cfg = ModelConfig(n=3, d=2, activation="tanh", seed=0)
        p = init_params(cfg)
        p.W[:] = 0.0
        spec = SolverSpec(method="euler", steps=10)
        fwd = solve_forward(cfg, p, np.array([1.0, 0.0]), spec)
        bwd = solve_backward_adjoint(cfg, p, fwd, spec)
        assert np.max(np.abs(bwd.states - bwd.states[0])) <= 1e-14

    def test_scalar_closed_form(self):
        rate = 0.7
        cfg, p = scalar_model(rate)
        spec = SolverSpec(method="rk4", steps=64)
        fwd = solve_forward(cfg, p, X1, spec)
        bwd = solve_backward_adjoint(cfg, p, fwd, spec)
        lam_T = bwd.states[0, 0]
        lam_0 = bwd.states[-1, 0]
        assert lam_0 == pytest.approx(lam_T * math.exp(rate), abs=1e-6)
        assert bwd.times[0] == 1.0 and bwd.times[-1] == 0.0

    def test_adjoint_equals_state_sensitivity(self):
        # lambda_t = df/dh_t: perturb the state at a grid time, re-solve
        # to T, and difference the readout.
        cfg = ModelConfig(n=16, d=4, activation="softplus-shifted", seed=2)
        p = init_params(cfg)
        x = np.array([0.5, 0.5, -0.5, 0.5])
        spec = SolverSpec(method="rk4", steps=128)
        fwd = solve_forward(cfg, p, x, spec)
        bwd = solve_backward_adjoint(cfg, p, fwd, spec)
        m = 40  # grid index of the probe time
        t_m = fwd.times[m]
        lam_here = bwd.states[np.argmin(np.abs(bwd.times - t_m))]
        h_m = fwd.states[m]

        sub_cfg = ModelConfig(n=16, d=4, horizon=1.0 - t_m,
                              activation="softplus-shifted", seed=2)
        eps = 1e-5
        steps_rest = 128 - m

        def f_from(h_start):
            traj = _solve_from_state(sub_cfg, p, h_start, steps_rest)
            return float(readout(cfg, p, traj))

        for i in (0, 5, 11):
            e = np.zeros(16)
            e[i] = eps
            fd = (f_from(h_m + e) - f_from(h_m - e)) / (2 * eps)
            assert fd == pytest.approx(lam_here[i], rel=1e-4, abs=1e-10)

    def test_grid_mismatch_rejected(self):
        cfg = ModelConfig(n=4, d=2, activation="tanh", seed=0)
        p = init_params(cfg)
        fwd = solve_forward(cfg, p, np.array([1.0, 0.0]),
                            SolverSpec(method="euler", steps=16))
        with pytest.raises(DomainError):
            solve_backward_adjoint(cfg, p, fwd, SolverSpec(method="euler", steps=8))

    def test_adaptive_backward(self):
        rate = -0.4
        cfg, p = scalar_model(rate)
        spec = SolverSpec(method="adaptive", rel_tol=1e-9, abs_tol=1e-11)
        fwd = solve_forward(cfg, p, X1, spec)
        bwd = solve_backward_adjoint(cfg, p, fwd, spec)
        assert bwd.states[-1, 0] == pytest.approx(
            bwd.states[0, 0] * math.exp(rate), abs=1e-6
        )


def _solve_from_state(cfg, p, h0, steps):
    """rk4 restart from an arbitrary state (helper for sensitivity checks)."""
    from odenets.solvers import _field, _rk4_step

    f = _field(cfg, p)
    dt = cfg.horizon / steps
    h = h0.copy()
    for _ in range(steps):
        h = _rk4_step(f, h, dt)
    return h


class TestAugmented:
    def test_zero_terminal(self):
        cfg = ModelConfig(n=4, d=2, activation="relu", seed=4)
        p = init_params(cfg)
        out = solve_augmented(cfg, p, np.zeros(4), SolverSpec(method="rk4", steps=32))
        np.testing.assert_allclose(out["g0"], 0.0)
        np.testing.assert_allclose(out["h0"], 0.0)

    def test_reversal_consistency(self):
        cfg = ModelConfig(n=12, d=4, activation="softplus-shifted", seed=5)
        p = init_params(cfg)
        x = np.array([1.0, -1.0, 0.5, 0.25]) / np.linalg.norm([1, -1, 0.5, 0.25])
        spec = SolverSpec(method="rk4", steps=256)
        fwd = solve_forward(cfg, p, x, spec)
        out = solve_augmented(cfg, p, fwd.terminal_state, spec)
        assert np.linalg.norm(out["h0"] - initial_state(cfg, p, x)) < 1e-6

    def test_g0_matches_trajectory_quadrature(self):
        # Trapezoid-on-trajectory oracle for the W-gradient integral.
        cfg = ModelConfig(n=10, d=3, activation="softplus-shifted", seed=6)
        p = init_params(cfg)
        x = np.array([0.6, -0.3, 0.74])
        spec = SolverSpec(method="rk4", steps=256)
        fwd = solve_forward(cfg, p, x, spec)
        bwd = solve_backward_adjoint(cfg, p, fwd, spec)
        lam = bwd.states[::-1]  # ascending time order
        phis = cfg.act.value(fwd.states)
        dt = cfg.horizon / spec.steps
        w = np.full(spec.steps + 1, dt)
        w[0] = w[-1] = dt / 2
        oracle = (cfg.sigma_w / math.sqrt(cfg.n)) * np.einsum(
            "t,ti,tj->ij", w, lam, phis
        )
        out = solve_augmented(cfg, p, fwd.terminal_state, spec)
        assert np.linalg.norm(out["g0"] - oracle) < 1e-5

    def test_roundtrip_error_shrinks_at_solver_order(self):
        cfg = ModelConfig(n=8, d=3, activation="softplus-shifted", seed=8)
        p = init_params(cfg)
        x = np.array([0.3, 0.3, 0.9])
        h0 = initial_state(cfg, p, x)
        errs = []
        Ls = [16, 32, 64]
        for L in Ls:
            spec = SolverSpec(method="rk4", steps=L)
            fwd = solve_forward(cfg, p, x, spec)
            out = solve_augmented(cfg, p, fwd.terminal_state, spec)
            errs.append(np.linalg.norm(out["h0"] - h0))
        slope = np.polyfit(np.log(Ls), np.log(errs), 1)[0]
        assert slope < -3.0


class TestResnet:
    def test_single_step(self):
        cfg = ModelConfig(n=6, d=2, activation="tanh", seed=9)
        p = init_params(cfg)
        x = np.array([1.0, 2.0])
        states = discretize_resnet_forward(cfg, p, x, 1)
        h0 = initial_state(cfg, p, x)
        expected = h0 + cfg.horizon * (cfg.sigma_w / math.sqrt(6)) * (
            p.W @ np.tanh(h0)
        )
        np.testing.assert_allclose(states[1], expected, rtol=1e-15)

    def test_bit_identical_to_euler(self):
        cfg = ModelConfig(n=10, d=4, activation="softplus-shifted", seed=10)
        p = init_params(cfg)
        x = np.array([0.1, 0.2, 0.3, 0.4])
        states = discretize_resnet_forward(cfg, p, x, 37)
        tr = solve_forward(cfg, p, x, SolverSpec(method="euler", steps=37))
        assert np.array_equal(states, tr.states)

    def test_error_halves_when_depth_doubles(self):
        cfg = ModelConfig(n=16, d=4, activation="softplus-shifted", seed=11)
        p = init_params(cfg)
        x = np.array([0.7, -0.1, 0.2, 0.66])
        ref = solve_forward(cfg, p, x, SolverSpec(method="rk4", steps=8192))
        ref_state = ref.terminal_state
        errs = {}
        for L in (64, 128, 256, 512, 1024):
            errs[L] = np.linalg.norm(
                discretize_resnet_forward(cfg, p, x, L)[-1] - ref_state
            )
        for L in (64, 128, 256, 512):
            ratio = errs[2 * L] / errs[L]
            assert 0.5 * 0.8 <= ratio <= 0.5 * 1.2, (L, ratio)

    def test_depth_validation(self):
        cfg = ModelConfig(n=4, d=2)
        p = init_params(cfg)
        with pytest.raises(ConfigError):
            discretize_resnet_forward(cfg, p, np.zeros(2), 0)


class TestTrajectoryAndBatch:
    def test_monotonicity_enforced(self):
        with pytest.raises(DomainError):
            Trajectory(times=np.array([0.0, 0.5, 0.4]),
                       states=np.zeros((3, 2)), direction="forward")

    def test_csv_export(self, tmp_path):
        tr = Trajectory(times=np.array([0.0, 0.5, 1.0]),
                        states=np.arange(6.0).reshape(3, 2),
                        direction="forward")
        path = tmp_path / "traj.csv"
        trajectory_to_csv(tr, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "t,state_0,state_1"
        assert len(lines) == 4

    def test_batched_terminal_states_match_single(self):
        cfg = ModelConfig(n=8, d=3, activation="gelu", seed=12)
        p = init_params(cfg)
        X = np.random.default_rng(0).standard_normal((5, 3))
        spec = SolverSpec(method="rk4", steps=32)
        H = forward_terminal_states(cfg, p, X, spec)
        for i in range(5):
            single = solve_forward(cfg, p, X[i], spec).terminal_state
            np.testing.assert_allclose(H[:, i], single, rtol=1e-12)

    def test_adjoint_forward_consistency(self):
        # For an autonomous field, <lambda_t, F(h_t)> is conserved along
        # the trajectory, and its trapezoid integral telescopes into
        # sum_i <lambda, dh> over the same grid.
        cfg = ModelConfig(n=12, d=4, activation="softplus-shifted", seed=13)
        p = init_params(cfg)
        x = np.array([0.2, 0.4, -0.6, 0.1])
        spec = SolverSpec(method="rk4", steps=256)
        fwd = solve_forward(cfg, p, x, spec)
        bwd = solve_backward_adjoint(cfg, p, fwd, spec)
        from odenets.model import vector_field

        lam = bwd.states[::-1]
        F = np.array([vector_field(cfg, p, h) for h in fwd.states])
        pointwise = np.einsum("ti,ti->t", lam, F)
        assert np.max(np.abs(pointwise - pointwise[0])) <= 1e-6 * max(
            1.0, abs(pointwise[0])
        )
        dt = cfg.horizon / spec.steps
        w = np.full(spec.steps + 1, dt)
        w[0] = w[-1] = dt / 2
        integral = float(w @ pointwise)
        dh = np.diff(fwd.states, axis=0)
        telescoped = float(np.einsum("ti,ti->", 0.5 * (lam[:-1] + lam[1:]), dh))
        assert integral == pytest.approx(telescoped, rel=1e-5, abs=1e-12)
