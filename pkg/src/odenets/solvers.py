"""Numerical integration of the forward, backward-adjoint, and augmented ODEs.

Fixed-step Euler and classic RK4 run on the uniform grid ``T/L``; the
adaptive method is an embedded Dormand-Prince 5(4) pair with PI step
control. Backward solves substitute ``s = T - t`` so every integrator runs
forward in its own variable. Fixed-step backward passes reuse the forward
grid and read the hidden state by index (cubic Hermite interpolation
supplies off-grid values, e.g. RK4 midpoints and adaptive grids).

The explicit-Euler ResNet discretization shares its step function with the
Euler solver, so the two produce bit-identical states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, SolverFailure
from .model import ModelConfig, Params, adjoint_terminal, initial_state

__all__ = [
    "SolverSpec",
    "Trajectory",
    "solve_forward",
    "solve_backward_adjoint",
    "solve_augmented",
    "discretize_resnet_forward",
    "forward_terminal_states",
    "trajectory_to_csv",
]

_METHODS = ("euler", "rk4", "adaptive")


@dataclass(frozen=True)
class SolverSpec:
    """Integration method plus its step or tolerance parameters."""

    method: str = "rk4"
    steps: int = 128
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    max_steps: int = 100_000

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {_METHODS}")
        if self.method in ("euler", "rk4") and self.steps < 1:
            raise ConfigError("fixed-step methods require steps >= 1")
        if self.method == "adaptive":
            if not (self.rel_tol > 0 and self.abs_tol > 0):
                raise ConfigError("adaptive method requires positive tolerances")
            if self.max_steps < 1:
                raise ConfigError("max_steps must be >= 1")


@dataclass
class Trajectory:
    """Time-stamped state sequence from one solve.

    ``times`` increase from 0 to T for forward trajectories and decrease
    from T to 0 for backward ones; ``states[i]`` is the state at
    ``times[i]``.
    """

    times: np.ndarray
    states: np.ndarray
    direction: str

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.direction not in ("forward", "backward"):
            raise ConfigError(f"bad direction {self.direction!r}")
        diffs = np.diff(self.times)
        ok = np.all(diffs > 0) if self.direction == "forward" else np.all(diffs < 0)
        if not ok:
            raise DomainError("trajectory times must be strictly monotone")
        if not np.all(np.isfinite(self.states)):
            raise DomainError("trajectory states must be finite")

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[-1]

    def state_at_index(self, i: int) -> np.ndarray:
        return self.states[i]


def _field(cfg: ModelConfig, p: Params):
    """The autonomous right-hand side h -> sigma_w W phi(h) / sqrt(n)."""
    scale = cfg.sigma_w / math.sqrt(cfg.n)
    act = cfg.act.value
    W = p.W

    def f(h):
        return scale * (W @ act(h))

    return f


def _resnet_step(f, h, dt):
    # Single explicit-Euler / residual-block update.
    return h + dt * f(h)


def _rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Dormand-Prince 5(4) tableau.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = _DP_B5 - np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)


def _dopri5(f, y0, t_end, rel_tol, abs_tol, max_steps):
    """DP 5(4) for the autonomous system dy/dt = f(y) on [0, t_end]."""
    return _dopri5_nonautonomous(
        lambda _t, y: f(y), y0, t_end, rel_tol, abs_tol, max_steps
    )


def _fixed_grid_solve(f, y0, t_end, steps, stepper):
    dt = t_end / steps
    states = np.empty((steps + 1, np.size(y0)))
    states[0] = y0
    y = np.asarray(y0, dtype=np.float64)
    for i in range(steps):
        y = stepper(f, y, dt)
        states[i + 1] = y
    times = np.linspace(0.0, t_end, steps + 1)
    return times, states


def solve_forward(cfg: ModelConfig, p: Params, x, s: SolverSpec) -> Trajectory:
    """Integrate the hidden state from t = 0 to t = T."""
    h0 = initial_state(cfg, p, x)
    f = _field(cfg, p)
    T = cfg.horizon
    if s.method == "euler":
        states = discretize_resnet_forward(cfg, p, x, s.steps)
        times = np.linspace(0.0, T, s.steps + 1)
    elif s.method == "rk4":
        times, states = _fixed_grid_solve(f, h0, T, s.steps, _rk4_step)
    else:
        times, states, _ = _dopri5(f, h0, T, s.rel_tol, s.abs_tol, s.max_steps)
    return Trajectory(times=times, states=states, direction="forward")


class _HermiteLookup:
    """Cubic Hermite interpolant over a stored trajectory."""

    def __init__(self, times, states, derivs):
        order = np.argsort(times)
        self.t = np.asarray(times)[order]
        self.y = np.asarray(states)[order]
        self.dy = np.asarray(derivs)[order]

    def __call__(self, t: float) -> np.ndarray:
        ts = self.t
        if t <= ts[0]:
            return self.y[0]
        if t >= ts[-1]:
            return self.y[-1]
        i = int(np.searchsorted(ts, t, side="right") - 1)
        h = ts[i + 1] - ts[i]
        u = (t - ts[i]) / h
        h00 = (1 + 2 * u) * (1 - u) ** 2
        h10 = u * (1 - u) ** 2
        h01 = u * u * (3 - 2 * u)
        h11 = u * u * (u - 1)
        return (
            h00 * self.y[i]
            + h * h10 * self.dy[i]
            + h01 * self.y[i + 1]
            + h * h11 * self.dy[i + 1]
        )


def forward_interpolant(cfg: ModelConfig, p: Params, fwd: Trajectory):
    """Hermite h(t) lookup over a stored forward trajectory."""
    f = _field(cfg, p)
    derivs = np.array([f(state) for state in fwd.states])
    return _HermiteLookup(fwd.times, fwd.states, derivs)


def _is_uniform_forward_grid(fwd: Trajectory, steps: int, T: float) -> bool:
    if fwd.times.size != steps + 1:
        return False
    expected = np.linspace(0.0, T, steps + 1)
    return bool(np.allclose(fwd.times, expected, rtol=0.0, atol=1e-12 * max(T, 1.0)))


def solve_backward_adjoint(
    cfg: ModelConfig, p: Params, fwd: Trajectory, s: SolverSpec
) -> Trajectory:
    """Integrate the adjoint state from t = T down to t = 0.

    The hidden state is read from ``fwd``: by index on a shared fixed-step
    grid, by cubic Hermite interpolation otherwise.
    """
    if fwd.direction != "forward":
        raise DomainError("backward solve needs a forward trajectory")
    if fwd.states.shape[1] != cfg.n:
        raise ShapeError("forward trajectory width does not match config")
    T = cfg.horizon
    lam_T = adjoint_terminal(cfg, p, fwd.terminal_state)
    scale = cfg.sigma_w / math.sqrt(cfg.n)
    deriv = cfg.act.derivative
    WT = p.W.T

    def rhs_at(h_t, lam):
        # In s = T - t the adjoint dynamics lose their minus sign.
        return scale * deriv(h_t) * (WT @ lam)

    if s.method in ("euler", "rk4"):
        if not _is_uniform_forward_grid(fwd, s.steps, T):
            raise DomainError(
                "fixed-step backward solve requires the forward trajectory "
                f"to be uniform with {s.steps} steps"
            )
        L = s.steps
        ds = T / L
        lookup = None
        if s.method == "rk4":
            lookup = forward_interpolant(cfg, p, fwd)
        lam = lam_T.copy()
        states = np.empty((L + 1, cfg.n))
        states[0] = lam
        for j in range(L):
            # Stepping s_j -> s_{j+1} corresponds to t = T - s going down.
            if s.method == "euler":
                h_here = fwd.states[L - j]
                lam = lam + ds * rhs_at(h_here, lam)
            else:
                t_here = T - j * ds
                h_a = fwd.states[L - j]
                h_mid = lookup(t_here - 0.5 * ds)
                h_b = fwd.states[L - j - 1]
                k1 = rhs_at(h_a, lam)
                k2 = rhs_at(h_mid, lam + 0.5 * ds * k1)
                k3 = rhs_at(h_mid, lam + 0.5 * ds * k2)
                k4 = rhs_at(h_b, lam + ds * k3)
                lam = lam + (ds / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            states[j + 1] = lam
        times = T - np.linspace(0.0, T, L + 1)
        return Trajectory(times=times, states=states, direction="backward")

    lookup = forward_interpolant(cfg, p, fwd)
    times_s, states, _ = _dopri5_nonautonomous(
        lambda s_now, lam: rhs_at(lookup(T - s_now), lam),
        lam_T,
        T,
        s.rel_tol,
        s.abs_tol,
        s.max_steps,
    )
    return Trajectory(times=T - times_s, states=states, direction="backward")


def _dopri5_nonautonomous(f, y0, t_end, rel_tol, abs_tol, max_steps):
    """DP 5(4) for dy/dt = f(t, y); same controller as the autonomous core."""
    y = np.asarray(y0, dtype=np.float64)
    t = 0.0
    k1 = f(t, y)
    scale = abs_tol + rel_tol * np.abs(y)
    d0 = math.sqrt(float(np.mean(np.square(y / scale))))
    d1 = math.sqrt(float(np.mean(np.square(k1 / scale))))
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6 * t_end
    h = min(max(h, 1e-12 * t_end), t_end)

    times = [0.0]
    states = [y.copy()]
    derivs = [k1.copy()]
    err_prev = 1.0
    ks = np.empty((7, y.size))
    for _ in range(max_steps):
        if t >= t_end:
            return np.array(times), np.array(states), np.array(derivs)
        h = min(h, t_end - t)
        ks[0] = k1
        for i in range(1, 7):
            ks[i] = f(t + _DP_C[i] * h, y + h * (_DP_A[i] @ ks[:i]))
        y_new = y + h * (_DP_B5 @ ks)
        err_vec = h * (_DP_E @ ks)
        scale = abs_tol + rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        err = math.sqrt(float(np.mean(np.square(err_vec / scale)))) + 1e-300
        if err <= 1.0:
            t += h
            y = y_new
            k1 = ks[6]
            times.append(t)
            states.append(y.copy())
            derivs.append(k1.copy())
            factor = 0.9 * err ** -0.14 * err_prev ** 0.08
            err_prev = err
        else:
            factor = max(0.2, 0.9 * err ** -0.2)
        h *= min(5.0, max(0.2, factor))
    raise SolverFailure(
        f"adaptive solver exhausted {max_steps} steps at s={t:.6g}", last_time=t
    )


def solve_augmented(cfg: ModelConfig, p: Params, h_T, s: SolverSpec) -> dict:
    """Integrate the weakly coupled (h, lambda, g) system backward from T.

    Starts at ``(h_T, lambda_T, 0)`` and returns the states at t = 0; the
    gradient state satisfies ``g0 = grad_W f``. The hidden state is itself
    re-integrated backward, so nothing is read from a stored trajectory.
    """
    h_T = np.asarray(h_T, dtype=np.float64)
    if h_T.shape != (cfg.n,):
        raise ShapeError("h_T must be a length-n vector")
    n = cfg.n
    lam_T = adjoint_terminal(cfg, p, h_T)
    scale = cfg.sigma_w / math.sqrt(n)
    act, deriv = cfg.act.value, cfg.act.derivative
    W, WT = p.W, p.W.T

    def rhs(y):
        # y packs [h, lambda, g.ravel()] in the s = T - t variable.
        h = y[:n]
        lam = y[n : 2 * n]
        phi = act(h)
        dh = -scale * (W @ phi)
        dlam = scale * deriv(h) * (WT @ lam)
        dg = scale * np.outer(lam, phi).ravel()
        return np.concatenate([dh, dlam, dg])

    y0 = np.concatenate([h_T, lam_T, np.zeros(n * n)])
    T = cfg.horizon
    if s.method == "euler":
        _, states = _fixed_grid_solve(rhs, y0, T, s.steps, _resnet_step)
        y_end = states[-1]
    elif s.method == "rk4":
        _, states = _fixed_grid_solve(rhs, y0, T, s.steps, _rk4_step)
        y_end = states[-1]
    else:
        _, states, _ = _dopri5(rhs, y0, T, s.rel_tol, s.abs_tol, s.max_steps)
        y_end = states[-1]
    return {
        "h0": y_end[:n],
        "lambda0": y_end[n : 2 * n],
        "g0": y_end[2 * n :].reshape(n, n),
    }


def discretize_resnet_forward(cfg: ModelConfig, p: Params, x, L: int) -> np.ndarray:
    """States h^0 .. h^L of the depth-L residual network, one row per layer.

    Identical recurrence (and identical floating point) to the Euler solve.
    """
    if L < 1:
        raise ConfigError("depth L must be >= 1")
    f = _field(cfg, p)
    dt = cfg.horizon / L
    h = initial_state(cfg, p, x)
    states = np.empty((L + 1, cfg.n))
    states[0] = h
    for i in range(L):
        h = _resnet_step(f, h, dt)
        states[i + 1] = h
    return states


def forward_terminal_states(cfg: ModelConfig, p: Params, X, s: SolverSpec) -> np.ndarray:
    """Terminal hidden states for every row of X, stacked as columns (n, N).

    Fixed-step methods evolve the whole batch with matrix products; the
    adaptive method falls back to one solve per input.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.d:
        raise ShapeError(f"X must be (N, {cfg.d}), got {X.shape}")
    if s.method == "adaptive":
        cols = [solve_forward(cfg, p, row, s).terminal_state for row in X]
        return np.stack(cols, axis=1)
    H = initial_state(cfg, p, X.T)
    f = _field(cfg, p)
    dt = cfg.horizon / s.steps
    stepper = _resnet_step if s.method == "euler" else _rk4_step
    for _ in range(s.steps):
        H = stepper(f, H, dt)
    return H


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Write ``t, state_0, ..., state_{n-1}`` rows for debugging."""
    n = traj.states.shape[1]
    header = "t," + ",".join(f"state_{i}" for i in range(n))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t, row in zip(traj.times, traj.states):
            fh.write("%.17g," % t + ",".join("%.17g" % v for v in row) + "\n")
