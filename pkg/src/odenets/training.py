"""Full-batch gradient descent with spectral and distance diagnostics.

The loss is the summed squared error ``L = 0.5 ||u - y||^2`` over the
dataset, minimized by plain gradient descent. Each step can record the
smallest eigenvalue of a kernel Gram matrix (empirical NTK or the
readout-feature Gram) and the parameter distance from initialization,
which together drive the exponential-decay audit
``loss_k <= (1 - eta lambda0 / 16)^k loss_0``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, DivergenceError, DomainError
from .gradients import grad_adjoint
from .kernels import gram, min_eig
from .model import Grads, ModelConfig, Params, init_params, param_distance, readout
from .solvers import SolverSpec, forward_terminal_states

__all__ = [
    "TrainHistory",
    "lr_bound",
    "gd_step",
    "train",
    "convergence_audit",
    "distance_audit",
    "history_to_csv",
]


@dataclass
class TrainHistory:
    """Per-step training records plus run metadata.

    Every record is (step, loss, residual, lambda_min, param_distance,
    wall_ms); lambda_min is NaN on steps where the Gram diagnostic was
    skipped. ``loss == 0.5 * residual**2`` at every record.
    """

    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    lambda_min: list = field(default_factory=list)
    param_distance: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, step, loss, residual, lam, dist, wall):
        self.steps.append(int(step))
        self.loss.append(float(loss))
        self.residual.append(float(residual))
        self.lambda_min.append(float(lam))
        self.param_distance.append(float(dist))
        self.wall_ms.append(float(wall))

    def summary(self) -> dict:
        lam = [v for v in self.lambda_min if not math.isnan(v)]
        return {
            "steps": self.steps[-1] if self.steps else 0,
            "initial_loss": self.loss[0] if self.loss else None,
            "final_loss": self.loss[-1] if self.loss else None,
            "max_param_distance": max(self.param_distance, default=0.0),
            "min_lambda_min": min(lam) if lam else None,
            "meta": self.meta,
        }


def lr_bound(ds: Dataset) -> float:
    """1 / s_max(X)^2, the largest learning rate the analysis allows."""
    if ds.X.size == 0:
        raise DomainError("empty dataset")
    s_max = float(np.linalg.svd(ds.X, compute_uv=False)[0])
    return 1.0 / (s_max * s_max)


def _pipeline_solver(pipeline) -> SolverSpec:
    kind, arg = pipeline
    if kind == "discrete":
        return SolverSpec(method="euler", steps=int(arg))
    return arg if isinstance(arg, SolverSpec) else SolverSpec(**arg)


def _outputs(cfg: ModelConfig, p: Params, X, pipeline) -> np.ndarray:
    H = forward_terminal_states(cfg, p, X, _pipeline_solver(pipeline))
    return np.atleast_1d(readout(cfg, p, H))


def _residual_and_grad_discrete(cfg, p, X, y, L):
    """Residual vector and the residual-weighted gradient sum, one forward.

    Stores all layer states (L x n x N) and reduces the shared-weight block
    with a single matrix product over the stacked (layer, example) axis.
    """
    n, N = cfg.n, X.shape[0]
    kappa = cfg.horizon / L
    w_scale = cfg.sigma_w / math.sqrt(n)
    act, deriv = cfg.act.value, cfg.act.derivative
    W, WT = p.W, p.W.T

    H = np.empty((L + 1, n, N))
    H[0] = (cfg.sigma_u / math.sqrt(cfg.d)) * (p.U @ X.T)
    for ell in range(L):
        H[ell + 1] = H[ell] + (kappa * w_scale) * (W @ act(H[ell]))

    phi_T = act(H[L])
    outputs = (cfg.sigma_v / math.sqrt(n)) * (p.v @ phi_T)
    coeffs = outputs - y

    dv = (cfg.sigma_v / math.sqrt(n)) * (phi_T @ coeffs)
    # Per-example sensitivities, already weighted by the residuals.
    A = (cfg.sigma_v / math.sqrt(n)) * deriv(H[L]) * (p.v[:, None] * coeffs[None, :])
    A_stack = np.empty((L, n, N))
    for ell in range(L, 0, -1):
        A_stack[ell - 1] = A
        A = A + (kappa * w_scale) * deriv(H[ell - 1]) * (WT @ A)
    big_a = A_stack.transpose(1, 0, 2).reshape(n, L * N)
    big_phi = act(H[:L]).transpose(1, 0, 2).reshape(n, L * N)
    dW = (kappa * w_scale) * (big_a @ big_phi.T)
    dU = (cfg.sigma_u / math.sqrt(cfg.d)) * (A @ X)
    return coeffs, Grads(dU=dU, dW=dW, dv=dv)


def _residual_and_grad(cfg, p, X, y, pipeline):
    kind, arg = pipeline
    if kind == "discrete":
        return _residual_and_grad_discrete(cfg, p, X, y, int(arg))
    spec = _pipeline_solver(pipeline)
    outputs = _outputs(cfg, p, X, pipeline)
    coeffs = outputs - y
    total = Grads.zeros(cfg)
    for i in range(X.shape[0]):  # fixed example order for determinism
        if coeffs[i] == 0.0:
            continue
        total.add_scaled(grad_adjoint(cfg, p, X[i], spec), coeffs[i])
    return coeffs, total


def gd_step(
    cfg: ModelConfig, p: Params, ds: Dataset, eta: float, pipeline=("discrete", 64)
) -> tuple[Params, dict]:
    """One full-batch step p' = p - eta sum_i (f(x_i) - y_i) grad f(x_i)."""
    if not (eta >= 0):
        raise ConfigError("eta must be nonnegative")
    if eta == 0.0:
        outputs = _outputs(cfg, p, ds.X, pipeline)
        resid = outputs - ds.y
        return p, {
            "loss": 0.5 * float(resid @ resid),
            "residual": float(np.linalg.norm(resid)),
        }
    resid, g = _residual_and_grad(cfg, p, ds.X, ds.y, pipeline)
    loss = 0.5 * float(resid @ resid)
    p_new = Params(p.U - eta * g.dU, p.W - eta * g.dW, p.v - eta * g.dv)
    return p_new, {
        "loss": loss,
        "residual": float(np.linalg.norm(resid)),
        "grad_norm": g.norm(),
    }


def train(
    cfg: ModelConfig,
    ds: Dataset,
    steps: int,
    eta: float,
    diagnostics=("ntk",),
    pipeline=("discrete", 64),
    *,
    eval_every: int = 5,
    enforce_lr_guard: bool = False,
    params: Params | None = None,
) -> TrainHistory:
    """Run gradient descent, recording loss and diagnostics per step.

    ``diagnostics`` may contain "ntk" (empirical NTK Gram) or "nngp" (the
    rank-<=n readout-feature Gram); the chosen Gram's smallest eigenvalue
    lands in the lambda_min column every ``eval_every`` steps. Raises
    :class:`DivergenceError` if the loss leaves the finite range.
    """
    if enforce_lr_guard and eta > lr_bound(ds) * (1 + 1e-12):
        raise ConfigError("eta exceeds lr_bound and the guard flag is on")
    diag = set(diagnostics or ())
    unknown = diag - {"ntk", "nngp"}
    if unknown:
        raise ConfigError(f"unknown diagnostics {sorted(unknown)}")
    if "ntk" in diag and "nngp" in diag:
        raise ConfigError("choose one Gram diagnostic for the lambda_min column")

    p0 = params if params is not None else init_params(cfg)
    p = p0
    hist = TrainHistory(
        meta={
            "n": cfg.n,
            "N": ds.X.shape[0],
            "eta": eta,
            "pipeline": str(pipeline),
            "activation": cfg.activation,
            "diagnostics": sorted(diag),
        }
    )
    t_start = time.perf_counter()

    def lambda_now() -> float:
        if "ntk" in diag:
            return min_eig(gram(cfg, ds.X, "empirical-ntk", p=p, pipeline=pipeline))
        if "nngp" in diag:
            return min_eig(gram(cfg, ds.X, "empirical-nngp", p=p))
        return math.nan

    for k in range(steps + 1):
        if k == steps:
            outputs = _outputs(cfg, p, ds.X, pipeline)
            resid_vec, g = outputs - ds.y, None
        else:
            resid_vec, g = _residual_and_grad(cfg, p, ds.X, ds.y, pipeline)
        resid = float(np.linalg.norm(resid_vec))
        loss = 0.5 * resid * resid
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {k}", step=k)
        lam = lambda_now() if (diag and k % eval_every == 0) else math.nan
        wall = (time.perf_counter() - t_start) * 1e3
        hist.append(k, loss, resid, lam, param_distance(p, p0), wall)
        if g is not None:
            p = Params(p.U - eta * g.dU, p.W - eta * g.dW, p.v - eta * g.dv)
    return hist


def convergence_audit(h: TrainHistory, lambda0: float, eta: float) -> dict:
    """Check recorded losses against (1 - eta lambda0 / 16)^k loss_0.

    Also reports the empirically fitted geometric rate and the tighter
    residual-style rate (1 - eta lambda0 / 8) for reference.
    """
    if not (lambda0 > 0):
        raise ConfigError("lambda0 must be positive")
    if not (eta * lambda0 < 16):
        raise ConfigError("eta * lambda0 must be below 16")
    rate16 = 1.0 - eta * lambda0 / 16.0
    rate8 = 1.0 - eta * lambda0 / 8.0
    loss0 = h.loss[0]
    first_violation = None
    worst_margin = math.inf
    for k, loss in zip(h.steps, h.loss):
        bound = (rate16**k) * loss0
        margin = bound - loss
        worst_margin = min(worst_margin, margin)
        if loss > bound * (1 + 1e-12) and first_violation is None:
            first_violation = k
    positive = [(k, v) for k, v in zip(h.steps, h.loss) if v > 0]
    fitted = math.nan
    if len(positive) >= 2:
        ks = np.array([k for k, _ in positive], dtype=float)
        ls = np.log([v for _, v in positive])
        slope = np.polyfit(ks, ls, 1)[0]
        fitted = float(math.exp(slope))
    return {
        "passes": first_violation is None,
        "first_violation": first_violation,
        "worst_margin": worst_margin,
        "bound_rate_16": rate16,
        "reference_rate_8": rate8,
        "fitted_rate": fitted,
    }


def distance_audit(h: TrainHistory, bound: float) -> dict:
    """Compare the parameter-distance profile against a supplied bound."""
    dists = np.asarray(h.param_distance, dtype=np.float64)
    max_dist = float(dists.max(initial=0.0))
    growth = np.diff(dists) if dists.size > 1 else np.array([])
    return {
        "max_distance": max_dist,
        "bound": bound,
        "within_bound": max_dist <= bound,
        "monotone_fraction": float(np.mean(growth >= -1e-12)) if growth.size else 1.0,
        "final_distance": float(dists[-1]) if dists.size else 0.0,
    }


def history_to_csv(h: TrainHistory, path) -> None:
    """Stream records as step, loss, residual, lambda_min, param_distance, wall_ms."""
    with open(path, "w") as fh:
        fh.write("step,loss,residual,lambda_min,param_distance,wall_ms\n")
        for row in zip(h.steps, h.loss, h.residual, h.lambda_min,
                       h.param_distance, h.wall_ms):
            fh.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g\n" % row)


def history_summary_json(h: TrainHistory) -> str:
    return json.dumps(h.summary(), indent=2, default=str)
