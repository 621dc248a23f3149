"""Depth-recursion kernel tables, Gram matrices, and SPD diagnostics.

For a depth-L residual discretization of the model, the infinite-width
forward covariances satisfy

    C[0,0]   = sigma_u^2 <x, xbar> / d,       C[0,k] = C[l,0] = 0 otherwise
    C[l,k]   = sigma_w^2 E[phi(u^{l-1}) phi(ubar^{k-1})]
    S[l,k]   = E[u^l ubar^k] = C[0,0] + kappa^2 sum_{i<=l, j<=k, i,j>=1} C[i,j]

with kappa = T/L and (u^l, ubar^k) centered Gaussians. The depth-L NNGP
kernel is ``C[L+1, L+1]``; it converges at rate 1/L as L grows.

The NTK adds backward factors D[l,k]: the width limits of the hidden-state
sensitivity inner products <df/dh^l(x), df/dh^k(xbar)>, rescaled by
sigma_w^2/sigma_v^2 so the boundary value is sigma-w-only:

    D[L,k] = D[l,L] = sigma_w^2 Edot[L,L]
    D[l,k] = sigma_w^2 Edot[L,L]
             + kappa^2 sigma_w^2 sum_{i>l, j>k} Edot[i-1, j-1] D[i,j]

where ``Edot[i,j] = E[phi'(u^i) phi'(ubar^j)]``, and the depth-L NTK is

    K_L = (sigma_v/sigma_w)^2 * ( C[L+1,L+1]
          + kappa^2 sum_{l,k=1..L} C[l,k] D[l,k] + C[0,0] D[0,0] ).

``K_L`` is the exact width-limit of the depth-L gradient inner product:
the terminal sensitivity propagates additively through every residual
layer, so the interior recursion carries the boundary term in each entry,
and each correction pairs ``D[i,j]`` with the derivative covariance one
level below, ``Edot[i-1, j-1]``. The suffix-sum dynamic program evaluates
it in O(L^2); ``ntk_d_naive`` is the direct-sum reference.

Expectations use closed forms where exact ones exist (identity, quadratic,
relu) and otherwise the Mehler expansion
``E[phi(u) phi(ubar)] = sum_m a_m(sd_u) a_m(sd_ubar) rho^m`` in normalized
Hermite coefficients, which vectorizes across whole table rows and stays
stable at rho = +-1. The expansion is cross-checked against the
Gauss-Hermite quadrature duals in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .activations import (
    Activation,
    CLOSED_FORM_IDS,
    closed_form_pair_expectation,
    get_activation,
    hermite_coeffs,
    nonpoly_witness,
)
from .errors import ConfigError, DomainError, NumericError, SequencingError
from .gradients import grad_adjoint, grad_discrete
from .model import ModelConfig, init_params, readout
from .solvers import SolverSpec, forward_terminal_states

__all__ = [
    "KernelTables",
    "GramMatrix",
    "nngp_tables",
    "ntk_tables",
    "ntk_d_naive",
    "kernel_limit_extrapolate",
    "s_star_checks",
    "empirical_ntk",
    "empirical_nngp",
    "gram",
    "min_eig",
    "spd_witness",
    "gram_to_csv",
]

_DEFAULT_TERMS = 96


@dataclass
class KernelTables:
    """Recursion tables for one input pair at depth L."""

    L: int
    kappa: float
    C: np.ndarray            # (L+2, L+2); C[0,0] holds the input covariance
    S: np.ndarray            # (L+1, L+1); running covariances E[u^l ubar^k]
    var_a: np.ndarray        # (L+1,) diagonal variances of u^l
    var_b: np.ndarray        # (L+1,) diagonal variances of ubar^k
    D: np.ndarray | None = None
    ntk: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def nngp(self) -> float:
        return float(self.C[self.L + 1, self.L + 1])


@dataclass
class GramMatrix:
    """An N x N kernel matrix with provenance metadata."""

    values: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise DomainError("Gram matrix must be square")
        scale = max(1.0, float(np.max(np.abs(self.values), initial=0.0)))
        asym = float(np.max(np.abs(self.values - self.values.T), initial=0.0))
        if asym > 1e-10 * scale:
            raise DomainError(f"Gram matrix asymmetric beyond tolerance ({asym:.3g})")


# ---------------------------------------------------------------------------
# batched dual evaluation


class _DualSide:
    """Per-level dual-expansion data for one input of a pair."""

    def __init__(self, act: Activation, levels: int, n_terms: int):
        self.act = act
        self.n_terms = n_terms
        self.closed = act.id in CLOSED_FORM_IDS
        self.var = np.zeros(levels)
        if not self.closed:
            self.A = np.zeros((levels, n_terms))
            self.Ap = np.zeros((levels, n_terms))

    def set_level(self, m: int, variance: float) -> None:
        self.var[m] = variance
        if not self.closed:
            std = math.sqrt(max(variance, 1e-300))
            self.A[m] = hermite_coeffs(self.act, std, self.n_terms)
            self.Ap[m] = hermite_coeffs(self.act, std, self.n_terms, derivative=True)


def _rho_powers(rho: np.ndarray, n_terms: int) -> np.ndarray:
    """[1, rho, rho^2, ...] along a new trailing axis."""
    out = np.ones(rho.shape + (n_terms,))
    out[..., 1:] = rho[..., None]
    np.cumprod(out, axis=-1, out=out)
    return out


def _dual_row(
    side_a: _DualSide,
    level_a: int,
    side_b: _DualSide,
    levels_b: np.ndarray,
    s_vals: np.ndarray,
    *,
    derivative: bool,
) -> np.ndarray:
    """E[f(u^level_a) f(ubar^k)] over k in ``levels_b``.

    ``s_vals`` holds the covariances E[u^level_a ubar^k] with the k axis
    last; leading axes batch over input pairs. ``f`` is phi or phi'.
    """
    va = side_a.var[level_a]
    vb = side_b.var[levels_b]
    act = side_a.act
    if side_a.closed:
        return closed_form_pair_expectation(
            act.id, va, vb, s_vals, derivative=derivative
        )
    root = np.sqrt(np.maximum(va * vb, 1e-300))
    rho = np.clip(s_vals / root, -1.0, 1.0)
    coeff_a = (side_a.Ap if derivative else side_a.A)[level_a]
    coeff_b = (side_b.Ap if derivative else side_b.A)[levels_b]
    weights = coeff_a[None, :] * coeff_b  # (K, M)
    powers = _rho_powers(rho, side_a.n_terms)
    return np.einsum("km,...km->...k", weights, powers)


# ---------------------------------------------------------------------------
# table sweeps


def _diag_tables(cfg: ModelConfig, c0: float, L: int, n_terms: int):
    """Full (x, x) tables via the growing-square recursion.

    The level variance var[m] = S[m, m] feeds the dual evaluators and only
    becomes available once the m x m square is complete, so the sweep grows
    the square one border at a time.
    """
    kappa2 = (cfg.horizon / L) ** 2
    sw2 = cfg.sigma_w**2
    S = np.zeros((L + 1, L + 1))
    C = np.zeros((L + 2, L + 2))
    C[0, 0] = c0
    S[0, 0] = c0
    side = _DualSide(cfg.act, L + 1, n_terms)
    side.set_level(0, c0)
    for m in range(1, L + 2):
        kmax = min(m, L + 1)
        ks = np.arange(1, kmax + 1)
        row = sw2 * _dual_row(side, m - 1, side, ks - 1, S[m - 1, ks - 1],
                              derivative=False)
        C[m, 1 : kmax + 1] = row
        C[1 : kmax + 1, m] = row
        if m <= L:
            csum = kappa2 * np.cumsum(C[m, 1 : m + 1])
            S[m, 0] = c0
            if m > 1:
                S[m, 1:m] = S[m - 1, 1:m] + csum[: m - 1]
            # S[m-1, m] = S[m, m-1] by symmetry of the same-input table.
            S[m, m] = S[m, m - 1] + csum[m - 1]
            S[0:m, m] = S[m, 0:m]
            side.set_level(m, S[m, m])
    return S, C, side


def _pair_sweep(
    cfg: ModelConfig,
    L: int,
    c0_ab: np.ndarray,
    side_a: _DualSide,
    side_b: _DualSide,
    *,
    want_ntk: bool,
    keep_tables: bool = False,
):
    """Row-major C/S sweep (and optional D sweep) batched over pairs.

    ``c0_ab`` is a vector of input covariances (one per pair). Returns a
    dict with ``nngp`` (P,), optionally ``ntk`` (P,), and the tables of the
    final pair when ``keep_tables`` is set.
    """
    c0_ab = np.atleast_1d(np.asarray(c0_ab, dtype=np.float64))
    P = c0_ab.size
    kappa2 = (cfg.horizon / L) ** 2
    sw2 = cfg.sigma_w**2
    cols = np.arange(1, L + 2)
    S = np.zeros((P, L + 1, L + 1))
    S[:, 0, :] = c0_ab[:, None]
    S[:, :, 0] = c0_ab[:, None]
    C = np.zeros((P, L + 2, L + 2))
    C[:, 0, 0] = c0_ab
    for ell in range(1, L + 2):
        row = sw2 * _dual_row(side_a, ell - 1, side_b, cols - 1,
                              S[:, ell - 1, cols - 1], derivative=False)
        C[:, ell, 1:] = row
        if ell <= L:
            csum = kappa2 * np.cumsum(C[:, ell, 1 : L + 1], axis=-1)
            S[:, ell, 1:] = S[:, ell - 1, 1:] + csum
    nngp = C[:, L + 1, L + 1].copy()
    out = {"nngp": nngp}
    if keep_tables:
        out["C"] = C[-1]
        out["S"] = S[-1]
    if not want_ntk:
        return out

    # Derivative covariances Edot[l, k] for l, k in 0..L.
    lev = np.arange(L + 1)
    edot = np.empty((P, L + 1, L + 1))
    for ell in range(L + 1):
        edot[:, ell, :] = _dual_row(side_a, ell, side_b, lev, S[:, ell, :],
                                    derivative=True)

    d_ll = sw2 * edot[:, L, L]
    # Suffix-sum DP: M[l, k] = sum_{i>l, j>k} Edot[i-1, j-1] D[i, j].
    # acc accumulates sum_{l,k=1..L} C[l,k] D[l,k] row by row.
    acc = np.sum(C[:, L, 1 : L + 1], axis=-1) * d_ll
    D_full = np.full((L + 1, L + 1), np.nan) if keep_tables else None
    if keep_tables:
        D_full[L, :] = d_ll[-1]
        D_full[:, L] = d_ll[-1]
    g = edot[:, L - 1, 0:L] * d_ll[:, None]
    M_row = np.flip(np.cumsum(np.flip(g, -1), -1), -1)  # M[L-1, k], k = 0..L-1
    for ell in range(L - 1, 0, -1):
        D_ell = np.empty((P, L + 1))
        D_ell[:, L] = d_ll
        D_ell[:, 0:L] = d_ll[:, None] + kappa2 * sw2 * M_row
        acc += np.sum(C[:, ell, 1 : L + 1] * D_ell[:, 1 : L + 1], axis=-1)
        if keep_tables:
            D_full[ell, :] = D_ell[-1]
        g = edot[:, ell - 1, 0:L] * D_ell[:, 1 : L + 1]
        M_row = M_row + np.flip(np.cumsum(np.flip(g, -1), -1), -1)
    d00 = d_ll + kappa2 * sw2 * M_row[:, 0]
    if keep_tables:
        D_full[0, 0:L] = (d_ll[-1] + kappa2 * sw2 * M_row[-1])[0:L]
    ratio = (cfg.sigma_v / cfg.sigma_w) ** 2
    out["ntk"] = ratio * (nngp + kappa2 * acc + c0_ab * d00)
    if keep_tables:
        out["D"] = D_full
    return out


def _input_cov(cfg: ModelConfig, x, xbar) -> tuple[float, float, float]:
    x = np.asarray(x, dtype=np.float64)
    xbar = np.asarray(xbar, dtype=np.float64)
    if x.shape != (cfg.d,) or xbar.shape != (cfg.d,):
        raise DomainError(f"inputs must be length-{cfg.d} vectors")
    if not (np.linalg.norm(x) > 0 and np.linalg.norm(xbar) > 0):
        raise DomainError("inputs must be nonzero")
    scale = cfg.sigma_u**2 / cfg.d
    return (
        scale * float(x @ x),
        scale * float(xbar @ xbar),
        scale * float(x @ xbar),
    )


def nngp_tables(
    cfg: ModelConfig, x, xbar, L: int, *, n_terms: int = _DEFAULT_TERMS
) -> KernelTables:
    """C and S tables for the pair (x, xbar) at depth L."""
    if L < 1:
        raise ConfigError("depth L must be >= 1")
    c_aa, c_bb, c_ab = _input_cov(cfg, x, xbar)
    _, _, side_a = _diag_tables(cfg, c_aa, L, n_terms)
    if abs(c_bb - c_aa) <= 1e-14 * max(c_aa, c_bb):
        side_b = side_a
    else:
        _, _, side_b = _diag_tables(cfg, c_bb, L, n_terms)
    res = _pair_sweep(cfg, L, np.array([c_ab]), side_a, side_b,
                      want_ntk=False, keep_tables=True)
    return KernelTables(
        L=L,
        kappa=cfg.horizon / L,
        C=res["C"],
        S=res["S"],
        var_a=side_a.var.copy(),
        var_b=side_b.var.copy(),
        meta={"activation": cfg.activation, "sigmas": (cfg.sigma_u, cfg.sigma_w,
                                                       cfg.sigma_v), "T": cfg.horizon},
    )


def ntk_tables(
    cfg: ModelConfig,
    x,
    xbar,
    L: int,
    *,
    tables: KernelTables | None = None,
    n_terms: int = _DEFAULT_TERMS,
) -> KernelTables:
    """D table and the depth-L NTK value for the pair (x, xbar).

    Pass ``tables`` from :func:`nngp_tables` to reuse the C/S stage; it
    must belong to the same inputs and depth.
    """
    if tables is None:
        tables = nngp_tables(cfg, x, xbar, L, n_terms=n_terms)
    if tables.C is None or tables.S is None:
        raise SequencingError("ntk_tables requires C and S tables")
    if tables.L != L:
        raise SequencingError(f"tables were built at L={tables.L}, not {L}")
    c_aa, c_bb, c_ab = _input_cov(cfg, x, xbar)
    if abs(tables.C[0, 0] - c_ab) > 1e-12 * max(1.0, abs(c_ab)):
        raise SequencingError("tables belong to a different input pair")
    _, _, side_a = _diag_tables(cfg, c_aa, L, n_terms)
    if abs(c_bb - c_aa) <= 1e-14 * max(c_aa, c_bb):
        side_b = side_a
    else:
        _, _, side_b = _diag_tables(cfg, c_bb, L, n_terms)
    res = _pair_sweep(cfg, L, np.array([c_ab]), side_a, side_b,
                      want_ntk=True, keep_tables=True)
    tables.D = res["D"]
    tables.ntk = float(res["ntk"][0])
    return tables


def ntk_d_naive(tables: KernelTables, cfg: ModelConfig) -> tuple[np.ndarray, float]:
    """Direct-sum reference for the D recursion and the NTK value.

    Evaluates every interior entry by its explicit double sum (O(L^4)
    total); used to validate the suffix-sum dynamic program at small L.
    """
    if tables.S is None:
        raise SequencingError("naive D needs S tables")
    L = tables.L
    sw2 = cfg.sigma_w**2
    kappa2 = tables.kappa**2

    act = cfg.act
    side_a = _DualSide(act, L + 1, _DEFAULT_TERMS)
    side_b = _DualSide(act, L + 1, _DEFAULT_TERMS)
    for m in range(L + 1):
        side_a.set_level(m, tables.var_a[m])
        side_b.set_level(m, tables.var_b[m])
    edot = np.empty((L + 1, L + 1))
    lev = np.arange(L + 1)
    for ell in range(L + 1):
        edot[ell, :] = _dual_row(side_a, ell, side_b, lev, tables.S[ell, :],
                                 derivative=True)

    D = np.empty((L + 1, L + 1))
    d_ll = sw2 * edot[L, L]
    D[L, :] = d_ll
    D[:, L] = d_ll
    for ell in range(L - 1, -1, -1):
        for k in range(L - 1, -1, -1):
            total = 0.0
            for i in range(ell + 1, L + 1):
                for j in range(k + 1, L + 1):
                    total += edot[i - 1, j - 1] * D[i, j]
            D[ell, k] = d_ll + kappa2 * sw2 * total
    core = tables.nngp + kappa2 * float(
        np.sum(tables.C[1 : L + 1, 1 : L + 1] * D[1 : L + 1, 1 : L + 1])
    ) + tables.C[0, 0] * D[0, 0]
    ratio = (cfg.sigma_v / cfg.sigma_w) ** 2
    return D, ratio * core


def kernel_limit_extrapolate(
    cfg: ModelConfig,
    x,
    xbar,
    L_list,
    kind: str = "nngp",
    *,
    n_terms: int = _DEFAULT_TERMS,
) -> dict:
    """Depth sweep with Richardson extrapolation of the deep limit.

    With a 1/L convergence rate, ``val(2L) + (val(2L) - val(L))`` cancels
    the leading error term; consecutive gaps should shrink roughly in
    proportion to the depth ratio.
    """
    L_list = [int(L) for L in L_list]
    if len(L_list) < 3:
        raise ConfigError("need at least 3 depths")
    if any(b <= a for a, b in zip(L_list, L_list[1:])):
        raise ConfigError("depths must be strictly increasing")
    if kind not in ("nngp", "ntk"):
        raise ConfigError(f"kind must be 'nngp' or 'ntk', not {kind!r}")
    values = {}
    for L in L_list:
        if kind == "nngp":
            values[L] = nngp_tables(cfg, x, xbar, L, n_terms=n_terms).nngp
        else:
            values[L] = ntk_tables(cfg, x, xbar, L, n_terms=n_terms).ntk
    vals = [values[L] for L in L_list]
    gaps = [abs(b - a) for a, b in zip(vals, vals[1:])]
    ratios = [b / a if a > 0 else math.nan for a, b in zip(gaps, gaps[1:])]
    warning = None
    if len(gaps) >= 2 and any(b > a * 1.05 for a, b in zip(gaps, gaps[1:])):
        warning = "gaps are not shrinking; depth sequence may be diverging"
    # Richardson step from the last two depths.
    extrapolated = vals[-1] + (vals[-1] - vals[-2]) * (
        L_list[-2] / (L_list[-1] - L_list[-2])
    )
    return {
        "kind": kind,
        "values": values,
        "cauchy_gaps": gaps,
        "gap_ratios": ratios,
        "extrapolated": float(extrapolated),
        "warning": warning,
    }


def s_star_checks(cfg: ModelConfig, X, L: int, *, n_terms: int = _DEFAULT_TERMS) -> dict:
    """Diagonal equality and strict diagonal dominance of the S table.

    Requires unit-norm rows; checks S[L,L](x_i, x_i) equal across i within
    1e-8 and S[L,L](x_i, x_i) > S[L,L](x_i, x_j) for all i != j.
    """
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-9):
        raise DomainError("s_star_checks requires unit-norm inputs")
    N = X.shape[0]
    diag_vals = []
    for i in range(N):
        t = nngp_tables(cfg, X[i], X[i], L, n_terms=n_terms)
        diag_vals.append(t.S[L, L])
    diag_vals = np.array(diag_vals)
    diag_spread = float(np.max(diag_vals) - np.min(diag_vals))
    min_gap = math.inf
    for i in range(N):
        for j in range(i + 1, N):
            t = nngp_tables(cfg, X[i], X[j], L, n_terms=n_terms)
            gap = min(diag_vals[i], diag_vals[j]) - t.S[L, L]
            min_gap = min(min_gap, float(gap))
    return {
        "diag_values": diag_vals,
        "diag_spread": diag_spread,
        "diag_equal": diag_spread <= 1e-8,
        "min_offdiag_gap": min_gap,
        "strict_dominance": (min_gap > 0) if N > 1 else True,
    }


# ---------------------------------------------------------------------------
# empirical kernels


def _parse_pipeline(pipeline):
    if isinstance(pipeline, tuple) and len(pipeline) == 2:
        name, arg = pipeline
        if name == "adjoint":
            spec = arg if isinstance(arg, SolverSpec) else SolverSpec(**arg)
            return ("adjoint", spec)
        if name == "discrete":
            return ("discrete", int(arg))
    raise ConfigError(
        "pipeline must be ('adjoint', SolverSpec) or ('discrete', L), "
        f"got {pipeline!r}"
    )


def gradient_for(cfg: ModelConfig, p, x, pipeline):
    """Model gradient at one input via the chosen pipeline."""
    name, arg = _parse_pipeline(pipeline)
    if name == "adjoint":
        return grad_adjoint(cfg, p, x, arg)
    return grad_discrete(cfg, p, x, arg)


def empirical_ntk(cfg: ModelConfig, p, x, xbar, pipeline=("discrete", 128)) -> float:
    """<grad f(x), grad f(xbar)> with both gradients from one pipeline."""
    g1 = gradient_for(cfg, p, x, pipeline)
    x = np.asarray(x)
    xbar = np.asarray(xbar)
    if np.array_equal(x, xbar):
        return g1.dot(g1)
    g2 = gradient_for(cfg, p, xbar, pipeline)
    return g1.dot(g2)


def empirical_nngp(
    cfg: ModelConfig, seeds, X, solver: SolverSpec | None = None
) -> GramMatrix:
    """Sample covariance of outputs f(x_i) across independent models."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("empirical_nngp needs at least 2 seeds")
    X = np.asarray(X, dtype=np.float64)
    solver = solver or SolverSpec(method="rk4", steps=64)
    outs = np.empty((len(seeds), X.shape[0]))
    for r, seed in enumerate(seeds):
        cfg_r = ModelConfig(
            n=cfg.n, d=cfg.d, horizon=cfg.horizon, sigma_u=cfg.sigma_u,
            sigma_w=cfg.sigma_w, sigma_v=cfg.sigma_v,
            activation=cfg.activation, seed=int(seed),
        )
        p = init_params(cfg_r)
        H = forward_terminal_states(cfg_r, p, X, solver)
        outs[r] = readout(cfg_r, p, H)
    values = np.cov(outs, rowvar=False, ddof=1)
    values = np.atleast_2d(values)
    return GramMatrix(
        values=values,
        kind="empirical-nngp",
        meta={"estimator": "seed-covariance", "seeds": len(seeds), "n": cfg.n},
    )


def _limit_gram(cfg: ModelConfig, X, L: int, want_ntk: bool, n_terms: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    scale = cfg.sigma_u**2 / cfg.d
    norms2 = np.einsum("ij,ij->i", X, X)
    values = np.empty((N, N))
    uniform = np.allclose(norms2, norms2[0], rtol=1e-12, atol=1e-12)
    if not uniform:
        # Mixed norms: per-pair tables (slow path, small N expected).
        for i in range(N):
            for j in range(i, N):
                if want_ntk:
                    t = ntk_tables(cfg, X[i], X[j], L, n_terms=n_terms)
                    values[i, j] = values[j, i] = t.ntk
                else:
                    t = nngp_tables(cfg, X[i], X[j], L, n_terms=n_terms)
                    values[i, j] = values[j, i] = t.nngp
        return values
    c0_diag = scale * norms2[0]
    _, _, side = _diag_tables(cfg, c0_diag, L, n_terms)
    iu, ju = np.triu_indices(N)
    c0_ab = scale * np.einsum("ij,ij->i", X[iu], X[ju])
    key = "ntk" if want_ntk else "nngp"
    # Chunk the pair batch to bound table memory.
    chunk = max(1, int(2.5e8 / (3 * 8 * (L + 2) ** 2)))
    flat = np.empty(c0_ab.size)
    for start in range(0, c0_ab.size, chunk):
        sl = slice(start, min(start + chunk, c0_ab.size))
        res = _pair_sweep(cfg, L, c0_ab[sl], side, side, want_ntk=want_ntk)
        flat[sl] = res[key]
    values[iu, ju] = flat
    values[ju, iu] = flat
    return values


def gram(cfg: ModelConfig, X, kind: str, **kw) -> GramMatrix:
    """Assemble the N x N kernel matrix of the requested kind.

    limit kinds take ``L`` (and optional ``n_terms``); ``empirical-ntk``
    takes ``p`` and ``pipeline``; ``empirical-nngp`` takes ``p`` and an
    optional ``solver`` and is the readout-feature Gram
    ``sigma_v^2 phi(h_T)^T phi(h_T) / n`` of a single model (rank <= n).
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    meta = {"activation": cfg.activation, "T": cfg.horizon,
            "sigmas": (cfg.sigma_u, cfg.sigma_w, cfg.sigma_v), "N": N}
    if kind in ("nngp-limit", "ntk-limit"):
        L = int(kw.get("L", 128))
        n_terms = int(kw.get("n_terms", _DEFAULT_TERMS))
        values = _limit_gram(cfg, X, L, kind == "ntk-limit", n_terms)
        meta.update({"L": L, "kappa": cfg.horizon / L})
        return GramMatrix(values=values, kind=kind, meta=meta)
    if kind == "empirical-ntk":
        p = kw["p"]
        pipeline = kw.get("pipeline", ("discrete", 128))
        grads = [gradient_for(cfg, p, X[i], pipeline) for i in range(N)]
        values = np.empty((N, N))
        for i in range(N):
            for j in range(i, N):
                values[i, j] = values[j, i] = grads[i].dot(grads[j])
        meta.update({"n": cfg.n, "pipeline": str(pipeline)})
        return GramMatrix(values=values, kind=kind, meta=meta)
    if kind == "empirical-nngp":
        p = kw["p"]
        solver = kw.get("solver") or SolverSpec(method="rk4", steps=64)
        H = forward_terminal_states(cfg, p, X, solver)
        feats = cfg.act.value(H)  # (n, N)
        values = (cfg.sigma_v**2 / cfg.n) * (feats.T @ feats)
        meta.update({"n": cfg.n, "estimator": "readout-feature"})
        return GramMatrix(values=values, kind=kind, meta=meta)
    raise ConfigError(f"unknown gram kind {kind!r}")


def min_eig(g: GramMatrix) -> float:
    """Smallest eigenvalue by a symmetric dense eigensolver."""
    try:
        vals = scipy.linalg.eigvalsh(0.5 * (g.values + g.values.T))
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover
        raise NumericError(f"eigensolver failed: {exc}") from exc
    return float(vals[0])


def spd_witness(
    cfg: ModelConfig,
    activation: str,
    X,
    L: int = 128,
    *,
    count: int = 64,
    threshold: float = 1e-12,
) -> dict:
    """Non-polynomiality witness plus the limit-Gram spectrum on X.

    The witness expands the activation at the model's own terminal scale
    sqrt(S(x, x)); the Gram check reports the smallest eigenvalue of the
    NNGP-limit matrix. The two can disagree: polynomial activations fail
    the witness yet may still produce a positive spectrum on a finite set.
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-9):
        raise DomainError("spd_witness requires unit-norm inputs")
    cfg = ModelConfig(
        n=cfg.n, d=cfg.d, horizon=cfg.horizon, sigma_u=cfg.sigma_u,
        sigma_w=cfg.sigma_w, sigma_v=cfg.sigma_v, activation=activation,
        seed=cfg.seed,
    )
    diag = nngp_tables(cfg, X[0], X[0], L)
    input_std = math.sqrt(float(diag.S[L, L]))
    witness = nonpoly_witness(activation, input_std, count, threshold)
    g = gram(cfg, X, "nngp-limit", L=L)
    lam = min_eig(g)
    return {
        "witness": witness,
        "witness_passes": witness["passes"],
        "input_std": input_std,
        "min_eig": lam,
        "gram_spd": lam > 0,
    }


def gram_to_csv(g: GramMatrix, path) -> None:
    """CSV with input indices as row/column headers, plus a JSON meta block."""
    N = g.values.shape[0]
    with open(path, "w") as fh:
        fh.write("," + ",".join(f"x{i}" for i in range(N)) + "\n")
        for i in range(N):
            fh.write(f"x{i}," + ",".join("%.17g" % v for v in g.values[i]) + "\n")
    meta = dict(g.meta)
    meta["kind"] = g.kind
    with open(str(path) + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, default=str)
