"""Scalar activation functions and their Gaussian-expectation machinery.

Each activation knows its derivative and smoothness metadata (Lipschitz
constants of the map and of its derivative). On top of that, this module
evaluates the two bivariate Gaussian expectations that drive every kernel
recursion in :mod:`odenets.kernels`:

* ``dual_value``  -> E[phi(u) phi(ubar)]
* ``dual_deriv``  -> E[phi'(u) phi'(ubar)]

for centered jointly Gaussian ``(u, ubar)`` with a given 2x2 covariance.
Expectations are computed by tensor-product Gauss-Hermite quadrature with
Cholesky whitening; a rank-1 parameterization handles (near-)degenerate
covariances, which always occur on the diagonal of a kernel table.

``hermite_coeffs`` expands ``x -> phi(input_std * x)`` in the normalized
(probabilists') Hermite basis, and ``nonpoly_witness`` uses the trailing
coefficients as a finite-truncation witness for kernel strict positive
definiteness. The witness is evidence, not a certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, DomainError

__all__ = [
    "Activation",
    "PairCovariance",
    "get_activation",
    "activation_names",
    "eval_activation",
    "deriv_activation",
    "dual_value",
    "dual_deriv",
    "hermite_coeffs",
    "nonpoly_witness",
]

_LN2 = math.log(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Activation:
    """A scalar activation with derivative and smoothness metadata.

    ``lipschitz_l1`` bounds the map itself, ``lipschitz_l2`` bounds its
    derivative; ``math.inf`` marks an unbounded constant.
    """

    id: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    lipschitz_l1: float
    lipschitz_l2: float
    is_polynomial: bool
    zero_at_zero: bool


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out = np.where(pos, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return out


def _gauss_pdf(x):
    return np.exp(-0.5 * np.square(x)) * _INV_SQRT_2PI


# GELU uses the exact Gaussian-CDF form so that its quadrature duals and
# its pointwise derivative agree to machine precision.
_REGISTRY = {
    "softplus-shifted": Activation(
        id="softplus-shifted",
        value=lambda x: _softplus(x) - _LN2,
        derivative=_sigmoid,
        lipschitz_l1=1.0,
        lipschitz_l2=0.25,
        is_polynomial=False,
        zero_at_zero=True,
    ),
    "softplus-raw": Activation(
        id="softplus-raw",
        value=_softplus,
        derivative=_sigmoid,
        lipschitz_l1=1.0,
        lipschitz_l2=0.25,
        is_polynomial=False,
        zero_at_zero=False,
    ),
    "relu": Activation(
        id="relu",
        value=lambda x: np.maximum(x, 0.0),
        # Subgradient at 0 fixed to 0 for determinism.
        derivative=lambda x: (np.asarray(x) > 0).astype(np.float64),
        lipschitz_l1=1.0,
        lipschitz_l2=math.inf,
        is_polynomial=False,
        zero_at_zero=True,
    ),
    "gelu": Activation(
        id="gelu",
        value=lambda x: np.asarray(x) * ndtr(x),
        derivative=lambda x: ndtr(x) + np.asarray(x) * _gauss_pdf(x),
        lipschitz_l1=1.1290,   # sup |Phi(x) + x phi(x)|, attained at x = sqrt(2)
        lipschitz_l2=2.0 * _INV_SQRT_2PI,  # sup |phi(x)(2 - x^2)|, at x = 0
        is_polynomial=False,
        zero_at_zero=True,
    ),
    "tanh": Activation(
        id="tanh",
        value=np.tanh,
        derivative=lambda x: 1.0 - np.square(np.tanh(x)),
        lipschitz_l1=1.0,
        lipschitz_l2=4.0 / (3.0 * math.sqrt(3.0)),  # sup |tanh''|
        is_polynomial=False,
        zero_at_zero=True,
    ),
    "quadratic": Activation(
        id="quadratic",
        value=np.square,
        derivative=lambda x: 2.0 * np.asarray(x, dtype=np.float64),
        lipschitz_l1=math.inf,
        lipschitz_l2=2.0,
        is_polynomial=True,
        zero_at_zero=True,
    ),
    "identity": Activation(
        id="identity",
        value=lambda x: np.asarray(x, dtype=np.float64),
        derivative=lambda x: np.ones_like(np.asarray(x, dtype=np.float64)),
        lipschitz_l1=1.0,
        lipschitz_l2=0.0,
        is_polynomial=True,
        zero_at_zero=True,
    ),
}


def activation_names():
    """All registered activation ids, in registry order."""
    return tuple(_REGISTRY)


def get_activation(name: str | Activation) -> Activation:
    """Look an activation up by id (pass-through for Activation values)."""
    if isinstance(name, Activation):
        return name
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"unknown activation {name!r}; choose from {sorted(_REGISTRY)}"
        ) from None


def _check_finite(x, what):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} must be finite")
    return arr


def eval_activation(a: str | Activation, x):
    """phi(x), elementwise for array input."""
    act = get_activation(a)
    return act.value(_check_finite(x, "activation input"))


def deriv_activation(a: str | Activation, x):
    """phi'(x), elementwise; relu returns the fixed subgradient 0 at 0."""
    act = get_activation(a)
    return act.derivative(_check_finite(x, "activation input"))


@dataclass(frozen=True)
class PairCovariance:
    """Covariance of a centered bivariate Gaussian pair ``(u, ubar)``."""

    var_a: float
    var_b: float
    cov: float

    def __post_init__(self):
        for name in ("var_a", "var_b", "cov"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise DomainError(f"PairCovariance.{name} must be finite")
        if self.var_a < 0 or self.var_b < 0:
            raise DomainError("variances must be nonnegative")
        # Symmetric 2x2 PSD up to tolerance.
        if self.cov * self.cov > self.var_a * self.var_b + 1e-10:
            raise DomainError(
                "cov^2 exceeds var_a * var_b beyond tolerance: "
                f"{self.cov**2} > {self.var_a * self.var_b}"
            )


def _gh_nodes(order: int):
    """Probabilists' Gauss-Hermite nodes and expectation weights."""
    if order < 2:
        raise ConfigError(f"quadrature order must be >= 2, got {order}")
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    return nodes, weights / math.sqrt(2.0 * math.pi)


# Degenerate covariances (|rho| -> 1 or a vanishing variance) fall back to a
# rank-1 parameterization; the full 2x2 Cholesky would lose precision there.
_DEGENERATE_REL = 1e-14
_TINY_VAR = 1e-300

# Activations whose pair expectations have exact closed forms. Quadrature
# cannot reach tight tolerances across relu's kink, so these bypass it.
CLOSED_FORM_IDS = ("identity", "quadratic", "relu")


def closed_form_pair_expectation(
    act_id: str, var_a, var_b, cov, *, derivative: bool = False
):
    """Exact E[f(u) f(ubar)] for the closed-form activations, vectorized.

    ``f`` is phi (default) or phi'. identity and quadratic follow from
    Isserlis' theorem; relu is the arc-cosine kernel and the Gaussian
    orthant probability. Returns None for other activation ids.
    """
    if act_id not in CLOSED_FORM_IDS:
        return None
    cov = np.asarray(cov, dtype=np.float64)
    if act_id == "identity":
        return np.ones_like(cov) if derivative else cov.copy()
    if act_id == "quadratic":
        if derivative:
            return 4.0 * cov
        return np.asarray(var_a) * np.asarray(var_b) + 2.0 * np.square(cov)
    root = np.sqrt(np.maximum(np.asarray(var_a) * np.asarray(var_b), 0.0))
    rho = np.clip(np.divide(cov, np.where(root > 0, root, 1.0)), -1.0, 1.0)
    if derivative:
        vals = 0.25 + np.arcsin(rho) / (2.0 * math.pi)
    else:
        vals = root * (
            np.sqrt(np.maximum(1.0 - rho * rho, 0.0))
            + rho * (math.pi - np.arccos(rho))
        ) / (2.0 * math.pi)
    # A vanishing variance pins relu (and its derivative, by the 0-at-0
    # subgradient convention) at zero on that side.
    return np.where(root > 0, vals, 0.0)


def _gaussian_pair_expectation(fa, fb, c: PairCovariance, order: int):
    """E[fa(u) fb(ubar)] under the covariance ``c`` by GH quadrature.

    Expects fa == fb (both entry points use one function on both sides);
    the variances are put in canonical order so swapping var_a and var_b
    returns bit-identical results.
    """
    z, w = _gh_nodes(order)
    a, b, cov = c.var_a, c.var_b, c.cov
    if b > a:
        a, b = b, a
        fa, fb = fb, fa
    if a <= _TINY_VAR and b <= _TINY_VAR:
        return float(fa(np.zeros(1))[0] * fb(np.zeros(1))[0])
    if a <= _TINY_VAR:
        return float(fa(np.zeros(1))[0] * np.dot(w, fb(math.sqrt(b) * z)))
    if b <= _TINY_VAR:
        return float(np.dot(w, fa(math.sqrt(a) * z)) * fb(np.zeros(1))[0])
    det = a * b - cov * cov
    if det <= _DEGENERATE_REL * a * b:
        # Perfectly correlated: u = sigma_a z, ubar = sign(cov) sigma_b z.
        u = math.sqrt(a) * z
        ubar = math.copysign(math.sqrt(b), cov) * z
        return float(np.dot(w, fa(u) * fb(ubar)))
    # Cholesky whitening of [[a, cov], [cov, b]].
    u = math.sqrt(a) * z
    mean_part = (cov / math.sqrt(a)) * z
    resid = math.sqrt(det / a)
    vals_a = fa(u) * w
    grid = mean_part[:, None] + resid * z[None, :]
    vals_b = fb(grid) @ w
    return float(np.dot(vals_a, vals_b))


def dual_value(a: str | Activation, c: PairCovariance, order: int = 64) -> float:
    """E[phi(u) phi(ubar)] for the centered Gaussian pair described by ``c``.

    Symmetric under swapping ``var_a`` and ``var_b`` with ``cov`` fixed.
    Closed-form activations bypass the quadrature (exact values).
    """
    if order < 2:
        raise ConfigError(f"quadrature order must be >= 2, got {order}")
    act = get_activation(a)
    closed = closed_form_pair_expectation(act.id, c.var_a, c.var_b, c.cov)
    if closed is not None:
        return float(closed)
    return _gaussian_pair_expectation(act.value, act.value, c, order)


def dual_deriv(a: str | Activation, c: PairCovariance, order: int = 64) -> float:
    """E[phi'(u) phi'(ubar)] for the centered Gaussian pair ``c``."""
    if order < 2:
        raise ConfigError(f"quadrature order must be >= 2, got {order}")
    act = get_activation(a)
    closed = closed_form_pair_expectation(
        act.id, c.var_a, c.var_b, c.cov, derivative=True
    )
    if closed is not None:
        return float(closed)
    return _gaussian_pair_expectation(act.derivative, act.derivative, c, order)


def normalized_hermite_basis(degree_count: int, x: np.ndarray) -> np.ndarray:
    """Rows ``h_0(x) .. h_{degree_count-1}(x)`` of the orthonormal basis.

    Normalized probabilists' Hermite polynomials: E[h_m(z) h_k(z)] with
    z ~ N(0,1) equals the Kronecker delta.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((degree_count, x.size), dtype=np.float64)
    out[0] = 1.0
    if degree_count > 1:
        out[1] = x
    for m in range(1, degree_count - 1):
        out[m + 1] = (x * out[m] - math.sqrt(m) * out[m - 1]) / math.sqrt(m + 1)
    return out


def hermite_coeffs(
    a: str | Activation,
    input_std: float,
    count: int,
    *,
    derivative: bool = False,
    order: int | None = None,
) -> np.ndarray:
    """Coefficients of ``x -> phi(input_std * x)`` in the normalized basis.

    Returns ``a_0 .. a_{count-1}`` with ``a_m = E[mu(z) h_m(z)]`` for
    z ~ N(0,1). Set ``derivative=True`` to expand phi' instead.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if not (input_std > 0):
        raise ConfigError("input_std must be positive")
    act = get_activation(a)
    fn = act.derivative if derivative else act.value
    if order is None:
        order = max(160, 2 * count + 48)
    z, w = _gh_nodes(order)
    mu = fn(input_std * z)
    basis = normalized_hermite_basis(count, z)
    return basis @ (mu * w)


def nonpoly_witness(
    a: str | Activation,
    input_std: float,
    count: int,
    threshold: float,
) -> dict:
    """Finite-truncation witness that an activation is non-polynomial.

    Counts trailing-window indices n in ``[count//2, count)`` whose squared
    Hermite coefficient exceeds ``threshold``, split by parity. ``passes``
    requires hits of both parities in the window. A polynomial activation
    has only finitely many nonzero coefficients, so it never passes once the
    window clears its degree.
    """
    if count < 8:
        raise ConfigError("count must be >= 8")
    if not (threshold > 0):
        raise ConfigError("threshold must be positive")
    coeffs = hermite_coeffs(a, input_std, count)
    window = np.arange(count // 2, count)
    sq = np.square(coeffs[window])
    even_hits = int(np.sum((window % 2 == 0) & (sq > threshold)))
    odd_hits = int(np.sum((window % 2 == 1) & (sq > threshold)))
    return {
        "even_hits": even_hits,
        "odd_hits": odd_hits,
        "passes": even_hits > 0 and odd_hits > 0,
        "window": (int(window[0]), int(count)),
    }
