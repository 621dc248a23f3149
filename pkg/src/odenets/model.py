"""Model architecture, initialization, state maps, and shared gradient blocks.

The model is a width-``n`` hidden state driven by a single weight matrix:

* initial state   ``h_0 = sigma_u U x / sqrt(d)``
* field           ``dh/dt = sigma_w W phi(h) / sqrt(n)`` on ``[0, T]``
* readout         ``f = sigma_v v . phi(h_T) / sqrt(n)``

Parameters ``(U, W, v)`` are i.i.d. standard normal draws from a
counter-based Philox generator keyed by the config seed, so initialization
is reproducible across platforms. Draw order is U (row-major), then W,
then v.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .activations import Activation, get_activation
from .errors import ConfigError, ShapeError

__all__ = [
    "ModelConfig",
    "Params",
    "Grads",
    "init_params",
    "initial_state",
    "vector_field",
    "readout",
    "adjoint_terminal",
    "param_distance",
    "save_params",
    "load_params",
    "params_manifest",
]

_PARAMS_MAGIC = b"ODENETP1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes, variance hyperparameters, and the PRNG seed."""

    n: int
    d: int
    horizon: float = 1.0
    sigma_u: float = 1.0
    sigma_w: float = 1.0
    sigma_v: float = 1.0
    activation: str = "softplus-shifted"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ConfigError("width n and input_dim d must be >= 1")
        if not (self.horizon > 0):
            raise ConfigError("horizon T must be positive")
        for name in ("sigma_u", "sigma_w", "sigma_v"):
            if not (getattr(self, name) > 0):
                raise ConfigError(f"{name} must be positive")
        get_activation(self.activation)  # validates the id

    @property
    def act(self) -> Activation:
        return get_activation(self.activation)

    def num_params(self) -> int:
        return self.n * self.d + self.n * self.n + self.n


@dataclass
class Params:
    """The three weight blocks. Treated as immutable during evaluation."""

    U: np.ndarray
    W: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        n = self.v.shape[0]
        if self.U.ndim != 2 or self.W.shape != (n, n) or self.U.shape[0] != n:
            raise ShapeError(
                f"inconsistent parameter shapes U{self.U.shape} "
                f"W{self.W.shape} v{self.v.shape}"
            )

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    def copy(self) -> "Params":
        return Params(self.U.copy(), self.W.copy(), self.v.copy())


@dataclass
class Grads:
    """Gradient blocks matching a Params value blockwise."""

    dU: np.ndarray
    dW: np.ndarray
    dv: np.ndarray

    def norm(self) -> float:
        return math.sqrt(
            float(np.sum(self.dU * self.dU))
            + float(np.sum(self.dW * self.dW))
            + float(np.sum(self.dv * self.dv))
        )

    def blocks(self):
        return {"dU": self.dU, "dW": self.dW, "dv": self.dv}

    def dot(self, other: "Grads") -> float:
        return (
            float(np.sum(self.dU * other.dU))
            + float(np.sum(self.dW * other.dW))
            + float(np.sum(self.dv * other.dv))
        )

    def scaled(self, alpha: float) -> "Grads":
        return Grads(alpha * self.dU, alpha * self.dW, alpha * self.dv)

    def add_scaled(self, other: "Grads", alpha: float) -> None:
        self.dU += alpha * other.dU
        self.dW += alpha * other.dW
        self.dv += alpha * other.dv

    @staticmethod
    def zeros(cfg: ModelConfig) -> "Grads":
        return Grads(
            np.zeros((cfg.n, cfg.d)),
            np.zeros((cfg.n, cfg.n)),
            np.zeros(cfg.n),
        )


def init_params(cfg: ModelConfig) -> Params:
    """Draw fresh i.i.d. N(0,1) parameters from the seeded Philox stream."""
    gen = np.random.Generator(np.random.Philox(key=cfg.seed & (2**64 - 1)))
    U = gen.standard_normal((cfg.n, cfg.d))
    W = gen.standard_normal((cfg.n, cfg.n))
    v = gen.standard_normal(cfg.n)
    return Params(U, W, v)


def _check_vec(x, length, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != length:
        raise ShapeError(f"{what} has length {x.shape[0]}, expected {length}")
    return x


def initial_state(cfg: ModelConfig, p: Params, x) -> np.ndarray:
    """sigma_u U x / sqrt(d). Accepts a single input or a (d, m) batch."""
    x = _check_vec(x, cfg.d, "input x")
    return (cfg.sigma_u / math.sqrt(cfg.d)) * (p.U @ x)


def vector_field(cfg: ModelConfig, p: Params, h) -> np.ndarray:
    """sigma_w W phi(h) / sqrt(n), with phi applied componentwise."""
    h = _check_vec(h, cfg.n, "state h")
    return (cfg.sigma_w / math.sqrt(cfg.n)) * (p.W @ cfg.act.value(h))


def readout(cfg: ModelConfig, p: Params, h_T) -> float | np.ndarray:
    """sigma_v v . phi(h_T) / sqrt(n); scalar for vector input."""
    h_T = _check_vec(h_T, cfg.n, "terminal state")
    out = (cfg.sigma_v / math.sqrt(cfg.n)) * (p.v @ cfg.act.value(h_T))
    return float(out) if np.ndim(out) == 0 else out


def adjoint_terminal(cfg: ModelConfig, p: Params, h_T) -> np.ndarray:
    """sigma_v (phi'(h_T) * v) / sqrt(n): the adjoint state at t = T."""
    h_T = _check_vec(h_T, cfg.n, "terminal state")
    deriv = cfg.act.derivative(h_T)
    if deriv.ndim == 1:
        return (cfg.sigma_v / math.sqrt(cfg.n)) * deriv * p.v
    return (cfg.sigma_v / math.sqrt(cfg.n)) * deriv * p.v[:, None]


def param_distance(p1: Params, p2: Params) -> float:
    """Euclidean norm over the concatenation of all three blocks."""
    if p1.U.shape != p2.U.shape or p1.W.shape != p2.W.shape or p1.v.shape != p2.v.shape:
        raise ShapeError("parameter shapes differ")
    return math.sqrt(
        float(np.sum(np.square(p1.U - p2.U)))
        + float(np.sum(np.square(p1.W - p2.W)))
        + float(np.sum(np.square(p1.v - p2.v)))
    )


def save_params(p: Params, path, seed: int = 0) -> None:
    """Write the binary parameter blob.

    Layout (all little-endian): 8-byte magic ``ODENETP1``; uint64 n; uint64 d;
    int64 seed; then float64 payload U (n*d, row-major), W (n*n, row-major),
    v (n).
    """
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<QQq", p.n, p.d, seed))
        fh.write(p.U.astype("<f8").tobytes(order="C"))
        fh.write(p.W.astype("<f8").tobytes(order="C"))
        fh.write(p.v.astype("<f8").tobytes(order="C"))


def load_params(path) -> tuple[Params, int]:
    """Read a parameter blob written by :func:`save_params`."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _PARAMS_MAGIC:
            raise ShapeError(f"bad parameter-blob magic {magic!r}")
        n, d, seed = struct.unpack("<QQq", fh.read(24))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    expected = n * d + n * n + n
    if payload.size != expected:
        raise ShapeError(f"payload has {payload.size} floats, expected {expected}")
    U = payload[: n * d].reshape(n, d).copy()
    W = payload[n * d : n * d + n * n].reshape(n, n).copy()
    v = payload[n * d + n * n :].copy()
    return Params(U, W, v), seed


def params_manifest(p: Params, cfg: ModelConfig) -> str:
    """JSON manifest describing the blob layout next to the binary file."""
    return json.dumps(
        {
            "format": _PARAMS_MAGIC.decode(),
            "byte_order": "little",
            "dtype": "float64",
            "n": p.n,
            "d": p.d,
            "seed": cfg.seed,
            "blocks": [
                {"name": "U", "shape": [p.n, p.d], "order": "C"},
                {"name": "W", "shape": [p.n, p.n], "order": "C"},
                {"name": "v", "shape": [p.n], "order": "C"},
            ],
        },
        indent=2,
    )
