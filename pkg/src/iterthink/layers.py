"""Network building blocks.

Spectral machinery lives here too. Two different norms matter for a
convolution kernel of shape ``(Cout, Cin, k)``:

* the norm of the *reshaped* ``Cout x (Cin*k)`` matrix, which is what the
  weight audits report, and
* the norm of the convolution viewed as a linear operator on signals,
  which is what actually bounds the layer's gain. It is never smaller than
  the reshaped norm and can exceed it by up to ``sqrt(k)``.

Constrained layers divide by (a rigorous upper bound on) the operator norm,
so the normalized layer is a strict contraction on signals of every length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ConfigurationError",
    "ActivationKind",
    "ACTIVATIONS",
    "get_activation",
    "apply_activation",
    "check_activation_admissible",
    "reshape_conv_weights",
    "unreshape_conv_weights",
    "power_iteration",
    "spectral_norm_power_iteration",
    "exact_spectral_norm",
    "conv_matrix",
    "conv_operator_norm",
    "conv_operator_norm_bound",
    "ConvLayer",
    "BatchNorm1d",
    "ResidualCombiner",
    "residual_combine",
    "normalized_kernel",
]


class ConfigurationError(ValueError):
    """An architecture or hyperparameter combination violates a design rule."""


# activations -------------------------------------------------------------------

def _gelu_lipschitz() -> float:
    # max of Phi(x) + x*phi(x) is attained where phi(x)(2 - x^2) = 0, i.e. x = sqrt(2)
    x = math.sqrt(2.0)
    return 0.5 * (1 + math.erf(x / math.sqrt(2))) + x * math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class ActivationKind:
    tag: str
    lipschitz_constant: float


ACTIVATIONS: dict[str, ActivationKind] = {
    "relu": ActivationKind("relu", 1.0),
    "elu": ActivationKind("elu", 1.0),
    "tanh": ActivationKind("tanh", 1.0),
    "gelu": ActivationKind("gelu", _gelu_lipschitz()),
    "logistic": ActivationKind("logistic", 0.25),
}

_ACTIVATION_FNS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": T.relu,
    "elu": T.elu,
    "tanh": T.tanh,
    "gelu": T.gelu,
    "logistic": T.logistic,
}


def get_activation(tag: str | ActivationKind) -> ActivationKind:
    if isinstance(tag, ActivationKind):
        return tag
    try:
        return ACTIVATIONS[tag]
    except KeyError:
        raise ConfigurationError(f"unknown activation {tag!r}; expected one of {sorted(ACTIVATIONS)}") from None


def apply_activation(kind: ActivationKind | str, x: Tensor) -> Tensor:
    return _ACTIVATION_FNS[get_activation(kind).tag](x)


def check_activation_admissible(kind: ActivationKind | str, constrained_context: bool) -> None:
    """Raise if ``kind`` may not appear inside a Lipschitz-constrained block.

    Every activation in the recurrent block of a constrained network must be
    1-Lipschitz; anything with a steeper slope (GELU peaks near 1.13) would
    void the contraction bound.
    """
    kind = get_activation(kind)
    if constrained_context and kind.lipschitz_constant > 1.0:
        raise ConfigurationError(
            f"activation {kind.tag!r} has Lipschitz constant {kind.lipschitz_constant:.4f} > 1; "
            "activations inside a constrained recurrent block must be 1-Lipschitz"
        )


# spectral norms ------------------------------------------------------------------

def reshape_conv_weights(kernel) -> np.ndarray:
    """``(Cout, Cin, k)`` -> ``(Cout, Cin*k)``; row c is the C-order flattening of ``kernel[c]``."""
    w = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel)
    return w.reshape(w.shape[0], -1)


def unreshape_conv_weights(matrix: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    return np.asarray(matrix).reshape(shape)


def power_iteration(apply, apply_t, u: np.ndarray, iters: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Power iteration for the top singular triple of a linear operator.

    ``u`` lives in the operator's input space. Returns ``(sigma, u, v)`` with
    ``sigma = v . apply(u)`` for the final unit vectors.
    """
    if iters < 1:
        raise ValueError("power iteration needs iters >= 1")
    u = np.array(u, dtype=np.float64, copy=True)
    nu = np.linalg.norm(u)
    if nu == 0:
        raise ValueError("power iteration start vector must be nonzero")
    u /= nu
    for _ in range(iters):
        v = apply(u)
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0, u, v
        v /= nv
        w = apply_t(v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, u, v
        u = w / nw
    sigma = float(np.vdot(v, apply(u)))
    return sigma, u, v


def spectral_norm_power_iteration(m: np.ndarray, iters: int, u_state: np.ndarray) -> tuple[float, np.ndarray]:
    """Estimate the largest singular value of ``m``.

    ``u_state`` is a left singular-vector estimate of length ``rows``. The
    estimate is a Rayleigh quotient, so it approaches the true value from
    below. A zero matrix gives 0 and leaves the state unchanged.
    """
    m = np.asarray(m, dtype=np.float64)
    u_state = np.asarray(u_state, dtype=np.float64)
    if u_state.shape != (m.shape[0],):
        raise ValueError(f"u_state must have length {m.shape[0]}, got shape {u_state.shape}")
    if not np.any(m):
        return 0.0, u_state.copy()
    # iterate on m^T so the persistent vector is the left (row-space) one
    sigma, u, _ = power_iteration(lambda a: m.T @ a, lambda b: m @ b, u_state, iters)
    return sigma, u


def exact_spectral_norm(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got rank {m.ndim}")
    if max(m.shape) > 4096:
        raise ValueError(f"matrix {m.shape} exceeds the 4096 limit for dense SVD")
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False)[0])


def conv_matrix(kernel, length: int, padding: int | None = None) -> np.ndarray:
    """Dense matrix of a stride-1 zero-padded convolution on length-``length`` signals.

    Rows index ``(out_channel, position)`` and columns ``(in_channel, position)``,
    both in C order, matching ``x.reshape(-1)`` for a ``[C, L]`` signal.
    """
    w = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel, dtype=np.float64)
    cout, cin, k = w.shape
    p = (k - 1) // 2 if padding is None else padding
    lout = length + 2 * p - k + 1
    a = np.zeros((cout, lout, cin, length))
    for t in range(k):
        for l in range(lout):
            j = l + t - p
            if 0 <= j < length:
                a[:, l, :, j] += w[:, :, t]
    return a.reshape(cout * lout, cin * length)


def conv_operator_norm(kernel, length: int, padding: int | None = None) -> float:
    """Exact l2 gain of the convolution at a fixed signal length (dense SVD)."""
    return exact_spectral_norm(conv_matrix(kernel, length, padding))


def _symbol(w: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    k = w.shape[2]
    centre = (k - 1) / 2
    phase = np.exp(-1j * np.outer(omegas, np.arange(k) - centre))
    return np.einsum("gt,oit->goi", phase, w)


def conv_operator_norm_bound(kernel, grid: int = 2048) -> float:
    """Upper bound on the l2 gain of the convolution for *every* signal length.

    A zero-padded convolution is a compression of the bi-infinite Toeplitz
    operator, whose norm is ``sup_w ||W(w)||`` for the matrix symbol
    ``W(w) = sum_t W_t exp(-i w (t - c))``. The sup is taken over a uniform
    grid and widened by the symbol's Lipschitz constant times the half
    spacing, which makes the result a true bound rather than an estimate.
    """
    w = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel, dtype=np.float64)
    if not np.any(w):
        return 0.0
    omegas = 2 * np.pi * np.arange(grid) / grid
    sym = _symbol(w, omegas)
    if sym.shape[1] > sym.shape[2]:
        gram = np.conj(np.swapaxes(sym, 1, 2)) @ sym
    else:
        gram = sym @ np.conj(np.swapaxes(sym, 1, 2))
    peak = math.sqrt(max(float(np.linalg.eigvalsh(gram)[:, -1].max()), 0.0))
    k = w.shape[2]
    centre = (k - 1) / 2
    slope = sum(abs(t - centre) * exact_spectral_norm(w[:, :, t]) for t in range(k))
    return peak + (np.pi / grid) * slope


# circulant operator used for the running power-iteration estimate

def _circ_apply(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    k = w.shape[2]
    c = (k - 1) // 2
    return sum(w[:, :, t] @ np.roll(u, -(t - c), axis=1) for t in range(k))


def _circ_apply_t(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    k = w.shape[2]
    c = (k - 1) // 2
    return sum(w[:, :, t].T @ np.roll(v, t - c, axis=1) for t in range(k))


def _circ_direction(u: np.ndarray, v: np.ndarray, k: int) -> np.ndarray:
    """d(v . C_w u)/dw, i.e. the tensor A with v . C_w u == sum(w * A)."""
    c = (k - 1) // 2
    return np.stack([v @ np.roll(u, -(t - c), axis=1).T for t in range(k)], axis=2)


# layers ---------------------------------------------------------------------------

class ConvLayer:
    """1D convolution, optionally constrained to be a strict contraction.

    For a constrained layer the effective kernel is ``kernel / (sigma + eps)``.
    During training ``sigma`` is the running power-iteration estimate,
    ``sum(kernel * A)`` for the direction tensor ``A`` of the last step, so
    gradients see the normalization. Outside training ``sigma`` is the
    certified operator-norm bound, which keeps the layer's gain below
    ``1/(1 + eps/sigma)`` for any input length.
    """

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        bias: bool = False,
        constrained: bool = False,
        epsilon: float = 1e-3,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
        pi_length: int = 64,
    ):
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"{name}: kernel size must be odd, got {kernel_size}")
        if constrained and bias:
            raise ConfigurationError(f"{name}: constrained convolutions carry no bias")
        if epsilon <= 0:
            raise ConfigurationError(f"{name}: epsilon must be positive, got {epsilon}")
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / math.sqrt(in_channels * kernel_size)
        self.name = name
        self.constrained = constrained
        self.epsilon = float(epsilon)
        self.kernel = Tensor(rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size)).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, out_channels).astype(dtype), requires_grad=True) if bias else None
        self.version = 0
        self._cache: tuple[tuple, Tensor] | None = None
        self._certified: tuple[int, float] | None = None
        if constrained:
            u = rng.standard_normal((in_channels, pi_length))
            self.pi_u = u / np.linalg.norm(u)
            self.pi_v = np.zeros((out_channels, pi_length))
            self.sigma_estimate = 0.0
            self._direction = np.zeros((out_channels, in_channels, kernel_size))
            self.reconverge()

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]

    def parameters(self) -> list[tuple[str, Tensor, str]]:
        kind = "conv_kernel_constrained" if self.constrained else "conv_kernel"
        out = [(f"{self.name}.kernel", self.kernel, kind)]
        if self.bias is not None:
            out.append((f"{self.name}.bias", self.bias, "conv_bias"))
        return out

    def mark_updated(self) -> None:
        """Invalidate cached normalized kernels after any parameter change."""
        self.version += 1

    # normalization state

    def power_step(self, iters: int = 1) -> float:
        if not self.constrained:
            raise ConfigurationError(f"{self.name}: power iteration only applies to constrained layers")
        w = self.kernel.data.astype(np.float64)
        sigma, u, v = power_iteration(lambda a: _circ_apply(w, a), lambda b: _circ_apply_t(w, b), self.pi_u, iters)
        if sigma > 0:
            self.pi_u, self.pi_v = u, v
            self._direction = _circ_direction(u, v, w.shape[2])
        self.sigma_estimate = sigma
        self.mark_updated()
        return sigma

    def reconverge(self, max_iters: int = 100, tol: float = 1e-10) -> tuple[float, float]:
        """Run power iteration to convergence and refresh the certified bound.

        Returns ``(running_estimate, certified_bound)``.
        """
        prev = None
        for _ in range(max_iters):
            s = self.power_step(1)
            if prev is not None and abs(s - prev) < tol:
                break
            prev = s
        return self.sigma_estimate, self.certified_sigma()

    def certified_sigma(self) -> float:
        if self._certified is None or self._certified[0] != self.version:
            self._certified = (self.version, conv_operator_norm_bound(self.kernel.data))
        return self._certified[1]

    def normalized_kernel(self, training: bool = False) -> Tensor:
        if not self.constrained:
            raise ConfigurationError(f"{self.name}: normalized_kernel called on an unconstrained layer")
        tracked = training and T.is_grad_enabled() and self.kernel.requires_grad
        key = (training, self.version, T.graph_generation() if tracked else None)
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        w = self.kernel
        if training:
            if tracked:
                sigma = T.sum(T.mul(w, Tensor(self._direction.astype(w.dtype))))
                out = T.div(w, T.add(sigma, self.epsilon))
            else:
                out = Tensor(w.data / (np.sum(w.data * self._direction) + self.epsilon))
        else:
            out = Tensor(w.data / (self.certified_sigma() + self.epsilon))
        self._cache = (key, out)
        return out

    def weight(self, training: bool = False) -> Tensor:
        return self.normalized_kernel(training) if self.constrained else self.kernel

    def effective_kernel(self) -> np.ndarray:
        """The kernel applied at evaluation time, as a plain array."""
        with T.no_grad():
            return self.weight(training=False).data

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return T.conv1d(x, self.weight(training), self.bias)


def normalized_kernel(layer: ConvLayer, training: bool = False) -> Tensor:
    return layer.normalized_kernel(training)


class BatchNorm1d:
    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.name = name
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self) -> list[tuple[str, Tensor, str]]:
        return [(f"{self.name}.weight", self.weight, "bn_scale"), (f"{self.name}.bias", self.bias, "bn_shift")]

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return T.batchnorm1d(x, self.weight, self.bias, self.running_mean, self.running_var, training, self.momentum, self.eps)


class ResidualCombiner:
    """Per-channel convex mix ``(1 - g) * identity + g * block`` with ``g = logistic(gamma_raw)``."""

    def __init__(self, name: str, channels: int, init: float = 0.0, dtype=np.float64):
        self.name = name
        self.gamma_raw = Tensor(np.full(channels, init, dtype=dtype), requires_grad=True)

    @property
    def channels(self) -> int:
        return self.gamma_raw.shape[0]

    def gamma(self) -> np.ndarray:
        with T.no_grad():
            return T.logistic(self.gamma_raw).data.copy()

    def parameters(self) -> list[tuple[str, Tensor, str]]:
        return [(f"{self.name}.gamma_raw", self.gamma_raw, "gamma_raw")]

    def __call__(self, identity_in: Tensor, block_out: Tensor) -> Tensor:
        return residual_combine(identity_in, block_out, self)


def residual_combine(identity_in: Tensor, block_out: Tensor, combiner: ResidualCombiner) -> Tensor:
    if identity_in.shape != block_out.shape:
        raise T.ShapeError(f"residual shapes differ: {identity_in.shape} vs {block_out.shape}")
    if identity_in.ndim != 3 or identity_in.shape[1] != combiner.channels:
        raise T.ShapeError(
            f"residual channel mismatch: input has {identity_in.shape[1] if identity_in.ndim == 3 else '?'} "
            f"channels, combiner has {combiner.channels}"
        )
    g = combiner.gamma_raw
    keep = T.logistic(T.neg(g))  # 1 - logistic(g), without cancellation
    mix = T.logistic(g)
    return T.add(T.mul(identity_in, keep), T.mul(block_out, mix))
