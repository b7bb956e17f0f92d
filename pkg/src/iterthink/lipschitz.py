"""Compositional Lipschitz bounds for a recurrent block ``G(., x)``.

A block is described as a sequence of stages. Bounds compose by the usual
rules: sequential stages multiply, additive constants (recall terms, biases)
contribute a factor of one, an additive residual gives ``1 + K_block`` and a
per-channel interpolated residual gives the bound documented on
:func:`interpolated_residual_bound`. Stage types the calculus does not know
are rejected rather than guessed at.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .layers import ActivationKind, conv_operator_norm, conv_operator_norm_bound

__all__ = [
    "CertificationError",
    "ConvStage",
    "ActivationStage",
    "OffsetStage",
    "BatchNormStage",
    "ResidualStage",
    "LipschitzCertificate",
    "certify_stages",
    "additive_residual_bound",
    "interpolated_residual_bound",
]

DENSE_LIMIT = 512


class CertificationError(ValueError):
    """The block contains an operation with no registered Lipschitz rule."""


@dataclass(frozen=True)
class ConvStage:
    name: str
    kernel: np.ndarray  # only the input channels that depend on the state
    padding: int | None = None


@dataclass(frozen=True)
class ActivationStage:
    name: str
    kind: ActivationKind


@dataclass(frozen=True)
class OffsetStage:
    """Adds a term that does not depend on the state (recall, bias)."""

    name: str


@dataclass(frozen=True)
class BatchNormStage:
    """Batch norm with frozen (evaluation) statistics: an affine map per channel."""

    name: str
    scale: np.ndarray
    running_var: np.ndarray
    eps: float


@dataclass(frozen=True)
class ResidualStage:
    name: str
    block: tuple
    mode: str  # "add" | "interpolate"
    gamma: np.ndarray | None = None


Stage = Union[ConvStage, ActivationStage, OffsetStage, BatchNormStage, ResidualStage]


@dataclass
class LipschitzCertificate:
    K: float
    stages: list[dict] = field(default_factory=list)
    length: int | None = None

    def to_json(self) -> dict:
        return {"K": self.K, "stages": self.stages}


def additive_residual_bound(k_block: float) -> float:
    return 1.0 + k_block


def interpolated_residual_bound(gamma: np.ndarray, k_block: float) -> float:
    """Bound for ``x -> (1 - g) * x + g * B(x)`` with per-channel ``g``.

    Two sound estimates, the smaller one wins:

    * ``max(1 - g) + max(g) * K_B`` from the triangle inequality, which for a
      shared ``g`` is the familiar ``(1 - g) + g * K_B``;
    * ``max_c sqrt((1 - g_c)^2 + g_c^2) * sqrt(1 + K_B^2)`` from treating the
      mix as one linear map on the stacked pair ``(x, B(x))``.

    ``max_c((1 - g_c) + g_c * K_B)`` is *not* a bound once the ``g_c`` differ:
    a block that routes a low-``g`` channel into a high-``g`` one breaks it.
    """
    g = np.asarray(gamma, dtype=np.float64)
    tri = float(np.max(1 - g) + np.max(g) * k_block)
    stacked = float(np.max(np.sqrt((1 - g) ** 2 + g**2)) * math.sqrt(1 + k_block**2))
    return min(tri, stacked)


def _conv_bound(stage: ConvStage, length: int | None) -> tuple[float, str]:
    k = np.asarray(stage.kernel)
    if length is not None and max(k.shape[0], k.shape[1]) * length <= DENSE_LIMIT:
        return conv_operator_norm(k, length, stage.padding), f"operator norm (exact, length {length})"
    return conv_operator_norm_bound(k), "operator norm (symbol bound, any length)"


def _walk(stages: Sequence[Stage], length: int | None, trace: list[dict], prefix: str) -> float:
    total = 1.0
    for st in stages:
        name = prefix + str(getattr(st, "name", type(st).__name__))
        if isinstance(st, ConvStage):
            bound, how = _conv_bound(st, length)
            rule = f"norm scaling: {how}"
        elif isinstance(st, ActivationStage):
            bound, rule = st.kind.lipschitz_constant, f"activation {st.kind.tag}"
        elif isinstance(st, OffsetStage):
            bound, rule = 1.0, "constant offset"
        elif isinstance(st, BatchNormStage):
            gains = np.abs(st.scale) / np.sqrt(np.asarray(st.running_var) + st.eps)
            bound = float(np.max(gains))
            rule = "batch norm, evaluation statistics (not a training-time guarantee)"
        elif isinstance(st, ResidualStage):
            inner = _walk(st.block, length, trace, name + "/")
            if st.mode == "add":
                bound, rule = additive_residual_bound(inner), "additive residual: 1 + K_block"
            elif st.mode == "interpolate":
                if st.gamma is None:
                    raise CertificationError(f"{name}: interpolated residual needs gamma")
                bound, rule = interpolated_residual_bound(st.gamma, inner), "interpolated residual"
            else:
                raise CertificationError(f"{name}: unknown residual mode {st.mode!r}")
        else:
            raise CertificationError(f"no Lipschitz rule registered for {type(st).__name__} ({name})")
        trace.append({"stage": name, "rule": rule, "bound": float(bound)})
        total *= bound
    return total


def certify_stages(stages: Sequence[Stage], length: int | None = None) -> LipschitzCertificate:
    """Compose stage bounds into one constant (composition rule: product).

    ``length`` is the signal length of the fixed input. With it, small
    convolutions are bounded by their exact operator norm at that length;
    without it, by a bound valid at every length.
    """
    trace: list[dict] = []
    k = _walk(stages, length, trace, "")
    return LipschitzCertificate(K=float(k), stages=trace, length=length)
