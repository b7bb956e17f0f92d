"""Diagnostics for the recurrent map: spectral audits, Lipschitz certificates,
measured contraction, fixed-point probes, growth traces and overthinking scans."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .layers import exact_spectral_norm, reshape_conv_weights
from .lipschitz import LipschitzCertificate, certify_stages
from .model import Model
from .training import extrapolation_sweep

__all__ = [
    "SpectralAudit",
    "ContractionReport",
    "FixedPointReport",
    "GrowthTrace",
    "OverthinkingReport",
    "audit_spectral_norms",
    "certify_lipschitz",
    "recurrent_map",
    "verify_contraction",
    "fixed_point_probe",
    "probe_model_fixed_point",
    "growth_trace",
    "growth_trace_map",
    "growth_ratios",
    "detect_overthinking",
    "overthinking_scan",
    "write_json",
]

Map = Callable[[np.ndarray], np.ndarray]

RESOLUTION = 1e-9


# spectral audit ------------------------------------------------------------------

@dataclass
class SpectralAudit:
    entries: list[dict]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> list[dict]:
        return [{"layer": e["layer"], "norm": e["norm"], "constrained": e["constrained"]} for e in self.entries]


def audit_spectral_norms(model: Model) -> SpectralAudit:
    """Exact spectral norms of the reshaped kernels of every convolution in G.

    Constrained layers report the kernel actually applied at evaluation
    time, i.e. after normalization.
    """
    layers = model.recurrent_convs() + ([model.g_recall] if model.g_recall is not None else [])
    entries = []
    for c in layers:
        k = c.effective_kernel()
        entries.append({"layer": c.name, "norm": exact_spectral_norm(reshape_conv_weights(k)), "constrained": c.constrained})
    meta = {"variant": model.spec.variant, "width": model.spec.width, "normalization": "certified operator-norm bound"}
    return SpectralAudit(entries, meta)


# certificate ---------------------------------------------------------------------

def certify_lipschitz(model: Model, length: int | None = None) -> LipschitzCertificate:
    """Compose a Lipschitz bound for ``phi -> G(phi, x)``.

    The bound does not depend on ``x`` or on any bias: they only shift the
    map. With ``length`` small enough, convolutions are bounded by their
    exact operator norm at that length, otherwise by a length-free bound.
    """
    return certify_stages(model.recurrent_stages(), length)


# measured contraction -------------------------------------------------------------

def recurrent_map(model: Model, x) -> Map:
    """``phi -> G(phi, x)`` in evaluation mode as a plain array function.

    ``phi`` may hold several states per input instance stacked along the
    batch axis; ``x`` is repeated to match.
    """
    model.eval()
    model.prepare_eval()
    xt = model.input_tensor(x)
    with T.no_grad():
        recall = model.recall_term(xt)
    b = xt.shape[0]

    def g(phi: np.ndarray) -> np.ndarray:
        reps = phi.shape[0] // b
        if reps * b != phi.shape[0]:
            raise T.ShapeError(f"state batch {phi.shape[0]} is not a multiple of input batch {b}")
        xs = xt if reps == 1 else T.Tensor(np.concatenate([xt.data] * reps))
        r = recall if recall is None or reps == 1 else T.Tensor(np.concatenate([recall.data] * reps))
        with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
            return model.g(T.Tensor(phi.astype(model.spec.dtype)), xs, r).data

    return g


@dataclass
class ContractionReport:
    max_ratio: float
    ratios: np.ndarray
    kinds: list[str]
    unresolved: int = 0  # pairs closer than round-off can measure


def verify_contraction(model: Model, x, pair_count: int, seed: int, trajectory_M: int = 30) -> ContractionReport:
    """Largest measured ``|G(a) - G(b)| / |a - b|`` over sampled state pairs.

    Pairs cycle through three kinds: independent unit-Gaussian states, two
    states of the model's own trajectory, and a trajectory state with a
    small random perturbation. Norms are per input instance. Pairs closer
    than ``RESOLUTION`` relative to the state norm are dropped: late
    trajectory states can coincide to the last bit, and their ratio then
    measures round-off rather than the map.
    """
    if pair_count < 1:
        raise ValueError(f"pair_count must be >= 1, got {pair_count}")
    rng = np.random.default_rng(seed)
    g = recurrent_map(model, x)
    xt = model.input_tensor(x)
    with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        s = model.forward_init(xt)
        states = [s.phi.data]
        for _ in range(trajectory_M):
            s = model.step(s, xt)
            states.append(s.phi.data)
    shape = states[0].shape
    kinds = ("gaussian", "trajectory", "perturbed")
    a_list, b_list, kind_list = [], [], []
    for i in range(pair_count):
        kind = kinds[i % 3]
        if kind == "gaussian":
            a, b = rng.standard_normal(shape), rng.standard_normal(shape)
        elif kind == "trajectory":
            i1, i2 = rng.choice(len(states), size=2, replace=False)
            a, b = states[i1], states[i2]
        else:
            a = states[rng.integers(len(states))]
            scale = 1e-2 * (1.0 + np.linalg.norm(a) / math.sqrt(a.size))
            b = a + scale * rng.standard_normal(shape)
        a_list.append(a)
        b_list.append(b)
        kind_list.append(kind)
    a = np.concatenate(a_list).astype(np.float64)
    b = np.concatenate(b_list).astype(np.float64)
    ga, gb = g(a), g(b)
    num = np.sqrt(((ga - gb) ** 2).sum(axis=(1, 2)))
    den = np.sqrt(((a - b) ** 2).sum(axis=(1, 2)))
    scale = 1.0 + np.maximum(np.sqrt((a**2).sum(axis=(1, 2))), np.sqrt((b**2).sum(axis=(1, 2))))
    keep = den > RESOLUTION * scale
    ratios = num[keep] / den[keep]
    per_kind = [k for k in kind_list for _ in range(shape[0])]
    per_kind = [k for k, kept in zip(per_kind, keep) if kept]
    return ContractionReport(float(ratios.max()) if ratios.size else 0.0, ratios, per_kind, int((~keep).sum()))


# fixed points ---------------------------------------------------------------------

@dataclass
class FixedPointReport:
    starts: list[dict]  # per start: final norm, state hash, iterations used, converged
    distances: list[list[float]]
    decay: float
    converged: bool
    finals: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"starts": self.starts, "distances": self.distances, "decay": self.decay, "converged": self.converged}


def _state_hash(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()[:16]


def _decay(diffs: Sequence[float], window: int = 10) -> float:
    """Geometric mean of the last ``window`` successive step-difference ratios."""
    d = [v for v in diffs if v > 0]
    ratios = [b / a for a, b in zip(d, d[1:])][-window:]
    if not ratios:
        return 0.0
    return float(math.exp(sum(math.log(r) for r in ratios) / len(ratios)))


def fixed_point_probe(g: Map, starts: Sequence[np.ndarray], tol: float, max_iters: int) -> FixedPointReport:
    """Iterate ``g`` from each start until ``|g(p) - p| < tol * (1 + |p|)``.

    ``g`` maps one state to one state. The reported decay is the largest
    per-start estimate.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    finals, infos, decays = [], [], []
    for p in starts:
        p = np.array(p, dtype=np.float64)
        diffs: list[float] = []
        ok = False
        it = 0
        for it in range(1, max_iters + 1):
            q = g(p)
            d = float(np.linalg.norm(q - p))
            diffs.append(d)
            done = d < tol * (1.0 + float(np.linalg.norm(p)))
            p = q
            if not np.isfinite(d):
                break
            if done:
                ok = True
                break
        finals.append(p)
        decays.append(_decay(diffs))
        infos.append({"norm": float(np.linalg.norm(p)), "hash": _state_hash(p), "iterations": it, "converged": ok})
    n = len(finals)
    dist = [[float(np.linalg.norm(finals[i] - finals[j])) for j in range(n)] for i in range(n)]
    return FixedPointReport(infos, dist, max(decays) if decays else 0.0, all(i["converged"] for i in infos), finals)


def probe_model_fixed_point(model: Model, x, start_count: int, tol: float, max_iters: int, seed: int,
                            start_scale: float = 1.0) -> FixedPointReport:
    """Fixed-point probe of ``G(., x)`` from random Gaussian starts, one input instance."""
    xt = model.input_tensor(x)
    if xt.shape[0] != 1:
        raise T.ShapeError(f"fixed-point probe takes one instance, got batch {xt.shape[0]}")
    g = recurrent_map(model, xt)
    rng = np.random.default_rng(seed)
    shape = (1, model.spec.width, xt.shape[2])
    starts = [start_scale * rng.standard_normal(shape) for _ in range(start_count)]
    return fixed_point_probe(g, starts, tol, max_iters)


# growth ---------------------------------------------------------------------------

@dataclass
class GrowthTrace:
    ratios: list[float]
    overflow: bool
    overflow_iteration: int | None = None


def growth_ratios(norms: Sequence[float]) -> list[float]:
    """``norms[m] / norms[m-1]``; a zero denominator gives ``inf``."""
    out = []
    for prev, cur in zip(norms, norms[1:]):
        out.append(math.inf if prev == 0 else cur / prev)
    return out


def growth_trace(model: Model, x, M: int) -> GrowthTrace:
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    was = model.training
    model.eval()
    try:
        with T.no_grad():
            _, traj = model.run(x, M, record=True)
    finally:
        model.train(was)
    div = traj.divergence
    return GrowthTrace(growth_ratios(traj.norms), div is not None, div.iteration if div else None)


def _norm64(a: np.ndarray) -> float:
    # f64 accumulation so large-but-finite f32 states do not overflow the square sum
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def growth_trace_map(g: Map, phi0: np.ndarray, M: int) -> GrowthTrace:
    norms = [_norm64(phi0)]
    p = phi0
    overflow_at = None
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(1, M + 1):
            p = g(p)
            norms.append(_norm64(p))
            if not math.isfinite(norms[-1]):
                overflow_at = m
                break
    return GrowthTrace(growth_ratios(norms), overflow_at is not None, overflow_at)


# overthinking ------------------------------------------------------------------

@dataclass
class OverthinkingReport:
    table: list[tuple[int, float]]
    peak: float
    final: float
    flagged: bool
    threshold: float


def detect_overthinking(table: Sequence[tuple[int, float]], threshold: float = 0.1) -> OverthinkingReport:
    """Flag when accuracy at the largest ``M`` sits more than ``threshold`` below the peak."""
    if not table:
        raise ValueError("empty accuracy table")
    rows = sorted((int(m), float(a)) for m, a in table)
    peak = max(a for _, a in rows)
    final = rows[-1][1]
    return OverthinkingReport(rows, peak, final, peak - final > threshold, threshold)


def overthinking_scan(model: Model, bits_length: int, count: int, m_list: Sequence[int], seed: int,
                      threshold: float = 0.1) -> OverthinkingReport:
    return detect_overthinking(extrapolation_sweep(model, bits_length, count, m_list, seed), threshold)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
