"""Training loop: Adam with selective decay, incremental progress training,
warmup plus milestone learning-rate schedule, and best-validation selection."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, batches, generate_dataset, random_instances
from .model import Model, ModelSpec, predict_bits

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "AdamState",
    "TrainResult",
    "DivergenceError",
    "parse_ratio",
    "milestones",
    "lr_at",
    "ipt_sample",
    "training_loss",
    "adam_step",
    "train",
    "evaluate_accuracy",
    "extrapolation_sweep",
    "exact_match",
    "best_epoch_index",
    "write_metrics_csv",
    "write_sweep_csv",
    "METRICS_HEADER",
    "SWEEP_HEADER",
]

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_acc", "lr", "diverged"]
SWEEP_HEADER = ["M", "accuracy", "count", "bits"]
DECAYED_KINDS = frozenset({"conv_kernel"})


class DivergenceError(FloatingPointError):
    """Non-finite loss or gradient in a mode where that is an error."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 500
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0002
    ipt_alpha: float = 0.5
    warmup_period: float = 3.0
    milestone_ratio: str = "8:4:2:1"
    milestone_multiplier: float = 0.1
    m_train: int = 30
    train_bits: int = 32
    dataset_size: int = 10000
    seed: int = 0
    adam_eps: float = 1e-8
    early_stop_acc: float | None = None
    power_iters_per_step: int = 1

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "m_train", "train_bits", "power_iters_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "warmup_period", "milestone_multiplier", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.ipt_alpha <= 1.0:
            raise ValueError(f"ipt_alpha must lie in [0, 1], got {self.ipt_alpha}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.dataset_size < 5:
            raise ValueError(f"dataset_size must be >= 5, got {self.dataset_size}")
        parse_ratio(self.milestone_ratio)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    diverged: bool


# schedule -------------------------------------------------------------------------

def parse_ratio(ratio: str | Sequence[float]) -> list[Fraction]:
    parts = ratio.split(":") if isinstance(ratio, str) else list(ratio)
    try:
        vals = [Fraction(str(p).strip()) for p in parts]
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"milestone ratio must look like '8:4:2:1', got {ratio!r}") from None
    if len(vals) < 2 or any(v <= 0 for v in vals):
        raise ValueError(f"milestone ratio needs at least two positive parts, got {ratio!r}")
    return vals


def milestones(epochs: int, ratio: str | Sequence[float] = "8:4:2:1") -> list[int]:
    """Milestone epochs at the cumulative fractions of the ratio chain, floored.

    ``8:4:2:1`` over 150 epochs: cumulative 8/15, 12/15, 14/15 give 80, 120, 140.
    """
    parts = parse_ratio(ratio)
    total = sum(parts)
    out, acc = [], Fraction(0)
    for p in parts[:-1]:
        acc += p
        out.append(math.floor(epochs * acc / total))
    return out


def warmup_factor(epoch: int, period: float) -> float:
    return 1.0 - math.exp(-(epoch + 1) / period)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    passed = sum(1 for m in milestones(config.epochs, config.milestone_ratio) if m <= epoch)
    return config.lr * warmup_factor(epoch, config.warmup_period) * config.milestone_multiplier**passed


# incremental progress training ---------------------------------------------------------------

def ipt_sample(M: int, rng: np.random.Generator) -> tuple[int, int]:
    """``n ~ U{0..M-1}`` untracked iterations, then ``k ~ U{1..M-n}`` tracked ones."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    n = int(rng.integers(0, M))
    k = int(rng.integers(1, M - n + 1))
    return n, k


def training_loss(model: Model, x, targets, M: int, alpha: float, rng: np.random.Generator | None = None,
                  sample: tuple[int, int] | None = None) -> T.Tensor:
    """``(1 - alpha) * L_full + alpha * L_prog``.

    Both terms start from the same ``phi_0 = F(x)``. ``L_full`` tracks all
    ``M`` iterations. ``L_prog`` runs ``n`` iterations without gradient
    tracking from ``phi_0`` and then ``k`` tracked ones, so ``F`` receives
    gradient from it only when ``n = 0``. ``sample`` fixes ``(n, k)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    x = model.input_tensor(x)
    phi0 = model.forward_init(x)
    recall = model.recall_term(x)
    terms = []
    if alpha < 1.0:
        s = phi0
        for _ in range(M):
            s = model.step(s, x, recall)
        terms.append((1.0 - alpha, T.cross_entropy(model.readout(s), targets)))
    if alpha > 0.0:
        if sample is None:
            if rng is None:
                raise ValueError("rng or sample is required when alpha > 0")
            sample = ipt_sample(M, rng)
        n, k = sample
        if n < 0 or k < 1:
            raise ValueError(f"invalid progress sample n={n}, k={k}")
        s = phi0
        if n > 0:
            with T.no_grad():
                s = type(phi0)(T.detach(phi0.phi), 0)
                r = T.detach(recall) if recall is not None else None
                for _ in range(n):
                    s = model.step(s, x, r)
            s = type(phi0)(T.detach(s.phi), n)
        for _ in range(k):
            s = model.step(s, x, recall)
        terms.append((alpha, T.cross_entropy(model.readout(s), targets)))
    loss = None
    for w, t in terms:
        part = t if w == 1.0 else T.scale(t, w)
        loss = part if loss is None else T.add(loss, part)
    return loss


# optimizer -----------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[tuple[str, T.Tensor, str]], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 0.0,
              eps: float = 1e-8, strict: bool = True) -> bool:
    """One Adam update with L2 decay added to the gradient of plain conv kernels only.

    Missing gradients count as zero. Returns ``False`` when a gradient is
    non-finite; with ``strict`` that raises :class:`DivergenceError` instead.
    Non-strict mode still applies the update, as a plain optimizer would.
    """
    finite = all(p.grad is None or np.all(np.isfinite(p.grad)) for _, p, _ in params)
    if not finite and strict:
        raise DivergenceError("non-finite gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p, kind in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if weight_decay and kind in DECAYED_KINDS:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return finite


# evaluation ---------------------------------------------------------------------------

def _worker_count() -> int:
    env = os.environ.get("ITERTHINK_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer ITERTHINK_THREADS=%r", env)
    return max(1, os.cpu_count() or 1)


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(n, i + size)) for i in range(0, n, size)]


def exact_match(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.all(pred == target, axis=-1)


def _sweep_counts(model: Model, bits: np.ndarray, targets: np.ndarray, m_list: Sequence[int], chunk: int) -> dict[int, int]:
    model.eval()
    model.prepare_eval()

    def job(sl: slice) -> dict[int, int]:
        logits = model.sweep_logits(bits[sl][:, None, :], m_list)
        return {m: int(exact_match(predict_bits(z), targets[sl]).sum()) for m, z in logits.items()}

    slices = _chunks(len(bits), chunk)
    workers = min(_worker_count(), len(slices))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, slices))
    else:
        parts = [job(sl) for sl in slices]
    return {m: sum(p[m] for p in parts) for m in m_list}


def evaluate_accuracy(model: Model, bits_length: int, count: int, M: int, seed: int, chunk: int = 250) -> float:
    """Exact-match accuracy on ``count`` fresh instances after ``M`` iterations."""
    return extrapolation_sweep(model, bits_length, count, [M], seed, chunk)[0][1]


def extrapolation_sweep(model: Model, bits_length: int, count: int, m_list: Sequence[int], seed: int,
                        chunk: int = 250) -> list[tuple[int, float]]:
    """Accuracy at each ``M`` on one fixed instance set, from a single pass per chunk."""
    m_list = [int(m) for m in m_list]
    if any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise ValueError(f"M list must be strictly ascending, got {m_list}")
    bits, targets = random_instances(bits_length, count, seed)
    was = model.training
    try:
        counts = _sweep_counts(model, bits, targets, m_list, chunk)
    finally:
        model.train(was)
    return [(m, counts[m] / count) for m in m_list]


def _validate(model: Model, bits: np.ndarray, targets: np.ndarray, M: int, chunk: int = 500) -> tuple[float, float]:
    model.eval()
    model.prepare_eval()
    loss_sum, hits = 0.0, 0
    with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        for sl in _chunks(len(bits), chunk):
            logits, _ = model.run(bits[sl][:, None, :], M)
            if np.all(np.isfinite(logits.data)):
                loss_sum += T.cross_entropy(logits, targets[sl]).item() * (sl.stop - sl.start)
            else:
                loss_sum = math.nan
            hits += int(exact_match(predict_bits(logits), targets[sl]).sum())
    return loss_sum / len(bits), hits / len(bits)


# training loop -------------------------------------------------------------------------

@dataclass
class TrainResult:
    spec: ModelSpec
    config: TrainConfig
    model: Model  # final (last-epoch) state
    optimizer: AdamState
    records: list[EpochRecord]
    best_epoch: int
    best_state: dict[str, np.ndarray]
    best_optimizer: AdamState

    def best_model(self) -> Model:
        m = Model(self.spec, self.config.seed)
        m.load_state_arrays(self.best_state)
        m.eval()
        return m


def best_epoch_index(accuracies: Sequence[float]) -> int:
    """Index of the highest accuracy; ties go to the earliest epoch."""
    best, idx = -math.inf, -1
    for i, a in enumerate(accuracies):
        if a > best:
            best, idx = a, i
    return idx


def _finite_params(model: Model) -> bool:
    return all(np.all(np.isfinite(p.data)) for _, p, _ in model.named_parameters())


def train(spec: ModelSpec, config: TrainConfig, dataset: Dataset | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train from a seeded initialization and keep the best-validation epoch.

    Non-finite loss raises :class:`DivergenceError` in f64. In f32 the epoch
    is flagged and training continues; once the parameters themselves are
    non-finite the remaining epochs are logged as diverged without further
    computation, since nothing can change.
    """
    config.validate()
    spec = spec.resolved()
    strict = spec.precision == "f64"
    model = Model(spec, config.seed)
    if dataset is None:
        dataset = generate_dataset(config.train_bits, config.dataset_size, config.seed)
    val_bits, val_targets = dataset.split("val")
    rng = np.random.default_rng([config.seed, 2])
    opt = AdamState()
    params = model.named_parameters()
    records: list[EpochRecord] = []
    best_acc, best_epoch = -1.0, -1
    best_state, best_opt = model.state_arrays(), copy.deepcopy(opt)
    dead = False

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        if dead:
            rec = EpochRecord(epoch, math.nan, math.nan, records[-1].val_acc, lr, True)
            records.append(rec)
            if on_epoch:
                on_epoch(rec)
            continue
        model.train()
        diverged = False
        loss_sum, seen = 0.0, 0
        for x, tgt in batches(dataset, "train", config.batch_size, shuffle_seed=config.seed, epoch=epoch):
            model.zero_grad()
            with np.errstate(over="ignore", invalid="ignore"):
                loss = training_loss(model, x, tgt, config.m_train, config.ipt_alpha, rng)
                value = loss.item()
                if not math.isfinite(value):
                    if strict:
                        raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch)
                    diverged = True
                loss.backward()
                try:
                    ok = adam_step(params, opt, lr, config.beta1, config.beta2, config.weight_decay,
                                   config.adam_eps, strict=strict)
                except DivergenceError as exc:
                    raise DivergenceError(f"{exc} at epoch {epoch}", epoch) from None
                diverged = diverged or not ok
            model.mark_updated()
            if model.constrained_layers():
                for _ in range(config.power_iters_per_step):
                    model.power_step()
            loss_sum += value * len(x)
            seen += len(x)
        model.reconverge()
        val_loss, val_acc = _validate(model, val_bits, val_targets, config.m_train)
        if strict and not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch)
        diverged = diverged or not math.isfinite(val_loss)
        rec = EpochRecord(epoch, loss_sum / max(seen, 1), val_loss, val_acc, lr, diverged)
        records.append(rec)
        log.info("epoch %d loss %.5f val_loss %.5f val_acc %.4f lr %.2e%s", epoch, rec.train_loss,
                 val_loss, val_acc, lr, " DIVERGED" if diverged else "")
        if on_epoch:
            on_epoch(rec)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state, best_opt = model.state_arrays(), copy.deepcopy(opt)
        if not _finite_params(model):
            dead = True
        if config.early_stop_acc is not None and val_acc >= config.early_stop_acc:
            break
    model.train()
    return TrainResult(spec, config, model, opt, records, best_epoch, best_state, best_opt)


# CSV ------------------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(records: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([_fmt(getattr(r, f.name)) for f in fields(EpochRecord)])


def write_sweep_csv(rows: Sequence[tuple[int, float]], count: int, bits: int, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for m, acc in rows:
            w.writerow([m, _fmt(float(acc)), count, bits])
