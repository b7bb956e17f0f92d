"""DT, DTR and DTL prefix-sums networks.

All three share the loop

    phi_0     = F(x)
    phi_{m+1} = G(phi_m, x)
    y         = H(phi_M)

and differ in G. The pinned recurrent block is one merge convolution followed
by a residual sub-block of three convolutions, each convolution followed by
the activation:

    z   = act(merge(phi, x))
    b   = act(c3(act(c2(act(c1(z))))))
    out = z + b                          DT, DTR
    out = (1 - g) * z + g * b            DTL, per channel

The merge is ``conv(phi)`` for DT, ``conv([phi, x])`` for DTR and
``sn_conv(phi) + conv(x)`` for DTL, where only the state path is
constrained.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import (
    BatchNorm1d,
    ConfigurationError,
    ConvLayer,
    ResidualCombiner,
    apply_activation,
    check_activation_admissible,
    get_activation,
)
from .lipschitz import ActivationStage, ConvStage, OffsetStage, ResidualStage
from .tensor import Tensor

__all__ = [
    "VARIANTS",
    "ModelSpec",
    "Model",
    "Scratchpad",
    "Trajectory",
    "DivergenceReport",
    "build_model",
    "forward_init",
    "step",
    "readout",
    "run",
    "predict_bits",
    "TOPOLOGY_VERSION",
]

VARIANTS = ("DT", "DTR", "DTL")
TOPOLOGY_VERSION = "merge+3-residual/v1"

_VARIANT_DEFAULTS = {
    "DT": {"activation": "relu", "use_batchnorm": False, "final_bias": False, "recall_bias": False},
    "DTR": {"activation": "relu", "use_batchnorm": False, "final_bias": False, "recall_bias": False},
    "DTL": {"activation": "elu", "use_batchnorm": True, "final_bias": True, "recall_bias": True},
}
_DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description. ``None`` fields take the variant's default."""

    variant: str = "DTL"
    width: int = 32
    activation: str | None = None
    use_batchnorm: bool | None = None
    final_bias: bool | None = None
    recall_bias: bool | None = None
    epsilon: float = 1e-3
    precision: str = "f64"
    kernel_size: int = 3
    input_channels: int = 1
    output_channels: int = 2

    def resolved(self) -> "ModelSpec":
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        defaults = _VARIANT_DEFAULTS[self.variant]
        filled = {k: (getattr(self, k) if getattr(self, k) is not None else v) for k, v in defaults.items()}
        return replace(self, **filled)

    @property
    def dtype(self):
        try:
            return _DTYPES[self.precision]
        except KeyError:
            raise ConfigurationError(f"precision must be 'f64' or 'f32', got {self.precision!r}") from None

    @property
    def head_width(self) -> int:
        return max(2, self.width // 2)


@dataclass
class Scratchpad:
    phi: Tensor
    m: int = 0


@dataclass
class DivergenceReport:
    iteration: int
    norm: float


@dataclass
class Trajectory:
    norms: list[float] = field(default_factory=list)
    step_norms: list[float] = field(default_factory=list)  # ||phi_m - phi_{m-1}||, m >= 1
    logits: dict[int, np.ndarray] = field(default_factory=dict)
    divergence: DivergenceReport | None = None


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data.astype(dtype))
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, None, :]
    return Tensor(arr)


def _norm64(a: np.ndarray) -> float:
    # f64 square sum, so a large but finite f32 state is not mistaken for overflow
    return float(np.linalg.norm(a.astype(np.float64, copy=False)))


class Model:
    def __init__(self, spec: ModelSpec, seed: int = 0):
        spec = spec.resolved()
        if spec.width < 2:
            raise ConfigurationError(f"width must be >= 2, got {spec.width}")
        if spec.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {spec.kernel_size}")
        constrained = spec.variant == "DTL"
        check_activation_admissible(spec.activation, constrained_context=constrained)
        self.spec = spec
        self.seed = seed
        self.activation = get_activation(spec.activation)
        self.training = True
        rng = np.random.default_rng(seed)
        w, k, dt, bn = spec.width, spec.kernel_size, spec.dtype, spec.use_batchnorm
        conv = lambda name, cin, cout, **kw: ConvLayer(name, cin, cout, k, rng=rng, dtype=dt, epsilon=spec.epsilon, **kw)

        # F
        self.f_bn_in = BatchNorm1d("f.bn_in", spec.input_channels, dtype=dt) if bn else None
        self.f_conv = conv("f.conv", spec.input_channels, w, bias=constrained and not bn)
        self.f_bn = BatchNorm1d("f.bn", w, dtype=dt) if bn else None

        # G
        self.g_recall: ConvLayer | None = None
        if spec.variant == "DT":
            self.g_merge = conv("g.merge", w, w)
        elif spec.variant == "DTR":
            self.g_merge = conv("g.merge", w + spec.input_channels, w, bias=spec.recall_bias)
        else:
            self.g_merge = conv("g.merge", w, w, constrained=True)
            self.g_recall = conv("g.recall", spec.input_channels, w, bias=spec.recall_bias)
        self.g_block = [conv(f"g.block{i}", w, w, constrained=constrained) for i in (1, 2, 3)]
        self.g_combiner = ResidualCombiner("g.residual", w, dtype=dt) if constrained else None

        # H
        h2 = spec.head_width
        self.h_convs = [
            conv("h.conv1", w, w),
            conv("h.conv2", w, h2),
            conv("h.conv3", h2, spec.output_channels, bias=spec.final_bias),
        ]
        self.h_bns = [BatchNorm1d("h.bn1", w, dtype=dt), BatchNorm1d("h.bn2", h2, dtype=dt)] if bn else []

    # bookkeeping ---------------------------------------------------------------

    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def conv_layers(self) -> list[ConvLayer]:
        layers = [self.f_conv, self.g_merge]
        if self.g_recall is not None:
            layers.append(self.g_recall)
        return layers + self.g_block + self.h_convs

    def recurrent_convs(self) -> list[ConvLayer]:
        """Convolutions inside G that act on the scratchpad."""
        return [self.g_merge] + self.g_block

    def constrained_layers(self) -> list[ConvLayer]:
        return [c for c in self.conv_layers() if c.constrained]

    def batchnorms(self) -> list[BatchNorm1d]:
        return [b for b in [self.f_bn_in, self.f_bn] if b is not None] + list(self.h_bns)

    def named_parameters(self) -> list[tuple[str, Tensor, str]]:
        params = []
        for mod in [self.f_bn_in, self.f_conv, self.f_bn, self.g_merge, self.g_recall, *self.g_block,
                    self.g_combiner, *self.h_convs, *self.h_bns]:
            if mod is not None:
                params.extend(mod.parameters())
        return params

    def parameter_count(self) -> int:
        return int(sum(p.data.size for _, p, _ in self.named_parameters()))

    def zero_grad(self) -> None:
        for _, p, _ in self.named_parameters():
            p.grad = None

    def mark_updated(self) -> None:
        for c in self.conv_layers():
            c.mark_updated()

    def power_step(self) -> None:
        for c in self.constrained_layers():
            c.power_step(1)

    def reconverge(self, max_iters: int = 100, tol: float = 1e-10) -> dict[str, tuple[float, float]]:
        return {c.name: c.reconverge(max_iters, tol) for c in self.constrained_layers()}

    def prepare_eval(self) -> None:
        """Materialize evaluation-time caches so the model is safe to share read-only."""
        with T.no_grad():
            for c in self.constrained_layers():
                c.normalized_kernel(training=False)

    def topology(self) -> dict:
        s = self.spec
        return {
            "topology_version": TOPOLOGY_VERSION,
            "variant": s.variant,
            "width": s.width,
            "kernel_size": s.kernel_size,
            "activation": s.activation,
            "use_batchnorm": s.use_batchnorm,
            "final_bias": s.final_bias,
            "recall_bias": s.recall_bias,
            "epsilon": s.epsilon,
            "precision": s.precision,
            "F": "[bn_in] conv(1->w) [bn] act",
            "G": {
                "DT": "act(conv(phi)) -> z; z + act(c3(act(c2(act(c1(z))))))",
                "DTR": "act(conv([phi, x])) -> z; z + act(c3(act(c2(act(c1(z))))))",
                "DTL": "act(sn_conv(phi) + conv(x)) -> z; (1-g)*z + g*act(sn_c3(act(sn_c2(act(sn_c1(z))))))",
            }[s.variant],
            "H": f"conv(w->w) [bn] act, conv(w->{s.head_width}) [bn] act, conv({s.head_width}->2)",
            "layers": [
                {"name": c.name, "shape": list(c.kernel.shape), "bias": c.bias is not None, "constrained": c.constrained}
                for c in self.conv_layers()
            ],
        }

    # forward pieces ------------------------------------------------------------------

    def _act(self, t: Tensor) -> Tensor:
        return apply_activation(self.activation, t)

    def input_tensor(self, x) -> Tensor:
        return _as_input(x, self.spec.dtype)

    def forward_init(self, x) -> Scratchpad:
        x = self.input_tensor(x)
        tr = self.training
        h = self.f_bn_in(x, tr) if self.f_bn_in is not None else x
        h = self.f_conv(h, tr)
        if self.f_bn is not None:
            h = self.f_bn(h, tr)
        return Scratchpad(self._act(h), 0)

    def recall_term(self, x) -> Tensor | None:
        """The state-independent part of the DTL merge, computed once per input."""
        if self.g_recall is None:
            return None
        return self.g_recall(self.input_tensor(x), self.training)

    def g(self, phi: Tensor, x, recall: Tensor | None = None) -> Tensor:
        tr = self.training
        variant = self.spec.variant
        if variant == "DT":
            pre = self.g_merge(phi, tr)
        elif variant == "DTR":
            xt = self.input_tensor(x)
            if xt.shape[2] != phi.shape[2]:
                raise T.ShapeError(f"state length {phi.shape[2]} does not match input length {xt.shape[2]}")
            pre = self.g_merge(T.concat([phi, xt], axis=1), tr)
        else:
            if recall is None:
                recall = self.recall_term(x)
            if recall.shape[2] != phi.shape[2]:
                raise T.ShapeError(f"state length {phi.shape[2]} does not match input length {recall.shape[2]}")
            pre = T.add(self.g_merge(phi, tr), recall)
        z = self._act(pre)
        b = z
        for c in self.g_block:
            b = self._act(c(b, tr))
        if self.g_combiner is not None:
            return self.g_combiner(z, b)
        return T.add(z, b)

    def step(self, s: Scratchpad, x, recall: Tensor | None = None) -> Scratchpad:
        return Scratchpad(self.g(s.phi, x, recall), s.m + 1)

    def readout(self, s: Scratchpad) -> Tensor:
        tr = self.training
        h = s.phi
        for i, c in enumerate(self.h_convs):
            h = c(h, tr)
            if i < 2:
                if self.h_bns:
                    h = self.h_bns[i](h, tr)
                h = self._act(h)
        return h

    def run(self, x, M: int, record: bool = False, logits_at: Sequence[int] = ()) -> tuple[Tensor, Trajectory]:
        """Apply F, then G ``M`` times, then H.

        Overflow is reported in ``Trajectory.divergence`` rather than raised;
        iteration stops at the first non-finite state.
        """
        if M < 1:
            raise ValueError(f"M must be >= 1, got {M}")
        traj = Trajectory()
        want = set(logits_at)
        with np.errstate(over="ignore", invalid="ignore"):
            s = self.forward_init(x)
            recall = self.recall_term(x)
            prev_norm = _norm64(s.phi.data)
            if record:
                traj.norms.append(prev_norm)
            for m in range(1, M + 1):
                nxt = self.step(s, x, recall)
                norm = _norm64(nxt.phi.data)
                if record:
                    traj.norms.append(norm)
                    traj.step_norms.append(_norm64(nxt.phi.data - s.phi.data))
                s = nxt
                if not np.isfinite(norm):
                    traj.divergence = DivergenceReport(iteration=m, norm=norm)
                    break
                if m in want:
                    with T.no_grad():
                        traj.logits[m] = self.readout(s).data.copy()
            logits = self.readout(s)
        return logits, traj

    def sweep_logits(self, x, m_list: Sequence[int]) -> dict[int, np.ndarray]:
        """Logits after each iteration count in ``m_list`` from one evaluation-mode pass."""
        ms = sorted(set(int(m) for m in m_list))
        if not ms or ms[0] < 1:
            raise ValueError("iteration counts must be >= 1")
        out: dict[int, np.ndarray] = {}
        was = self.training
        self.eval()
        try:
            with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
                s = self.forward_init(x)
                recall = self.recall_term(x)
                for m in range(1, ms[-1] + 1):
                    s = self.step(s, x, recall)
                    if m in ms:
                        out[m] = self.readout(s).data
        finally:
            self.train(was)
        return out

    def recurrent_stages(self) -> list:
        """Stage description of G(., x) at evaluation time, for certification."""
        act = ActivationStage("act", self.activation)
        w = self.spec.width
        merge_kernel = self.g_merge.effective_kernel()
        if self.spec.variant == "DTR":
            merge_kernel = merge_kernel[:, :w, :]  # recall channels are constant
        stages: list = [ConvStage("merge", merge_kernel)]
        if self.spec.variant != "DT" or self.g_merge.bias is not None:
            stages.append(OffsetStage("recall"))
        stages.append(ActivationStage("merge.act", self.activation))
        block = []
        for i, c in enumerate(self.g_block, start=1):
            block.append(ConvStage(f"block{i}", c.effective_kernel()))
            block.append(ActivationStage(f"block{i}.act", act.kind))
        if self.g_combiner is not None:
            stages.append(ResidualStage("residual", tuple(block), "interpolate", self.g_combiner.gamma()))
        else:
            stages.append(ResidualStage("residual", tuple(block), "add"))
        return stages

    # state (checkpointing) ------------------------------------------------------------------

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for b in self.batchnorms():
            out[f"{b.name}.running_mean"] = b.running_mean
            out[f"{b.name}.running_var"] = b.running_var
        for c in self.constrained_layers():
            out[f"{c.name}.pi_u"] = c.pi_u
            out[f"{c.name}.pi_v"] = c.pi_v
            out[f"{c.name}.pi_direction"] = c._direction
            out[f"{c.name}.sigma_estimate"] = np.asarray(c.sigma_estimate, dtype=np.float64)
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for b in self.batchnorms():
            b.running_mean[...] = buffers[f"{b.name}.running_mean"]
            b.running_var[...] = buffers[f"{b.name}.running_var"]
        for c in self.constrained_layers():
            c.pi_u = np.array(buffers[f"{c.name}.pi_u"], dtype=np.float64)
            c.pi_v = np.array(buffers[f"{c.name}.pi_v"], dtype=np.float64)
            c._direction = np.array(buffers[f"{c.name}.pi_direction"], dtype=np.float64)
            c.sigma_estimate = float(np.asarray(buffers[f"{c.name}.sigma_estimate"]).reshape(-1)[0])

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, enough to restore the model exactly."""
        state = {f"param/{n}": p.data.copy() for n, p, _ in self.named_parameters()}
        state.update({f"buffer/{n}": np.array(b, copy=True) for n, b in self.buffers().items()})
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for n, p, _ in self.named_parameters():
            src = state[f"param/{n}"]
            if src.shape != p.shape:
                raise T.ShapeError(f"{n}: checkpoint shape {src.shape} vs model {p.shape}")
            p.data[...] = src
        self.load_buffers({k[len("buffer/"):]: v for k, v in state.items() if k.startswith("buffer/")})
        self.mark_updated()


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    return Model(spec, seed)


def forward_init(model: Model, x) -> Scratchpad:
    return model.forward_init(x)


def step(model: Model, s: Scratchpad, x) -> Scratchpad:
    return model.step(s, x)


def readout(model: Model, s: Scratchpad) -> Tensor:
    return model.readout(s)


def run(model: Model, x, M: int, record: bool = False) -> tuple[Tensor, Trajectory]:
    return model.run(x, M, record)


def predict_bits(logits) -> np.ndarray:
    """Per-position argmax over the two channels; channel 0 is bit 0 and wins ties."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (z[:, 1, :] > z[:, 0, :]).astype(np.uint8)
