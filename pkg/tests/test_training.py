import csv
import math

import numpy as np
import pytest

from iterthink import tensor as T
from iterthink import training as tr
from iterthink.data import generate_dataset, random_instances
from iterthink.model import ModelSpec, build_model
from iterthink.training import (
    AdamState,
    DivergenceError,
    TrainConfig,
    adam_step,
    best_epoch_index,
    evaluate_accuracy,
    extrapolation_sweep,
    ipt_sample,
    lr_at,
    milestones,
    train,
    training_loss,
    write_metrics_csv,
    write_sweep_csv,
)
from iterthink.tensor import Tensor

from oracles import central_difference, prefix_parity_cumsum, rel_error


# schedule -------------------------------------------------------------------------------

def test_milestones_default_recipe():
    assert milestones(150, "8:4:2:1") == [80, 120, 140]


def test_milestones_documented_rule_80_epochs():
    assert milestones(80, "8:4:2:1") == [42, 64, 74]


def test_milestones_short_chain():
    # floor(150 * 4/7), floor(150 * 6/7); see the decisions ledger
    assert milestones(150, "4:2:1") == [85, 128]


def test_bad_ratio():
    for bad in ("8", "8:x", "8:0:1"):
        with pytest.raises(ValueError):
            milestones(150, bad)


def test_lr_warmup_first_epoch():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(0.001 * (1 - math.exp(-1 / 3)), rel=1e-12)
    assert lr_at(0, cfg) / cfg.lr == pytest.approx(0.2835, abs=1e-4)


def test_lr_saturates_before_first_milestone():
    assert lr_at(79, TrainConfig()) == pytest.approx(0.001, rel=1e-10)


def test_lr_after_all_milestones():
    cfg = TrainConfig()
    for e in (140, 149):
        assert lr_at(e, cfg) == pytest.approx(0.001 * 1e-3 * tr.warmup_factor(e, 3.0), rel=1e-12)


def test_lr_shape():
    cfg = TrainConfig()
    lrs = [lr_at(e, cfg) for e in range(150)]
    assert all(b > a for a, b in zip(lrs[:79], lrs[1:80]))
    for m in (80, 120, 140):
        assert lrs[m] < lrs[m - 1]
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_default_config_values():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.ipt_alpha, cfg.warmup_period) == (0.001, 0.0002, 0.5, 3.0)
    assert (cfg.epochs, cfg.batch_size, cfg.m_train, cfg.train_bits) == (150, 500, 30, 32)
    assert (cfg.milestone_ratio, cfg.milestone_multiplier) == ("8:4:2:1", 0.1)


@pytest.mark.parametrize("field,value", [("ipt_alpha", 1.5), ("epochs", 0), ("lr", 0.0), ("beta1", 1.0),
                                         ("weight_decay", -1.0), ("milestone_ratio", "1")])
def test_config_validation(field, value):
    cfg = TrainConfig(**{field: value})
    with pytest.raises(ValueError):
        cfg.validate()


# IPT ---------------------------------------------------------------------------------

def test_ipt_m1_always_zero_one():
    rng = np.random.default_rng(0)
    assert {ipt_sample(1, rng) for _ in range(100)} == {(0, 1)}


def test_ipt_bounds_over_many_draws():
    rng = np.random.default_rng(1)
    draws = np.array([ipt_sample(30, rng) for _ in range(100_000)])
    n, k = draws[:, 0], draws[:, 1]
    assert k.min() >= 1 and (n + k).max() <= 30 and n.min() >= 0
    # n is uniform over 0..29 and k covers its full range
    counts = np.bincount(n, minlength=30)
    assert len(counts) == 30 and counts.min() > 0.9 * 100_000 / 30
    assert k.max() == 30


def test_ipt_seeded():
    a = [ipt_sample(30, np.random.default_rng(7)) for _ in range(3)]
    assert len(set(a)) == 1


def test_ipt_rejects_zero():
    with pytest.raises(ValueError):
        ipt_sample(0, np.random.default_rng(0))


def _tiny(variant="DTL", width=4, seed=0):
    m = build_model(ModelSpec(variant=variant, width=width), seed=seed)
    return m.train()


def _batch(batch=4, length=6, seed=0):
    bits, targets = random_instances(length, batch, seed)
    return bits[:, None, :].astype(float), targets


def _full_loss(model, x, t, M):
    logits, _ = model.run(x, M)
    return T.cross_entropy(logits, t)


def test_alpha_zero_is_full_loss():
    m = _tiny()
    x, t = _batch()
    a = training_loss(m, x, t, 3, 0.0)
    assert a.item() == _full_loss(m, x, t, 3).item()


def test_alpha_one_with_degenerate_sample_is_full_loss():
    m = _tiny()
    x, t = _batch()
    a = training_loss(m, x, t, 3, 1.0, sample=(0, 3))
    assert a.item() == pytest.approx(_full_loss(m, x, t, 3).item(), abs=1e-14)


def test_prog_term_with_skipped_iterations_gives_f_no_gradient():
    m = _tiny()
    x, t = _batch()
    training_loss(m, x, t, 4, 1.0, sample=(2, 2)).backward()
    assert m.f_conv.kernel.grad is None or not np.any(m.f_conv.kernel.grad)
    assert np.any(m.h_convs[0].kernel.grad)
    m.zero_grad()
    training_loss(m, x, t, 4, 1.0, sample=(0, 2)).backward()
    assert np.any(m.f_conv.kernel.grad)


def test_mixed_loss_is_weighted_sum():
    m = _tiny()
    x, t = _batch()
    mixed = training_loss(m, x, t, 3, 0.5, sample=(1, 2)).item()
    full = _full_loss(m, x, t, 3).item()
    prog = training_loss(m, x, t, 3, 1.0, sample=(1, 2)).item()
    assert mixed == pytest.approx(0.5 * full + 0.5 * prog, abs=1e-14)


def test_alpha_range_and_rng_required():
    m = _tiny()
    x, t = _batch()
    with pytest.raises(ValueError):
        training_loss(m, x, t, 3, 1.2)
    with pytest.raises(ValueError):
        training_loss(m, x, t, 3, 0.5)


@pytest.mark.parametrize("param", ["h.conv1.kernel", "g.block1.kernel", "f.conv.kernel", "g.residual.gamma_raw", "g.merge.kernel"])
def test_training_loss_gradient_matches_finite_differences(param):
    m = _tiny(width=2)
    x, t = _batch(3, 5)
    p = dict((n, q) for n, q, _ in m.named_parameters())[param]

    def f(values):
        saved = p.data.copy()
        p.data[...] = values
        m.mark_updated()
        with T.no_grad():
            v = training_loss(m, x, t, 3, 0.5, sample=(0, 2)).item()
        p.data[...] = saved
        m.mark_updated()
        return v

    m.zero_grad()
    training_loss(m, x, t, 3, 0.5, sample=(0, 2)).backward()
    (num,) = central_difference(f, [p.data.copy()], 1e-6)
    assert rel_error(p.grad, num) < 1e-5


# Adam ---------------------------------------------------------------------------------

def _param(value, kind="conv_kernel", name="p"):
    return (name, Tensor(np.array(value, dtype=float), requires_grad=True), kind)


def test_adam_zero_gradient_constrained_unchanged():
    p = _param([[[0.5, -1.0, 2.0]]], "conv_kernel_constrained")
    p[1].grad = np.zeros((1, 1, 3))
    before = p[1].data.copy()
    adam_step([p], AdamState(), 0.001, weight_decay=2e-4)
    assert p[1].data.tobytes() == before.tobytes()


def test_adam_first_step_is_minus_lr():
    p = _param([3.0], "conv_bias")
    p[1].grad = np.array([1.0])
    adam_step([p], AdamState(), 0.01, eps=1e-8)
    assert p[1].data[0] == pytest.approx(3.0 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_coupled_decay_formula():
    w0 = np.array([[[0.5, -1.0, 2.0]]])
    p = _param(w0.copy())
    p[1].grad = np.zeros_like(w0)
    lr, wd, eps = 0.001, 2e-4, 1e-8
    adam_step([p], AdamState(), lr, weight_decay=wd, eps=eps)
    g = wd * w0
    np.testing.assert_allclose(p[1].data, w0 - lr * g / (np.abs(g) + eps), rtol=0, atol=1e-15)
    assert np.all(np.abs(p[1].data) < np.abs(w0))


def test_adam_two_steps_against_reference():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(2)]
    p = _param(w.copy())
    st = AdamState()
    m = v = np.zeros(5)
    ref = w.copy()
    for t, g in enumerate(grads, 1):
        p[1].grad = g
        adam_step([p], st, 0.01, 0.9, 0.999, 0.1, 1e-8)
        ge = g + 0.1 * ref
        m = 0.9 * m + 0.1 * ge
        v = 0.999 * v + 0.001 * ge**2
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p[1].data, ref, rtol=1e-13)


def test_decay_touches_only_unconstrained_conv_kernels():
    m = _tiny("DTL", 4)
    m.g_recall.bias.data[...] = 0.3
    params = m.named_parameters()
    before = {n: p.data.copy() for n, p, _ in params}
    for _, p, _ in params:
        p.grad = np.zeros_like(p.data)
    st = AdamState()
    for _ in range(3):
        adam_step(params, st, 0.01, weight_decay=0.1)
    changed = {n for n, p, _ in params if not np.array_equal(p.data, before[n])}
    expect = {n for n, _, kind in params if kind == "conv_kernel"}
    assert changed == expect
    assert {"f.conv.kernel", "g.recall.kernel", "h.conv1.kernel"} <= expect
    assert not any(k.startswith("g.block") or k.startswith("g.merge") for k in expect)


def test_nonfinite_gradient_policy():
    p = _param([1.0])
    p[1].grad = np.array([np.nan])
    with pytest.raises(DivergenceError):
        adam_step([p], AdamState(), 0.01, strict=True)
    assert adam_step([p], AdamState(), 0.01, strict=False) is False


# evaluation ---------------------------------------------------------------------------

class StubModel:
    """Implements only what the evaluator needs; predicts via ``predict``."""

    def __init__(self, predict):
        self.predict = predict
        self.training = True
        self.seen = []

    def eval(self):
        self.training = False
        return self

    def train(self, mode=True):
        self.training = mode
        return self

    def prepare_eval(self):
        pass

    def sweep_logits(self, x, m_list):
        bits = x[:, 0, :].astype(np.uint8)
        self.seen.append(bits.copy())
        out = {}
        for m in m_list:
            pred = self.predict(bits, m)
            z = np.zeros((len(bits), 2, bits.shape[1]))
            z[:, 1, :] = np.where(pred == 1, 1.0, -1.0)
            out[m] = z
        return out


def test_perfect_stub_scores_one():
    stub = StubModel(lambda b, m: prefix_parity_cumsum(b))
    assert evaluate_accuracy(stub, 32, 200, 30, 0) == 1.0


def test_zero_predictor_scores_zero():
    stub = StubModel(lambda b, m: np.zeros_like(b))
    assert evaluate_accuracy(stub, 32, 500, 30, 0) == 0.0


def test_one_wrong_bit_in_hundred():
    victim = random_instances(16, 100, 3)[0][17]

    def predict(b, m):
        out = prefix_parity_cumsum(b)
        hit = np.all(b == victim, axis=1)
        out[hit, 5] ^= 1
        return out

    assert evaluate_accuracy(StubModel(predict), 16, 100, 30, 3, chunk=7) == pytest.approx(0.99)


def test_sweep_reduces_to_evaluate_and_reuses_instances():
    stub = StubModel(lambda b, m: prefix_parity_cumsum(b) if m >= 50 else np.zeros_like(b))
    rows = extrapolation_sweep(stub, 12, 64, [30, 50, 100], seed=4, chunk=10)
    assert rows == [(30, 0.0), (50, 1.0), (100, 1.0)]
    seen = np.concatenate(stub.seen)
    assert seen.tobytes() == random_instances(12, 64, 4)[0].tobytes()
    assert extrapolation_sweep(stub, 12, 64, [30], 4) == [(30, evaluate_accuracy(stub, 12, 64, 30, 4))]
    assert stub.training  # mode restored


def test_sweep_rejects_unsorted():
    stub = StubModel(lambda b, m: b)
    with pytest.raises(ValueError):
        extrapolation_sweep(stub, 8, 10, [50, 30], 0)


def test_sweep_independent_of_worker_count(monkeypatch):
    model = build_model(ModelSpec(variant="DTL", width=4), seed=1)
    monkeypatch.setenv("ITERTHINK_THREADS", "1")
    one = extrapolation_sweep(model, 8, 60, [1, 3], 0, chunk=7)
    monkeypatch.setenv("ITERTHINK_THREADS", "4")
    four = extrapolation_sweep(model, 8, 60, [1, 3], 0, chunk=7)
    assert one == four


def test_sweep_csv_rows(tmp_path):
    path = tmp_path / "sweep.csv"
    write_sweep_csv([(30, 0.5), (50, 1.0)], 100, 512, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["M", "accuracy", "count", "bits"]
    assert rows[1:] == [["30", "0.5", "100", "512"], ["50", "1.0", "100", "512"]]


def test_metrics_csv_schema(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv([tr.EpochRecord(0, 0.7, 0.69, 0.25, 0.001, False)], path)
    assert open(path).read() == "epoch,train_loss,val_loss,val_acc,lr,diverged\n0,0.7,0.69,0.25,0.001,0\n"


# training loop --------------------------------------------------------------------------

def test_best_epoch_rule():
    assert best_epoch_index([0.2, 0.9, 0.7]) == 1
    assert best_epoch_index([0.5, 0.9, 0.9]) == 1
    assert best_epoch_index([0.0]) == 0


def _small_config(**kw):
    base = dict(epochs=2, batch_size=8, m_train=3, train_bits=6, dataset_size=20, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_smoke_one_epoch_five_instances():
    res = train(ModelSpec(variant="DTL", width=4), _small_config(epochs=1, dataset_size=5))
    assert len(res.records) == 1
    r = res.records[0]
    assert 0.0 <= r.val_acc <= 1.0 and math.isfinite(r.train_loss) and not r.diverged


def test_training_is_deterministic():
    a = train(ModelSpec(variant="DTL", width=4), _small_config())
    b = train(ModelSpec(variant="DTL", width=4), _small_config())
    for k in a.best_state:
        assert a.best_state[k].tobytes() == b.best_state[k].tobytes()
    assert [r.train_loss for r in a.records] == [r.train_loss for r in b.records]


def test_best_epoch_matches_selection_rule_and_constraints_hold():
    res = train(ModelSpec(variant="DTL", width=4), _small_config(epochs=3))
    assert res.best_epoch == best_epoch_index([r.val_acc for r in res.records])
    best = res.best_model()
    for layer in best.constrained_layers():
        assert layer.certified_sigma() > 0
        assert np.linalg.norm(layer.normalized_kernel(training=False).data.reshape(layer.out_channels, -1), 2) < 1


@pytest.mark.parametrize("variant", ["DTR", "DTL"])
def test_training_lowers_loss(variant):
    # with fewer epochs the milestones cut the rate before DTR leaves the ln 2 plateau
    res = train(ModelSpec(variant=variant, width=8), _small_config(epochs=8, dataset_size=200, batch_size=20, lr=0.01))
    first, last = res.records[0], res.records[-1]
    assert last.train_loss < first.train_loss - 0.05
    assert last.val_loss < first.val_loss - 0.05


def test_early_stop():
    ds = generate_dataset(6, 20, 0)
    res = train(ModelSpec(variant="DTL", width=4), _small_config(epochs=5, early_stop_acc=0.0), ds)
    assert len(res.records) == 1


def _poisoned(monkeypatch):
    real = tr.training_loss

    def nan_loss(*a, **k):
        return T.scale(real(*a, **k), math.nan)

    monkeypatch.setattr(tr, "training_loss", nan_loss)


def test_divergence_raises_in_f64(monkeypatch):
    _poisoned(monkeypatch)
    with pytest.raises(DivergenceError) as info:
        train(ModelSpec(variant="DTR", width=4), _small_config())
    assert info.value.epoch == 0


def test_divergence_logged_in_f32(monkeypatch):
    _poisoned(monkeypatch)
    res = train(ModelSpec(variant="DTR", width=4, precision="f32"), _small_config(epochs=3))
    assert len(res.records) == 3 and all(r.diverged for r in res.records)
