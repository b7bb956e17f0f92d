import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iterthink.analysis import (
    audit_spectral_norms,
    certify_lipschitz,
    detect_overthinking,
    fixed_point_probe,
    growth_ratios,
    growth_trace,
    growth_trace_map,
    overthinking_scan,
    probe_model_fixed_point,
    recurrent_map,
    verify_contraction,
    write_json,
)
from iterthink.layers import exact_spectral_norm, reshape_conv_weights
from iterthink.model import ModelSpec, build_model

from oracles import prefix_parity_cumsum
from test_training import StubModel


def _model(variant="DTL", width=4, seed=0, **kw):
    return build_model(ModelSpec(variant=variant, width=width, **kw), seed=seed).eval()


def _x(batch=2, length=10, seed=0):
    return np.random.default_rng(seed).integers(0, 2, (batch, 1, length)).astype(float)


# spectral audit ----------------------------------------------------------------------

def test_fresh_dtl_audit_constrained_below_one():
    audit = audit_spectral_norms(_model(width=8))
    constrained = [e for e in audit.entries if e["constrained"]]
    assert len(constrained) == 4 and all(e["norm"] < 1 for e in constrained)
    assert len(audit.entries) == 5  # merge, recall and the three block convs


def test_hand_built_layer_norm_two():
    k = np.zeros((2, 1, 3))
    k[0, 0] = [1, 0, 0]
    k[1, 0] = [0, 2, 0]
    assert exact_spectral_norm(reshape_conv_weights(k)) == pytest.approx(2.0, abs=1e-12)
    m = _model("DT", width=2)
    m.g_merge.kernel.data[...] = 0.0
    m.g_merge.kernel.data[:, :1, :] = k
    m.mark_updated()
    entry = audit_spectral_norms(m).entries[0]
    assert entry["layer"] == "g.merge" and entry["norm"] == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("variant", ["DT", "DTR"])
def test_unconstrained_audit_reports_raw_norms(variant):
    m = _model(variant, width=6)
    audit = audit_spectral_norms(m)
    assert len(audit.entries) == 4 and not any(e["constrained"] for e in audit.entries)
    for e, layer in zip(audit.entries, m.recurrent_convs()):
        assert e["norm"] == exact_spectral_norm(reshape_conv_weights(layer.kernel.data))


def test_audit_json_schema(tmp_path):
    path = tmp_path / "spectral.json"
    write_json(audit_spectral_norms(_model()).to_json(), path)
    data = json.loads(path.read_text())
    assert isinstance(data, list) and all(set(e) == {"layer", "norm", "constrained"} for e in data)


# certificate ---------------------------------------------------------------------------

def test_fresh_dtl_certificate_below_one():
    for w in (4, 8, 16):
        cert = certify_lipschitz(_model(width=w, seed=w))
        assert 0 <= cert.K < 1
        assert set(cert.to_json()) == {"K", "stages"}


def test_dtr_certificate_reported_not_refused():
    cert = certify_lipschitz(_model("DTR", width=8))
    assert cert.K > 0


def test_certificate_json_round_trips(tmp_path):
    path = tmp_path / "certificate.json"
    cert = certify_lipschitz(_model(), 10)
    write_json(cert.to_json(), path)
    assert json.loads(path.read_text())["K"] == cert.K


# measured contraction ----------------------------------------------------------------

def test_measured_ratio_within_certificate():
    m = _model(width=4, seed=3)
    x = _x(2, 8)
    cert = certify_lipschitz(m, 8)
    rep = verify_contraction(m, x, 60, seed=0)
    assert rep.max_ratio <= cert.K + 1e-9
    assert {"gaussian", "trajectory", "perturbed"} == set(rep.kinds)


def test_pairs_below_resolution_dropped():
    m = _model(width=4, seed=3)
    rep = verify_contraction(m, _x(1, 8), 90, seed=1, trajectory_M=120)
    # a converged trajectory has many coinciding late states
    assert rep.unresolved > 0
    assert len(rep.ratios) + rep.unresolved == 90


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([2, 3, 4]))
def test_soundness_with_spread_gammas_and_scaled_kernels(seed, width):
    # imitates a trained model: non-uniform gammas and arbitrary raw kernel scales
    rng = np.random.default_rng(seed)
    m = _model(width=width, seed=seed % 1000)
    m.g_combiner.gamma_raw.data[...] = rng.uniform(-6, 6, width)
    for c in m.recurrent_convs():
        c.kernel.data *= rng.uniform(0.1, 5)
    m.mark_updated()
    x = _x(1, 6, seed)
    cert = certify_lipschitz(m, 6)
    assert verify_contraction(m, x, 45, seed).max_ratio <= cert.K + 1e-9


def test_identity_configured_map_has_ratio_one():
    m = _model("DT", width=3)
    m.g_merge.kernel.data[...] = 0.0
    m.g_merge.kernel.data[:, :, 1] = np.eye(3)
    for c in m.g_block:
        c.kernel.data[...] = 0.0
    m.mark_updated()
    g = recurrent_map(m, _x(1, 5))
    a, b = np.abs(np.random.default_rng(0).standard_normal((2, 1, 3, 5)))
    assert np.linalg.norm(g(a) - g(b)) / np.linalg.norm(a - b) == 1.0


def test_dtr_ratios_reported():
    rep = verify_contraction(_model("DTR", width=8), _x(2, 8), 30, seed=0)
    assert np.all(np.isfinite(rep.ratios)) and rep.max_ratio > 0
    print(f"DTR random-init max measured ratio {rep.max_ratio:.3f}")


def test_pair_count_validated():
    with pytest.raises(ValueError):
        verify_contraction(_model(), _x(), 0, seed=0)


# fixed points ---------------------------------------------------------------------------

def test_stub_contraction_fixed_point():
    c = np.array([1.0, -2.0, 0.5])
    rep = fixed_point_probe(lambda p: 0.5 * p + c, [np.zeros(3), 100 * np.ones(3), -np.arange(3.0)], 1e-12, 1000)
    assert rep.converged
    for p in rep.finals:
        np.testing.assert_allclose(p, 2 * c, atol=1e-10)
    assert rep.decay == pytest.approx(0.5, abs=1e-6)
    d = np.array(rep.distances)
    assert np.allclose(d, d.T) and d.max() < 1e-9


def test_non_convergence_flagged():
    rep = fixed_point_probe(lambda p: -p, [np.ones(2)], 1e-10, 50)
    assert not rep.converged and rep.starts[0]["iterations"] == 50


def test_fixed_point_json_schema():
    rep = fixed_point_probe(lambda p: 0.5 * p, [np.ones(2)], 1e-10, 200)
    out = rep.to_json()
    assert set(out) == {"starts", "distances", "decay", "converged"}
    json.dumps(out)


def test_bad_tolerance():
    with pytest.raises(ValueError):
        fixed_point_probe(lambda p: p, [np.ones(1)], 0.0, 10)


def test_dtl_unique_fixed_point_without_training():
    m = _model(width=4, seed=11)
    x = _x(1, 12)
    K = certify_lipschitz(m, 12).K
    rep = probe_model_fixed_point(m, x, 5, 1e-10, 10_000, seed=0)
    assert rep.converged
    assert max(max(r) for r in rep.distances) < 1e-6
    assert rep.decay <= K + 1e-6


def test_probe_takes_one_instance():
    from iterthink.tensor import ShapeError
    with pytest.raises(ShapeError):
        probe_model_fixed_point(_model(), _x(2), 2, 1e-8, 10, 0)


# growth ------------------------------------------------------------------------------

def test_doubling_stub():
    tr = growth_trace_map(lambda p: 2 * p, np.ones(4), 6)
    assert tr.ratios == [2.0] * 6 and not tr.overflow


def test_zero_denominator_is_inf():
    assert growth_ratios([0.0, 1.0, 2.0]) == [float("inf"), 2.0]


def test_overflow_flagged():
    with np.errstate(over="ignore"):
        tr = growth_trace_map(lambda p: (p * np.float32(1e15)).astype(np.float32), np.ones(2, np.float32), 10)
    # 1e30 is still a finite float32; 1e45 is not
    assert tr.overflow and tr.overflow_iteration == 3
    assert tr.ratios[:2] == pytest.approx([1e15, 1e15], rel=1e-6)


def test_model_growth_series_length_and_limit():
    m = _model(width=4, seed=2)
    tr = growth_trace(m, _x(1, 8), 80)
    assert len(tr.ratios) == 80
    assert tr.ratios[-1] == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ValueError):
        growth_trace(m, _x(1, 8), 1)


# overthinking --------------------------------------------------------------------------

def test_flat_perfect_stub_not_flagged():
    stub = StubModel(lambda b, m: prefix_parity_cumsum(b))
    rep = overthinking_scan(stub, 16, 50, [10, 20, 40], seed=0)
    assert not rep.flagged and rep.peak == rep.final == 1.0


def test_synthetic_drop_flagged():
    rep = detect_overthinking([(10, 0.7), (20, 0.9), (40, 0.5)])
    assert rep.flagged and rep.peak == 0.9 and rep.final == 0.5


def test_threshold_rule_is_strict():
    assert not detect_overthinking([(1, 0.5), (2, 0.4)], threshold=0.25).flagged
    assert detect_overthinking([(1, 0.5), (2, 0.2)], threshold=0.25).flagged
    with pytest.raises(ValueError):
        detect_overthinking([])
