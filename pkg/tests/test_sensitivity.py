import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mxplan.errors import ConfigError, DataError
from mxplan.moe import (
    GeneratorConfig,
    MoEBlockSpec,
    MoEModel,
    QuantOptions,
    forward_block,
    forward_block_quantized,
    generate_calibration,
    generate_model,
)
from mxplan.quant import IDENTITY, QuantScheme
from mxplan.sensitivity import SensitivityTable, build_sensitivity_table, perturbation_delta

W2 = QuantScheme(2, 16, -1, -1, False)
W4 = QuantScheme(4, 16, -1, -1, False)
SCHEMES = [W2, W4, IDENTITY]


def test_delta_identical_is_zero():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert perturbation_delta(a, a) == 0.0


def test_delta_345():
    assert perturbation_delta([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0


@given(arrays(np.float64, (3, 5), elements=st.floats(-100, 100)),
       arrays(np.float64, (3, 5), elements=st.floats(-100, 100)))
def test_delta_matches_sum_of_squares(a, b):
    oracle = sum((y - x) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) ** 0.5
    assert perturbation_delta(a, b) == pytest.approx(oracle, rel=1e-12, abs=1e-12)


def test_delta_shape_mismatch():
    with pytest.raises(DataError):
        perturbation_delta(np.zeros((2, 2)), np.zeros((2, 3)))


def small_model(E=4, seed=0, scales=None):
    spec = MoEBlockSpec(E, 2, 128, 128)
    return generate_model(spec, seed, expert_scales=scales)


def calib(seed=1, samples=8, seq=8, d=128):
    return np.random.default_rng(seed).normal(size=(samples, seq, d))


def test_identity_column_zero_and_shape():
    m = small_model()
    tab = build_sensitivity_table(m, calib(), SCHEMES, QuantOptions(method="rtn"))
    assert tab.delta.shape == (4, 3, 3)
    np.testing.assert_array_equal(tab.delta[:, :, 2], 0.0)
    assert np.all(tab.delta >= 0)
    assert tab.meta["samples"] == 8


def test_matches_full_forward_oracle():
    """Each entry equals the mean per-sample distance of full block outputs."""
    m = small_model(E=3)
    c = calib(samples=4, seq=6)
    opts = QuantOptions(method="gptq", seed=3)
    tab = build_sensitivity_table(m, c, SCHEMES, opts)
    x = c.reshape(-1, 128)
    trace = m.route(x)
    ref = forward_block(x, m.experts, trace)
    for e in range(3):
        for j in range(3):
            assign = {(a, b): IDENTITY for a in range(3) for b in range(3)}
            assign[(e, j)] = W2
            out = forward_block_quantized(x, m.experts, trace, assign, opts, x, trace)
            per = [perturbation_delta(ref[s * 6:(s + 1) * 6], out[s * 6:(s + 1) * 6]) for s in range(4)]
            assert tab.delta[e, j, 0] == pytest.approx(np.mean(per), rel=1e-9)


def test_dead_expert_zero():
    m = small_model(E=3)
    # a huge negative bias means expert 2 is never selected with top_k=2 of 3
    m = MoEModel(m.spec, m.experts, m.router, np.array([0.0, 0.0, -1e6]))
    tab = build_sensitivity_table(m, calib(), SCHEMES, QuantOptions(method="rtn"))
    np.testing.assert_array_equal(tab.delta[2], 0.0)
    assert np.all(tab.delta[:2, :, 0] > 0)


def test_scaled_expert_more_sensitive():
    spec = MoEBlockSpec(2, 2, 128, 128)
    m = generate_model(spec, 0, expert_scales=[1.0, 10.0])
    tab = build_sensitivity_table(m, calib(), SCHEMES)
    assert tab.delta[1, :, 0].sum() > tab.delta[0, :, 0].sum()


def test_two_bit_worse_than_four_bit_across_seeds():
    wins = 0
    for seed in range(10):
        spec = MoEBlockSpec(4, 2, 128, 128)
        cfg = GeneratorConfig(outliers=True)
        m = generate_model(spec, seed, cfg)
        c = generate_calibration(spec, 64, 4, seed + 100, cfg)
        tab = build_sensitivity_table(m, c, SCHEMES, QuantOptions(method="rtn"))
        wins += tab.delta[:, :, 0].mean() >= tab.delta[:, :, 1].mean()
    assert wins >= 9


def test_deterministic_and_sum_aggregate():
    m = small_model()
    a = build_sensitivity_table(m, calib(), SCHEMES)
    b = build_sensitivity_table(m, calib(), SCHEMES)
    np.testing.assert_array_equal(a.delta, b.delta)
    s = build_sensitivity_table(m, calib(), SCHEMES, aggregate="sum")
    np.testing.assert_allclose(s.delta, a.delta * 8, rtol=1e-12)


def test_normalized_variant_is_finite():
    tab = build_sensitivity_table(small_model(), calib(), SCHEMES, normalize=True)
    assert np.all(np.isfinite(tab.delta)) and tab.meta["normalize"]


def test_requires_identity_and_valid_options():
    m = small_model()
    with pytest.raises(ConfigError):
        build_sensitivity_table(m, calib(), [W2])
    with pytest.raises(ConfigError):
        build_sensitivity_table(m, calib(), SCHEMES, aggregate="median")
    with pytest.raises(DataError):
        build_sensitivity_table(m, np.zeros((0, 4, 128)), SCHEMES)


def test_group_size_error_propagates():
    m = small_model()
    with pytest.raises(ConfigError):
        build_sensitivity_table(m, calib(), [QuantScheme(4, 16, 96), IDENTITY],
                                QuantOptions(hadamard=False))


def test_json_round_trip(tmp_path):
    tab = build_sensitivity_table(small_model(), calib(), SCHEMES, QuantOptions(method="rtn"))
    tab.save(tmp_path / "s.json")
    back = SensitivityTable.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.delta, tab.delta)
    assert back.schemes == tab.schemes and back.meta == tab.meta


def test_json_schema_rejects_bad_tables(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"schemes": ["w16a16"], "delta": [[[-1.0]]], "meta": {"samples": 1, "seed": 0}}))
    with pytest.raises(DataError):
        SensitivityTable.load(p)
    with pytest.raises(DataError):
        SensitivityTable(np.zeros((2, 3, 2)), [IDENTITY])
