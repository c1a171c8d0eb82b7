import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikescr import compute as C
from spikescr.errors import ConfigurationError, DimensionError
from spikescr.neuron import (LIF, NeuronConfig, atan_sigmoid, lif_sequence, lif_step, lif_trace,
                             surrogate_backward)
from spikescr.testkit import fd_gradient_check, lif_closed_form

from conftest import param64


def test_config_validation():
    with pytest.raises(ConfigurationError):
        NeuronConfig(tau=0.5)
    with pytest.raises(ConfigurationError):
        NeuronConfig(v_threshold=0.0, v_reset=0.0)
    cfg = NeuronConfig()
    assert (cfg.tau, cfg.v_threshold, cfg.v_reset, cfg.surrogate_alpha, cfg.detach_reset) == (2.0, 1.0, 0.0, 5.0, True)


def test_step_reaching_threshold_exactly_fires():
    s, v = lif_step(np.array([2.0]), np.array([0.0]))
    assert s.data[0] == 1.0 and v.data[0] == 0.0


def test_step_rest():
    s, v = lif_step(np.array([0.0]), np.array([0.0]))
    assert s.data[0] == 0.0 and v.data[0] == 0.0


def test_step_shape_mismatch():
    with pytest.raises(DimensionError):
        lif_step(np.zeros(3), np.zeros(2))


def test_constant_subthreshold_input_follows_closed_form():
    x = np.full((1, 50, 1), 0.6)
    tr = lif_trace(x)
    expect = [0.6 * (1 - 0.5 ** t) for t in range(1, 51)]
    np.testing.assert_allclose(tr.v[0, :, 0], expect, atol=1e-12)
    assert tr.s.sum() == 0


def test_closed_form_helper_matches_general_reset():
    cfg = NeuronConfig(tau=3.0, v_reset=-0.5, v_threshold=5.0)
    tr = lif_trace(np.full((1, 20, 1), 0.7), cfg)
    expect = [lif_closed_form(0.7, t, 3.0, -0.5) for t in range(1, 21)]
    np.testing.assert_allclose(tr.v[0, :, 0], expect, atol=1e-12)


def test_sequence_length_one_equals_step(rng):
    x = rng.normal(1.0, 1.0, size=(3, 1, 4))
    s_seq = lif_sequence(x).data[:, 0]
    s_step, _ = lif_step(x[:, 0], np.zeros((3, 4)))
    np.testing.assert_array_equal(s_seq, s_step.data)


def test_input_two_fires_every_step():
    out = lif_sequence(np.full((2, 6, 3), 2.0)).data
    assert np.all(out == 1.0)


def test_sequence_matches_stepwise_composition(rng):
    x = rng.normal(0.8, 1.0, size=(2, 7, 5))
    v = np.zeros((2, 5))
    spikes = []
    for t in range(7):
        s, vt = lif_step(x[:, t], v)
        v = vt.data
        spikes.append(s.data)
    np.testing.assert_array_equal(lif_sequence(x).data, np.stack(spikes, 1))


def test_spike_count_bound(rng):
    x = rng.normal(size=(4, 9, 3)) * 3
    assert lif_sequence(x).data.sum() <= 4 * 9 * 3


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 6, 3), elements=st.floats(-5, 5)))
def test_purity_and_exact_reset(x):
    tr = lif_trace(x)
    assert set(np.unique(tr.s)) <= {0.0, 1.0}
    np.testing.assert_array_equal(tr.v, tr.h * (1 - tr.s) + 0.0 * tr.s)
    assert np.all(tr.v[tr.s == 1] == 0.0)
    assert np.all(tr.v[tr.s == 0] == tr.h[tr.s == 0])


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 5), st.floats(-2, 0.99))
def test_monotone_at_one_step(x, dx, v0):
    s1, _ = lif_step(np.array([x]), np.array([v0]))
    s2, _ = lif_step(np.array([x + dx]), np.array([v0]))
    assert s2.data[0] >= s1.data[0]


def test_surrogate_values():
    assert surrogate_backward(0.0, 5.0) == pytest.approx(2.5)
    assert surrogate_backward(1e6, 5.0) < 1e-10
    xs = np.linspace(-3, 3, 31)
    np.testing.assert_array_equal(surrogate_backward(xs), surrogate_backward(-xs))


def test_surrogate_is_derivative_of_atan_sigmoid():
    xs = np.linspace(-2, 2, 41)
    h = 1e-6
    fd = (atan_sigmoid(xs + h) - atan_sigmoid(xs - h)) / (2 * h)
    np.testing.assert_allclose(surrogate_backward(xs), fd, rtol=1e-6)


def _soft_cfg(**kw):
    return NeuronConfig(soft=True, detach_reset=False, **kw)


def test_soft_mode_bptt_two_steps_four_neurons(rng):
    x = param64(rng.normal(1.0, 0.5, size=(1, 2, 4)))
    r = rng.normal(size=(1, 2, 4))
    rep = fd_gradient_check(lambda: (lif_sequence(x, _soft_cfg()) * r).sum(), [x], tol=1e-3)
    assert rep.passed, rep


def test_soft_mode_bptt_longer_sequence(rng):
    x = param64(rng.normal(0.9, 0.7, size=(2, 8, 3)))
    r = rng.normal(size=(2, 8, 3))
    rep = fd_gradient_check(lambda: (lif_sequence(x, _soft_cfg(tau=1.5)) * r).sum(), [x], tol=1e-3)
    assert rep.passed, rep


@pytest.mark.parametrize("detach", [True, False])
def test_fused_backward_matches_composed_steps(rng, detach):
    cfg = NeuronConfig(detach_reset=detach)
    xd = rng.normal(1.0, 1.0, size=(2, 6, 3))
    g = rng.normal(size=(2, 6, 3))
    x1 = param64(xd)
    (lif_sequence(x1, cfg) * g).sum().backward()
    x2 = param64(xd)
    v = C.tensor(np.zeros((2, 3)))
    total = None
    for t in range(6):
        s, v = lif_step(x2[:, t], v, cfg)
        term = (s * g[:, t]).sum()
        total = term if total is None else total + term
    total.backward()
    np.testing.assert_allclose(x1.grad, x2.grad, rtol=1e-10, atol=1e-12)


def test_lif_layer_records_last_spikes(rng):
    lif = LIF()
    out = lif(C.tensor(rng.normal(1, 1, size=(2, 3, 4))))
    assert lif.last_spikes is out.data


def test_sequence_needs_time_axis():
    with pytest.raises(DimensionError):
        lif_sequence(np.zeros(3))
