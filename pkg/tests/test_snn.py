import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snncvt.nn import ClipUnit, Linear, Network, StructuralError, build_network
from snncvt.qc import convert_to_qcann, make_deterministic
from snncvt.rng import substream
from snncvt.snn import (SpikingLayer, SpikingNetwork, construct_fig2_instances, convert_to_snn, load_spike_records,
                        rate_and_estimate, run_layer, save_spike_records, simulate, single_neuron,
                        verify_rate_identity)


def step_loop(v, theta, T, u0=0.0):
    """Scalar oracle for one IF neuron with constant per-step input."""
    u, n = u0, 0
    for _ in range(T):
        u += v
        if u >= theta:
            n += 1
            u -= theta
    return n, u


def constant_current(v, theta, T, u0=0.0):
    layer = SpikingLayer([Linear(np.array([[1.0]]), np.array([0.0]))], theta, u0)
    spikes, rec = run_layer(layer, np.array([[v]], np.float32), T, analog=True)
    return spikes[:, 0, 0], rec


def test_constant_current_03():
    spikes, rec = constant_current(0.3, 1.0, 4)
    assert spikes.tolist() == [False, False, False, True]
    assert rec.rate[0, 0] == 0.25


def test_boundary_fires_at_exact_threshold():
    spikes, rec = constant_current(0.25, 1.0, 4)
    assert spikes.tolist() == [False, False, False, True]
    assert rec.u_hatT[0, 0] == 0.0


def test_silent_network():
    spikes, rec = constant_current(0.0, 1.0, 5)
    assert not spikes.any()
    assert rec.residual[0, 0] == 0.0 and verify_rate_identity(rec) == 0.0


@settings(max_examples=200)
@given(st.integers(0, 64), st.integers(1, 8), st.integers(1, 32), st.integers(0, 3))
def test_closed_form_with_dyadic_values(k, m, T, e):
    # v = k/16 and theta = m/2^e are exact in binary, so sums are exact too
    v, theta = k / 16, m / 2 ** e
    spikes, _ = constant_current(v, theta, T)
    assert spikes.sum() == min(int(np.floor(v * T / theta)), T) == step_loop(v, theta, T)[0]


def test_closed_form_random_1000():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 1000:
        v, theta, T = rng.uniform(0, 2), rng.uniform(0.1, 2), int(rng.integers(1, 33))
        v, theta = float(np.float32(v)), float(np.float32(theta))
        z = v * T / theta
        if abs(z - round(z)) < 1e-3:
            continue  # float32 accumulation may land either side of an exact multiple
        spikes, _ = constant_current(v, theta, T)
        assert spikes.sum() == min(int(np.floor(z)), T) == step_loop(v, theta, T)[0]
        checked += 1


@given(st.floats(0, 2), st.floats(0, 2), st.integers(1, 20))
def test_rate_monotone_in_current(a, b, T):
    lo, hi = sorted((a, b))
    assert constant_current(lo, 1.0, T)[1].counts[0, 0] <= constant_current(hi, 1.0, T)[1].counts[0, 0]


@settings(max_examples=100)
@given(st.integers(0, 10**6), st.integers(2, 16))
def test_rate_identity_random_layers(seed, T):
    rng = np.random.default_rng(seed)
    n_in, n_out = int(rng.integers(1, 12)), int(rng.integers(1, 12))
    layer = SpikingLayer([Linear(rng.standard_normal((n_out, n_in)), rng.standard_normal(n_out) * 0.2)],
                         float(rng.uniform(0.2, 2)), rng.uniform(-0.5, 0.5, n_out))
    spikes = rng.random((T, 8, n_in)) < rng.uniform(0.05, 0.9)
    out, rec = run_layer(layer, spikes.astype(np.float32), T)
    assert verify_rate_identity(rec) < 1e-5
    assert set(np.unique(out)) <= {False, True}
    r = rec.rate * T
    assert np.allclose(r, np.round(r))
    bounded = (rec.u_hatT - rec.u_hat0 >= 0) & (rec.u_hatT - rec.u_hat0 < layer.theta)
    assert np.all((rec.residual[bounded] >= 0) & (rec.residual[bounded] < 1 / T))


def test_soft_reset_keeps_overshoot():
    _, rec = constant_current(0.7, 1.0, 2)
    assert rec.u_hatT[0, 0] == pytest.approx(0.4)


def test_negative_potential_is_not_clamped():
    _, rec = constant_current(-0.5, 1.0, 3)
    assert rec.u_hatT[0, 0] == pytest.approx(-1.5)


def test_non_finite_potential_raises():
    layer = SpikingLayer([Linear(np.array([[3e38]]), np.array([0.0]))], 1.0)
    with pytest.raises(FloatingPointError, match="layer 0 at step 2"), np.errstate(over="ignore"):
        run_layer(layer, np.ones((1, 1), np.float32), 3, analog=True)


# -- conversion ----------------------------------------------------------------

def qcann(T=4, seed=0):
    net = build_network("mlp:6,5", (3,), 2, substream(seed, "init"), batchnorm=False)
    return make_deterministic(convert_to_qcann(net, T, 0.0))


def test_shift_modes():
    q = qcann()
    thetas = [float(a.theta.data) for a in q.activation_layers()]
    snn = convert_to_snn(q, "init-half-theta")
    assert [float(l.u0.flat[0]) for l in snn.spiking_layers] == pytest.approx([t / 2 for t in thetas])
    snn = convert_to_snn(q, "none")
    assert all(np.all(l.u0 == 0) for l in snn.spiking_layers)
    snn = convert_to_snn(q, "per-step-bias")
    plain = convert_to_snn(q, "none")
    x = np.random.default_rng(0).standard_normal((10, 3)).astype(np.float32)
    _, shifted = run_layer(snn.layers[0], x, 4, analog=True)
    _, base = run_layer(plain.layers[0], x, 4, analog=True)
    assert np.allclose(shifted.v_mean - base.v_mean, thetas[0] / 8, atol=1e-6)


def test_convert_copies_parameters_and_shapes():
    q = qcann()
    snn = convert_to_snn(q)
    assert snn.T == 4 and len(snn.layers) == 3 and not snn.layers[-1].spiking
    assert np.array_equal(snn.layers[0].weight.data, q.layers[0].weight.data)
    out, recs = simulate(snn, np.zeros((5, 3), np.float32))
    assert out.shape == (5, 2) and len(recs) == 2


def test_noisy_qcann_rejected():
    net = build_network("mlp:4", (3,), 2, substream(0, "init"), batchnorm=False)
    with pytest.raises(ValueError, match="noise"):
        convert_to_snn(convert_to_qcann(net, 4, 0.1))


def test_structure_errors():
    with pytest.raises(StructuralError):
        convert_to_snn(Network([Linear(np.ones((2, 3))), ClipUnit(1.0)], (3,), 2), T=4)
    lay = SpikingLayer([Linear(np.ones((2, 3)))], 1.0)
    with pytest.raises(StructuralError):
        SpikingNetwork([lay], 4, (3,))
    with pytest.raises(ValueError):
        SpikingLayer([Linear(np.ones((2, 3)))], 0.0)


def test_snn_approaches_qcann_at_large_T():
    q = qcann(T=256)
    snn = convert_to_snn(q)
    x = np.random.default_rng(3).standard_normal((50, 3)).astype(np.float32)
    assert np.max(np.abs(snn.predict(x) - q.predict(x))) < 0.05


def test_spike_record_dump_roundtrip(tmp_path):
    snn = convert_to_snn(qcann())
    _, recs = simulate(snn, np.random.default_rng(0).standard_normal((7, 3)))
    save_spike_records(tmp_path / "r.npz", recs)
    back = load_spike_records(tmp_path / "r.npz")
    for a, b in zip(recs, back):
        assert np.array_equal(a.spikes, b.spikes)
        assert np.array_equal(a.v_mean, b.v_mean) and np.array_equal(a.u_hatT, b.u_hatT)
        assert a.theta == b.theta


# -- handcrafted one-neuron cases ----------------------------------------------

def test_three_handcrafted_cases():
    cases = construct_fig2_instances()
    assert [c.name for c in cases] == ["undervalued", "overvalued", "correct"]
    for c, (r, g) in zip(cases, [(1 / 6, 0.0), (2 / 6, 3 / 6), (1 / 6, 1 / 6)]):
        assert c.input_spikes.shape[0] == 6
        got = rate_and_estimate(c.layer, c.input_spikes)
        assert got == pytest.approx((r, g))


def test_handcrafted_cases_are_stable():
    a, b = construct_fig2_instances(), construct_fig2_instances()
    for x, y in zip(a, b):
        assert np.array_equal(x.input_spikes, y.input_spikes)
        assert np.array_equal(x.layer.weight.data, y.layer.weight.data)


def test_single_neuron_helper():
    layer = single_neuron([0.5, 0.5], theta=1.0)
    spikes = np.ones((4, 1, 2), np.float32)
    assert rate_and_estimate(layer, spikes) == (1.0, 1.0)
