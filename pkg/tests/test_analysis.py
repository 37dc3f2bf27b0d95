import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snncvt import analysis as an
from snncvt.data import DatasetSpec, ingest_dataset
from snncvt.nn import AvgPool2d, Conv2d, Linear, build_network, fuse_batchnorm, train_source_ann
from snncvt.qc import convert_to_qcann, make_deterministic, set_time_steps
from snncvt.rng import substream
from snncvt.snn import SpikingLayer, construct_fig2_instances, convert_to_snn, run_layer


# -- single neuron ----------------------------------------------------------------

@given(st.floats(0, 2), st.integers(1, 20))
def test_constant_sequence_has_no_deviation(c, T):
    c = float(np.float32(c))
    if abs(c * T - round(c * T)) < 1e-6:
        c += 1e-3   # keep clear of float rounding at exact grid points
    res = an.single_neuron_rpe_experiment(sequences=np.full((1, T), c))
    assert res.max_deviation == 0


def test_zero_sequence():
    res = an.single_neuron_rpe_experiment(sequences=np.zeros((1, 10)))
    assert (res.g[0], res.r[0]) == (0.0, 0.0)


def test_sine_sequences_show_rpe():
    res = an.single_neuron_rpe_experiment(100, 10)
    assert len(res.g) == 100
    assert np.all((res.g >= 0) & (res.g <= 1) & (res.r >= 0) & (res.r <= 1))
    assert res.max_deviation >= 1 / 10
    assert res.to_csv().splitlines()[0] == "g,r" and len(res.to_csv().splitlines()) == 101


def test_sine_sequences_deterministic():
    a, b = an.sine_sequences(5, 8, seed=3), an.sine_sequences(5, 8, seed=3)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 2.0)


# -- RPE incidence -------------------------------------------------------------

def test_bounded_layer_has_no_rpe():
    layer = SpikingLayer([Linear(np.eye(3), np.zeros(3))], 1.0)
    x = np.array([[0.1, 0.5, 0.9]], np.float32)
    _, rec = run_layer(layer, x, 4, analog=True)
    (stats,) = an.rpe_incidence(records=[rec])
    assert stats.fraction == 0 and stats.max_deviation == 0 and stats.n_trials == 3


def test_handcrafted_instances_incidence():
    fracs = []
    for c in construct_fig2_instances():
        _, rec = run_layer(c.layer, c.input_spikes, 6)
        fracs.append(an.rpe_incidence(records=[rec])[0].fraction)
    assert fracs == [1.0, 1.0, 0.0]


@given(st.integers(0, 1000))
def test_incidence_statistics_ranges(seed):
    rng = np.random.default_rng(seed)
    layer = SpikingLayer([Linear(rng.standard_normal((5, 4)), rng.standard_normal(5) * 0.1)], 1.0)
    _, rec = run_layer(layer, (rng.random((6, 3, 4)) < 0.5).astype(np.float32), 6)
    (s,) = an.rpe_incidence(records=[rec])
    assert 0 <= s.fraction <= 1 and 0 <= s.fraction_mismatch <= 1
    assert s.mean_deviation >= 0 and s.max_deviation >= s.mean_deviation


# -- trained network -----------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    data = ingest_dataset(DatasetSpec("two-spirals", n_samples=800, noise=0.05, seed=0))
    net = build_network("mlp:24,24", data.input_shape, data.n_outputs, substream(0, "init"))
    ann = fuse_batchnorm(train_source_ann(net, data, epochs=10, seed=0))
    qc = make_deterministic(convert_to_qcann(ann, 4, 0.0))
    return data, ann, qc, convert_to_snn(qc)


def test_rpe_incidence_nonzero_at_T4(trained):
    data, _, _, snn = trained
    stats = an.rpe_incidence(snn, data.x_val)
    assert len(stats) == 2 and stats[0].fraction > 0


def test_cosine_identity_and_orthogonal(trained):
    data, _, qc, _ = trained
    prof = an.cosine_similarity_profile(qc, qc, data.x_val)
    assert np.allclose(prof, 1.0)
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert an.cosine_similarity(a, b).tolist() == [0.0, 0.0]


def test_cosine_rises_with_T(trained):
    data, _, qc, _ = trained
    sims = []
    for T in (2, 4, 8, 16, 32):
        q = set_time_steps(qc.copy(), T)
        sims.append(float(np.mean(an.cosine_similarity_profile(q, convert_to_snn(q, T=T), data.x_val))))
    assert sims[-1] > sims[0]
    assert np.all(np.diff(sims) > -0.01), sims


def test_error_decomposition(trained):
    data, ann, qc, snn = trained
    d = an.error_decomposition(ann, qc, snn, data.x_val, data.y_val)
    for v in (d.qe_ce_mean, d.qe_ce_max, d.rpe_mean, d.rpe_max):
        assert np.all(np.asarray(v) >= 0)
    assert 0 <= d.acc_snn <= 1
    assert d.to_tsv().startswith("layer")


# -- energy ----------------------------------------------------------------------

def test_table_cross_check():
    e_ann, _ = an.energy_from_counts(480.2e6, 0)
    assert e_ann == pytest.approx(2208.92)
    assert abs(e_ann - 2208.7) / 2208.7 < 0.005


def test_report_arithmetic_exact():
    r = an.EnergyReport(ann_macs=1000, snn_sops_mean=250.0, snn_sops_std=1.0, T=4, n_samples=1)
    assert r.energy_ann == 1000 * 4.6 * 1e-6
    assert r.energy_snn == 250.0 * 0.9 * 1e-6
    assert r.ratio == pytest.approx(100 * r.energy_snn / r.energy_ann)


def test_fan_out_linear_and_conv():
    lin = SpikingLayer([Linear(np.ones((7, 3)))], 1.0)
    assert an.fan_out(lin).tolist() == [7, 7, 7]
    conv = Conv2d(np.ones((2, 1, 3, 3)), np.zeros(2), padding=1)
    layer = SpikingLayer([AvgPool2d(2), conv], 1.0, in_shape=(1, 8, 8))
    fan = an.fan_out(layer)
    assert fan.shape == (1, 8, 8)
    # each pooled pixel reaches 2 channels x (3x3 window, clipped at borders)
    assert fan[0, 0, 0] == 2 * 4 and fan[0, 3, 3] == 2 * 9


def test_silent_snn_uses_no_energy():
    q = make_deterministic(convert_to_qcann(build_network("mlp:5", (3,), 2, substream(0, "init"),
                                                         batchnorm=False), 4, 0.0))
    snn = convert_to_snn(q, "none")
    snn.layers[0].synapse.bias.data[:] = 0
    rep = an.energy_report(q, snn, np.zeros((4, 3), np.float32))
    assert rep.snn_sops_mean == 0 and rep.energy_snn == 0
    assert rep.ann_macs == 3 * 5 + 5 * 2
    assert rep.bias_ops == (5 + 2) * 4


def test_sops_scale_linearly_with_T(trained):
    data, ann, qc, _ = trained
    x = data.x_val[:200]
    sops = {}
    for T in (8, 32):
        q = set_time_steps(qc.copy(), T)
        sops[T] = an.energy_report(ann, convert_to_snn(q, T=T), x).snn_sops_mean
    slope = sops[32] / sops[8] / 4
    assert 0.8 <= slope <= 1.2


def test_scatter_off_diagonal(trained):
    data, _, _, snn = trained
    pairs = an.gr_scatter(snn, data.x_val[:200], layer=1)
    assert pairs.shape[1] == 2
    assert np.max(np.abs(pairs[:, 0] - pairs[:, 1])) >= 1 / snn.T - 1e-9
    assert an.pairs_to_csv(pairs[:2], ("g", "r")).splitlines()[0] == "g,r"
