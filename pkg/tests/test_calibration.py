import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snncvt import calibration as cal
from snncvt import tensor as tn
from snncvt.calibration import (CalibrationSet, Stage2Config, SurrogateConfig, calibrate_layer_bptt,
                                calibration_loss, coarse_calibrate, coarse_correction, fine_calibrate_layer,
                                run_stage2, unroll_layer)
from snncvt.data import DatasetSpec, ingest_dataset
from snncvt.nn import Linear, build_network, fuse_batchnorm, train_source_ann
from snncvt.qc import convert_to_qcann, finetune_qcann
from snncvt.rng import substream
from snncvt.snn import SpikingLayer, convert_to_snn, run_layer
from snncvt.tensor import Tensor


def test_coarse_correction_zero_when_matched():
    r = np.random.default_rng(0).random((10, 4))
    assert np.all(coarse_correction(r, r, 1.0, 4) == 0)


def test_coarse_correction_example():
    assert coarse_correction([[0.5]], [[0.25]], 1.0, 4)[0] == pytest.approx(1.0)


def test_coarse_correction_needs_samples():
    with pytest.raises(ValueError):
        coarse_correction(np.zeros((0, 3)), np.zeros((0, 3)), 1.0, 4)


def test_coarse_matches_grid_search():
    rng = np.random.default_rng(11)
    grid_checked = 0
    for _ in range(50):
        theta, T, n = rng.uniform(0.5, 2), int(rng.integers(2, 9)), int(rng.integers(1, 40))
        target = rng.integers(0, T + 1, n) / T
        rate = np.clip(target + rng.normal(0, 0.5 / T, n), 0, 1)
        best = coarse_correction(target[:, None], rate[:, None], theta, T)[0]
        grid = np.arange(-200, 201) * theta / 100
        # frozen final residual: the rate moves linearly with the initial potential
        obj = [np.sum((target - rate - d / (T * theta)) ** 2) for d in grid]
        g = grid[int(np.argmin(obj))]
        if abs(best) <= 2 * theta:
            assert abs(g - best) <= theta / 200 + 1e-12
            grid_checked += 1
    assert grid_checked >= 40


def test_coarse_calibrate_adds_delta_to_u0():
    layer = SpikingLayer([Linear(np.eye(2), np.zeros(2))], 1.0, 0.5)
    x = np.array([[0.3, 0.6]], np.float32)
    _, rec = run_layer(layer, x, 4, analog=True)
    delta = coarse_calibrate(layer, x, rec.rate + 0.25, 4, analog=True)
    assert np.allclose(delta, 1.0) and np.allclose(layer.u0, 1.5)


def test_surrogate_integrates_to_one():
    s = SurrogateConfig(0.4, 1.0)
    u = np.linspace(0, 2, 200_001)
    assert s.h(u).sum() * (u[1] - u[0]) == pytest.approx(1.0, abs=1e-3)
    assert s.h(1.0) == pytest.approx(2.5) and s.h(1.3) == 0
    with pytest.raises(ValueError):
        SurrogateConfig(0.0, 1.0)


def test_bptt_two_steps_by_hand(float64_mode):
    # one neuron, analog input x; v = w*x + b; window alpha = 0.8 so h = 1.25 inside
    theta, alpha, x = 1.0, 0.8, 0.5
    w0, b0, u00 = 1.2, 0.1, 0.5
    layer = SpikingLayer([Linear(np.array([[w0]]), np.array([b0]))], theta, u00)
    w = Tensor(np.array([[w0]]), requires_grad=True)
    b = Tensor(np.array([b0]), requires_grad=True)
    u0 = Tensor(np.array([u00]), requires_grad=True)
    r = unroll_layer(layer, np.array([[x]]), 2, w, b, u0, alpha, analog=True)
    tn.reduce_sum(r).backward()

    v = w0 * x + b0
    u1 = u00 + v
    s1 = float(u1 >= theta)
    u2 = u1 - theta * s1 + v
    h = lambda u: float(abs(u - theta) < alpha / 2) / alpha
    h1, h2 = h(u1), h(u2)
    assert h1 > 0 and h2 > 0
    ds_dv = h1 + h2 * (1 + (1 - theta * h1))   # s2 sees v directly and through u_hat[1]
    ds_du0 = h1 + h2 * (1 - theta * h1)
    assert r.data.item() == (s1 + float(u2 >= theta)) / 2
    assert w.grad[0, 0] == pytest.approx(x * ds_dv / 2, abs=1e-15)
    assert b.grad[0] == pytest.approx(ds_dv / 2, abs=1e-15)
    assert u0.grad[0] == pytest.approx(ds_du0 / 2, abs=1e-15)


def test_surrogate_locality():
    # potentials stay far below the window, so the spike path carries no gradient
    rng = np.random.default_rng(0)
    layer = SpikingLayer([Linear(-np.abs(rng.standard_normal((3, 4))), -np.ones(3))], 1.0, 0.0)
    w = Tensor(layer.weight.data.copy(), requires_grad=True)
    b = Tensor(layer.bias.data.copy(), requires_grad=True)
    u0 = Tensor(layer.u0.copy(), requires_grad=True)
    pre = (rng.random((4, 6, 4)) < 0.5).astype(np.float32)
    r = unroll_layer(layer, pre, 4, w, b, u0, 1.0)
    tn.reduce_sum(r * 1.0).backward()
    assert np.all(w.grad == 0) and np.all(b.grad == 0) and np.all(u0.grad == 0)


def test_dead_surrogate_leaves_parameters_unchanged():
    rng = np.random.default_rng(1)
    layer = SpikingLayer([Linear(rng.standard_normal((3, 4)), rng.standard_normal(3) * 0.1)], 1.0, 0.5)
    before = (layer.weight.data.copy(), layer.bias.data.copy(), layer.u0.copy())
    x = rng.random((32, 4)).astype(np.float32)
    calibrate_layer_bptt(layer, x, rng.random((32, 3)), 4, Stage2Config(alpha=1e-12, epochs=3), analog=True)
    assert np.array_equal(layer.weight.data, before[0])
    assert np.array_equal(layer.bias.data, before[1])
    assert np.array_equal(layer.u0, before[2])


@given(st.integers(0, 10_000))
def test_kl_non_negative_and_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((5, 6)).astype(np.float32)
    b = rng.random((5, 6)).astype(np.float32)
    assert float(calibration_loss(Tensor(b), a, "kl").data) >= -1e-7
    assert abs(float(calibration_loss(Tensor(a), a, "kl").data)) < 1e-6
    assert abs(float(calibration_loss(Tensor(3 * a), a, "kl").data)) < 1e-6   # scale-free


def test_loss_kind_validated():
    with pytest.raises(ValueError):
        Stage2Config(loss="l1")
    with pytest.raises(ValueError):
        Stage2Config(weight_decay=1e-4)


# -- on a trained network --------------------------------------------------------

def converted(seed, T=4, data=None):
    data = data or ingest_dataset(DatasetSpec("two-spirals", n_samples=900, noise=0.05, seed=seed))
    net = build_network("mlp:24,24", data.input_shape, data.n_outputs, substream(seed, "init"))
    ann = fuse_batchnorm(train_source_ann(net, data, epochs=12, seed=seed))
    qc = finetune_qcann(convert_to_qcann(ann, T, 0.2, seed), data, epochs=3, seed=seed)
    return data, qc, convert_to_snn(qc)


@pytest.fixture(scope="module")
def nets():
    return [converted(s) for s in range(5)]


def test_cc_only_runs_without_gradients(nets, monkeypatch):
    data, qc, snn = nets[0]
    calls = []
    orig = Tensor.backward
    monkeypatch.setattr(Tensor, "backward", lambda self, *a, **k: (calls.append(1), orig(self, *a, **k)))
    _, report = run_stage2(snn, qc, data.x_calib, Stage2Config(fc=False))
    assert calls == []
    assert report.layers[0].err_after_cc is not None


def test_layer_isolation(nets):
    data, qc, snn = nets[0]
    snn = snn.copy()
    before = [(l.weight.data.copy(), l.bias.data.copy(), l.u0.copy()) for l in snn.layers]
    calib = CalibrationSet.from_qcann(qc, data.x_calib)
    fine_calibrate_layer(1, snn, calib, Stage2Config(epochs=2))
    for i in (0, 2):
        for a, b in zip(before[i], (snn.layers[i].weight.data, snn.layers[i].bias.data, snn.layers[i].u0)):
            assert np.array_equal(a, b)


def test_fine_calibration_reduces_rate_error(nets):
    before, after = [], []
    for data, qc, snn in nets:
        _, report = run_stage2(snn, qc, data.x_calib, Stage2Config(cc=False))
        before.append(report.mean_error_before())
        after.append(report.mean_error_after())
    assert np.mean(after) < np.mean(before), (before, after)


def test_report_tsv(nets):
    data, qc, snn = nets[0]
    _, report = run_stage2(snn, qc, data.x_calib[:64], Stage2Config(epochs=1))
    lines = report.to_tsv().splitlines()
    assert lines[0].startswith("layer\terr_before") and len(lines) == 1 + len(snn.spiking_layers)


def test_nan_loss_retries_then_aborts(nets, monkeypatch):
    data, qc, snn = nets[0]
    calib = CalibrationSet.from_qcann(qc, data.x_calib[:64])
    real = cal.calibration_loss
    budget = {"n": 0}

    def flaky(rate, target, kind):
        out = real(rate, target, kind)
        budget["n"] += 1
        return out * np.nan if budget["n"] <= 1 else out

    monkeypatch.setattr(cal, "calibration_loss", flaky)
    res = fine_calibrate_layer(0, snn.copy(), calib, Stage2Config(epochs=1))
    assert res.status == "ok-reduced-lr"

    monkeypatch.setattr(cal, "calibration_loss", lambda r, t, k: real(r, t, k) * np.nan)
    s = snn.copy()
    w = s.layers[0].weight.data.copy()
    res = fine_calibrate_layer(0, s, calib, Stage2Config(epochs=1))
    assert res.status == "aborted" and np.array_equal(s.layers[0].weight.data, w)
