"""Layer-wise calibration of a converted SNN against its QC-ANN.

Coarse calibration (CC) shifts each layer's initial membrane potential by
``T * theta * mean(target - rate)``, the least-squares optimum when the final
residual potential is held fixed. Fine calibration (FC) unrolls one layer over
``T`` steps and trains its weights, bias and initial potential by BPTT with a
rectangular surrogate for the spike nonlinearity. Layers are processed first
to last, each seeing spikes from the already-calibrated prefix.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .nn import Conv2d, Network
from .optim import Optimizer, OptimizerState
from .qc import make_deterministic
from .rng import substream
from .snn import SpikingLayer, SpikingNetwork, run_layer
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

KL_SMOOTHING = 1e-8


@dataclass
class SurrogateConfig:
    alpha: float
    theta: float

    def __post_init__(self):
        if self.alpha <= 0 or self.theta <= 0:
            raise ValueError("surrogate width and threshold must be positive")

    def h(self, u) -> np.ndarray:
        """Rectangular pseudo-derivative of the spike w.r.t. membrane potential ``u``."""
        u = np.asarray(u, np.float64)
        return (np.abs(u - self.theta) < self.alpha / 2) / self.alpha


@dataclass
class Stage2Config:
    cc: bool = True
    fc: bool = True
    loss: str = "kl"            # kl (recognition) | mse (regression)
    lr: float = 5e-4
    epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    alpha: float | None = None  # surrogate width; None -> theta of the layer
    train_weight: bool = True
    train_bias: bool = True
    train_u0: bool = True
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("kl", "mse"):
            raise ValueError(f"loss must be 'kl' or 'mse', got {self.loss!r}")
        if self.weight_decay != 0:
            raise ValueError("calibration runs without weight decay")


@dataclass
class CalibrationSet:
    """Calibration inputs plus the QC-ANN activation of every spiking layer."""

    x: np.ndarray
    targets: list

    @classmethod
    def from_qcann(cls, qcann: Network, x) -> "CalibrationSet":
        net = make_deterministic(qcann.copy()).eval()
        x = np.asarray(x, DTYPE)
        with tn.no_grad():
            _, acts = net.forward(x, collect=True)
        return cls(x, [a.data.copy() for a in acts])

    @property
    def n(self) -> int:
        return len(self.x)


@dataclass
class LayerCalibration:
    layer: int
    err_before: float
    err_after_cc: float | None = None
    err_after: float | None = None
    cc_shift_mean: float | None = None
    loss_curve: list = field(default_factory=list)
    epochs_run: int = 0
    status: str = "ok"


@dataclass
class CalibrationReport:
    layers: list = field(default_factory=list)

    def mean_error_before(self) -> float:
        return float(np.mean([l.err_before for l in self.layers]))

    def mean_error_after(self) -> float:
        return float(np.mean([l.err_after for l in self.layers]))

    def to_tsv(self) -> str:
        rows = ["layer\terr_before\terr_after_cc\terr_after\tcc_shift_mean\tepochs\tstatus\tloss_curve"]
        fmt = lambda v: "" if v is None else f"{v:.6g}"
        for l in self.layers:
            curve = ",".join(f"{v:.6g}" for v in l.loss_curve)
            rows.append(f"{l.layer}\t{fmt(l.err_before)}\t{fmt(l.err_after_cc)}\t{fmt(l.err_after)}\t"
                        f"{fmt(l.cc_shift_mean)}\t{l.epochs_run}\t{l.status}\t{curve}")
        return "\n".join(rows) + "\n"


def rate_error(rates, targets) -> float:
    return float(np.mean(np.abs(np.asarray(rates, np.float64) - targets)))


# ---------------------------------------------------------------------------
# coarse calibration
# ---------------------------------------------------------------------------

def coarse_correction(targets, rates, theta: float, T: int) -> np.ndarray:
    """Per-neuron initial-potential shift ``T * theta / N * sum_i (target_i - rate_i)``."""
    targets = np.asarray(targets, np.float64)
    rates = np.asarray(rates, np.float64)
    if targets.shape[0] == 0:
        raise ValueError("coarse calibration needs at least one sample")
    if targets.shape != rates.shape:
        raise ValueError(f"target shape {targets.shape} != rate shape {rates.shape}")
    return T * theta * (targets - rates).mean(axis=0)


def coarse_calibrate(layer: SpikingLayer, inputs, targets, T: int, analog: bool = False) -> np.ndarray:
    """Simulate ``layer`` on ``inputs`` and move its ``u0`` by the closed-form correction.

    Returns the correction that was added.
    """
    _, rec = run_layer(layer, inputs, T, analog=analog)
    delta = coarse_correction(targets, rec.rate, layer.theta, T)
    layer.u0 = (layer.u0 + delta).astype(DTYPE)
    return delta


# ---------------------------------------------------------------------------
# fine calibration
# ---------------------------------------------------------------------------

def _presynaptic(layer: SpikingLayer, inputs: np.ndarray) -> np.ndarray:
    """Apply the parameter-free ops (pool / flatten) ahead of the affine synapse."""
    x = inputs
    lead = x.shape[: x.ndim - len(layer.in_shape)]
    x = x.reshape((-1,) + layer.in_shape).astype(DTYPE)
    with tn.no_grad():
        h = Tensor(x)
        for op in layer.ops[:-1]:
            h = op(h)
    return h.data.reshape(lead + h.shape[1:])


def unroll_layer(layer: SpikingLayer, pre: np.ndarray, T: int, weight: Tensor, bias: Tensor,
                 u0: Tensor, alpha: float, analog: bool = False) -> Tensor:
    """Differentiable IF dynamics of one layer; returns the firing rate ``[batch, *neurons]``.

    ``pre`` is the synapse input after pooling/flatten: ``[batch, ...]`` when
    analog, otherwise ``[T, batch, ...]``.
    """
    syn = layer.synapse
    theta = layer.theta
    shift = layer.shift(T)

    def current(x):
        if isinstance(syn, Conv2d):
            v = tn.conv2d(x, weight, bias, syn.stride, syn.padding)
        else:
            v = tn.linear(x, weight, bias)
        return v + shift if shift else v

    const = current(pre) if analog else None
    u = u0
    total = None
    for t in range(T):
        v = const if analog else current(pre[t])
        u = u + v
        s = tn.heaviside(u - theta, alpha)
        u = u - s * theta
        total = s if total is None else total + s
    return total * (1.0 / T)


def calibration_loss(rate: Tensor, target: np.ndarray, kind: str) -> Tensor:
    """KL(target || rate) over per-sample normalized activations, or plain MSE."""
    n = rate.shape[0]
    target = np.asarray(target, DTYPE).reshape(n, -1)
    rate = rate.reshape(n, -1)
    if kind == "mse":
        return tn.mse_loss(rate, target)
    p = target / (target.sum(axis=1, keepdims=True) + KL_SMOOTHING) + KL_SMOOTHING
    p = p / p.sum(axis=1, keepdims=True)
    q = rate / (rate.sum(axis=1, keepdims=True) + KL_SMOOTHING) + KL_SMOOTHING
    q = q / q.sum(axis=1, keepdims=True)
    return (Tensor(p) * (Tensor(np.log(p)) - q.log())).sum(axis=1).mean()


def calibrate_layer_bptt(layer: SpikingLayer, inputs, targets, T: int, cfg: Stage2Config,
                         analog: bool = False, seed: int | None = None) -> LayerCalibration:
    """Fine-calibrate one spiking layer in place; returns its loss curve and status.

    The parameters with the lowest full-set loss are kept (the starting point
    included). Early stopping after ``cfg.patience`` epochs without improvement.
    A non-finite loss retries once at a tenth of the learning rate, then gives
    up and restores the original parameters.
    """
    seed = cfg.seed if seed is None else seed
    pre = _presynaptic(layer, inputs)
    targets = np.asarray(targets, DTYPE)
    n = targets.shape[0]
    alpha = cfg.alpha if cfg.alpha is not None else layer.theta
    original = (layer.weight.data.copy(), layer.bias.data.copy(), layer.u0.copy())

    def batch(idx):
        return (pre[idx] if analog else pre[:, idx]), targets[idx]

    def full_loss(w, b, u):
        with tn.no_grad():
            losses = []
            for i in range(0, n, 256):
                xb, tb = batch(np.arange(i, min(n, i + 256)))
                r = unroll_layer(layer, xb, T, w, b, u, alpha, analog)
                losses.append(float(calibration_loss(r, tb, cfg.loss).data) * len(tb))
            return sum(losses) / n

    result = LayerCalibration(layer=-1, err_before=float("nan"))
    lr = cfg.lr
    for attempt in range(2):
        w = Tensor(original[0].copy(), requires_grad=cfg.train_weight)
        b = Tensor(original[1].copy(), requires_grad=cfg.train_bias)
        u = Tensor(original[2].copy(), requires_grad=cfg.train_u0)
        params = [p for p in (w, b, u) if p.requires_grad]
        opt = Optimizer(params, OptimizerState("adam", lr, weight_decay=0.0))
        rng = substream(seed, "calib-shuffle")
        try:
            best_loss = full_loss(w, b, u)
            best = (w.data.copy(), b.data.copy(), u.data.copy())
            curve, stale, epochs = [best_loss], 0, 0
            for epoch in range(cfg.epochs):
                n_batches = max(1, -(-n // cfg.batch_size))
                for idx in np.array_split(rng.permutation(n), n_batches):
                    xb, tb = batch(idx)
                    r = unroll_layer(layer, xb, T, w, b, u, alpha, analog)
                    loss = calibration_loss(r, tb, cfg.loss)
                    if not np.isfinite(loss.data):
                        raise FloatingPointError("calibration loss is not finite")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                epochs += 1
                cur = full_loss(w, b, u)
                if not np.isfinite(cur):
                    raise FloatingPointError("calibration loss is not finite")
                curve.append(cur)
                if cur < best_loss:
                    best_loss, best, stale = cur, (w.data.copy(), b.data.copy(), u.data.copy()), 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
        except FloatingPointError as exc:
            if attempt == 0:
                log.warning("fine calibration diverged (%s); retrying with lr x 0.1", exc)
                lr *= 0.1
                continue
            log.warning("fine calibration diverged again; restoring original parameters")
            result.status = "aborted"
            best = original
            curve, epochs = [], 0
        layer.synapse.weight = Tensor(best[0], requires_grad=True)
        layer.synapse.bias = Tensor(best[1], requires_grad=True)
        layer.u0 = best[2].astype(DTYPE)
        result.loss_curve, result.epochs_run = curve, epochs
        if attempt == 1 and result.status == "ok":
            result.status = "ok-reduced-lr"
        break
    return result


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def fine_calibrate_layer(layer_idx: int, snn: SpikingNetwork, calib: CalibrationSet, cfg: Stage2Config,
                         surrogate: SurrogateConfig | None = None) -> LayerCalibration:
    """Fine-calibrate layer ``layer_idx`` of ``snn`` (in place) using spikes of its current prefix."""
    if surrogate is not None:
        cfg = copy.copy(cfg)
        cfg.alpha = surrogate.alpha
    T = snn.T
    h = calib.x
    for i in range(layer_idx):
        h, _ = run_layer(snn.layers[i], h, T, analog=(i == 0), index=i)
    res = calibrate_layer_bptt(snn.layers[layer_idx], h, calib.targets[layer_idx], T, cfg,
                               analog=(layer_idx == 0), seed=cfg.seed + layer_idx)
    res.layer = layer_idx
    return res


def layer_rates(snn: SpikingNetwork, x, T: int | None = None) -> list:
    T = int(T or snn.T)
    h, rates = np.asarray(x, DTYPE), []
    for i, layer in enumerate(snn.spiking_layers):
        h, rec = run_layer(layer, h, T, analog=(i == 0), index=i)
        rates.append(rec.rate)
    return rates


def run_stage2(snn: SpikingNetwork, qcann: Network, x_calib, cfg: Stage2Config | None = None):
    """Coarse pass over all spiking layers, then fine pass, first to last.

    Returns the calibrated copy of ``snn`` and a :class:`CalibrationReport`.
    """
    cfg = cfg or Stage2Config()
    snn = snn.copy()
    calib = CalibrationSet.from_qcann(qcann, x_calib)
    layers = snn.spiking_layers
    if len(calib.targets) != len(layers):
        raise ValueError(f"QC-ANN has {len(calib.targets)} activation layers, SNN has {len(layers)}")
    T = snn.T
    report = CalibrationReport([
        LayerCalibration(i, rate_error(r, t)) for i, (r, t) in enumerate(zip(layer_rates(snn, calib.x), calib.targets))
    ])

    if cfg.cc:
        h = calib.x
        for i, layer in enumerate(layers):
            delta = coarse_calibrate(layer, h, calib.targets[i], T, analog=(i == 0))
            report.layers[i].cc_shift_mean = float(delta.mean())
            h, _ = run_layer(layer, h, T, analog=(i == 0), index=i)
        for entry, r, t in zip(report.layers, layer_rates(snn, calib.x), calib.targets):
            entry.err_after_cc = rate_error(r, t)

    if cfg.fc:
        h = calib.x
        for i, layer in enumerate(layers):
            res = calibrate_layer_bptt(layer, h, calib.targets[i], T, cfg, analog=(i == 0), seed=cfg.seed + i)
            entry = report.layers[i]
            entry.loss_curve, entry.epochs_run, entry.status = res.loss_curve, res.epochs_run, res.status
            h, _ = run_layer(layer, h, T, analog=(i == 0), index=i)

    for entry, r, t in zip(report.layers, layer_rates(snn, calib.x), calib.targets):
        entry.err_after = rate_error(r, t)
    return snn, report
