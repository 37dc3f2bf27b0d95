"""Quantization-clip (QC) activations and QC-ANN finetuning.

A QC activation maps a pre-activation ``x`` onto the grid {0, 1/T, ..., 1}:

    floor mode:  clip(floor(x * T / theta) / T, 0, 1)
    round mode:  clip(round(x * T / theta) / T, 0, 1)

Rounding is the floor quantizer shifted by half a step, which is what the
spiking neuron produces when its membrane starts at theta / 2. Gradients pass
straight through the quantizer, so backward behaves like clip(x / theta, 0, 1).

During finetuning the ``round-noisy`` mode keeps a random fraction ``p`` of
positions un-quantized on every forward pass.
"""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as tn
from .nn import Activation, BatchNorm, ClipUnit, Network, StructuralError, accuracy, fit
from .optim import OptimizerState
from .rng import substream
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

MODES = ("floor", "round", "round-noisy")


class QCActivation(Activation):
    def __init__(self, theta: float = 1.0, T: int = 4, p: float = 0.0, mode: str = "round",
                 trainable: bool = True, rng: np.random.Generator | None = None):
        if theta <= 0:
            raise ValueError(f"theta must be positive, got {theta}")
        if int(T) < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"noise probability must lie in [0, 1], got {p}")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.theta = Tensor(np.asarray(theta, DTYPE), requires_grad=trainable)
        self.T = int(T)
        self.p = float(p)
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x):
        return qc_forward(x, self)

    def parameters(self):
        return [self.theta] if self.theta.requires_grad else []

    @property
    def noisy(self) -> bool:
        return self.mode == "round-noisy" and self.p > 0

    def __repr__(self):
        return f"QCActivation(theta={float(self.theta.data):.4g}, T={self.T}, p={self.p}, mode={self.mode!r})"


def noise_mask(shape, p: float, rng) -> np.ndarray:
    """Bernoulli(p) mask; 1 marks positions that bypass the quantizer."""
    return (rng.random(shape) < p).astype(DTYPE)


def qc_forward(x, act: QCActivation) -> Tensor:
    """Apply the QC activation ``act`` to ``x``.

    ``round-noisy`` only injects noise while the activation is in training
    mode; at evaluation it is identical to ``round``.
    """
    if act.T < 1 or float(act.theta.data) <= 0:
        raise ValueError("qc_forward needs T >= 1 and theta > 0")
    x = x if isinstance(x, Tensor) else Tensor(x)
    T = act.T
    unit = tn.clip(x / act.theta, 0.0, 1.0)
    if act.mode == "floor":
        # floor has no STE node of its own; add the (constant) quantization residual
        q = unit + Tensor(np.floor(unit.data * T) / T - unit.data)
        return q
    q = tn.round_ste(unit * T) * (1.0 / T)
    if act.mode == "round-noisy" and act.training and act.p > 0:
        m = noise_mask(x.shape, act.p, act.rng)
        q = q + (unit - q) * m
    return q


def qc_reference(x: np.ndarray, theta: float, T: int, mode: str = "round") -> np.ndarray:
    """Scalar-loop evaluation of the noiseless QC function (test oracle)."""
    out = np.empty(np.shape(x), dtype=np.float64)
    flat = np.asarray(x, np.float64).reshape(-1)
    for i, v in enumerate(flat):
        z = v * T / theta
        if mode == "floor":
            k = np.floor(z)
        else:
            k = np.sign(z) * np.floor(abs(z) + 0.5)
        out.reshape(-1)[i] = min(max(k / T, 0.0), 1.0)
    return out


def convert_to_qcann(net: Network, T: int, p: float = 0.0, seed: int = 0) -> Network:
    """Swap every ClipUnit for a noisy QC activation; all parameters are copied verbatim."""
    if any(isinstance(l, BatchNorm) for l in net.layers):
        raise StructuralError("convert_to_qcann: fuse BatchNorm layers first")
    out = net.copy()
    rng = substream(seed, "noise")
    for i, layer in enumerate(out.layers):
        if isinstance(layer, ClipUnit):
            qc = QCActivation(1.0, T, p, "round-noisy", trainable=layer.theta.requires_grad, rng=rng)
            qc.theta = layer.theta
            out.layers[i] = qc
        elif isinstance(layer, Activation) and not isinstance(layer, QCActivation):
            raise StructuralError(f"convert_to_qcann: layer {i} is {layer!r}, expected ClipUnit")
    return out


def set_time_steps(net: Network, T: int) -> Network:
    for layer in net.layers:
        if isinstance(layer, QCActivation):
            layer.T = int(T)
    return net


def make_deterministic(net: Network) -> Network:
    """Switch every QC activation to noiseless ``round`` mode (in place)."""
    for layer in net.layers:
        if isinstance(layer, QCActivation) and layer.mode == "round-noisy":
            layer.mode = "round"
    return net


def _score(net, x, y, task):
    if task == "regression":
        pred = net.predict(x)
        return -float(np.mean((pred - np.asarray(y).reshape(pred.shape)) ** 2))
    return accuracy(net, x, y)


def default_noise_probability(T: int) -> float:
    """Noise schedule for small, easy tasks: 0.2 at T <= 4, 0.1 below 8, none from 8 on."""
    if T <= 4:
        return 0.2
    return 0.1 if T < 8 else 0.0


def finetune_qcann(net: Network, data, hyper: OptimizerState | None = None, epochs: int = 10,
                   batch_size: int = 64, seed: int = 0, tolerance: float = 0.005) -> Network:
    """Finetune weights, biases and thresholds of a QC-ANN with straight-through gradients.

    The epoch with the best validation score is kept; if no epoch beats the
    starting point by more than -``tolerance``, the input weights are returned.
    The result is left in deterministic ``round`` mode.
    """
    hyper = hyper or OptimizerState("sgd", 1e-2, momentum=0.9)
    net = net.copy()
    noise_rng = substream(seed, "noise")
    for layer in net.layers:
        if isinstance(layer, QCActivation):
            layer.rng = noise_rng
    start = net.copy()
    make_deterministic(start)
    base = _score(start, data.x_val, data.y_val, data.task)
    best = {"score": base, "net": start}

    def keep_best(epoch, current):
        s = _score(current, data.x_val, data.y_val, data.task)
        log.debug("finetune epoch %d: val %.4f (start %.4f)", epoch, s, base)
        if s > best["score"]:
            best["score"], best["net"] = s, current.copy()

    theta_opt = hyper.fresh()
    theta_opt.weight_decay = 0.0
    fit(net, data.x_train, data.y_train, data.task, hyper, theta_opt, epochs, batch_size,
        substream(seed, "finetune-shuffle"), epoch_hook=keep_best)
    result = best["net"]
    if best["score"] < base - tolerance:
        result = start
    make_deterministic(result)
    result.finetune_score = (base, best["score"])
    return result
