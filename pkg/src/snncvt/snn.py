"""Integrate-and-fire SNN simulation with soft reset.

Per layer and time step::

    u[t]  = u_hat[t-1] + v[t],          v[t] = W s_in[t] + b (+ shift)
    s[t]  = 1 if u[t] >= theta else 0
    u_hat[t] = u[t] - s[t] * theta

The first layer receives the analog input as a constant current at every
step; the last layer is a non-spiking readout that reports the mean input
potential. Summing the reset equation over the run gives the exact identity

    rate = v_mean / theta - (u_hat[T] - u_hat[0]) / (T * theta)

which :func:`verify_rate_identity` checks on recorded runs.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .nn import AFFINE, SHAPE_ONLY, Activation, BatchNorm, ClipUnit, Linear, Network, StructuralError
from .qc import QCActivation, qc_reference
from .tensor import DTYPE, Tensor

SHIFT_MODES = ("init-half-theta", "per-step-bias", "none")


@dataclass
class SpikeRecord:
    """Spikes and potentials of one layer for one batch.

    ``spikes`` is ``[T, batch, *neurons]``; the potentials are ``[batch, *neurons]``.
    """

    spikes: np.ndarray
    v_mean: np.ndarray
    u_hat0: np.ndarray
    u_hatT: np.ndarray
    theta: float

    @property
    def T(self) -> int:
        return self.spikes.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return self.spikes.sum(axis=0, dtype=np.int64)

    @property
    def rate(self) -> np.ndarray:
        return self.counts / self.T

    @property
    def residual(self) -> np.ndarray:
        """epsilon = (u_hat[T] - u_hat[0]) / (T * theta)."""
        return (self.u_hatT.astype(np.float64) - self.u_hat0) / (self.T * self.theta)


class SpikingLayer:
    """Synaptic ops (optional pooling/flatten, then Linear or Conv2d) feeding IF neurons.

    ``spiking=False`` marks the analog readout layer.
    """

    def __init__(self, ops, theta: float = 1.0, u0=None, spiking: bool = True,
                 step_shift: bool = False, in_shape=None):
        ops = list(ops)
        if not ops or not isinstance(ops[-1], AFFINE) or not all(isinstance(o, SHAPE_ONLY) for o in ops[:-1]):
            raise StructuralError(f"spiking layer needs [pool/flatten...] + Linear/Conv2d, got {ops}")
        if spiking and not theta > 0:
            raise ValueError(f"threshold must be positive, got {theta}")
        self.ops = ops
        self.theta = float(theta)
        self.spiking = spiking
        self.step_shift = step_shift
        if in_shape is None:
            if not isinstance(ops[0], Linear):
                raise ValueError("in_shape is required unless the layer starts with Linear")
            in_shape = (ops[0].in_features,)
        self.in_shape = tuple(in_shape)
        with tn.no_grad():
            self.out_shape = tuple(self._apply(np.zeros((1,) + self.in_shape, DTYPE)).shape[1:])
        if u0 is None:
            u0 = 0.0
        self.u0 = np.broadcast_to(np.asarray(u0, DTYPE), self.out_shape).copy()

    @property
    def synapse(self):
        return self.ops[-1]

    @property
    def weight(self) -> Tensor:
        return self.synapse.weight

    @property
    def bias(self) -> Tensor:
        return self.synapse.bias

    @property
    def n_neurons(self) -> int:
        return int(np.prod(self.out_shape))

    def parameters(self) -> list:
        return self.synapse.parameters()

    def _apply(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        for op in self.ops:
            x = op(x)
        return x

    def shift(self, T: int) -> float:
        return self.theta / (2 * T) if self.step_shift else 0.0

    def currents(self, x: np.ndarray, T: int) -> np.ndarray:
        """Input potential ``v`` for a stacked input ``[..., *in_shape]``."""
        lead = x.shape[: x.ndim - len(self.in_shape)]
        flat = np.asarray(x, DTYPE).reshape((-1,) + self.in_shape)
        with tn.no_grad():
            v = self._apply(flat).data
        s = self.shift(T)
        if s:
            v = v + DTYPE(s)
        return v.reshape(lead + self.out_shape)

    def __repr__(self):
        kind = "IF" if self.spiking else "readout"
        return f"SpikingLayer({kind}, theta={self.theta:.4g}, ops={self.ops})"


class SpikingNetwork:
    def __init__(self, layers, T: int, input_shape, shift_mode: str = "init-half-theta", name: str = "snn"):
        if shift_mode not in SHIFT_MODES:
            raise ValueError(f"shift_mode must be one of {SHIFT_MODES}")
        if int(T) < 1:
            raise ValueError("T must be >= 1")
        self.layers = list(layers)
        self.T = int(T)
        self.input_shape = tuple(input_shape)
        self.shift_mode = shift_mode
        self.name = name
        if not self.layers or self.layers[-1].spiking or any(not l.spiking for l in self.layers[:-1]):
            raise StructuralError("hidden layers must spike and the last layer must be an analog readout")

    @property
    def spiking_layers(self) -> list:
        return self.layers[:-1]

    def copy(self) -> "SpikingNetwork":
        return copy.deepcopy(self)

    def simulate(self, x, T=None, record=True):
        return simulate(self, x, T, record)

    def predict(self, x, T: int | None = None, batch_size: int = 256) -> np.ndarray:
        outs = []
        for i in range(0, len(x), batch_size):
            out, _ = simulate(self, x[i:i + batch_size], T, record=False)
            outs.append(out)
        return np.concatenate(outs)

    def __repr__(self):
        inner = ",\n  ".join(repr(l) for l in self.layers)
        return f"SpikingNetwork(T={self.T}, shift={self.shift_mode!r}, [\n  {inner}\n])"


def run_layer(layer: SpikingLayer, inputs: np.ndarray, T: int, analog: bool = False,
              index: int = 0):
    """Simulate one layer over ``T`` steps.

    ``inputs`` is ``[batch, *in_shape]`` when ``analog`` (injected every step),
    otherwise a spike tensor ``[T, batch, *in_shape]``. Returns the spikes of a
    spiking layer (or the mean potential of a readout) plus its SpikeRecord.
    """
    v = layer.currents(inputs, T)
    if not layer.spiking:
        v_mean = v if analog else v.mean(axis=0, dtype=np.float64).astype(DTYPE)
        return v_mean, None
    batch_shape = v.shape if analog else v.shape[1:]
    theta = DTYPE(layer.theta)
    u = np.broadcast_to(layer.u0, batch_shape).astype(DTYPE)
    u_hat0 = u.copy()
    spikes = np.empty((T,) + batch_shape, dtype=bool)
    v_sum = np.zeros(batch_shape, DTYPE)
    for t in range(T):
        vt = v if analog else v[t]
        u = u + vt
        s = u >= theta
        u = u - s * theta
        spikes[t] = s
        v_sum += vt
        if not np.all(np.isfinite(u)):
            raise FloatingPointError(f"non-finite membrane potential in layer {index} at step {t + 1}")
    rec = SpikeRecord(spikes, v_sum / DTYPE(T), u_hat0, u, layer.theta)
    return spikes, rec


def simulate(net: SpikingNetwork, x, T: int | None = None, record: bool = True):
    """Run ``net`` on a batch ``x``; returns (readout v_mean, list of SpikeRecord)."""
    T = int(T or net.T)
    x = np.asarray(x, DTYPE)
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    records = []
    h, analog = x, True
    for i, layer in enumerate(net.layers):
        h, rec = run_layer(layer, h, T, analog=analog, index=i)
        analog = False
        if rec is not None and record:
            records.append(rec)
    return h, records


def layer_inputs(net: SpikingNetwork, x, upto: int, T: int | None = None):
    """Input of layer ``upto``: the analog ``x`` for layer 0, else spikes of layer ``upto-1``."""
    T = int(T or net.T)
    h = np.asarray(x, DTYPE)
    for i in range(upto):
        h, _ = run_layer(net.layers[i], h, T, analog=(i == 0), index=i)
    return h


def verify_rate_identity(record: SpikeRecord, theta: float | None = None) -> float:
    """max |rate - (v_mean / theta - epsilon)| over all neurons and samples."""
    theta = record.theta if theta is None else theta
    eps = (record.u_hatT.astype(np.float64) - record.u_hat0) / (record.T * theta)
    rhs = record.v_mean.astype(np.float64) / theta - eps
    return float(np.max(np.abs(record.rate - rhs))) if record.rate.size else 0.0


def save_spike_records(path, records) -> None:
    """Dump records to ``.npz``: per layer a packed bitset of the ``[T, n]`` spikes plus f32 potentials."""
    arrays = {}
    for i, rec in enumerate(records):
        T, n = rec.T, rec.spikes[0].size
        arrays[f"l{i}_spikes"] = np.packbits(rec.spikes.reshape(T, n), axis=None)
        arrays[f"l{i}_shape"] = np.array(rec.spikes.shape, np.int64)
        arrays[f"l{i}_theta"] = np.array(rec.theta, np.float64)
        for k in ("v_mean", "u_hat0", "u_hatT"):
            arrays[f"l{i}_{k}"] = np.asarray(getattr(rec, k), np.float32)
    np.savez(path, n_layers=np.array(len(records)), **arrays)


def load_spike_records(path) -> list:
    with np.load(path) as z:
        out = []
        for i in range(int(z["n_layers"])):
            shape = tuple(int(d) for d in z[f"l{i}_shape"])
            n = int(np.prod(shape))
            spikes = np.unpackbits(z[f"l{i}_spikes"], count=n).astype(bool).reshape(shape)
            out.append(SpikeRecord(spikes, z[f"l{i}_v_mean"], z[f"l{i}_u_hat0"], z[f"l{i}_u_hatT"],
                                   float(z[f"l{i}_theta"])))
    return out


def convert_to_snn(qcann: Network, shift_mode: str = "init-half-theta", T: int | None = None) -> SpikingNetwork:
    """Copy weights, biases and thresholds of a (QC-)ANN into an IF network.

    Each ``[pool/flatten...] + Linear/Conv2d + activation`` run becomes one
    spiking layer with the activation's threshold; the trailing affine block
    becomes the readout.
    """
    if shift_mode not in SHIFT_MODES:
        raise ValueError(f"shift_mode must be one of {SHIFT_MODES}")
    qc_T = {l.T for l in qcann.layers if isinstance(l, QCActivation)}
    if T is None:
        if len(qc_T) != 1:
            raise ValueError("T must be given (network has no single QC time-step count)")
        T = qc_T.pop()
    layers, pending = [], []
    shape = qcann.input_shape
    for i, layer in enumerate(qcann.layers):
        if isinstance(layer, BatchNorm):
            raise StructuralError(f"layer {i}: fuse BatchNorm before conversion")
        if isinstance(layer, QCActivation):
            if layer.noisy:
                raise ValueError(f"layer {i}: QC activation still has noise p={layer.p}; "
                                 "switch it to deterministic round mode first")
        elif isinstance(layer, Activation) and not isinstance(layer, ClipUnit):
            raise StructuralError(f"layer {i}: {layer!r} has no spiking equivalent")
        if isinstance(layer, Activation):
            theta = float(layer.theta.data)
            u0 = theta / 2 if shift_mode == "init-half-theta" else 0.0
            sl = SpikingLayer(copy.deepcopy(pending), theta, u0, spiking=True,
                              step_shift=shift_mode == "per-step-bias", in_shape=shape)
            layers.append(sl)
            shape, pending = sl.out_shape, []
        else:
            pending.append(layer)
    if not pending:
        raise StructuralError("network ends with an activation; no readout layer")
    layers.append(SpikingLayer(copy.deepcopy(pending), 1.0, 0.0, spiking=False, in_shape=shape))
    return SpikingNetwork(layers, T, qcann.input_shape, shift_mode, name=qcann.name)


def set_snn_time_steps(net: SpikingNetwork, T: int) -> SpikingNetwork:
    net.T = int(T)
    return net


# ---------------------------------------------------------------------------
# handcrafted single-neuron cases
# ---------------------------------------------------------------------------

@dataclass
class Fig2Instance:
    name: str
    layer: SpikingLayer
    input_spikes: np.ndarray  # [T, 1, n_in]
    expected: tuple


def single_neuron(weights, theta: float = 1.0, u0: float = 0.0, bias: float = 0.0) -> SpikingLayer:
    w = np.asarray(weights, DTYPE).reshape(1, -1)
    return SpikingLayer([Linear(w, np.array([bias], DTYPE))], theta, u0)


def rate_and_estimate(layer: SpikingLayer, spikes: np.ndarray):
    """Real rate and floor-clip estimate g(v_mean) of a one-neuron layer."""
    T = spikes.shape[0]
    _, rec = run_layer(layer, spikes, T)
    r = float(rec.rate.reshape(-1)[0])
    g = float(qc_reference(rec.v_mean.reshape(-1)[0:1], layer.theta, T, "floor")[0])
    return r, g


def _is_regular(train: np.ndarray) -> bool:
    """Silent, or spikes at every k-th step from a phase < k through the end of the window."""
    t = np.flatnonzero(train)
    if len(t) == 0:
        return True
    if len(t) == 1:
        return False
    gaps = np.diff(t)
    k = gaps[0]
    return bool(np.all(gaps == k) and t[0] < k and t[-1] + k >= len(train))


def _search(patterns, weights, T, theta, target, accept):
    """First (pattern, weight) pair in canonical order whose (r, g) equals ``target``."""
    pats = np.asarray(patterns, DTYPE)             # [P, T, n_in]
    ws = np.asarray(weights, DTYPE)                # [K, n_in]
    v = np.einsum("ptn,kn->pkt", pats, ws)          # [P, K, T]
    u = np.zeros(v.shape[:2], DTYPE)
    count = np.zeros(v.shape[:2], np.int64)
    for t in range(T):
        u = u + v[:, :, t]
        s = u >= theta
        u = u - s * DTYPE(theta)
        count += s
    r = count / T
    g = np.clip(np.floor(v.sum(axis=2) / theta) / T, 0.0, 1.0)
    hit = np.isclose(r, target[0]) & np.isclose(g, target[1])
    for p, k in zip(*np.nonzero(hit)):
        if accept(pats[p]):
            return pats[p], ws[k]
    return None


def construct_fig2_instances(T: int = 6, theta: float = 1.0) -> list:
    """Three one-neuron cases at T=6: undervalued, overvalued and correct rate.

    Found by exhaustive search over two binary input trains and weights in
    {-1, -0.75, ..., 1.5}; the search order is fixed so the result is stable.
    """
    grid = np.arange(-4, 7) * 0.25
    pairs = sorted(itertools.product(grid, grid), key=lambda w: (abs(w[0]) + abs(w[1]), w))
    pairs = [w for w in pairs if any(w)]
    all_trains = [np.array([(b >> (T - 1 - t)) & 1 for t in range(T)], DTYPE) for b in range(2 ** T)]

    odd = np.array([1 if t % 2 == 0 else 0 for t in range(T)], DTYPE)   # steps 1, 3, 5
    even = 1 - odd                                                     # steps 2, 4, 6
    regular = [np.stack([odd, even], axis=1), np.stack([even, odd], axis=1)]
    irregular = [np.stack([a, b], axis=1) for a in all_trains for b in all_trains]

    def any_irregular(p):
        active = all(p[:, j].any() for j in range(p.shape[1]))
        return active and any(p[:, j].sum() >= 2 and not _is_regular(p[:, j]) for j in range(p.shape[1]))

    specs = [
        ("undervalued", regular, (1 / T, 0.0), lambda p: True),
        ("overvalued", irregular, (2 / T, 3 / T), any_irregular),
        ("correct", irregular, (1 / T, 1 / T), any_irregular),
    ]
    out = []
    for name, patterns, target, accept in specs:
        found = _search(patterns, pairs, T, theta, target, accept)
        if found is None:
            raise RuntimeError(f"no instance found for case {name!r}")
        pat, w = found
        out.append(Fig2Instance(name, single_neuron(w, theta), pat[:, None, :].astype(DTYPE), target))
    return out
