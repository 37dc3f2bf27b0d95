"""Diagnostics for converted networks: RPE, cosine drift, error split and energy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .nn import AFFINE, AvgPool2d, Conv2d, Linear, Network
from .qc import make_deterministic, qc_reference
from .rng import substream
from .snn import SpikeRecord, SpikingLayer, SpikingNetwork, layer_inputs, run_layer, simulate
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

ALPHA_AC = 0.9   # pJ per accumulate
ALPHA_MAC = 4.6  # pJ per multiply-accumulate
PJ_TO_UJ = 1e-6


# ---------------------------------------------------------------------------
# single neuron
# ---------------------------------------------------------------------------

def if_neuron_response(v, theta: float = 1.0, u0: float = 0.0):
    """Scalar IF neuron with soft reset, float64. Returns (spikes, u_hat[T])."""
    u = float(u0)
    spikes = np.zeros(len(v), dtype=np.int64)
    for t, vt in enumerate(v):
        u += float(vt)
        if u >= theta:
            spikes[t] = 1
            u -= theta
    return spikes, u


def sine_sequences(n: int, T: int, theta: float = 1.0, seed: int = 0) -> np.ndarray:
    """``n`` input-potential sequences ``A sin(w t + phi)``.

    Amplitudes are uniform on [0, 2 theta], angular frequencies log-spaced
    between 0.05 and pi per step, phases uniform.
    """
    rng = substream(seed, "sine-sequences")
    amp = rng.uniform(0.0, 2 * theta, n)
    omega = np.geomspace(0.05, np.pi, n)
    phase = rng.uniform(0.0, 2 * np.pi, n)
    t = np.arange(1, T + 1)
    return amp[:, None] * np.sin(omega[:, None] * t[None, :] + phase[:, None])


@dataclass
class RPEScatter:
    g: np.ndarray          # estimate from the mean input potential
    r: np.ndarray          # real firing rate
    sequences: np.ndarray
    T: int
    theta: float

    @property
    def deviation(self) -> np.ndarray:
        return np.abs(self.g - self.r)

    @property
    def max_deviation(self) -> float:
        return float(self.deviation.max()) if self.deviation.size else 0.0

    def to_csv(self) -> str:
        rows = ["g,r"] + [f"{a:.6g},{b:.6g}" for a, b in zip(self.g, self.r)]
        return "\n".join(rows) + "\n"


def single_neuron_rpe_experiment(n_sequences: int = 100, T: int = 10, theta: float = 1.0,
                                 sequences=None, seed: int = 0) -> RPEScatter:
    """Feed time-varying input into one IF neuron (u0 = 0) and compare its
    rate with the floor-QC estimate of the mean input."""
    if sequences is None:
        sequences = sine_sequences(n_sequences, T, theta, seed)
    sequences = np.atleast_2d(np.asarray(sequences, np.float64))
    T = sequences.shape[1]
    g = np.empty(len(sequences))
    r = np.empty(len(sequences))
    for i, v in enumerate(sequences):
        spikes, _ = if_neuron_response(v, theta)
        r[i] = spikes.sum() / T
        g[i] = qc_reference(np.array([v.sum() / T]), theta, T, "floor")[0]
    return RPEScatter(g, r, sequences, T, theta)


# ---------------------------------------------------------------------------
# RPE incidence
# ---------------------------------------------------------------------------

@dataclass
class LayerRPE:
    layer: int
    fraction: float
    mean_deviation: float
    max_deviation: float
    n_trials: int
    fraction_mismatch: float = 0.0   # trials whose rate differs from the QC estimate


def residual_deviation(rec: SpikeRecord) -> np.ndarray:
    """Distance of the final potential u_hat[T] from [0, theta); 0 inside.

    With u0 = 0 this is the distance of u_hat[T] - u_hat[0] from [0, theta).
    A shifted start (u0 = theta/2 or a calibrated u0) moves the window with it,
    so a neuron whose rate equals the QC estimate never counts as RPE.
    """
    end = rec.u_hatT.astype(np.float64)
    return np.maximum(0.0, -end) + np.maximum(0.0, end - rec.theta)


def _rpe_mask(rec: SpikeRecord) -> np.ndarray:
    end = rec.u_hatT.astype(np.float64)
    return (end < 0) | (end >= rec.theta)


def qc_estimate(rec: SpikeRecord) -> np.ndarray:
    """Floor-QC estimate of the rate from the mean input and the start potential."""
    z = (rec.v_mean.astype(np.float64) * rec.T + rec.u_hat0) / rec.theta
    return np.clip(np.floor(z + 1e-9) / rec.T, 0.0, 1.0)


def rpe_incidence(snn: SpikingNetwork | None = None, x=None, records=None, batch_size: int = 256) -> list:
    """Per-layer fraction of (sample, neuron) trials with residual outside [0, theta).

    Either pass ``records`` (one list of SpikeRecord per batch, or a flat
    list for a single batch) or ``snn`` and inputs ``x``.
    """
    if records is None:
        if snn is None or x is None:
            raise ValueError("rpe_incidence needs records or (snn, x)")
        records = [simulate(snn, x[i:i + batch_size])[1] for i in range(0, len(x), batch_size)]
    elif records and isinstance(records[0], SpikeRecord):
        records = [records]
    out = []
    for k in range(len(records[0])):
        hits, miss, dev_sum, dev_max, n = 0, 0, 0.0, 0.0, 0
        for batch in records:
            rec = batch[k]
            mask = _rpe_mask(rec)
            dev = residual_deviation(rec)
            hits += int(mask.sum())
            miss += int(np.sum(~np.isclose(rec.rate, qc_estimate(rec))))
            n += mask.size
            dev_sum += float(dev.sum())
            dev_max = max(dev_max, float(dev.max()) if dev.size else 0.0)
        out.append(LayerRPE(k, hits / n if n else 0.0, dev_sum / n if n else 0.0, dev_max, n,
                            miss / n if n else 0.0))
    return out


# ---------------------------------------------------------------------------
# cosine similarity
# ---------------------------------------------------------------------------

def layer_activations(model, x, batch_size: int = 256) -> list:
    """Hidden activations per layer: QC/clip outputs for a Network, firing rates for an SNN."""
    x = np.asarray(x, DTYPE)
    chunks = []
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        if isinstance(model, SpikingNetwork):
            _, recs = simulate(model, xb)
            chunks.append([r.rate.reshape(len(xb), -1) for r in recs])
        else:
            net = make_deterministic(model.copy()).eval()
            with tn.no_grad():
                _, acts = net.forward(xb, collect=True)
            chunks.append([a.data.reshape(len(xb), -1).astype(np.float64) for a in acts])
    return [np.concatenate([c[k] for c in chunks]) for k in range(len(chunks[0]))]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; rows with a zero norm get 0."""
    a = np.asarray(a, np.float64).reshape(len(a), -1)
    b = np.asarray(b, np.float64).reshape(len(b), -1)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    if zero.any():
        log.info("cosine similarity: %d zero-norm rows set to 0", int(zero.sum()))
    denom = np.where(zero, 1.0, na * nb)
    return np.where(zero, 0.0, (a * b).sum(axis=1) / denom)


def cosine_similarity_profile(net_a, net_b, x, samples: int = 1024) -> np.ndarray:
    """Mean per-sample cosine similarity of hidden activations, one value per layer."""
    x = np.asarray(x)[:samples]
    acts_a = layer_activations(net_a, x)
    acts_b = layer_activations(net_b, x)
    if len(acts_a) != len(acts_b):
        raise ValueError(f"layer count mismatch: {len(acts_a)} vs {len(acts_b)}")
    return np.array([cosine_similarity(a, b).mean() for a, b in zip(acts_a, acts_b)])


# ---------------------------------------------------------------------------
# error decomposition
# ---------------------------------------------------------------------------

@dataclass
class ErrorDecomposition:
    qe_ce_mean: list       # |a_QC - a_ANN| per layer
    qe_ce_max: list
    rpe_mean: list         # |r_SNN - a_QC| per layer
    rpe_max: list
    acc_ann: float | None = None
    acc_qc: float | None = None
    acc_snn: float | None = None

    def to_tsv(self) -> str:
        rows = ["layer\tqe_ce_mean\tqe_ce_max\trpe_mean\trpe_max"]
        for k in range(len(self.rpe_mean)):
            rows.append(f"{k}\t{self.qe_ce_mean[k]:.6g}\t{self.qe_ce_max[k]:.6g}\t"
                        f"{self.rpe_mean[k]:.6g}\t{self.rpe_max[k]:.6g}")
        fmt = lambda v: "" if v is None else f"{v:.6g}"
        rows.append(f"# accuracy ann={fmt(self.acc_ann)} qc={fmt(self.acc_qc)} snn={fmt(self.acc_snn)}")
        return "\n".join(rows) + "\n"


def error_decomposition(ann: Network, qcann: Network, snn: SpikingNetwork, x, y=None) -> ErrorDecomposition:
    a_ann = layer_activations(ann, x)
    a_qc = layer_activations(qcann, x)
    r_snn = layer_activations(snn, x)
    qe = [np.abs(q - a) for q, a in zip(a_qc, a_ann)]
    rp = [np.abs(r - q) for r, q in zip(r_snn, a_qc)]
    out = ErrorDecomposition(
        [float(e.mean()) for e in qe], [float(e.max()) for e in qe],
        [float(e.mean()) for e in rp], [float(e.max()) for e in rp],
    )
    if y is not None:
        y = np.asarray(y)
        acc = lambda pred: float(np.mean(pred.argmax(axis=1) == y))
        out.acc_ann = acc(ann.predict(x))
        out.acc_qc = acc(make_deterministic(qcann.copy()).predict(x))
        out.acc_snn = acc(snn.predict(x))
    return out


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

def energy_from_counts(ann_macs: float, snn_sops: float):
    """(ANN energy, SNN energy) in microjoules for 32-bit MAC / AC costs."""
    return ann_macs * ALPHA_MAC * PJ_TO_UJ, snn_sops * ALPHA_AC * PJ_TO_UJ


def _affine_macs(layer, in_shape) -> tuple:
    """(MAC count, output shape) of one synaptic op for a single sample."""
    if isinstance(layer, Linear):
        return layer.in_features * layer.out_features, (layer.out_features,)
    if isinstance(layer, Conv2d):
        c, h, w = in_shape
        oh, ow = layer.output_hw(h, w)
        o, i, k, _ = layer.weight.shape
        return o * oh * ow * i * k * k, (o, oh, ow)
    raise TypeError(layer)


def count_macs(net: Network) -> int:
    """Multiply-accumulates of one forward pass, fixed by the layer shapes."""
    shape = net.input_shape
    total = 0
    with tn.no_grad():
        probe = Tensor(np.zeros((1,) + tuple(shape), DTYPE))
        for layer in net.layers:
            if isinstance(layer, AFFINE):
                total += _affine_macs(layer, probe.shape[1:])[0]
            probe = layer(probe)
    return int(total)


def fan_out(layer: SpikingLayer) -> np.ndarray:
    """Outgoing synapse count of every presynaptic neuron of ``layer`` (shape ``in_shape``)."""
    syn = layer.synapse
    ones_w = Tensor(np.ones_like(syn.weight.data))
    zero_b = Tensor(np.zeros_like(syn.bias.data))
    x = Tensor(np.ones((1,) + layer.in_shape, DTYPE), requires_grad=True)
    h, scale = x, 1.0
    for op in layer.ops[:-1]:
        h = op(h)
        if isinstance(op, AvgPool2d):
            scale *= op.k * op.k
    if isinstance(syn, Conv2d):
        out = tn.conv2d(h, ones_w, zero_b, syn.stride, syn.padding)
    else:
        out = tn.linear(h, ones_w, zero_b)
    out.sum().backward()
    return np.rint(x.grad[0] * scale).astype(np.int64)


@dataclass
class EnergyReport:
    ann_macs: int
    snn_sops_mean: float
    snn_sops_std: float
    T: int
    n_samples: int
    sops_per_layer: list = field(default_factory=list)
    bias_ops: int = 0
    encoding_macs: int = 0
    alpha_ac: float = ALPHA_AC
    alpha_mac: float = ALPHA_MAC

    @property
    def energy_ann(self) -> float:
        return self.ann_macs * self.alpha_mac * PJ_TO_UJ

    @property
    def energy_snn(self) -> float:
        return self.snn_sops_mean * self.alpha_ac * PJ_TO_UJ

    @property
    def ratio(self) -> float:
        """SNN energy as a percentage of ANN energy."""
        return 100.0 * self.energy_snn / self.energy_ann if self.energy_ann else float("nan")

    def to_tsv(self) -> str:
        rows = [
            "quantity\tvalue",
            f"T\t{self.T}",
            f"samples\t{self.n_samples}",
            f"ann_macs\t{self.ann_macs}",
            f"snn_sops_mean\t{self.snn_sops_mean:.6g}",
            f"snn_sops_std\t{self.snn_sops_std:.6g}",
            f"alpha_mac_pJ\t{self.alpha_mac}",
            f"alpha_ac_pJ\t{self.alpha_ac}",
            f"energy_ann_uJ\t{self.energy_ann:.6g}",
            f"energy_snn_uJ\t{self.energy_snn:.6g}",
            f"ratio_pct\t{self.ratio:.4g}",
            f"bias_ops\t{self.bias_ops}",
            f"encoding_macs\t{self.encoding_macs}",
        ]
        rows += [f"sops_layer{k}\t{v:.6g}" for k, v in enumerate(self.sops_per_layer)]
        return "\n".join(rows) + "\n"


def count_sops(snn: SpikingNetwork, x, T: int | None = None, batch_size: int = 256):
    """Per-sample synaptic operations: every spike times the fan-out of its neuron.

    Returns ``[n_samples, n_spiking_layers]``.
    """
    T = int(T or snn.T)
    fans = [fan_out(layer) for layer in snn.layers[1:]]
    rows = []
    for i in range(0, len(x), batch_size):
        _, recs = simulate(snn, x[i:i + batch_size], T)
        per = [(rec.counts * fan[None]).reshape(len(rec.counts), -1).sum(axis=1) for rec, fan in zip(recs, fans)]
        rows.append(np.stack(per, axis=1))
    return np.concatenate(rows).astype(np.float64)


def energy_report(ann: Network, snn: SpikingNetwork, x, samples: int = 1024, T: int | None = None) -> EnergyReport:
    """ANN MACs against measured SNN SOPs.

    Bias injections (one per neuron per step) and the MACs of the analog
    first layer are counted but kept out of the SNN energy.
    """
    T = int(T or snn.T)
    x = np.asarray(x, DTYPE)[:samples]
    sops = count_sops(snn, x, T)
    total = sops.sum(axis=1)
    neurons = sum(int(np.prod(l.out_shape)) for l in snn.layers)
    first = snn.layers[0]
    enc = _affine_macs(first.synapse, _presyn_shape(first))[0]
    return EnergyReport(
        ann_macs=count_macs(ann), snn_sops_mean=float(total.mean()), snn_sops_std=float(total.std()),
        T=T, n_samples=len(x), sops_per_layer=list(sops.mean(axis=0)),
        bias_ops=neurons * T, encoding_macs=enc * T,
    )


def _presyn_shape(layer: SpikingLayer) -> tuple:
    with tn.no_grad():
        h = Tensor(np.zeros((1,) + layer.in_shape, DTYPE))
        for op in layer.ops[:-1]:
            h = op(h)
    return h.shape[1:]


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def gr_scatter(snn: SpikingNetwork, x, layer: int = 0, T: int | None = None) -> np.ndarray:
    """(g, r) pairs for every neuron of one hidden layer: QC estimate from the
    layer's mean input potential against its real rate."""
    T = int(T or snn.T)
    h = layer_inputs(snn, x, layer, T)
    _, rec = run_layer(snn.layers[layer], h, T, analog=(layer == 0))
    return np.stack([qc_estimate(rec).reshape(-1), rec.rate.reshape(-1)], axis=1)


def pairs_to_csv(pairs, header=("x", "y")) -> str:
    rows = [",".join(header)] + [",".join(f"{v:.6g}" for v in row) for row in np.asarray(pairs)]
    return "\n".join(rows) + "\n"
