"""Source ANNs: layers, clipped activations, fusion passes and training."""

from __future__ import annotations

import copy
import logging

import numpy as np

from . import tensor as tn
from .optim import Optimizer, OptimizerState
from .rng import substream
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

THETA_MIN = 1e-4


class StructuralError(ValueError):
    """Network layout does not admit the requested transformation."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the last finite checkpoint."""

    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    training = False

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list:
        return []


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Linear(Layer):
    def __init__(self, weight, bias=None):
        weight = np.asarray(weight, dtype=DTYPE)
        if weight.ndim != 2:
            raise ValueError(f"Linear weight must be 2-D, got {weight.shape}")
        if bias is None:
            bias = np.zeros(weight.shape[0], dtype=DTYPE)
        bias = np.asarray(bias, dtype=DTYPE)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"Linear bias shape {bias.shape} != ({weight.shape[0]},)")
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def init(cls, in_features: int, out_features: int, rng) -> "Linear":
        w = _kaiming_uniform(rng, (out_features, in_features), in_features)
        return cls(w, np.zeros(out_features, dtype=DTYPE))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return tn.linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


class Conv2d(Layer):
    def __init__(self, weight, bias=None, stride: int = 1, padding: int = 0):
        weight = np.asarray(weight, dtype=DTYPE)
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ValueError(f"Conv2d kernel must be [out, in, k, k], got {weight.shape}")
        if bias is None:
            bias = np.zeros(weight.shape[0], dtype=DTYPE)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.asarray(bias, dtype=DTYPE), requires_grad=True)
        self.stride = int(stride)
        self.padding = int(padding)

    @classmethod
    def init(cls, in_ch, out_ch, k, rng, stride=1, padding=0) -> "Conv2d":
        w = _kaiming_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k)
        return cls(w, np.zeros(out_ch, dtype=DTYPE), stride, padding)

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def output_hw(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        return tn.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]

    def __repr__(self):
        o, i, k, _ = self.weight.shape
        return f"Conv2d({i}, {o}, k={k}, stride={self.stride}, padding={self.padding})"


class BatchNorm(Layer):
    """Batch normalization over the feature (2-D input) or channel (4-D input) axis."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1,
                 gamma=None, beta=None, running_mean=None, running_var=None):
        if eps <= 0:
            raise ValueError("BatchNorm eps must be positive")
        self.num_features = num_features
        self.eps = float(eps)
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features, DTYPE) if gamma is None else gamma, requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, DTYPE) if beta is None else beta, requires_grad=True)
        self.running_mean = np.zeros(num_features, DTYPE) if running_mean is None else np.asarray(running_mean, DTYPE)
        self.running_var = np.ones(num_features, DTYPE) if running_var is None else np.asarray(running_var, DTYPE)
        if np.any(self.running_var < 0):
            raise ValueError("BatchNorm variance must be non-negative")

    def forward(self, x):
        if x.ndim == 4:
            axes, shape = (0, 2, 3), (1, -1, 1, 1)
        else:
            axes, shape = (0,), (1, -1)
        gamma = self.gamma.reshape(shape)
        beta = self.beta.reshape(shape)
        if self.training:
            mean = x.mean(axis=axes, keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=axes, keepdims=True)
            n = x.size // self.num_features
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean.data.reshape(-1)).astype(DTYPE)
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(DTYPE)
            xhat = centered / (var + self.eps) ** 0.5
        else:
            mean = self.running_mean.reshape(shape)
            std = np.sqrt(self.running_var + self.eps).reshape(shape)
            xhat = (x - mean) / std
        return xhat * gamma + beta

    def parameters(self):
        return [self.gamma, self.beta]

    def __repr__(self):
        return f"BatchNorm({self.num_features})"


class AvgPool2d(Layer):
    def __init__(self, k: int):
        self.k = int(k)

    def forward(self, x):
        return tn.avg_pool2d(x, self.k)

    def __repr__(self):
        return f"AvgPool2d({self.k})"


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def __repr__(self):
        return "Flatten()"


class Activation(Layer):
    """Base for activation layers; ``theta`` is ``None`` for plain ReLU."""

    theta: Tensor | None = None


class ReLU(Activation):
    def forward(self, x):
        return tn.relu(x)

    def __repr__(self):
        return "ReLU()"


class ClipUnit(Activation):
    """clip(x / theta, 0, 1), output in [0, 1]."""

    def __init__(self, theta: float = 1.0, trainable: bool = True):
        if theta <= 0:
            raise ValueError(f"theta must be positive, got {theta}")
        self.theta = Tensor(np.asarray(theta, DTYPE), requires_grad=trainable)

    def forward(self, x):
        return tn.clip(x / self.theta, 0.0, 1.0)

    def parameters(self):
        return [self.theta] if self.theta.requires_grad else []

    def __repr__(self):
        return f"ClipUnit(theta={float(self.theta.data):.4g})"


class ClipScaled(Activation):
    """clip(x, 0, theta), written as theta * clip(x / theta, 0, 1) so theta gets a gradient."""

    def __init__(self, theta: float = 1.0, trainable: bool = True):
        if theta <= 0:
            raise ValueError(f"theta must be positive, got {theta}")
        self.theta = Tensor(np.asarray(theta, DTYPE), requires_grad=trainable)

    def forward(self, x):
        return tn.clip(x / self.theta, 0.0, 1.0) * self.theta

    def parameters(self):
        return [self.theta] if self.theta.requires_grad else []

    def __repr__(self):
        return f"ClipScaled(theta={float(self.theta.data):.4g})"


AFFINE = (Linear, Conv2d)
SHAPE_ONLY = (AvgPool2d, Flatten)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """Ordered layer stack. ``forward(x, collect=True)`` also returns every activation output."""

    def __init__(self, layers, input_shape, n_outputs, name: str = "net"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.n_outputs = int(n_outputs)
        self.name = name
        self.training = False
        self._check_shapes()

    def _check_shapes(self):
        with tn.no_grad():
            self.forward(np.zeros((1,) + self.input_shape, DTYPE))

    def forward(self, x, collect: bool = False):
        x = x if isinstance(x, Tensor) else Tensor(x)
        acts = []
        for i, layer in enumerate(self.layers):
            layer.training = self.training
            try:
                x = layer(x)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer!r}): {exc}") from exc
            if isinstance(layer, Activation):
                acts.append(x)
        return (x, acts) if collect else x

    __call__ = forward

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def threshold_parameters(self) -> list:
        return [l.theta for l in self.layers if isinstance(l, Activation) and l.theta is not None
                and l.theta.requires_grad]

    def weight_parameters(self) -> list:
        th = {id(p) for p in self.threshold_parameters()}
        return [p for p in self.parameters() if id(p) not in th]

    def activation_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, Activation)]

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        was = self.training
        self.eval()
        outs = []
        with tn.no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward(np.asarray(x[i:i + batch_size], DTYPE)).data)
        self.training = was
        return np.concatenate(outs)

    def __repr__(self):
        inner = ",\n  ".join(repr(l) for l in self.layers)
        return f"Network({self.name!r}, input={self.input_shape}, [\n  {inner}\n])"


def accuracy(model, x, y, **kwargs) -> float:
    """Top-1 accuracy of ``model.predict`` against integer labels."""
    pred = model.predict(x, **kwargs)
    return float(np.mean(pred.argmax(axis=1) == np.asarray(y)))


def build_network(arch: str, input_shape, n_outputs: int, rng, activation: str = "clip_unit",
                  batchnorm: bool = True, name: str | None = None) -> Network:
    """Build ``mlp:H1,H2,...`` or ``cnn:C1,C2,...`` with the requested activation.

    MLP blocks are Linear -> [BatchNorm] -> act; CNN blocks are
    Conv3x3 -> [BatchNorm] -> act -> AvgPool2d(2) (pooling skipped once the
    map is too small), followed by Flatten -> Linear head.
    """
    kind, _, widths = arch.partition(":")
    widths = [int(w) for w in widths.split(",") if w.strip()]
    make_act = {"clip_unit": ClipUnit, "clip_scaled": ClipScaled, "relu": ReLU}.get(activation)
    if make_act is None:
        raise ValueError(f"unknown activation {activation!r}")
    if not widths:
        raise ValueError(f"architecture {arch!r} has no hidden widths")
    input_shape = tuple(input_shape)
    layers = []
    if kind == "mlp":
        n_in = int(np.prod(input_shape))
        if len(input_shape) > 1:
            layers.append(Flatten())
        for w in widths:
            layers.append(Linear.init(n_in, w, rng))
            if batchnorm:
                layers.append(BatchNorm(w))
            layers.append(make_act())
            n_in = w
        layers.append(Linear.init(n_in, n_outputs, rng))
    elif kind == "cnn":
        if len(input_shape) != 3:
            raise ValueError(f"cnn needs a [C, H, W] input, got {input_shape}")
        c, h, w = input_shape
        for width in widths:
            layers.append(Conv2d.init(c, width, 3, rng, padding=1))
            if batchnorm:
                layers.append(BatchNorm(width))
            layers.append(make_act())
            c = width
            if h >= 4 and w >= 4 and h % 2 == 0 and w % 2 == 0:
                layers.append(AvgPool2d(2))
                h, w = h // 2, w // 2
        layers.append(Flatten())
        layers.append(Linear.init(c * h * w, n_outputs, rng))
    else:
        raise ValueError(f"unknown architecture kind {kind!r} (expected mlp or cnn)")
    return Network(layers, input_shape, n_outputs, name=name or arch)


# ---------------------------------------------------------------------------
# fusion passes
# ---------------------------------------------------------------------------

def fuse_batchnorm(net: Network) -> Network:
    """Fold every BatchNorm into the Linear/Conv2d directly before it."""
    out = net.copy()
    layers = []
    for i, layer in enumerate(out.layers):
        if not isinstance(layer, BatchNorm):
            layers.append(layer)
            continue
        prev = layers[-1] if layers else None
        if not isinstance(prev, AFFINE):
            raise StructuralError(f"BatchNorm at index {i} is not preceded by Linear or Conv2d")
        scale = layer.gamma.data.astype(np.float64) / np.sqrt(layer.running_var.astype(np.float64) + layer.eps)
        w = prev.weight.data.astype(np.float64)
        w = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
        b = scale * (prev.bias.data.astype(np.float64) - layer.running_mean) + layer.beta.data
        prev.weight = Tensor(w.astype(DTYPE), requires_grad=True)
        prev.bias = Tensor(b.astype(DTYPE), requires_grad=True)
    out.layers = layers
    return out


def fuse_activation_scale(net: Network) -> Network:
    """Turn every ClipScaled(theta) into ClipUnit(1).

    The affine layer feeding the activation is divided by theta and the next
    Linear/Conv2d weight is multiplied by theta, so the network function is
    unchanged.
    """
    out = net.copy()
    layers = out.layers
    for i, layer in enumerate(layers):
        if not isinstance(layer, ClipScaled):
            continue
        theta = float(layer.theta.data)
        prev = layers[i - 1] if i > 0 else None
        if isinstance(prev, AFFINE):
            prev.weight.data = (prev.weight.data / theta).astype(DTYPE)
            prev.bias.data = (prev.bias.data / theta).astype(DTYPE)
        elif isinstance(prev, BatchNorm):
            prev.gamma.data = (prev.gamma.data / theta).astype(DTYPE)
            prev.beta.data = (prev.beta.data / theta).astype(DTYPE)
        else:
            raise StructuralError(f"ClipScaled at index {i} has no affine predecessor")
        nxt = None
        for later in layers[i + 1:]:
            if isinstance(later, SHAPE_ONLY):
                continue
            if isinstance(later, AFFINE):
                nxt = later
            break
        if nxt is None:
            raise StructuralError(f"ClipScaled at index {i} has no Linear/Conv2d successor to absorb theta")
        nxt.weight.data = (nxt.weight.data * theta).astype(DTYPE)
        layers[i] = ClipUnit(1.0)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def init_thresholds(net: Network, x_batch, percentile: float = 99.9) -> None:
    """Set each clip threshold to the given percentile of its pre-activation on ``x_batch``."""
    x = Tensor(np.asarray(x_batch, DTYPE))
    with tn.no_grad():
        for layer in net.layers:
            if isinstance(layer, (ClipUnit, ClipScaled)):
                theta = float(np.percentile(np.abs(x.data), percentile))
                layer.theta.data = np.asarray(theta if theta > 0 else 1.0, DTYPE)
            layer.training = False
            x = layer(x)


def clamp_thresholds(net: Network) -> None:
    for layer in net.activation_layers():
        if layer.theta is not None and float(layer.theta.data) <= 0:
            log.warning("threshold driven to %.3g; clamped to %g", float(layer.theta.data), THETA_MIN)
            layer.theta.data = np.asarray(THETA_MIN, DTYPE)


def task_loss(out: Tensor, y, task: str) -> Tensor:
    if task == "regression":
        return tn.mse_loss(out, np.asarray(y, DTYPE).reshape(out.shape))
    return tn.cross_entropy(out, y)


def iterate_minibatches(n: int, batch_size: int, rng, shuffle: bool = True):
    idx = rng.permutation(n) if shuffle else np.arange(n)
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]


def fit(net: Network, x, y, task: str, weight_opt: OptimizerState, theta_opt: OptimizerState | None,
        epochs: int, batch_size: int, rng, epoch_hook=None) -> list:
    """Minibatch training loop shared by source training and QC finetuning.

    Returns per-epoch mean losses. ``epoch_hook(epoch, net)`` runs after each
    epoch. A non-finite loss raises :class:`TrainingDiverged` carrying the
    network as it was after the last finite epoch.
    """
    x = np.asarray(x, DTYPE)
    weights = Optimizer(net.weight_parameters(), weight_opt)
    thetas = Optimizer(net.threshold_parameters(), theta_opt) if theta_opt and net.threshold_parameters() else None
    history = []
    last_good = net.copy()
    for epoch in range(epochs):
        net.train()
        losses = []
        try:
            for idx in iterate_minibatches(len(x), batch_size, rng):
                out = net(x[idx])
                loss = task_loss(out, y[idx], task)
                if not np.isfinite(loss.data):
                    raise FloatingPointError("loss is not finite")
                weights.zero_grad()
                if thetas:
                    thetas.zero_grad()
                loss.backward()
                weights.step()
                if thetas:
                    thetas.step()
                clamp_thresholds(net)
                losses.append(float(loss.data))
        except FloatingPointError as exc:
            net.eval()
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", last_good, epoch) from exc
        net.eval()
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.5f", epoch, history[-1])
        last_good = net.copy()
        if epoch_hook is not None:
            epoch_hook(epoch, net)
    return history


def train_source_ann(net: Network, data, recipe: str = "direct-clip", hyper: OptimizerState | None = None,
                     epochs: int = 20, batch_size: int = 64, seed: int = 0,
                     train_theta: bool | None = None) -> Network:
    """Train a source ANN with clipped activations.

    ``recipe="direct-clip"`` trains ClipUnit activations as-is;
    ``recipe="scaled-clip-then-fuse"`` trains ClipScaled activations and folds
    their thresholds into the weights afterwards, so the returned network only
    contains ClipUnit activations.

    Thresholds start at the 99.9th percentile of the pre-activations of one
    warm-up batch. By default they stay fixed for direct-clip (the gradient
    -x/theta^2 is unstable under SGD) and are trained for scaled-clip.
    """
    want = {"direct-clip": ClipUnit, "scaled-clip-then-fuse": ClipScaled}.get(recipe)
    if want is None:
        raise ValueError(f"unknown recipe {recipe!r}")
    acts = net.activation_layers()
    if not acts or not all(type(a) is want for a in acts):
        raise ValueError(f"recipe {recipe!r} needs {want.__name__} activations throughout")
    hyper = hyper or OptimizerState("sgd", 0.1, momentum=0.9, weight_decay=5e-4)
    net = net.copy()
    if train_theta is None:
        train_theta = recipe == "scaled-clip-then-fuse"
    for act in net.activation_layers():
        act.theta.requires_grad = train_theta
    rng = substream(seed, "shuffle")
    warm = rng.permutation(len(data.x_train))[:batch_size]
    init_thresholds(net, data.x_train[warm])
    theta_opt = OptimizerState(hyper.kind, hyper.learning_rate, hyper.momentum, hyper.beta1,
                               hyper.beta2, hyper.eps, 0.0)
    net.history = fit(net, data.x_train, data.y_train, data.task, hyper, theta_opt, epochs, batch_size, rng)
    if recipe == "scaled-clip-then-fuse":
        history = net.history
        net = fuse_activation_scale(net)
        net.history = history
    for act in net.activation_layers():
        act.theta.requires_grad = True
    return net
