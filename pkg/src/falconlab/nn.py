"""Layers, models and optimizers built on :mod:`falconlab.autograd`."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import config
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError, RegistryError

LAYER_KINDS = ("dense", "conv2d", "relu", "dropout", "flatten", "maxpool2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    filters: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    rate: float = 0.0
    size: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise RegistryError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and self.units < 1:
            raise ConfigError(f"dense layer needs units >= 1, got {self.units}")
        if self.kind == "conv2d":
            if self.filters < 1:
                raise ConfigError(f"conv2d layer needs filters >= 1, got {self.filters}")
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ConfigError(f"conv2d kernel must be odd and >= 1, got {self.kernel}")
            if self.stride < 1:
                raise ConfigError("conv2d stride must be >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.kind == "maxpool2d" and self.size < 1:
            raise ConfigError("maxpool2d size must be >= 1")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v != getattr(_DEFAULT_SPEC, k) or k == "kind"}


_DEFAULT_SPEC = LayerSpec("relu")


def dense(units):
    return LayerSpec("dense", units=units)


def conv(filters, kernel=3, stride=1, pad=0):
    return LayerSpec("conv2d", filters=filters, kernel=kernel, stride=stride, pad=pad)


def dropout(rate):
    return LayerSpec("dropout", rate=rate)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")


def maxpool(size=2):
    return LayerSpec("maxpool2d", size=size)


def preset(name: str, num_classes: int = 10, input_shape=(28, 28), dropout_rate: float = 0.5) -> tuple:
    """Return ``(layers, input_shape)`` for a named reference architecture.

    ``mlp-small`` is 784-128-128-C with relu and dropout. ``lenet-like`` is two
    5x5 conv/pool stages followed by two dense layers; both are approximations
    of the small-image classifiers commonly used on MNIST.
    """
    if name == "mlp-small":
        d = int(np.prod(input_shape))
        layers = [dense(128), RELU, dropout(dropout_rate), dense(128), RELU, dropout(dropout_rate), dense(num_classes)]
        return layers, (d,)
    if name == "lenet-like":
        h, w = input_shape[-2:]
        layers = [
            conv(6, 5, pad=2), RELU, maxpool(2),
            conv(16, 5), RELU, maxpool(2),
            FLATTEN, dense(120), RELU, dropout(dropout_rate), dense(num_classes),
        ]
        return layers, (1, h, w)
    if name == "mlp-tiny":
        d = int(np.prod(input_shape))
        return [dense(32), RELU, dense(32), RELU, dense(num_classes)], (d,)
    raise RegistryError(f"unknown preset {name!r}")


class Model:
    """A feed-forward stack of layers ending in ``num_classes`` logits."""

    def __init__(self, layers, input_shape, num_classes: int, seed: int = 0):
        if num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {num_classes}")
        self.layers = [spec if isinstance(spec, LayerSpec) else LayerSpec(**spec) for spec in layers]
        self.input_shape = tuple(int(n) for n in input_shape)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.training = True
        self.dropout_rng = np.random.default_rng([self.seed, 1])
        self.params: list[Tensor] = []
        self.param_names: list[str] = []
        self._slots: list[tuple] = []  # per layer: indices into params
        self._init_params(np.random.default_rng([self.seed, 0]))

    @classmethod
    def from_preset(cls, name, num_classes=10, input_shape=(28, 28), seed=0, dropout_rate=0.5):
        layers, shape = preset(name, num_classes, input_shape, dropout_rate)
        return cls(layers, shape, num_classes, seed)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def _init_params(self, rng):
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            relu_next = i + 1 < len(self.layers) and self.layers[i + 1].kind == "relu"
            gain = 6.0 if relu_next else 3.0
            if spec.kind == "dense":
                if len(shape) != 1:
                    raise DimensionError(f"layer {i}: dense expects flat input, got {shape}; add a flatten layer")
                fan_in = shape[0]
                limit = np.sqrt(gain / fan_in)
                w = rng.uniform(-limit, limit, size=(fan_in, spec.units))
                self._add(i, [("W", w), ("b", np.zeros(spec.units))])
                shape = (spec.units,)
            elif spec.kind == "conv2d":
                if len(shape) != 3:
                    raise DimensionError(f"layer {i}: conv2d expects (c, h, w) input, got {shape}")
                c, h, w_ = shape
                fan_in = c * spec.kernel * spec.kernel
                limit = np.sqrt(gain / fan_in)
                w = rng.uniform(-limit, limit, size=(spec.filters, c, spec.kernel, spec.kernel))
                self._add(i, [("W", w), ("b", np.zeros(spec.filters))])
                oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
                ow = (w_ + 2 * spec.pad - spec.kernel) // spec.stride + 1
                if oh < 1 or ow < 1:
                    raise DimensionError(f"layer {i}: conv kernel {spec.kernel} does not fit {shape}")
                shape = (spec.filters, oh, ow)
            elif spec.kind == "maxpool2d":
                if len(shape) != 3 or shape[1] < spec.size or shape[2] < spec.size:
                    raise DimensionError(f"layer {i}: cannot pool {shape} with window {spec.size}")
                shape = (shape[0], shape[1] // spec.size, shape[2] // spec.size)
                self._slots.append(())
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
                self._slots.append(())
            else:
                self._slots.append(())
        if shape != (self.num_classes,):
            raise DimensionError(f"network output shape {shape} does not match {self.num_classes} classes")

    def _add(self, layer_index, named):
        idx = []
        for name, arr in named:
            self.params.append(Tensor(arr.astype(config.DTYPE), requires_grad=True))
            self.param_names.append(f"{layer_index}.{name}")
            idx.append(len(self.params) - 1)
        self._slots.append(tuple(idx))

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def forward(self, inputs) -> Tensor:
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        b = x.shape[0] if x.ndim else 0
        if x.ndim < 1 or int(np.prod(x.shape[1:])) != self.input_dim:
            raise DimensionError(f"model expects samples of shape {self.input_shape}, got batch {x.shape}")
        if x.shape[1:] != self.input_shape:
            x = ag.reshape(x, (b,) + self.input_shape)
        for spec, slot in zip(self.layers, self._slots):
            kind = spec.kind
            if kind == "dense":
                w, bias = (self.params[j] for j in slot)
                x = ag.add(ag.matmul(x, w), bias)
            elif kind == "conv2d":
                w, bias = (self.params[j] for j in slot)
                x = ag.conv2d(x, w, bias, stride=spec.stride, pad=spec.pad)
            elif kind == "relu":
                x = ag.relu(x)
            elif kind == "maxpool2d":
                x = ag.maxpool2d(x, spec.size)
            elif kind == "flatten":
                x = ag.reshape(x, (x.shape[0], -1))
            elif kind == "dropout":
                if self.training and spec.rate > 0.0:
                    keep = 1.0 - spec.rate
                    mask = (self.dropout_rng.random(x.shape) < keep) / keep
                    x = ag.mul(x, Tensor(mask.astype(x.data.dtype)))
        return x

    __call__ = forward

    def predict_logits(self, inputs, batch_size: int = 2048) -> np.ndarray:
        """Eval-mode logits as a numpy array; the training flag is restored afterwards."""
        was = self.training
        self.training = False
        try:
            with ag.no_grad():
                chunks = [self.forward(inputs[i : i + batch_size]).data for i in range(0, len(inputs), batch_size)]
        finally:
            self.training = was
        return np.concatenate(chunks, axis=0)

    def predict_proba(self, inputs, batch_size: int = 2048) -> np.ndarray:
        return softmax_confidences(self.predict_logits(inputs, batch_size))

    # -- state -----------------------------------------------------------
    def architecture(self) -> dict:
        return {
            "layers": [s.to_dict() for s in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "Model":
        return cls([LayerSpec(**s) for s in arch["layers"]], arch["input_shape"], arch["num_classes"], arch.get("seed", 0))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.astype(np.float64).reshape(-1) for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(p.size for p in self.params)
        if flat.size != total:
            raise DimensionError(f"parameter blob has {flat.size} values, model needs {total}")
        pos = 0
        for p in self.params:
            p.data = flat[pos : pos + p.size].reshape(p.shape).astype(p.data.dtype)
            p.grad = None
            pos += p.size

    def clone(self) -> "Model":
        twin = copy.deepcopy(self)
        twin.zero_grad()
        return twin


def softmax_confidences(logits) -> np.ndarray:
    """Row-wise softmax of a logit array, computed with max-subtraction."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class Optimizer:
    """SGD with momentum or RMSProp, both with decoupled L2 weight decay.

    Each step applies ``p <- p - lr * update(g) - lr * l2 * p`` where the decay
    uses the pre-step parameter value.
    """

    kind: str = "sgd-momentum"
    lr: float = 5e-4
    l2: float = 0.0
    momentum: float = 0.9
    rho: float = 0.9
    eps: float = 1e-7
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "rmsprop"):
            raise RegistryError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.l2 < 0:
            raise ConfigError("l2 coefficient must be non-negative")

    def step(self, model: Model) -> None:
        missing = [n for n, p in zip(model.param_names, model.params) if p.grad is None]
        if missing:
            raise ContractError(f"optimizer step without gradients for {missing[:3]}{'...' if len(missing) > 3 else ''}")
        for i, p in enumerate(model.params):
            g = p.grad
            if self.kind == "sgd-momentum":
                v = self.buffers.get(i)
                v = g if v is None else self.momentum * v + g
                self.buffers[i] = v
                update = v
            else:
                s = self.buffers.get(i)
                s = (1.0 - self.rho) * (g * g) if s is None else self.rho * s + (1.0 - self.rho) * (g * g)
                self.buffers[i] = s
                update = g / (np.sqrt(s) + self.eps)
            new = p.data - self.lr * update
            if self.l2:
                new = new - self.lr * self.l2 * p.data
            p.data = new
            p.grad = None
