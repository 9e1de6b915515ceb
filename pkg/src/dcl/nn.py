"""Neural layers on top of the autodiff engine.

Layers are declared with :class:`LayerSpec` records (the architecture presets
are plain spec sequences) and materialized by :func:`build_layer`. Runtime
behaviour that differs between training and inference (batchnorm statistics,
dropout masks) is carried by a :class:`ForwardCtx` so a single model instance
serves GAN training, feature extraction and verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAYER_KINDS = (
    "dense",
    "conv",
    "transposed-conv",
    "batchnorm",
    "dropout",
    "activation",
    "flatten",
    "concat",
)

ACTIVATIONS = ("leaky_relu", "relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description; geometry fields by kind."""

    kind: str
    in_units: int = 0
    out_units: int = 0
    kernel: int = 0
    stride: int = 1
    padding: str | int = "same"
    rate: float = 0.0
    slope: float = 0.0
    std: float = 0.02
    fn: str = "leaky_relu"
    axis: int = 1

    def validate(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if not 0.0 <= self.slope < 1.0:
            raise ValueError(f"leaky slope must be in [0, 1), got {self.slope}")
        if self.kind == "activation" and self.fn not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.fn!r}")
        return self


@dataclass
class ForwardCtx:
    """Per-call state: mode, rng stream and dropout handling.

    ``dropout_rate`` overrides every Dropout layer's configured rate (feature
    extraction runs the net at rate 0 or a low rate). When ``sample_keys`` is
    set, masks are derived per (mask_seed, layer, sample index) so extraction
    results do not depend on how the dataset was batched.
    """

    training: bool = True
    rng: np.random.Generator | None = None
    dropout_rate: float | None = None
    sample_keys: np.ndarray | None = None
    mask_seed: int = 0


class Layer:
    def params(self):
        return []

    def forward(self, x, ctx):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, in_units, out_units, rng, std=0.02, dtype=np.float32, name="dense"):
        w = rng.normal(0.0, std, size=(in_units, out_units)).astype(dtype)
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_units, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def params(self):
        return [self.w, self.b]

    def forward(self, x, ctx):
        return ad.dense(x, self.w, self.b)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride, rng, std=0.02, padding="same",
                 dtype=np.float32, name="conv"):
        w = rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)).astype(dtype)
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True, name=f"{name}.b")
        self.stride = stride
        self.padding = padding

    def params(self):
        return [self.w, self.b]

    def forward(self, x, ctx):
        return ad.conv2d(x, self.w, stride=self.stride, padding=self.padding, bias=self.b)


class ConvTranspose2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride, padding, rng, std=0.02,
                 dtype=np.float32, name="convT"):
        w = rng.normal(0.0, std, size=(in_ch, out_ch, kernel, kernel)).astype(dtype)
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True, name=f"{name}.b")
        self.stride = stride
        self.padding = padding

    def params(self):
        return [self.w, self.b]

    def forward(self, x, ctx):
        return ad.conv2d_transpose(x, self.w, stride=self.stride,
                                   padding=self.padding, bias=self.b)


class BatchNorm(Layer):
    """Channel batchnorm for (N, F) or (N, C, H, W) inputs.

    Training mode normalizes with batch statistics and updates running ones;
    inference mode uses the (frozen) running statistics.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32, name="bn"):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True,
                            name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True,
                           name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def _shape(self, x):
        if x.ndim == 2:
            return (1, -1), (0,)
        if x.ndim == 4:
            return (1, -1, 1, 1), (0, 2, 3)
        raise ad.ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")

    def forward(self, x, ctx):
        view, axes = self._shape(x)
        gamma = ad.reshape(self.gamma, view)
        beta = ad.reshape(self.beta, view)
        if ctx.training:
            mu = ad.mean(x, axis=axes, keepdims=True)
            xc = ad.sub(x, mu)
            var = ad.mean(ad.mul(xc, xc), axis=axes, keepdims=True)
            xhat = ad.div(xc, ad.sqrt(var + self.eps))
            m = self.momentum
            self.running_mean[:] = m * self.running_mean + (1 - m) * mu.data.reshape(-1)
            self.running_var[:] = m * self.running_var + (1 - m) * var.data.reshape(-1)
            return ad.add(ad.mul(xhat, gamma), beta)
        mean = self.running_mean.reshape(view)
        scale = (self.gamma.data / np.sqrt(self.running_var + self.eps)).reshape(view)
        y = ad.mul(ad.sub(x, Tensor(mean.astype(x.dtype))), Tensor(scale.astype(x.dtype)))
        return ad.add(y, beta)


class Dropout(Layer):
    def __init__(self, rate, layer_id=0):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        # stable position within the owning model: keyed masks survive a
        # checkpoint round-trip
        self.layer_id = layer_id

    def forward(self, x, ctx):
        rate = ctx.dropout_rate if ctx.dropout_rate is not None else (
            self.rate if ctx.training else 0.0
        )
        if rate == 0.0:
            return x
        if ctx.sample_keys is not None:
            mask = self._keyed_mask(x.shape, rate, ctx)
        else:
            keep = ctx.rng.random(x.shape) >= rate
            mask = (keep / (1.0 - rate)).astype(x.dtype)
        return ad.mul(x, Tensor(mask))

    def _keyed_mask(self, shape, rate, ctx):
        # one stream per (seed, layer, sample): batching cannot change masks
        mask = np.empty(shape, dtype=np.float32)
        per = shape[1:]
        for row, key in enumerate(ctx.sample_keys):
            ss = np.random.SeedSequence((ctx.mask_seed, self.layer_id, int(key)))
            keep = np.random.Generator(np.random.PCG64(ss)).random(per) >= rate
            mask[row] = keep / (1.0 - rate)
        return mask


class Activation(Layer):
    def __init__(self, fn="leaky_relu", slope=0.2):
        self.fn = fn
        self.slope = slope

    def forward(self, x, ctx):
        if self.fn == "leaky_relu":
            return ad.leaky_relu(x, self.slope)
        if self.fn == "relu":
            return ad.relu(x)
        if self.fn == "tanh":
            return ad.tanh(x)
        if self.fn == "sigmoid":
            return ad.sigmoid(x)
        raise ValueError(f"unknown activation {self.fn!r}")


class Flatten(Layer):
    def forward(self, x, ctx):
        return ad.reshape(x, (x.shape[0], -1))


class Concat(Layer):
    def __init__(self, axis=1):
        self.axis = axis

    def forward(self, xs, ctx):
        return ad.concat(xs, axis=self.axis)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x


def build_layer(spec: LayerSpec, rng, dtype=np.float32, name="", layer_id=0):
    spec.validate()
    kind = spec.kind
    if kind == "dense":
        return Dense(spec.in_units, spec.out_units, rng, std=spec.std, dtype=dtype, name=name)
    if kind == "conv":
        return Conv2d(spec.in_units, spec.out_units, spec.kernel, spec.stride, rng,
                      std=spec.std, padding=spec.padding, dtype=dtype, name=name)
    if kind == "transposed-conv":
        return ConvTranspose2d(spec.in_units, spec.out_units, spec.kernel, spec.stride,
                               int(spec.padding), rng, std=spec.std, dtype=dtype, name=name)
    if kind == "batchnorm":
        return BatchNorm(spec.out_units, dtype=dtype, name=name)
    if kind == "dropout":
        return Dropout(spec.rate, layer_id=layer_id)
    if kind == "activation":
        return Activation(spec.fn, spec.slope)
    if kind == "flatten":
        return Flatten()
    if kind == "concat":
        return Concat(spec.axis)
    raise ValueError(f"unknown layer kind {kind!r}")


def build_sequential(specs, rng, dtype=np.float32, prefix=""):
    """Materialize a LayerSpec sequence; dropout ids follow position."""
    layers = []
    for i, spec in enumerate(specs):
        layers.append(build_layer(spec, rng, dtype=dtype,
                                  name=f"{prefix}{i}.{spec.kind}", layer_id=i))
    return Sequential(layers)
