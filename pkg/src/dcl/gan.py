"""Phase 1: adversarial representation learning.

A convolutional discriminator (optionally fed through the Sobel front-end)
and a mirrored transposed-conv generator train in the classic alternating
min-max scheme: one discriminator update on (real, fake), then one generator
update on a fresh latent batch. The discriminator's flatten/FC output M is
the feature space used downstream; an L1 hinge keeps its entries inside
[-tau, tau].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape
from .nn import (
    Activation,
    BatchNorm,
    Dense,
    ForwardCtx,
    LayerSpec,
    build_sequential,
)
from .optim import Adam
from .sobel import SobelFrontend
from . import fileio

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class ArchPreset:
    """Conv ladder geometry: kernel 4, stride 2, halving spatial size."""

    name: str
    image_size: int
    image_channels: int
    conv_channels: tuple
    fc_width: int | None  # None: M is the flatten itself

    def spatial_ladder(self):
        sizes = [self.image_size]
        for _ in self.conv_channels:
            sizes.append(-(-sizes[-1] // 2))
        return sizes

    @property
    def flatten_width(self):
        return self.conv_channels[-1] * self.spatial_ladder()[-1] ** 2

    @property
    def feature_width(self):
        return self.fc_width if self.fc_width else self.flatten_width


_PRESETS = {
    "mnist-24": ArchPreset("mnist-24", 24, 1, (32, 64, 128), None),
    "cifar-32": ArchPreset("cifar-32", 32, 3, (64, 128, 256), 1024),
    "stl-48": ArchPreset("stl-48", 48, 3, (64, 128, 256), 1024),
}


def get_preset(name):
    """Named preset, or ``toy-<size>`` for a small single-channel ladder."""
    if name in _PRESETS:
        return _PRESETS[name]
    if name.startswith("toy-"):
        size = int(name.split("-", 1)[1])
        if size < 8:
            raise ValueError(f"toy preset needs image size >= 8, got {size}")
        return ArchPreset(name, size, 1, (16, 32, 64), None)
    raise ValueError(f"unknown architecture preset {name!r}")


@dataclass(frozen=True)
class GanConfig:
    preset: str = "mnist-24"
    latent_dim: int = 100
    batch_size: int = 128
    iters: int = 1000
    lr: float = 1e-4
    beta1: float = 0.5
    init_std: float = 0.02
    dropout: float = 0.2
    tau: float = 20.0
    sobel: bool = True
    seed: int = 0

    def validate(self):
        if self.iters < 1:
            raise ValueError(f"iteration budget must be >= 1, got {self.iters}")
        if self.batch_size < 2:
            raise ValueError(f"batch size must be >= 2, got {self.batch_size}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        return self


@dataclass
class LatentBatch:
    z: np.ndarray

    def __post_init__(self):
        if np.abs(self.z).max(initial=0.0) > 1.0:
            raise ValueError("latent entries must lie in [-1, 1]")


def sample_latent(n, dim, rng):
    """i.i.d. uniform latent codes on [-1, 1]."""
    if n < 1 or dim < 1:
        raise ValueError(f"latent batch needs n, dim >= 1, got {n}, {dim}")
    return LatentBatch(rng.uniform(-1.0, 1.0, size=(n, dim)).astype(np.float32))


# ---------------------------------------------------------------------------
# models


def discriminator_specs(preset: ArchPreset, in_channels, dropout, init_std):
    specs = []
    prev = in_channels
    for ch in preset.conv_channels:
        specs.append(LayerSpec("conv", in_units=prev, out_units=ch, kernel=4,
                               stride=2, padding="same", std=init_std))
        specs.append(LayerSpec("batchnorm", out_units=ch))
        specs.append(LayerSpec("activation", fn="leaky_relu", slope=0.2))
        specs.append(LayerSpec("dropout", rate=dropout))
        prev = ch
    specs.append(LayerSpec("flatten"))
    if preset.fc_width:
        specs.append(LayerSpec("dense", in_units=preset.flatten_width,
                               out_units=preset.fc_width, std=init_std))
    return specs


class Discriminator:
    """Conv trunk ending at the feature vector M, plus a 1-logit head."""

    def __init__(self, preset, sobel=True, dropout=0.2, init_std=0.02, rng=None,
                 dtype=np.float32):
        preset = get_preset(preset) if isinstance(preset, str) else preset
        rng = rng if rng is not None else np.random.default_rng(0)
        self.preset = preset
        self.sobel = bool(sobel)
        in_ch = preset.image_channels + 2 if sobel else preset.image_channels
        self.frontend = SobelFrontend() if sobel else None
        self.trunk = build_sequential(
            discriminator_specs(preset, in_ch, dropout, init_std), rng,
            dtype=dtype, prefix="disc.")
        self.head_act = Activation("leaky_relu", 0.2) if preset.fc_width else None
        self.out = Dense(preset.feature_width, 1, rng, std=init_std, dtype=dtype,
                         name="disc.out")

    def params(self):
        return self.trunk.params() + self.out.params()

    def features(self, x, ctx):
        """The flatten/FC output M."""
        if self.frontend is not None:
            x = self.frontend.forward(x, ctx)
        return self.trunk.forward(x, ctx)

    def forward(self, x, ctx):
        """Returns (logit column, M)."""
        m = self.features(x, ctx)
        h = self.head_act.forward(m, ctx) if self.head_act else m
        return self.out.forward(h, ctx), m


def _stage_kernel(src, dst):
    if dst == 2 * src:
        return 4, 1
    if dst == 2 * src - 1:
        return 3, 1
    raise ValueError(f"no transposed-conv stage doubles {src} into {dst}")


class Generator:
    """Latent vector to image: dense seed, then mirrored transposed convs."""

    def __init__(self, preset, latent_dim=100, init_std=0.02, rng=None, dtype=np.float32):
        preset = get_preset(preset) if isinstance(preset, str) else preset
        rng = rng if rng is not None else np.random.default_rng(0)
        self.preset = preset
        sizes = preset.spatial_ladder()[::-1]  # smallest first, ends at image size
        chans = list(preset.conv_channels[::-1]) + [preset.image_channels]
        self.seed_size = sizes[0]
        self.seed_ch = chans[0]
        self.latent_dim = latent_dim
        self.fc = Dense(latent_dim, self.seed_ch * self.seed_size**2, rng,
                        std=init_std, dtype=dtype, name="gen.fc")
        self.seed_bn = BatchNorm(self.seed_ch, dtype=dtype, name="gen.bn0")
        specs = []
        for i in range(len(sizes) - 1):
            k, p = _stage_kernel(sizes[i], sizes[i + 1])
            specs.append(LayerSpec("transposed-conv", in_units=chans[i],
                                   out_units=chans[i + 1], kernel=k, stride=2,
                                   padding=p, std=init_std))
            if i < len(sizes) - 2:  # no batchnorm on the output stage
                specs.append(LayerSpec("batchnorm", out_units=chans[i + 1]))
                specs.append(LayerSpec("activation", fn="leaky_relu", slope=0.2))
        self.stages = build_sequential(specs, rng, dtype=dtype, prefix="gen.")

    def params(self):
        return self.fc.params() + self.seed_bn.params() + self.stages.params()

    def forward(self, z, ctx):
        h = self.fc.forward(z, ctx)
        h = ad.reshape(h, (z.shape[0], self.seed_ch, self.seed_size, self.seed_size))
        h = ad.leaky_relu(self.seed_bn.forward(h, ctx), 0.2)
        return ad.tanh(self.stages.forward(h, ctx))


# ---------------------------------------------------------------------------
# losses


def _safe_probs(p):
    if np.any(p.data <= 0.0) or np.any(p.data >= 1.0):
        warnings.warn("probability saturated at 0/1; clamping", RuntimeWarning)
    return ad.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def flatten_penalty_value(m_values, tau):
    """L1 hinge on the feature matrix: sum(max(|M| - tau, 0))."""
    return float(np.maximum(np.abs(m_values) - tau, 0.0).sum())


def discriminator_loss(d_real, d_fake, m_real, tau):
    """-[mean log D(x) + mean log(1 - D(G(z)))] + L1 hinge on M."""
    dr = _safe_probs(d_real)
    df = _safe_probs(d_fake)
    adv = ad.neg(ad.add(ad.mean(ad.log(dr)), ad.mean(ad.log(ad.neg(df) + 1.0))))
    pen = ad.sum_(ad.relu(ad.abs_(m_real) - tau))
    return ad.add(adv, pen)


def generator_loss(d_fake):
    """Non-saturating form: -mean log D(G(z))."""
    return ad.neg(ad.mean(ad.log(_safe_probs(d_fake))))


# ---------------------------------------------------------------------------
# training


class GanState:
    def __init__(self, config: GanConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        preset = get_preset(config.preset)
        self.gen = Generator(preset, config.latent_dim, config.init_std, self.rng, dtype)
        self.disc = Discriminator(preset, config.sobel, config.dropout,
                                  config.init_std, self.rng, dtype)
        self.opt_g = Adam(self.gen.params(), lr=config.lr, beta1=config.beta1)
        self.opt_d = Adam(self.disc.params(), lr=config.lr, beta1=config.beta1)
        self.iteration = 0
        self.history = []


def _assert_finite(value, term):
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite {term} at GAN step: {value}")


def train_step(state: GanState, real_batch):
    """One discriminator update on (real, fake), then one generator update."""
    cfg = state.config
    ctx = ForwardCtx(training=True, rng=state.rng)
    real = Tensor(real_batch)
    n = real_batch.shape[0]

    z = sample_latent(n, cfg.latent_dim, state.rng)
    fake = state.gen.forward(Tensor(z.z), ctx).data

    with Tape() as tape:
        logit_r, m_r = state.disc.forward(real, ctx)
        logit_f, _ = state.disc.forward(Tensor(fake), ctx)
        d_loss = discriminator_loss(ad.sigmoid(logit_r), ad.sigmoid(logit_f), m_r, cfg.tau)
    penalty = flatten_penalty_value(m_r.data, cfg.tau)
    _assert_finite(d_loss.item(), "discriminator loss")
    state.opt_d.step(ad.backward(d_loss, tape, state.disc.params()))

    z2 = sample_latent(n, cfg.latent_dim, state.rng)
    with Tape() as tape:
        fake2 = state.gen.forward(Tensor(z2.z), ctx)
        logit_f2, _ = state.disc.forward(fake2, ctx)
        g_loss = generator_loss(ad.sigmoid(logit_f2))
    _assert_finite(g_loss.item(), "generator loss")
    state.opt_g.step(ad.backward(g_loss, tape, state.gen.params()))

    state.iteration += 1
    record = {"iter": state.iteration, "d_loss": d_loss.item(),
              "g_loss": g_loss.item(), "l1_penalty": penalty}
    state.history.append(record)
    return record


def train_gan(config: GanConfig, dataset, log_every=0, log_fn=None):
    """Run the configured number of minibatch iterations over ``dataset``."""
    state = GanState(config)
    images = dataset.images if hasattr(dataset, "images") else np.asarray(dataset)
    n = len(images)
    if n < config.batch_size:
        raise ValueError(f"dataset of {n} images smaller than batch {config.batch_size}")
    order = state.rng.permutation(n)
    cursor = 0
    for _ in range(config.iters):
        if cursor + config.batch_size > n:
            order = state.rng.permutation(n)
            cursor = 0
        batch = images[order[cursor : cursor + config.batch_size]]
        cursor += config.batch_size
        record = train_step(state, batch)
        if log_fn and log_every and record["iter"] % log_every == 0:
            log_fn(record)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _named_blobs(model, prefix):
    blobs = {}
    for p in model.params():
        blobs[f"{prefix}.{p.name}"] = p.data
    stack = [model.trunk] if hasattr(model, "trunk") else [model.stages]
    layers = list(stack[0].layers)
    if hasattr(model, "seed_bn"):
        layers.append(model.seed_bn)
    for layer in layers:
        if isinstance(layer, BatchNorm):
            for bname, buf in layer.buffers():
                blobs[f"{prefix}.{layer.name}.{bname}"] = buf
    return blobs


def save_checkpoint(path, state: GanState):
    blobs = {}
    blobs.update(_named_blobs(state.disc, "d"))
    blobs.update(_named_blobs(state.gen, "g"))
    fileio.write_checkpoint(path, blobs)


def load_into(model, blobs, prefix):
    """Restore parameters and batchnorm buffers by name; shapes must match."""
    for p in model.params():
        key = f"{prefix}.{p.name}"
        if key not in blobs:
            raise fileio.CodecError(f"checkpoint missing blob {key!r}")
        arr = blobs[key]
        if arr.shape != p.data.shape:
            raise fileio.CodecError(
                f"checkpoint blob {key!r} shape {arr.shape} != expected {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype)
    stack = model.trunk if hasattr(model, "trunk") else model.stages
    layers = list(stack.layers)
    if hasattr(model, "seed_bn"):
        layers.append(model.seed_bn)
    for layer in layers:
        if isinstance(layer, BatchNorm):
            for bname, _ in layer.buffers():
                key = f"{prefix}.{layer.name}.{bname}"
                if key not in blobs:
                    raise fileio.CodecError(f"checkpoint missing buffer {key!r}")
                setattr(layer, bname, blobs[key].astype(np.float32))


def load_discriminator(path, config: GanConfig, dtype=np.float32):
    blobs = fileio.read_checkpoint(path)
    disc = Discriminator(config.preset, config.sobel, config.dropout,
                         config.init_std, np.random.default_rng(0), dtype)
    load_into(disc, blobs, "d")
    return disc
