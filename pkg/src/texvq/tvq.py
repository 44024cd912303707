"""Two-branch texture-VQ autoencoder and its stage-1 training.

The encoder E maps an HR image to a fine texture map F_H (quantized against the
codebook) and a coarse structure map F_L (kept continuous).  A separate small
autoencoder (E_down, D_down) trained on the 8x-pooled image X_down supplies the
anchor F_down that F_L is pulled towards, so structure lands in F_L and F_H is
left with what X_down cannot explain.  The vanilla variant drops the structure
branch and quantizes a single feature map.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import vq
from .autodiff import Adam, AdamHyper, Tensor, backward, default_dtype, detach, no_grad
from .autodiff import functional as F
from .autodiff.nn import Conv2d, Downsample, Module, ResBlock, SelfAttention, Upsample


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class ComponentNaNError(FloatingPointError):
    def __init__(self, component: str, step: int):
        super().__init__(f"loss component {component!r} is not finite at step {step}")
        self.component = component


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ScaleConfig:
    hr_size: int = 64
    texture_factor: int = 8
    structure_factor: int = 32
    xdown_factor: int = 8
    texture_channels: int = 32
    structure_channels: int = 8

    def __post_init__(self):
        for name in ("texture_factor", "structure_factor", "xdown_factor"):
            v = getattr(self, name)
            if not _is_pow2(v) or v < 2:
                raise ConfigError(f"scale.{name} must be a power of two >= 2, got {v}")
            if self.hr_size % v:
                raise ConfigError(f"scale.{name}={v} must divide hr_size={self.hr_size}")
        if self.texture_factor > self.structure_factor:
            raise ConfigError("scale.texture_factor must not exceed scale.structure_factor")
        if self.structure_factor < self.xdown_factor:
            raise ConfigError("scale.structure_factor must be >= scale.xdown_factor (F_down is pooled from X_down)")
        if self.xdown_factor <= 4:
            raise ConfigError("scale.xdown_factor must exceed the x4 SR factor so X_down is coarser than the LR input")
        if self.texture_channels < 1 or self.structure_channels < 1:
            raise ConfigError("scale channel counts must be positive")

    @property
    def texture_size(self) -> int:
        return self.hr_size // self.texture_factor

    @property
    def structure_size(self) -> int:
        return self.hr_size // self.structure_factor

    @property
    def xdown_size(self) -> int:
        return self.hr_size // self.xdown_factor


PAPER_SCALE = ScaleConfig(512, 8, 32, 8, 256, 64)
PAPER_CODEBOOK_SIZE = 1024


@dataclass(frozen=True)
class NetConfig:
    stem_channels: int = 16
    trunk_channels: int = 48
    down_channels: int = 32  # width of E_down / D_down
    codebook_size: int = 64
    variant: str = "tvq"  # or "vq"

    def __post_init__(self):
        if self.variant not in ("tvq", "vq"):
            raise ConfigError(f"net.variant must be 'tvq' or 'vq', got {self.variant!r}")
        if self.codebook_size < 2:
            raise ConfigError(f"net.codebook_size must be >= 2, got {self.codebook_size}")
        for name in ("stem_channels", "trunk_channels", "down_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"net.{name} must be positive")


@dataclass(frozen=True)
class LossWeights:
    adv: float = 0.75
    commit: float = 0.25
    align: float = 1.0
    gan_enabled: bool = False

    def __post_init__(self):
        for f in ("adv", "commit", "align"):
            if getattr(self, f) < 0:
                raise ConfigError(f"weights.{f} must be >= 0, got {getattr(self, f)}")


# ----------------------------------------------------------------------
# networks
# ----------------------------------------------------------------------


def _ladder(stem: int, trunk: int, n: int) -> list[int]:
    """Channel widths at each resolution from the input down to the trunk."""
    return [min(trunk, stem * 2**i) for i in range(n)] + [trunk]


class MultiscaleEncoder(Module):
    def __init__(self, rng, scale: ScaleConfig, net: NetConfig):
        n_tex = int(math.log2(scale.texture_factor))
        chans = _ladder(net.stem_channels, net.trunk_channels, n_tex)
        t = net.trunk_channels
        self.stem = Conv2d(rng, 3, chans[0])
        self.down = [Downsample(rng, chans[i], chans[i + 1]) for i in range(n_tex)]
        self.trunk = [ResBlock(rng, t)]
        if net.variant == "vq":
            # spends the structure branch's parameters on the single branch
            self.trunk += [ResBlock(rng, t), SelfAttention(rng, t), ResBlock(rng, t)]
        self.tex_head = Conv2d(rng, t, scale.texture_channels, k=1, gain=1.0)
        if net.variant == "tvq":
            n_str = int(math.log2(scale.structure_factor // scale.texture_factor))
            self.struct_down = [Downsample(rng, t, t) for _ in range(n_str)]
            self.struct_body = [ResBlock(rng, t), SelfAttention(rng, t)]
            self.struct_head = Conv2d(rng, t, scale.structure_channels, k=1, gain=1.0)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        h = self.stem(x)
        for m in self.down + self.trunk:
            h = m(h)
        f_h = self.tex_head(F.leaky_relu(h))
        if not hasattr(self, "struct_head"):
            return f_h, None
        s = h
        for m in self.struct_down + self.struct_body:
            s = m(s)
        return f_h, self.struct_head(F.leaky_relu(s))


class Decoder(Module):
    def __init__(self, rng, scale: ScaleConfig, net: NetConfig):
        n_tex = int(math.log2(scale.texture_factor))
        chans = _ladder(net.stem_channels, net.trunk_channels, n_tex)
        t = net.trunk_channels
        self.tex_in = Conv2d(rng, scale.texture_channels, t)
        if net.variant == "tvq":
            n_str = int(math.log2(scale.structure_factor // scale.texture_factor))
            self.struct_in = Conv2d(rng, scale.structure_channels, t, k=1, gain=1.0)
            self.struct_body = [ResBlock(rng, t), SelfAttention(rng, t)]
            self.struct_up = [Upsample(rng, t, t) for _ in range(n_str)]
            self.body = [ResBlock(rng, t)]
        else:
            self.body = [ResBlock(rng, t), SelfAttention(rng, t)] + [ResBlock(rng, t) for _ in range(3)]
        self.up = [Upsample(rng, chans[i + 1], chans[i]) for i in reversed(range(n_tex))]
        self.out = Conv2d(rng, chans[0], 3, gain=1.0)

    def forward(self, f_h: Tensor, f_l: Tensor | None) -> Tensor:
        h = self.tex_in(f_h)
        if f_l is not None:
            s = self.struct_in(f_l)
            for m in self.struct_body + self.struct_up:
                s = m(s)
            h = h + s
        for m in self.body + self.up:
            h = m(h)
        return self.out(F.leaky_relu(h))


class DownEncoder(Module):
    """E_down: X_down -> F_down with F_L's shape."""

    def __init__(self, rng, scale: ScaleConfig, net: NetConfig):
        c = net.down_channels
        n = int(math.log2(scale.structure_factor // scale.xdown_factor))
        self.stem = Conv2d(rng, 3, c)
        self.down = [Downsample(rng, c, c) for _ in range(n)]
        self.body = [ResBlock(rng, c)]
        self.head = Conv2d(rng, c, scale.structure_channels, k=1, gain=1.0)

    def forward(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for m in self.down + self.body:
            h = m(h)
        return self.head(F.leaky_relu(h))


class DownDecoder(Module):
    def __init__(self, rng, scale: ScaleConfig, net: NetConfig):
        c = net.down_channels
        n = int(math.log2(scale.structure_factor // scale.xdown_factor))
        self.inp = Conv2d(rng, scale.structure_channels, c, k=1, gain=1.0)
        self.body = [ResBlock(rng, c)]
        self.up = [Upsample(rng, c, c) for _ in range(n)]
        self.out = Conv2d(rng, c, 3, gain=1.0)

    def forward(self, f: Tensor) -> Tensor:
        h = self.inp(f)
        for m in self.body + self.up:
            h = m(h)
        return self.out(F.leaky_relu(h))


class PatchDiscriminator(Module):
    """Three stride-2 convs and a zero-initialised 1x1 logit head."""

    def __init__(self, rng, width: int = 16):
        self.c1 = Conv2d(rng, 3, width, stride=2)
        self.c2 = Conv2d(rng, width, 2 * width, stride=2)
        self.c3 = Conv2d(rng, 2 * width, 2 * width, stride=2)
        self.head = Conv2d(rng, 2 * width, 1, k=1, zero=True)

    def forward(self, x: Tensor) -> Tensor:
        h = F.leaky_relu(self.c1(x))
        h = F.leaky_relu(self.c2(h))
        h = F.leaky_relu(self.c3(h))
        return self.head(h)


@dataclass(eq=False)
class TvqModel:
    scale: ScaleConfig
    net: NetConfig
    encoder: MultiscaleEncoder
    decoder: Decoder
    codebook: vq.Codebook
    enc_down: DownEncoder | None
    dec_down: DownDecoder | None
    dtype: type = np.float32

    @property
    def is_vanilla(self) -> bool:
        return self.net.variant == "vq"

    def stage1_parameters(self) -> dict[str, Tensor]:
        params = {f"E.{k}": v for k, v in self.encoder.parameters().items()}
        params.update({f"D.{k}": v for k, v in self.decoder.parameters().items()})
        params["codebook"] = self.codebook.entries
        return params

    def down_parameters(self) -> dict[str, Tensor]:
        if self.enc_down is None:
            return {}
        params = {f"Edown.{k}": v for k, v in self.enc_down.parameters().items()}
        params.update({f"Ddown.{k}": v for k, v in self.dec_down.parameters().items()})
        return params

    def num_parameters(self, include_down: bool = False) -> int:
        total = sum(p.size for p in self.stage1_parameters().values())
        if include_down:
            total += sum(p.size for p in self.down_parameters().values())
        return total

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: v.data for k, v in self.stage1_parameters().items()}
        arrays.update({k: v.data for k, v in self.down_parameters().items()})
        arrays["codebook_usage"] = self.codebook.usage_counts
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in {**self.stage1_parameters(), **self.down_parameters()}.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r} in checkpoint")
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = arrays[name].astype(p.dtype, copy=True)
        self.codebook.usage_counts = arrays["codebook_usage"].astype(np.int64, copy=True)


def build_model(scale: ScaleConfig | None = None, net: NetConfig | None = None, seed: int = 0,
                dtype=np.float32) -> TvqModel:
    """Fresh model; every random draw comes from ``seed``."""
    scale = scale or ScaleConfig()
    net = net or NetConfig()
    rng = np.random.default_rng(seed)
    with default_dtype(dtype):
        enc = MultiscaleEncoder(rng, scale, net)
        dec = Decoder(rng, scale, net)
        if net.variant == "tvq":
            enc_down, dec_down = DownEncoder(rng, scale, net), DownDecoder(rng, scale, net)
        else:
            enc_down = dec_down = None
        cb = vq.init_codebook(net.codebook_size, scale.texture_channels, int(rng.integers(2**31)), dtype=dtype)
    return TvqModel(scale, net, enc, dec, cb, enc_down, dec_down, np.dtype(dtype).type)


def vanilla_vq_variant(scale: ScaleConfig | None = None, net: NetConfig | None = None, seed: int = 0,
                       dtype=np.float32) -> TvqModel:
    """Single-branch ablation: the full feature map is quantized and there is no F_L path."""
    net = net or NetConfig()
    return build_model(scale, NetConfig(**{**asdict(net), "variant": "vq"}), seed, dtype)


# ----------------------------------------------------------------------
# forward passes
# ----------------------------------------------------------------------


def _as_input(model: TvqModel, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=model.dtype)


def _check_image(x: Tensor, size: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1:] != (3, size, size):
        raise ConfigError(f"{what} must be (N, 3, {size}, {size}), got {x.shape}")


def encode_multiscale(model: TvqModel, X) -> tuple[Tensor, Tensor | None]:
    """(F_H, F_L) for a batch of HR images; F_L is None for the vanilla variant."""
    X = _as_input(model, X)
    _check_image(X, model.scale.hr_size, "X")
    return model.encoder(X)


def encode_downsampled(model: TvqModel, X_down) -> Tensor:
    if model.enc_down is None:
        raise ConfigError("the vanilla variant has no down-sampled autoencoder")
    X_down = _as_input(model, X_down)
    _check_image(X_down, model.scale.xdown_size, "X_down")
    return model.enc_down(X_down)


def decode_downsampled(model: TvqModel, F_down: Tensor) -> Tensor:
    if model.dec_down is None:
        raise ConfigError("the vanilla variant has no down-sampled autoencoder")
    _check_branch(model, F_down, "F_down", model.scale.structure_channels, model.scale.structure_size)
    return model.dec_down(F_down)


def _check_branch(model: TvqModel, t: Tensor, what: str, ch: int, size: int) -> None:
    if t.ndim != 4 or t.shape[1:] != (ch, size, size):
        raise ConfigError(f"{what} must be (N, {ch}, {size}, {size}), got {t.shape}")


def decode(model: TvqModel, F_H_vq: Tensor, F_L: Tensor | None = None) -> Tensor:
    s = model.scale
    _check_branch(model, F_H_vq, "F_H", s.texture_channels, s.texture_size)
    if model.is_vanilla:
        if F_L is not None:
            raise ConfigError("the vanilla variant decodes the quantized branch only")
    else:
        if F_L is None:
            raise ConfigError("the texture-VQ decoder needs both F_H and F_L")
        _check_branch(model, F_L, "F_L", s.structure_channels, s.structure_size)
        if F_L.shape[0] != F_H_vq.shape[0]:
            raise ConfigError("F_H and F_L batch sizes differ")
    return model.decoder(F_H_vq, F_L)


def quantize(model: TvqModel, F_H: Tensor, count_usage: bool = True):
    """(F_H_vq with straight-through gradient, token features, lookup result)."""
    n, _, h, w = F_H.shape
    tokens = vq.to_tokens(F_H)
    result = vq.nearest_lookup(tokens, model.codebook, count_usage=count_usage)
    st, _ = vq.vq_ste_passthrough(tokens, model.codebook, result)
    return vq.from_tokens(st, n, h, w), tokens, result


def indices_to_feature(model: TvqModel, indices: np.ndarray, n: int) -> Tensor:
    """Token indices (n*h*w,) -> quantized feature map (n, C_H, h, w), outside the tape."""
    s = model.scale.texture_size
    return vq.from_tokens(vq.decode_indices(indices, model.codebook), n, s, s)


def decode_structure_only(model: TvqModel, F_L: Tensor, fill_index: int | None = None) -> Tensor:
    """Decode with the texture branch held constant: zeros, or codebook entry ``fill_index`` at every token.

    Zeros are off the codebook and the decoder never sees them in training, so
    its output there carries artifacts; a flat code is the on-manifold choice.
    """
    s = model.scale
    shape = (F_L.shape[0], s.texture_channels, s.texture_size, s.texture_size)
    if fill_index is None:
        fill = np.zeros(shape)
    else:
        fill = np.broadcast_to(model.codebook.entries.data[fill_index][None, :, None, None], shape)
    return decode(model, Tensor(np.array(fill), dtype=model.dtype), F_L)


def decode_texture_only(model: TvqModel, F_H_vq: Tensor) -> Tensor:
    s = model.scale
    zeros = Tensor(np.zeros((F_H_vq.shape[0], s.structure_channels, s.structure_size, s.structure_size)),
                   dtype=model.dtype)
    return decode(model, F_H_vq, zeros)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def alignment_loss(F_L: Tensor, F_down: Tensor) -> Tensor:
    """Mean squared distance between F_L and the (detached) anchor F_down."""
    if F_L.shape != F_down.shape:
        raise ConfigError(f"alignment needs equal shapes, got {F_L.shape} and {F_down.shape}")
    d = F_L - detach(F_down)
    return F.reduce_mean(d * d)


def perceptual_proxy_loss(X_hat: Tensor, X: Tensor) -> Tensor:
    """MSE of horizontal plus vertical forward differences; blind to constant offsets."""
    gx_hat, gy_hat = F.image_gradients(X_hat)
    gx, gy = F.image_gradients(X)
    return F.mse(gx_hat, gx) + F.mse(gy_hat, gy)


def adversarial_losses(X_hat: Tensor, X: Tensor, disc: PatchDiscriminator | None,
                       weights: LossWeights) -> tuple[Tensor, Tensor]:
    """(g_loss, d_loss), hinge form.

    g_loss = mean relu(1 - D(X_hat)) flows into the generator; d_loss =
    mean relu(1 - D(X)) + mean relu(1 + D(detach X_hat)) trains ``disc``.
    """
    if not weights.gan_enabled or disc is None:
        raise ConfigError("adversarial losses requested with the GAN branch disabled")
    g_loss = F.reduce_mean(F.relu(1.0 - disc(X_hat)))
    d_real = F.reduce_mean(F.relu(1.0 - disc(X)))
    d_fake = F.reduce_mean(F.relu(disc(detach(X_hat)) + 1.0))
    return g_loss, d_real + d_fake


# ----------------------------------------------------------------------
# stage-1 step
# ----------------------------------------------------------------------

COMPONENTS = ("codebook", "commit", "mse", "perceptual", "align", "adv")


@dataclass
class LossReport:
    step: int
    codebook: float
    commit: float
    mse: float
    perceptual: float
    align: float
    adv: float
    total: float
    perplexity: float
    dead_count: int
    disc: float = 0.0
    align_unconstrained: bool = False

    def csv_row(self) -> dict:
        return asdict(self)


CSV_FIELDS = [f.name for f in fields(LossReport)]


def write_loss_csv(reports: Iterable[LossReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())


@dataclass(eq=False)
class Stage1Optim:
    gen: Adam
    disc_model: PatchDiscriminator | None = None
    disc: Adam | None = None


def make_stage1_optim(model: TvqModel, weights: LossWeights, lr: float = 2e-3, seed: int = 0) -> Stage1Optim:
    gen = Adam(model.stage1_parameters(), AdamHyper(lr=lr, beta1=0.5, beta2=0.9))
    if not weights.gan_enabled:
        return Stage1Optim(gen)
    with default_dtype(model.dtype):
        disc_model = PatchDiscriminator(np.random.default_rng([seed, 7]))
    return Stage1Optim(gen, disc_model, Adam(disc_model.parameters(), AdamHyper(lr=lr, beta1=0.5, beta2=0.9)))


def stage1_losses(model: TvqModel, X, X_down, weights: LossWeights, disc: PatchDiscriminator | None = None,
                  count_usage: bool = True) -> dict[str, Tensor]:
    """Every stage-1 loss component (weighted total under ``"total"``)."""
    X = _as_input(model, X)
    F_H, F_L = encode_multiscale(model, X)
    F_H_vq, tokens, result = quantize(model, F_H, count_usage=count_usage)
    codebook_loss, commit_loss = vq.vq_losses(tokens, result, model.codebook)
    X_hat = decode(model, F_H_vq, F_L)
    out = {
        "codebook": codebook_loss,
        "commit": commit_loss,
        "mse": F.mse(X_hat, X),
        "perceptual": perceptual_proxy_loss(X_hat, X),
    }
    if model.is_vanilla:
        out["align"] = Tensor(np.zeros((), dtype=model.dtype))
    else:
        with no_grad():
            F_down = encode_downsampled(model, X_down)
        out["align"] = alignment_loss(F_L, F_down)
    if weights.gan_enabled:
        out["adv"], out["_disc"] = adversarial_losses(X_hat, X, disc, weights)
    else:
        out["adv"] = Tensor(np.zeros((), dtype=model.dtype))
    total = (out["codebook"] + out["commit"] * weights.commit + out["mse"] + out["perceptual"]
             + out["align"] * weights.align)
    if weights.gan_enabled:
        total = total + out["adv"] * weights.adv
    out["total"] = total
    out["_X_hat"] = X_hat
    return out


def tvq_step(model: TvqModel, batch, weights: LossWeights, opt: Stage1Optim, step: int = 0) -> LossReport:
    """One optimizer step on E, D and the codebook (and the discriminator if enabled).

    ``batch`` is a pair (X, X_down) of arrays or a sequence of ImageSamples.
    E_down and D_down must already be trained; they receive no gradient here.
    """
    X, X_down = _unpack_batch(batch)
    if not model.is_vanilla:
        model.enc_down.requires_grad_(False)
        model.dec_down.requires_grad_(False)
    losses = stage1_losses(model, X, X_down, weights, opt.disc_model)
    for name in COMPONENTS + ("total",):
        if not np.isfinite(losses[name].data):
            raise ComponentNaNError(name, step)
    opt.gen.zero_grad()
    if opt.disc_model is not None:
        for p in opt.disc_model.parameters().values():
            p.grad = None
    backward(losses["total"])
    opt.gen.step()
    disc_value = 0.0
    if weights.gan_enabled:
        # the generator pass left gradients on the discriminator; discard them
        opt.disc.zero_grad()
        backward(losses["_disc"])
        opt.disc.step()
        disc_value = float(losses["_disc"].data)
    counts = model.codebook.usage_counts
    return LossReport(
        step=step,
        **{k: float(losses[k].data) for k in COMPONENTS},
        total=float(losses["total"].data),
        perplexity=vq.perplexity_from_counts(counts) if counts.sum() else 0.0,
        dead_count=int(np.sum(counts == 0)),
        disc=disc_value,
        align_unconstrained=(not model.is_vanilla and weights.align == 0.0),
    )


def _unpack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        return batch
    return np.stack([s.X for s in batch]), np.stack([s.X_down for s in batch])


# ----------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------


def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> Iterable[np.ndarray]:
    """Index batches drawn from successive seeded permutations of range(n)."""
    rng = np.random.default_rng(seed)
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch_size]
        order = order[batch_size:]


@dataclass(frozen=True)
class Stage1aConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0


def train_stage1a(model: TvqModel, X_down: np.ndarray, cfg: Stage1aConfig) -> list[float]:
    """Plain-MSE training of (E_down, D_down) on X_down; leaves them frozen."""
    if model.is_vanilla:
        raise ConfigError("the vanilla variant has no down-sampled autoencoder")
    model.enc_down.requires_grad_(True)
    model.dec_down.requires_grad_(True)
    opt = Adam(model.down_parameters(), AdamHyper(lr=cfg.lr, beta1=0.9, beta2=0.99))
    X_down = X_down.astype(model.dtype)
    history = []
    for idx in batch_schedule(len(X_down), cfg.batch_size, cfg.steps, cfg.seed):
        x = Tensor(X_down[idx])
        loss = F.mse(decode_downsampled(model, encode_downsampled(model, x)), x)
        opt.zero_grad()
        backward(loss)
        opt.step()
        history.append(float(loss.data))
    model.enc_down.requires_grad_(False)
    model.dec_down.requires_grad_(False)
    return history


@dataclass(frozen=True)
class Stage1Config:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 2e-3
    lr_final: float = 2e-4
    weights: LossWeights = field(default_factory=LossWeights)
    init_batch: int = 64  # images whose F_H tokens seed the codebook by k-means
    revive_every: int = 100
    revive_threshold: int = 1
    revive_until: float = 0.8  # fraction of training after which dead entries are left alone
    seed: int = 0


def _lr_at(cfg: Stage1Config, step: int) -> float:
    # cosine decay from lr to lr_final
    t = step / max(1, cfg.steps - 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * t))


def init_codebook_from_data(model: TvqModel, X: np.ndarray, seed: int) -> None:
    with no_grad():
        F_H, _ = encode_multiscale(model, X)
    tokens = vq.to_tokens(F_H).data
    cb = vq.init_codebook(model.codebook.K, model.codebook.D, seed, "kmeans_on_batch", tokens, dtype=model.dtype)
    model.codebook.entries.data = cb.entries.data
    model.codebook.reset_usage()


def train_stage1(model: TvqModel, X: np.ndarray, X_down: np.ndarray, cfg: Stage1Config,
                 csv_path: str | Path | None = None) -> list[LossReport]:
    """Stage-1 training from a fresh (stage-1a trained, for TVQ) model."""
    X = X.astype(model.dtype)
    X_down = X_down.astype(model.dtype)
    rng = np.random.default_rng([cfg.seed, 1])
    init_idx = rng.choice(len(X), size=min(cfg.init_batch, len(X)), replace=False)
    init_codebook_from_data(model, X[np.sort(init_idx)], int(rng.integers(2**31)))
    opt = make_stage1_optim(model, cfg.weights, cfg.lr, cfg.seed)
    reports = []
    for step, idx in enumerate(batch_schedule(len(X), cfg.batch_size, cfg.steps, cfg.seed)):
        lr = _lr_at(cfg, step)
        opt.gen.hyper = AdamHyper(lr=lr, beta1=opt.gen.hyper.beta1, beta2=opt.gen.hyper.beta2)
        reports.append(tvq_step(model, (X[idx], X_down[idx]), cfg.weights, opt, step))
        last = step + 1 == cfg.steps
        if cfg.revive_every and (step + 1) % cfg.revive_every == 0 and not last:
            if step < cfg.revive_until * cfg.steps:
                with no_grad():
                    F_H, _ = encode_multiscale(model, X[idx])
                vq.revive_dead_codes(model.codebook, vq.to_tokens(F_H).data, cfg.revive_threshold,
                                     int(rng.integers(2**31)))
            model.codebook.reset_usage()
    if csv_path is not None:
        write_loss_csv(reports, csv_path)
    return reports


# ----------------------------------------------------------------------
# inference helpers
# ----------------------------------------------------------------------


def _chunks(n: int, size: int) -> Iterable[slice]:
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def reconstruct(model: TvqModel, X: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Stage-1 round trip X -> X_hat (unclamped), no usage counting."""
    out = []
    with no_grad():
        for sl in _chunks(len(X), chunk):
            F_H, F_L = encode_multiscale(model, X[sl])
            F_H_vq, _, _ = quantize(model, F_H, count_usage=False)
            out.append(decode(model, F_H_vq, F_L).data)
    return np.concatenate(out).astype(np.float64)


def encode_targets(model: TvqModel, X: np.ndarray, chunk: int = 32) -> tuple[np.ndarray, np.ndarray | None]:
    """Ground-truth (indices (n, h*w), F_L) for the predictor, computed from HR images."""
    idx, fl = [], []
    with no_grad():
        for sl in _chunks(len(X), chunk):
            F_H, F_L = encode_multiscale(model, X[sl])
            res = vq.nearest_lookup(vq.to_tokens(F_H), model.codebook, count_usage=False)
            idx.append(res.indices.reshape(F_H.shape[0], -1))
            if F_L is not None:
                fl.append(F_L.data)
    return np.concatenate(idx), (np.concatenate(fl) if fl else None)


def probe_decodes(model: TvqModel, X: np.ndarray, chunk: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """(structure-only, texture-only) decodes of X.

    The structure-only decode fills every token with the code X uses most,
    which on this corpus is the untextured one.
    """
    s_out, t_out = [], []
    with no_grad():
        encoded = []
        counts = np.zeros(model.codebook.K, dtype=np.int64)
        for sl in _chunks(len(X), chunk):
            F_H, F_L = encode_multiscale(model, X[sl])
            F_H_vq, _, result = quantize(model, F_H, count_usage=False)
            counts += np.bincount(np.asarray(result.indices).reshape(-1), minlength=model.codebook.K)
            encoded.append((F_H_vq, F_L))
        flat = int(np.argmax(counts))
        for F_H_vq, F_L in encoded:
            s_out.append(decode_structure_only(model, F_L, flat).data)
            t_out.append(decode_texture_only(model, F_H_vq).data)
    return np.concatenate(s_out).astype(np.float64), np.concatenate(t_out).astype(np.float64)


def freeze(modules: Sequence[Module | None]) -> None:
    for m in modules:
        if m is not None:
            m.requires_grad_(False)
