"""Stage-2 index predictor: code-level training and reconstruction-aware fine-tuning.

The predictor reads the LR image Y and emits K-way logits on the texture token
grid plus a regression F_L_hat of the structure map.  Code-level training uses
cross-entropy against the stage-1 indices and MSE against the stage-1 F_L.
Reconstruction-aware (RAP) fine-tuning instead decodes the prediction through
the frozen stage-1 decoder, with one_hot_ste letting the image loss reach the
logits.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import vq
from .autodiff import Adam, AdamHyper, Tensor, backward, default_dtype, detach, no_grad
from .autodiff import functional as F
from .autodiff.nn import Conv2d, Downsample, Module, ResBlock, SelfAttention
from .tvq import (
    ConfigError,
    TvqModel,
    _chunks,
    batch_schedule,
    decode,
    encode_targets,
    perceptual_proxy_loss,
)

LR_FACTOR = 4


class FrozenModelError(RuntimeError):
    pass


class PredictorNaNError(FloatingPointError):
    def __init__(self, what: str, step: int):
        super().__init__(f"{what} is not finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class PredictorConfig:
    channels: int = 64
    blocks: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.blocks < 0:
            raise ConfigError("predictor.channels must be positive and predictor.blocks >= 0")


class PredictorModel(Module):
    """Conv stem on Y, stride-2 steps to the texture grid, residual/attention trunk, two heads."""

    def __init__(self, tvq: TvqModel, cfg: PredictorConfig | None = None, seed: int = 0):
        cfg = cfg or PredictorConfig()
        s = tvq.scale
        if s.texture_factor < LR_FACTOR:
            raise ConfigError("the texture grid must not be finer than the LR input")
        rng = np.random.default_rng(seed)
        c = cfg.channels
        with default_dtype(tvq.dtype):
            self.stem = Conv2d(rng, 3, c)
            self.down = [Downsample(rng, c, c) for _ in range(int(math.log2(s.texture_factor // LR_FACTOR)))]
            self.trunk = [ResBlock(rng, c) for _ in range(cfg.blocks)]
            self.attn = SelfAttention(rng, c)
            self.logits_head = Conv2d(rng, c, tvq.net.codebook_size, k=1, gain=1.0)
            if not tvq.is_vanilla:
                n = int(math.log2(s.structure_factor // s.texture_factor))
                self.struct_down = [Downsample(rng, c, c) for _ in range(n)]
                self.struct_head = Conv2d(rng, c, s.structure_channels, k=1, gain=1.0)
        self._lr_size = s.hr_size // LR_FACTOR
        self._dtype = tvq.dtype
        self._K = tvq.net.codebook_size

    @property
    def has_structure_head(self) -> bool:
        return hasattr(self, "struct_head")

    def forward(self, Y: Tensor) -> tuple[Tensor, Tensor | None]:
        h = self.stem(Y)
        for m in self.down + self.trunk:
            h = m(h)
        h = self.attn(h)
        logits = self.logits_head(F.leaky_relu(h))
        if not self.has_structure_head:
            return logits, None
        s = h
        for m in self.struct_down:
            s = m(s)
        return logits, self.struct_head(F.leaky_relu(s))


@dataclass
class TargetCodes:
    I_H: np.ndarray  # (n, h*w) int64
    F_L_target: np.ndarray | None  # (n, C_L, h_L, w_L)

    def __post_init__(self):
        if self.I_H.size and self.I_H.min() < 0:
            raise ValueError("target indices must be non-negative")


def make_targets(tvq: TvqModel, X: np.ndarray) -> TargetCodes:
    """Stage-1 indices and structure maps of the HR images X."""
    idx, fl = encode_targets(tvq, np.asarray(X))
    return TargetCodes(idx, fl)


def predict(pred: PredictorModel, Y) -> tuple[Tensor, Tensor | None]:
    """(logits (N, K, h, w), F_L_hat) for a batch of LR images."""
    Y = Y if isinstance(Y, Tensor) else Tensor(np.asarray(Y), dtype=pred._dtype)
    if Y.ndim != 4 or Y.shape[1:] != (3, pred._lr_size, pred._lr_size):
        raise ConfigError(f"Y must be (N, 3, {pred._lr_size}, {pred._lr_size}), got {Y.shape}")
    return pred(Y)


def _token_logits(logits: Tensor) -> Tensor:
    return vq.to_tokens(logits)  # (N*h*w, K), row-major over (n, y, x) like the stage-1 tokens


def cross_entropy(logits: Tensor, I_H: np.ndarray) -> Tensor:
    """Mean over token positions of -log softmax(logits)[true index]."""
    tok = _token_logits(logits)
    target = Tensor(vq.one_hot(np.asarray(I_H).reshape(-1), tok.shape[1], tok.dtype))
    logp = F.log_softmax(tok, axis=-1)
    return F.reduce_sum(logp * target) * (-1.0 / tok.shape[0])


def code_level_loss(logits: Tensor, F_L_hat: Tensor | None, targets: TargetCodes, lambda_ce: float = 0.5) -> Tensor:
    """MSE(F_L_hat, F_L) + lambda_ce * CE; the MSE term is dropped for the vanilla pair."""
    loss = cross_entropy(logits, targets.I_H) * lambda_ce
    if F_L_hat is not None:
        loss = F.mse(F_L_hat, Tensor(targets.F_L_target, dtype=F_L_hat.dtype)) + loss
    return loss


def index_accuracy(logits, I_H: np.ndarray) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    pred = np.argmax(np.moveaxis(data, 1, -1), axis=-1).reshape(-1)
    truth = np.asarray(I_H).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"{pred.size} predicted tokens vs {truth.size} targets")
    return float(np.mean(pred == truth))


def _assert_frozen(tvq: TvqModel) -> None:
    live = [k for k, p in {**tvq.stage1_parameters(), **tvq.down_parameters()}.items() if p.requires_grad]
    if live:
        raise FrozenModelError(f"stage-1 model must be frozen; {live[0]!r} still requires grad")


def freeze_tvq(tvq: TvqModel) -> TvqModel:
    for p in {**tvq.stage1_parameters(), **tvq.down_parameters()}.values():
        p.requires_grad = False
        p.grad = None
    return tvq


def predicted_texture(tvq: TvqModel, logits: Tensor, hard_onehot: Tensor | None = None) -> Tensor:
    """F_H_vq_hat = one_hot_ste(logits) @ C, reshaped to the texture map."""
    n, _, h, w = logits.shape
    onehot = hard_onehot if hard_onehot is not None else vq.one_hot_ste(_token_logits(logits))
    tokens = F.matmul(onehot, tvq.codebook.entries)
    return vq.from_tokens(tokens, n, h, w)


@dataclass(frozen=True)
class RapOptions:
    route_structure_head: bool = True  # image loss also trains the F_L_hat head
    keep_code_loss: bool = False  # add the code-level loss during fine-tuning
    lambda_ce: float = 0.5


def rap_forward(pred: PredictorModel, tvq: TvqModel, Y, structure_detached: bool = False) -> tuple[Tensor, Tensor, Tensor | None]:
    """(X_hat, logits, F_L_hat) through the frozen decoder."""
    logits, F_L_hat = predict(pred, Y)
    F_H_hat = predicted_texture(tvq, logits)
    F_L_in = F_L_hat
    if F_L_hat is not None and structure_detached:
        F_L_in = detach(F_L_hat)
    return decode(tvq, F_H_hat, F_L_in), logits, F_L_hat


def image_loss(X_hat: Tensor, X: Tensor) -> Tensor:
    return F.mse(X_hat, X) + perceptual_proxy_loss(X_hat, X)


def rap_image_loss(pred: PredictorModel, tvq: TvqModel, Y, X, options: RapOptions | None = None,
                   targets: TargetCodes | None = None) -> Tensor:
    """mse + perceptual proxy of the decoded prediction against X (plus the code loss if requested)."""
    options = options or RapOptions()
    _assert_frozen(tvq)
    X = X if isinstance(X, Tensor) else Tensor(np.asarray(X), dtype=tvq.dtype)
    X_hat, logits, F_L_hat = rap_forward(pred, tvq, Y, structure_detached=not options.route_structure_head)
    loss = image_loss(X_hat, X)
    if options.keep_code_loss:
        if targets is None:
            raise ConfigError("keep_code_loss needs the code-level targets")
        loss = loss + code_level_loss(logits, F_L_hat, targets, options.lambda_ce)
    return loss


def infer_sr(pred: PredictorModel, tvq: TvqModel, Y: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Hard argmax indices -> codebook entries -> decoder with F_L_hat; clamped to [0, 1]."""
    Y = np.asarray(Y)
    out = []
    with no_grad():
        for sl in _chunks(len(Y), chunk):
            logits, F_L_hat = predict(pred, Y[sl])
            n, _, h, w = logits.shape
            idx = np.argmax(np.moveaxis(logits.data, 1, -1), axis=-1).reshape(-1)
            F_H = vq.from_tokens(vq.decode_indices(idx, tvq.codebook), n, h, w)
            out.append(decode(tvq, F_H, F_L_hat).data)
    return np.clip(np.concatenate(out).astype(np.float64), 0.0, 1.0)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


@dataclass
class StageMetrics:
    step: int
    loss: float
    ce: float
    fl_mse: float
    accuracy: float


STAGE_FIELDS = [f.name for f in fields(StageMetrics)]


def _write_csv(rows: list[StageMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STAGE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


@dataclass(frozen=True)
class CodeStageConfig:
    steps: int = 6000
    batch_size: int = 16
    lr: float = 1e-3
    lambda_ce: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class RapStageConfig:
    steps: int = 200
    batch_size: int = 16
    lr: float = 3e-5
    options: RapOptions = RapOptions()
    seed: int = 0


def _check_finite(t: Tensor, what: str, step: int) -> None:
    if not np.isfinite(t.data):
        raise PredictorNaNError(what, step)


def train_code_stage(pred: PredictorModel, tvq: TvqModel, Y: np.ndarray, targets: TargetCodes,
                     cfg: CodeStageConfig, csv_path: str | Path | None = None) -> list[StageMetrics]:
    freeze_tvq(tvq)
    Y = Y.astype(pred._dtype)
    opt = Adam(pred.parameters(), AdamHyper(lr=cfg.lr))
    rows = []
    for step, idx in enumerate(batch_schedule(len(Y), cfg.batch_size, cfg.steps, cfg.seed)):
        # cosine decay to a tenth of the initial rate
        t = step / max(1, cfg.steps - 1)
        opt.hyper = AdamHyper(lr=cfg.lr * (0.1 + 0.45 * (1 + math.cos(math.pi * t))))
        batch_targets = TargetCodes(targets.I_H[idx], None if targets.F_L_target is None else targets.F_L_target[idx])
        logits, F_L_hat = predict(pred, Y[idx])
        ce = cross_entropy(logits, batch_targets.I_H)
        fl = F.mse(F_L_hat, Tensor(batch_targets.F_L_target, dtype=pred._dtype)) if F_L_hat is not None else None
        loss = ce * cfg.lambda_ce if fl is None else fl + ce * cfg.lambda_ce
        _check_finite(loss, "code-level loss", step)
        opt.zero_grad()
        backward(loss)
        opt.step()
        rows.append(StageMetrics(step, float(loss.data), float(ce.data), 0.0 if fl is None else float(fl.data),
                                 index_accuracy(logits, batch_targets.I_H)))
    if csv_path is not None:
        _write_csv(rows, csv_path)
    return rows


def finetune_rap_stage(pred: PredictorModel, tvq: TvqModel, Y: np.ndarray, X: np.ndarray, cfg: RapStageConfig,
                       targets: TargetCodes | None = None, csv_path: str | Path | None = None) -> list[StageMetrics]:
    """Image-level fine-tuning through the frozen decoder; zero steps leaves ``pred`` untouched."""
    freeze_tvq(tvq)
    Y = Y.astype(pred._dtype)
    X = X.astype(tvq.dtype)
    opt = Adam(pred.parameters(), AdamHyper(lr=cfg.lr))
    rows = []
    for step, idx in enumerate(batch_schedule(len(Y), cfg.batch_size, cfg.steps, cfg.seed)):
        bt = None
        if targets is not None:
            bt = TargetCodes(targets.I_H[idx], None if targets.F_L_target is None else targets.F_L_target[idx])
        loss = rap_image_loss(pred, tvq, Y[idx], X[idx], cfg.options, bt)
        _check_finite(loss, "image-level loss", step)
        opt.zero_grad()
        backward(loss)
        opt.step()
        acc = 0.0
        if bt is not None:
            with no_grad():
                acc = index_accuracy(predict(pred, Y[idx])[0], bt.I_H)
        rows.append(StageMetrics(step, float(loss.data), 0.0, 0.0, acc))
    if csv_path is not None:
        _write_csv(rows, csv_path)
    return rows


def evaluate_image_loss(pred: PredictorModel, tvq: TvqModel, Y: np.ndarray, X: np.ndarray, chunk: int = 32) -> float:
    """Mean over images of the RAP image loss (mse + perceptual proxy), hard forward."""
    per = []
    with no_grad():
        for sl in _chunks(len(Y), chunk):
            X_hat, _, _ = rap_forward(pred, tvq, Y[sl])
            for i in range(X_hat.shape[0]):
                xi = Tensor(X_hat.data[i : i + 1].astype(np.float64))
                ti = Tensor(np.asarray(X[sl][i : i + 1], dtype=np.float64))
                per.append(float(image_loss(xi, ti).data))
    return float(np.mean(per))


def evaluate_accuracy(pred: PredictorModel, Y: np.ndarray, targets: TargetCodes, chunk: int = 64) -> float:
    hits, total = 0, 0
    with no_grad():
        for sl in _chunks(len(Y), chunk):
            logits, _ = predict(pred, Y[sl])
            acc = index_accuracy(logits, targets.I_H[sl])
            hits += acc * targets.I_H[sl].size
            total += targets.I_H[sl].size
    return hits / total
