"""Texture codebook: nearest-entry quantization, stop-gradient losses and straight-through estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, detach
from .autodiff import functional as F


class CodebookError(ValueError):
    pass


@dataclass
class Codebook:
    entries: Tensor  # (K, D), trained by gradient on the codebook loss
    usage_counts: np.ndarray  # hits per entry since the last reset

    def __post_init__(self):
        K, D = self.entries.shape
        if K < 2 or D < 1:
            raise CodebookError(f"codebook needs K >= 2 and D >= 1, got K={K}, D={D}")
        if self.usage_counts.shape != (K,):
            raise CodebookError(f"usage_counts length {self.usage_counts.shape} != K={K}")
        if not np.all(np.isfinite(self.entries.data)):
            raise CodebookError("codebook entries must be finite")

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def D(self) -> int:
        return self.entries.shape[1]

    def reset_usage(self) -> None:
        self.usage_counts[:] = 0


@dataclass
class QuantizeResult:
    indices: np.ndarray  # (tokens,) int64
    quantized: Tensor  # (tokens, D), exact copies of the chosen entries, outside the tape
    sq_distances: np.ndarray  # (tokens,)


def _kmeans(features: np.ndarray, K: int, rng: np.random.Generator, iters: int) -> np.ndarray:
    if len(np.unique(features, axis=0)) < K:
        raise CodebookError(f"k-means needs at least K={K} distinct samples, got {len(np.unique(features, axis=0))}")
    # k-means++ seeding
    centers = [features[rng.integers(len(features))]]
    d2 = np.sum((features - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        probs = d2 / d2.sum()
        centers.append(features[rng.choice(len(features), p=probs)])
        d2 = np.minimum(d2, np.sum((features - centers[-1]) ** 2, axis=1))
    centers = np.array(centers)
    for _ in range(iters):
        assign = _argmin_sq_dist(features, centers)[0]
        for k in range(K):
            members = features[assign == k]
            if len(members):
                centers[k] = members.mean(axis=0)
    return centers


def init_codebook(K: int, D: int, seed: int, method: str = "uniform_random", features=None,
                  iters: int = 25, dtype=None) -> Codebook:
    """Build a K x D codebook.

    ``uniform_random`` draws entries from U(-1/K, 1/K); ``kmeans_on_batch`` runs
    k-means++ seeded Lloyd iterations on ``features`` (tokens x D).
    """
    if K < 2:
        raise CodebookError(f"K must be >= 2, got {K}")
    rng = np.random.default_rng(seed)
    if method == "uniform_random":
        table = rng.uniform(-1.0 / K, 1.0 / K, size=(K, D))
    elif method == "kmeans_on_batch":
        if features is None:
            raise CodebookError("kmeans_on_batch needs a feature batch")
        feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != D:
            raise CodebookError(f"feature batch shape {feats.shape} incompatible with D={D}")
        table = _kmeans(feats, K, rng, iters)
    else:
        raise CodebookError(f"unknown init method {method!r}")
    entries = Tensor(table, requires_grad=True, dtype=dtype, name="codebook")
    return Codebook(entries, np.zeros(K, dtype=np.int64))


def _argmin_sq_dist(feats: np.ndarray, table: np.ndarray, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    # explicit differences rather than the |f|^2 - 2fe + |e|^2 expansion, so ties stay exact
    idx = np.empty(len(feats), dtype=np.int64)
    dist = np.empty(len(feats), dtype=feats.dtype)
    for start in range(0, len(feats), chunk):
        block = feats[start : start + chunk]
        d = np.sum((block[:, None, :] - table[None, :, :]) ** 2, axis=-1)
        best = np.argmin(d, axis=1)  # first minimum, i.e. lowest index on ties
        idx[start : start + chunk] = best
        dist[start : start + chunk] = d[np.arange(len(block)), best]
    return idx, dist


def nearest_lookup(features, cb: Codebook, count_usage: bool = True) -> QuantizeResult:
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    if feats.ndim != 2 or feats.shape[1] != cb.D:
        raise CodebookError(f"features shape {feats.shape} incompatible with codebook D={cb.D}")
    idx, dist = _argmin_sq_dist(feats, cb.entries.data)
    if count_usage:
        cb.usage_counts += np.bincount(idx, minlength=cb.K)
    quantized = Tensor(cb.entries.data[idx], dtype=cb.entries.dtype)
    return QuantizeResult(idx, quantized, dist)


def vq_ste_passthrough(features: Tensor, cb: Codebook, result: QuantizeResult | None = None) -> tuple[Tensor, QuantizeResult]:
    """Quantized values forward, identity gradient back onto ``features``."""
    if result is None:
        result = nearest_lookup(features, cb)
    return F.straight_through(features, result.quantized), result


def one_hot(indices: np.ndarray, K: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(indices), K), dtype=dtype)
    out[np.arange(len(indices)), indices] = 1
    return out


def gather_entries(indices: np.ndarray, cb: Codebook) -> Tensor:
    """Chosen entries as a differentiable function of the table (one-hot matmul)."""
    return F.matmul(Tensor(one_hot(indices, cb.K, cb.entries.dtype)), cb.entries)


def vq_losses(features: Tensor, result: QuantizeResult, cb: Codebook) -> tuple[Tensor, Tensor]:
    """(codebook_loss, commit_loss), each the mean over tokens of a squared Euclidean distance."""
    chosen = gather_entries(result.indices, cb)
    d_cb = detach(features) - chosen
    d_commit = features - detach(chosen)
    codebook_loss = F.reduce_mean(F.reduce_sum(d_cb * d_cb, axis=1))
    commit_loss = F.reduce_mean(F.reduce_sum(d_commit * d_commit, axis=1))
    return codebook_loss, commit_loss


def one_hot_ste(logits: Tensor) -> Tensor:
    """Hard argmax one-hot rows forward; softmax-probability gradient backward."""
    if not np.all(np.isfinite(logits.data)):
        raise CodebookError("logits must be finite")
    probs = F.softmax(logits, axis=-1)
    hard = Tensor(one_hot(np.argmax(logits.data, axis=-1), logits.shape[-1], logits.dtype))
    return F.straight_through(probs, hard)


def decode_indices(indices, cb: Codebook) -> Tensor:
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= cb.K):
        raise CodebookError(f"index out of range [0, {cb.K})")
    return Tensor(cb.entries.data[indices], dtype=cb.entries.dtype)


def perplexity_from_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        raise CodebookError("no codebook lookups recorded")
    p = counts[counts > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def usage_stats(cb: Codebook) -> tuple[float, int]:
    """(perplexity, dead_count) of usage since the last reset."""
    return perplexity_from_counts(cb.usage_counts), int(np.sum(cb.usage_counts == 0))


def revive_dead_codes(cb: Codebook, feature_batch, threshold: int, seed: int) -> int:
    """Move entries with fewer than ``threshold`` hits onto random batch features."""
    feats = feature_batch.data if isinstance(feature_batch, Tensor) else np.asarray(feature_batch)
    if len(feats) == 0:
        raise CodebookError("revival needs a nonempty feature batch")
    dead = np.flatnonzero(cb.usage_counts < threshold)
    if len(dead) == 0:
        return 0
    rng = np.random.default_rng(seed)
    replace = len(dead) > len(feats)
    picks = rng.choice(len(feats), size=len(dead), replace=replace)
    cb.entries.data[dead] = feats[picks]
    return int(len(dead))


def to_tokens(fmap: Tensor) -> Tensor:
    """(N, C, h, w) feature map -> (N*h*w, C) token matrix."""
    n, c, h, w = fmap.shape
    return F.reshape(F.transpose(fmap, (0, 2, 3, 1)), (n * h * w, c))


def from_tokens(tokens: Tensor, n: int, h: int, w: int) -> Tensor:
    c = tokens.shape[1]
    return F.transpose(F.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))
