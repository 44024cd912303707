"""Procedural structure + texture corpus and the LR / extreme-LR pipelines.

Each HR image is a smooth, band-limited colour field (the structure) plus a few
high-frequency grayscale textures confined to soft region masks.  Texture
periods divide 8 (or the texture is broadband), so 8x average pooling nearly
cancels them and X_down carries structure only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = "TEXVQ-CORPUS 1"


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma: tuple[float, float] = (0.0, 1.0)
    factor: int = 4
    noise_sigma: tuple[float, float] = (0.0, 0.01)
    seed: int = 0


@dataclass(frozen=True)
class CorpusConfig:
    hr_size: int = 64
    xdown_factor: int = 8
    texture_amplitude: tuple[float, float] = (0.12, 0.22)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)

    def __post_init__(self):
        if self.hr_size % self.degradation.factor:
            raise ValueError(f"LR factor {self.degradation.factor} must divide hr_size {self.hr_size}")
        if self.hr_size % self.xdown_factor:
            raise ValueError(f"xdown factor {self.xdown_factor} must divide hr_size {self.hr_size}")


@dataclass
class ImageSample:
    X: np.ndarray  # (3, H, H) in [0, 1]
    Y: np.ndarray  # (3, H/4, H/4)
    X_down: np.ndarray  # (3, H/8, H/8)
    seed: int
    structure_id: int
    texture_id: int


# ----------------------------------------------------------------------
# fields
# ----------------------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _soft_ellipse(rng, size: int, edge: float) -> np.ndarray:
    yy, xx = _grid(size)
    cy, cx = rng.uniform(0.15, 0.85, 2) * size
    ry, rx = rng.uniform(0.12, 0.4, 2) * size
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    r = np.sqrt(u * u + v * v)
    # signed distance in pixels, approximately
    return 1.0 / (1.0 + np.exp((r - 1.0) * min(rx, ry) / edge))


def _ramp(rng, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    theta = rng.uniform(0, 2 * np.pi)
    t = ((xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta)) / size + 0.5
    return np.clip(t, 0.0, 1.0)


def gen_structure_field(seed: int, size: int) -> np.ndarray:
    """Smooth (3, size, size) colour field in [0.2, 0.8] built from a ramp and 2-5 soft shapes."""
    rng = np.random.default_rng(seed)
    lo, hi = 0.2, 0.8
    c0, c1 = rng.uniform(lo, hi, 3), rng.uniform(lo, hi, 3)
    ramp = _ramp(rng, size)
    field = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(int(rng.integers(2, 6))):
        if rng.random() < 0.75:
            mask = _soft_ellipse(rng, size, edge=size / 24)
        else:
            mask = _ramp(rng, size)
        color = rng.uniform(lo, hi, 3)
        alpha = rng.uniform(0.6, 1.0)
        m = alpha * mask
        field = field * (1 - m) + color[:, None, None] * m
    field = ndimage.gaussian_filter(field, sigma=(0, size / 32, size / 32), mode="reflect")
    return np.clip(field, 0.0, 1.0)


# (name, kind, parameters); periods in pixels.  Every period divides 8, so 8x
# pooling cancels the pattern.  The p8 entries survive x4 pooling as a
# Nyquist-rate LR pattern (sines and squares of one orientation look alike
# there); the p4 / 1px / noise entries vanish from the LR input.
TEXTURE_BANK: tuple[tuple[str, str, dict], ...] = (
    ("grating_x_p8", "grating", {"fx": 1 / 8, "fy": 0.0}),
    ("grating_y_p8", "grating", {"fx": 0.0, "fy": 1 / 8}),
    ("grating_diag_p8", "grating", {"fx": 1 / 8, "fy": 1 / 8}),
    ("grating_antidiag_p8", "grating", {"fx": 1 / 8, "fy": -1 / 8}),
    ("grating_x_p4", "grating", {"fx": 1 / 4, "fy": 0.0}),
    ("checker_4px", "checker", {"cell": 4}),
    ("checker_1px", "checker", {"cell": 1}),
    ("stripes_y_p8", "stripes", {"period": 8, "axis": 0}),
    ("stripes_x_p8", "stripes", {"period": 8, "axis": 1}),
    ("highpass_noise", "noise", {"sigma": 1.5}),
)


def texture_frequency(texture_id: int) -> tuple[float, float]:
    """(fx, fy) in cycles/pixel for grating entries."""
    name, kind, params = TEXTURE_BANK[texture_id]
    if kind != "grating":
        raise ValueError(f"texture {name} is not a sinusoid grating")
    return params["fx"], params["fy"]


def gen_texture_field(seed: int, texture_id: int, size: int, amplitude: float = 0.2) -> np.ndarray:
    """Zero-mean (size, size) pattern with max |value| == amplitude (<= 0.3).

    Periodic patterns are locked to the pixel grid, so a given entry
    always looks the same; only the filtered noise depends on ``seed``.
    """
    if not 0 <= texture_id < len(TEXTURE_BANK):
        raise ValueError(f"unknown texture_id {texture_id}; bank has {len(TEXTURE_BANK)} entries")
    if not 0 < amplitude <= 0.3:
        raise ValueError(f"texture amplitude must be in (0, 0.3], got {amplitude}")
    rng = np.random.default_rng([seed, texture_id])
    _, kind, p = TEXTURE_BANK[texture_id]
    yy, xx = _grid(size)
    if kind == "grating":
        # crests centred on the 4x4 LR blocks
        t = np.cos(2 * np.pi * (p["fx"] * (xx - 1.5) + p["fy"] * (yy - 1.5)))
    elif kind == "checker":
        t = 1.0 - ((yy // p["cell"] + xx // p["cell"]) % 2) * 2.0
    elif kind == "stripes":
        coord = yy if p["axis"] == 0 else xx
        t = ((coord % p["period"]) < p["period"] / 2) * 2.0 - 1.0
    else:
        noise = rng.normal(size=(size, size))
        t = noise - ndimage.gaussian_filter(noise, p["sigma"], mode="wrap")
    t = t - t.mean()
    return t * (amplitude / np.max(np.abs(t)))


def gen_region_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Soft region mask in [0, 1]: an ellipse or half-plane with blurred edges."""
    if rng.random() < 0.6:
        m = _soft_ellipse(rng, size, edge=size / 16)
    else:
        yy, xx = _grid(size)
        theta = rng.uniform(0, 2 * np.pi)
        d = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta) - rng.uniform(-0.25, 0.25) * size
        m = 1.0 / (1.0 + np.exp(-d / (size / 16)))
    return m


def compose_hr(structure: np.ndarray, textures, masks) -> tuple[np.ndarray, dict]:
    """X = clamp(structure + sum_r mask_r * texture_r), grayscale textures added to every channel.

    Returns X and the retained decomposition (structure, per-region layers,
    pre-clamp sum).
    """
    if len(textures) != len(masks):
        raise ValueError("one mask per texture")
    for t, m in zip(textures, masks):
        if t.shape != structure.shape[-2:] or m.shape != structure.shape[-2:]:
            raise ValueError("textures and masks must match the structure's spatial size")
    layers = [m * t for t, m in zip(textures, masks)]
    total = structure.copy()
    for layer in layers:
        total = total + layer[None]
    return np.clip(total, 0.0, 1.0), {"structure": structure, "layers": layers, "pre_clamp": total}


# ----------------------------------------------------------------------
# degradations
# ----------------------------------------------------------------------


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide {(h, w)}")
    return x.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return x.copy()
    return ndimage.gaussian_filter(x, sigma=(0,) * (x.ndim - 2) + (sigma, sigma), mode="reflect", truncate=4.0)


def degradation_params(cfg: DegradationConfig, sample_seed: int) -> tuple[float, float, np.random.Generator]:
    rng = np.random.default_rng([cfg.seed, sample_seed])
    blur = float(rng.uniform(*cfg.blur_sigma))
    noise = float(rng.uniform(*cfg.noise_sigma))
    return blur, noise, rng


def degrade_to_lr(X: np.ndarray, cfg: DegradationConfig, sample_seed: int = 0) -> np.ndarray:
    """Gaussian blur -> factor x average pool -> additive Gaussian noise -> clamp."""
    if X.shape[-1] % cfg.factor:
        raise ValueError(f"LR factor {cfg.factor} must divide {X.shape[-1]}")
    blur, noise, rng = degradation_params(cfg, sample_seed)
    lr = avg_pool(gaussian_blur(X, blur), cfg.factor)
    if noise > 0:
        lr = lr + rng.normal(0.0, noise, size=lr.shape)
    return np.clip(lr, 0.0, 1.0)


def make_xdown(X: np.ndarray, factor: int = 8) -> np.ndarray:
    return avg_pool(X, factor)


# ----------------------------------------------------------------------
# samples and corpora
# ----------------------------------------------------------------------


def sample_decomposition(seed: int, cfg: CorpusConfig) -> tuple[np.ndarray, dict, list[int]]:
    """Regenerate (X, decomposition, texture ids) for one sample seed."""
    rng = np.random.default_rng(seed)
    size = cfg.hr_size
    structure_seed = int(rng.integers(2**31))
    structure = gen_structure_field(structure_seed, size)
    n_regions = int(rng.integers(1, 4))
    # distinct ids: repeats of a grid-locked pattern add up coherently
    ids = [int(i) for i in rng.choice(len(TEXTURE_BANK), size=n_regions, replace=False)]
    textures = [gen_texture_field(int(rng.integers(2**31)), tid, size, float(rng.uniform(*cfg.texture_amplitude)))
                for tid in ids]
    masks = [gen_region_mask(rng, size) for _ in ids]
    X, decomp = compose_hr(structure, textures, masks)
    decomp["structure_seed"] = structure_seed
    return X, decomp, ids


def generate_sample(seed: int, cfg: CorpusConfig) -> ImageSample:
    X, decomp, ids = sample_decomposition(seed, cfg)
    return ImageSample(
        X=X,
        Y=degrade_to_lr(X, cfg.degradation, seed),
        X_down=make_xdown(X, cfg.xdown_factor),
        seed=seed,
        structure_id=decomp["structure_seed"],
        texture_id=ids[0],
    )


def sample_seeds(n: int, seed: int) -> list[int]:
    return [int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(n)]


@dataclass
class Corpus:
    X: np.ndarray  # (n, 3, H, H)
    Y: np.ndarray
    X_down: np.ndarray
    seeds: np.ndarray
    structure_ids: np.ndarray
    texture_ids: np.ndarray
    seed: int
    cfg: CorpusConfig

    def __len__(self) -> int:
        return len(self.X)

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(self.X[i], self.Y[i], self.X_down[i], int(self.seeds[i]),
                           int(self.structure_ids[i]), int(self.texture_ids[i]))

    def sample_hashes(self) -> list[str]:
        return [hashlib.sha256(x.tobytes()).hexdigest() for x in self.X]


def corpus_generate(n: int, seed: int, cfg: CorpusConfig | None = None) -> Corpus:
    """n samples as a pure function of (n, seed, cfg)."""
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    cfg = cfg or CorpusConfig()
    samples = [generate_sample(s, cfg) for s in sample_seeds(n, seed)]
    return Corpus(
        X=np.stack([s.X for s in samples]),
        Y=np.stack([s.Y for s in samples]),
        X_down=np.stack([s.X_down for s in samples]),
        seeds=np.array([s.seed for s in samples], dtype=np.int64),
        structure_ids=np.array([s.structure_id for s in samples], dtype=np.int64),
        texture_ids=np.array([s.texture_id for s in samples], dtype=np.int64),
        seed=seed,
        cfg=cfg,
    )


def _cfg_from_dict(d: dict) -> CorpusConfig:
    deg = d.pop("degradation")
    deg = DegradationConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in deg.items()})
    return CorpusConfig(degradation=deg, **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def corpus_save(corpus: Corpus, path: str | Path) -> None:
    """Plain-text key=value header, blank line, then raw <f8 buffers X|Y|X_down per sample."""
    payload = b"".join(
        np.concatenate([corpus.X[i].ravel(), corpus.Y[i].ravel(), corpus.X_down[i].ravel()]).astype("<f8").tobytes()
        for i in range(len(corpus))
    )
    lines = [
        MAGIC,
        f"n={len(corpus)}",
        f"seed={corpus.seed}",
        f"config={json.dumps(asdict(corpus.cfg), sort_keys=True)}",
        f"x_shape={','.join(map(str, corpus.X.shape[1:]))}",
        f"y_shape={','.join(map(str, corpus.Y.shape[1:]))}",
        f"xdown_shape={','.join(map(str, corpus.X_down.shape[1:]))}",
        f"payload_sha256={hashlib.sha256(payload).hexdigest()}",
    ]
    for i in range(len(corpus)):
        lines.append(f"sample.{i}={corpus.seeds[i]},{corpus.structure_ids[i]},{corpus.texture_ids[i]}")
    Path(path).write_bytes(("\n".join(lines) + "\n\n").encode() + payload)


def corpus_load(path: str | Path) -> Corpus:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n\n")
    if not sep:
        raise CorpusFormatError(f"{path}: missing header terminator")
    try:
        lines = head.decode().split("\n")
    except UnicodeDecodeError:
        raise CorpusFormatError(f"{path}: header is not text") from None
    if lines[0] != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {lines[0][:40]!r}")
    kv = {}
    for line in lines[1:]:
        key, eq, value = line.partition("=")
        if not eq:
            raise CorpusFormatError(f"{path}: malformed header line {line!r}")
        kv[key] = value
    try:
        n = int(kv["n"])
        shapes = [tuple(int(d) for d in kv[k].split(",")) for k in ("x_shape", "y_shape", "xdown_shape")]
        cfg = _cfg_from_dict(json.loads(kv["config"]))
        meta = np.array([[int(v) for v in kv[f"sample.{i}"].split(",")] for i in range(n)], dtype=np.int64)
        seed = int(kv["seed"])
        digest = kv["payload_sha256"]
    except (KeyError, ValueError, TypeError) as exc:
        raise CorpusFormatError(f"{path}: incomplete or malformed header ({exc})") from None
    sizes = [int(np.prod(s)) for s in shapes]
    if len(payload) != n * sum(sizes) * 8:
        raise CorpusFormatError(f"{path}: payload has {len(payload)} bytes, expected {n * sum(sizes) * 8}")
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CorpusFormatError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8").reshape(n, sum(sizes)).astype(np.float64)
    a, b = sizes[0], sizes[0] + sizes[1]
    return Corpus(
        X=flat[:, :a].reshape(n, *shapes[0]),
        Y=flat[:, a:b].reshape(n, *shapes[1]),
        X_down=flat[:, b:].reshape(n, *shapes[2]),
        seeds=meta[:, 0],
        structure_ids=meta[:, 1],
        texture_ids=meta[:, 2],
        seed=seed,
        cfg=cfg,
    )


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write a (3, H, W) [0, 1] image; format from the suffix (.png, .ppm, ...)."""
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)
