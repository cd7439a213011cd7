"""Synthetic LR/HR pair generation.

A simplified parametric stand-in for staged real-world degradation
pipelines: Gaussian blur, integer downsampling, additive Gaussian noise,
and an optional second blur+noise stage at low resolution. HR source
images come from seeded procedural generators (oriented sinusoid
mixtures, random convex polygons, filtered noise) so the package is
self-contained.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import image_io, resample
from .errors import InvalidArgument
from .seeding import derive_seed, np_rng


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma_range: tuple[float, float] = (0.4, 1.6)
    scale: int = 4
    resample: str = "bicubic"
    noise_sigma_range: tuple[float, float] = (0.0, 0.04)
    second_stage: bool = False

    def __post_init__(self):
        if self.scale < 1:
            raise InvalidArgument("scale must be >= 1")
        for name in ("blur_sigma_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise InvalidArgument(f"{name} must satisfy 0 <= lo <= hi")
        if self.resample not in resample.RESAMPLE_METHODS:
            raise InvalidArgument(f"unknown resample method {self.resample!r}")


@dataclass
class ImagePair:
    """An HR image and its degraded LR counterpart, both float CHW in [0,1]."""

    hr: np.ndarray
    lr: np.ndarray

    def __post_init__(self):
        if self.hr.ndim != 3 or self.lr.ndim != 3:
            raise InvalidArgument("hr and lr must be (C, H, W) arrays")


def _draw(rng: np.random.Generator, lo: float, hi: float) -> float:
    return lo if lo == hi else float(rng.uniform(lo, hi))


def degrade(hr: np.ndarray, params: DegradationParams, seed: int) -> ImagePair:
    """Degrade an HR image into an LR counterpart, fully seed-determined."""
    if hr.ndim != 3:
        raise InvalidArgument(f"expected (C, H, W) image, got shape {hr.shape}")
    _, h, w = hr.shape
    if h % params.scale or w % params.scale:
        raise InvalidArgument(
            f"HR dims {h}x{w} not divisible by scale {params.scale}")
    rng = np_rng(seed, "degrade")
    x = resample.gaussian_blur(hr, _draw(rng, *params.blur_sigma_range))
    x = resample.downsample(x, params.scale, params.resample)
    noise_sigma = _draw(rng, *params.noise_sigma_range)
    if noise_sigma > 0:
        x = x + noise_sigma * rng.standard_normal(x.shape)
    if params.second_stage:
        x = resample.gaussian_blur(x, _draw(rng, *params.blur_sigma_range))
        noise_sigma = _draw(rng, *params.noise_sigma_range)
        if noise_sigma > 0:
            x = x + noise_sigma * rng.standard_normal(x.shape)
    lr = np.clip(x, 0.0, 1.0)
    return ImagePair(hr=np.clip(hr.astype(np.float64), 0.0, 1.0), lr=lr)


# ---------------------------------------------------------------------------
# Procedural HR sources


def _sinusoid_image(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((3, h, w))
    base = np.zeros((h, w))
    for _ in range(rng.integers(3, 6)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.8, 3.5) / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.1, 0.35)
        base += amp * np.sin(2 * np.pi * freq *
                             (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    for c in range(3):
        gain = rng.uniform(0.6, 1.0)
        offset = rng.uniform(0.35, 0.65)
        img[c] = offset + gain * base / 2.0
    return img


def _polygon_image(rng, h, w):
    img = np.ones((3, h, w)) * rng.uniform(0.2, 0.8, size=(3, 1, 1))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(rng.integers(3, 7)):
        cx, cy = rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h
        radius = rng.uniform(0.12, 0.4) * min(h, w)
        n_vert = rng.integers(3, 8)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vert))
        vx = cx + radius * np.cos(angles)
        vy = cy + radius * np.sin(angles)
        inside = np.ones((h, w), dtype=bool)
        for i in range(n_vert):
            x1, y1 = vx[i], vy[i]
            x2, y2 = vx[(i + 1) % n_vert], vy[(i + 1) % n_vert]
            inside &= (xx - x1) * (y2 - y1) - (yy - y1) * (x2 - x1) <= 0
        color = rng.uniform(0.1, 0.9, size=3)
        for c in range(3):
            img[c][inside] = color[c]
    # soften edges so content is band-limited rather than step functions
    return resample.gaussian_blur(img, 2.0)


def _filtered_noise_image(rng, h, w):
    img = rng.standard_normal((3, h, w))
    img = resample.gaussian_blur(img, rng.uniform(4.0, 8.0))
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    span = np.where(hi - lo < 1e-9, 1.0, hi - lo)
    return 0.2 + 0.6 * (img - lo) / span


_GENERATORS = (_sinusoid_image, _polygon_image, _filtered_noise_image)


def generate_hr(seed: int, size: tuple[int, int]) -> np.ndarray:
    """Procedural HR image for the given seed, float64 CHW in [0,1]."""
    h, w = size
    rng = np_rng(seed, "hr")
    kind = int(rng.integers(0, len(_GENERATORS)))
    return np.clip(_GENERATORS[kind](rng, h, w), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Dataset synthesis


@dataclass
class Dataset:
    """In-memory LR/HR pairs plus the manifest entries describing them."""

    hr: np.ndarray  # (N, 3, H, W) float32
    lr: np.ndarray  # (N, 3, H/scale, W/scale) float32
    entries: list = field(default_factory=list)

    def __len__(self):
        return self.hr.shape[0]


def synth_dataset(count: int, size: tuple[int, int], params: DegradationParams,
                  seed: int, out_dir=None, image_format: str = "png") -> Dataset:
    """Generate ``count`` procedural HR images and degrade each one.

    With ``out_dir`` set, writes hr/lr images plus ``manifest.json``
    containing per-pair seeds, parameters, and content hashes.
    """
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    if image_format not in ("png", "ppm"):
        raise InvalidArgument(f"image_format must be png or ppm, got {image_format!r}")
    h, w = size
    if h % params.scale or w % params.scale:
        raise InvalidArgument(f"size {h}x{w} not divisible by scale {params.scale}")

    hrs, lrs, entries = [], [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for idx in range(count):
        pair_seed = derive_seed(seed, "pair", idx)
        hr = generate_hr(pair_seed, size)
        pair = degrade(hr, params, pair_seed)
        hrs.append(pair.hr.astype(np.float32))
        lrs.append(pair.lr.astype(np.float32))
        entry = {
            "hr_path": f"hr_{idx:05d}.{image_format}",
            "lr_path": f"lr_{idx:05d}.{image_format}",
            "seed": pair_seed,
            "params": asdict(params),
            "hr_sha256": _content_hash(pair.hr),
            "lr_sha256": _content_hash(pair.lr),
        }
        entries.append(entry)
        if out_dir is not None:
            image_io.save_image(out_dir / entry["hr_path"], pair.hr)
            image_io.save_image(out_dir / entry["lr_path"], pair.lr)
    if out_dir is not None:
        manifest = {"count": count, "size": [h, w], "seed": seed, "pairs": entries}
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return Dataset(hr=np.stack(hrs), lr=np.stack(lrs), entries=entries)


def load_dataset(directory) -> Dataset:
    """Load a dataset directory written by synth_dataset."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise InvalidArgument(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    hrs, lrs = [], []
    for entry in manifest["pairs"]:
        hrs.append(image_io.load_image(directory / entry["hr_path"]).astype(np.float32))
        lrs.append(image_io.load_image(directory / entry["lr_path"]).astype(np.float32))
    return Dataset(hr=np.stack(hrs), lr=np.stack(lrs), entries=manifest["pairs"])


def _content_hash(img: np.ndarray) -> str:
    return hashlib.sha256(image_io.to_uint8(img).tobytes()).hexdigest()


def manifest_hash(directory) -> str:
    """Hash of the manifest file, for dataset determinism checks."""
    return hashlib.sha256((Path(directory) / "manifest.json").read_bytes()).hexdigest()
