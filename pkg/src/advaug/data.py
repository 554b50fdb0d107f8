"""Synthetic cardiac-like phantoms, the default random augmentation and dataset I/O.

Phantom classes: 0 background, 1 cavity (disk), 2 wall (ring around the
cavity), 3 lateral chamber (crescent beside the ring).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from . import transforms as tf
from .grid import bilinear_sample, identity_grid

MAGIC = "ADVCHAIN1"
FORMAT_VERSION = 1


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8 class indices
    subject_id: str

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} differ")
        if not np.isfinite(self.image).all():
            raise ValueError(f"sample {self.subject_id} has non-finite intensities")


@dataclass(frozen=True)
class PhantomSpec:
    n_classes: int = 4
    size: int = 64
    # lengths are fractions of the image size
    center_jitter: float = 0.05
    cavity_radius: tuple[float, float] = (0.08, 0.125)
    wall_thickness: tuple[float, float] = (0.04, 0.0625)
    chamber_radius: tuple[float, float] = (0.07, 0.115)
    chamber_angle: tuple[float, float] = (150.0, 215.0)  # degrees, 180 = left side
    body_radius: tuple[float, float] = (0.4, 0.47)
    cavity_intensity: tuple[float, float] = (0.7, 0.95)
    wall_intensity: tuple[float, float] = (0.05, 0.22)
    chamber_intensity: tuple[float, float] = (0.55, 0.9)
    body_intensity: tuple[float, float] = (0.3, 0.5)
    n_distractors: tuple[int, int] = (2, 4)
    bias_strength: float = 0.25
    noise_level: tuple[float, float] = (0.01, 0.04)
    blur: float = 0.6

    def __post_init__(self):
        if self.n_classes != 4:
            raise ValueError("phantoms are defined for exactly 4 classes")
        # farthest chamber point: wall radius + 0.45 r + 1.4 r along its major axis
        reach = self.size * (
            self.center_jitter + self.cavity_radius[1] + self.wall_thickness[1] + 1.85 * self.chamber_radius[1]
        )
        if reach + 1 > (self.size - 1) / 2:
            raise ValueError(f"phantom structures (reach {reach:.1f}px) exceed the {self.size}px field of view")


def _uniform(rng: np.random.Generator, bounds) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _smooth_field(rng: np.random.Generator, size: int, strength: float) -> np.ndarray:
    coarse = rng.uniform(-1, 1, (4, 4))
    field = ndimage.zoom(coarse, size / 4, order=3, mode="nearest")[:size, :size]
    return np.exp(strength * field)


def _phantom(spec: PhantomSpec, rng: np.random.Generator, subject_id: str) -> Sample:
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    c = (n - 1) / 2
    jitter = spec.center_jitter * n
    cx = c + rng.uniform(-jitter, jitter)
    cy = c + rng.uniform(-jitter, jitter)
    r_cav = _uniform(rng, spec.cavity_radius) * n
    r_wall = r_cav + _uniform(rng, spec.wall_thickness) * n
    ecc = rng.uniform(0.85, 1.15)
    dist = np.sqrt(((xx - cx) * ecc) ** 2 + ((yy - cy) / ecc) ** 2)

    ang = math.radians(_uniform(rng, spec.chamber_angle))
    r_ch = _uniform(rng, spec.chamber_radius) * n
    off = r_wall + 0.45 * r_ch
    chx, chy = cx + off * math.cos(ang), cy - off * math.sin(ang)
    ch_ax = rng.uniform(1.0, 1.4)
    rot = ang + math.pi / 2
    du, dv = xx - chx, yy - chy
    a = (du * math.cos(rot) + dv * math.sin(rot)) / (r_ch * ch_ax)
    b = (-du * math.sin(rot) + dv * math.cos(rot)) / r_ch
    chamber = (a**2 + b**2) <= 1.0

    label = np.zeros((n, n), np.uint8)
    label[chamber & (dist > r_wall + 1.0)] = 3
    label[dist <= r_wall] = 2
    label[dist <= r_cav] = 1

    body_r = _uniform(rng, spec.body_radius) * n
    body_ecc = rng.uniform(0.8, 1.0)
    body = ((xx - c) / body_r) ** 2 + ((yy - c) / (body_r * body_ecc)) ** 2 <= 1.0

    img = np.zeros((n, n))
    img[body] = _uniform(rng, spec.body_intensity)
    heart = ndimage.binary_dilation(label > 0, iterations=2)
    for _ in range(int(rng.integers(spec.n_distractors[0], spec.n_distractors[1] + 1))):
        for _attempt in range(20):
            bx, by = rng.uniform(0.15 * n, 0.85 * n, 2)
            br = rng.uniform(0.03, 0.08) * n
            blob = (xx - bx) ** 2 + (yy - by) ** 2 <= br**2
            if not (blob & heart).any() and body[blob].all():
                img[blob] = rng.uniform(0.45, 0.8)
                break
    img[label == 3] = _uniform(rng, spec.chamber_intensity)
    img[label == 2] = _uniform(rng, spec.wall_intensity)
    img[label == 1] = _uniform(rng, spec.cavity_intensity)

    img = ndimage.gaussian_filter(img, spec.blur)
    img = img * _smooth_field(rng, n, spec.bias_strength)
    img = img + rng.normal(0.0, _uniform(rng, spec.noise_level), img.shape)
    img = (img - img.min()) / (img.max() - img.min())
    return Sample(img.astype(np.float32), label, subject_id)


def generate_phantoms(spec: PhantomSpec = PhantomSpec(), n_subjects: int = 1, seed: int = 0) -> list[Sample]:
    """Deterministic list of ``n_subjects`` phantoms for ``seed``."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be at least 1")
    children = np.random.SeedSequence(seed).spawn(n_subjects)
    return [_phantom(spec, np.random.default_rng(s), f"s{seed:04d}_{i:04d}") for i, s in enumerate(children)]


# ------------------------------------------------------ default augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotation: float = 10.0 / 180.0  # fraction of pi
    scale: float = 0.1
    translation: float = 0.05
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.2
    elastic_epsilon: float = 0.75
    elastic_ds: int = 8

    @classmethod
    def zero(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def nearest_sample(label: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour lookup of an integer ``(B, H, W)`` map; outside reads 0."""
    b, h, w = label.shape
    x = torch.round((grid[..., 0] + 1) * 0.5 * (w - 1)).long()
    y = torch.round((grid[..., 1] + 1) * 0.5 * (h - 1)).long()
    valid = (x >= 0) & (x < w) & (y >= 0) & (y < h)
    idx = y.clamp(0, h - 1) * w + x.clamp(0, w - 1)
    out = label.reshape(b, -1).gather(1, idx.reshape(b, -1)).reshape(b, h, w)
    return torch.where(valid, out, torch.zeros_like(out))


def _rescale01(x: torch.Tensor) -> torch.Tensor:
    lo = x.amin(dim=(1, 2, 3), keepdim=True)
    hi = x.amax(dim=(1, 2, 3), keepdim=True)
    return torch.where(hi > lo, (x - lo) / (hi - lo).clamp_min(1e-12), torch.zeros_like(x))


def augment_batch(
    images: torch.Tensor,
    labels: torch.Tensor,
    rng: torch.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Random affine, flips, elastic jitter and brightness/contrast on a batch.

    ``images`` is ``(B, 1, H, W)``, ``labels`` is ``(B, H, W)``. Labels are
    warped by nearest neighbour; intensities end rescaled to [0, 1].
    """
    b, _, h, w = images.shape
    flip = torch.rand(b, generator=rng) < cfg.flip_prob
    if bool(flip.any()):
        images = torch.where(flip.view(b, 1, 1, 1), images.flip(-1), images)
        labels = torch.where(flip.view(b, 1, 1), labels.flip(-1), labels)

    bounds = torch.tensor([cfg.translation, cfg.translation, cfg.rotation, cfg.scale, cfg.scale], dtype=torch.float64)
    a = ((2 * torch.rand((b, 5), generator=rng, dtype=torch.float64) - 1) * bounds).to(images.dtype)
    matrix = tf.affine_matrix(tf.AffineParams(a, tuple(bounds.tolist())))
    grid = identity_grid(b, h, w, dtype=images.dtype)
    if cfg.elastic_epsilon > 0:
        cons = tf.Constraints(morph_epsilon=cfg.elastic_epsilon, morph_ds=cfg.elastic_ds)
        morph = tf.random_init("morph", (b, h, w), rng, cons, images.dtype)
        disp = tf.integrate_velocity(morph, h, w)
        grid = grid + disp.permute(0, 2, 3, 1)
    grid = torch.einsum("bij,bhwj->bhwi", matrix[:, :2, :2], grid) + matrix[:, None, None, :2, 2]

    images = bilinear_sample(images, grid)
    labels = nearest_sample(labels, grid)

    gain = 1 + cfg.contrast * (2 * torch.rand((b, 1, 1, 1), generator=rng, dtype=torch.float64) - 1)
    shift = cfg.brightness * (2 * torch.rand((b, 1, 1, 1), generator=rng, dtype=torch.float64) - 1)
    mean = images.mean(dim=(1, 2, 3), keepdim=True)
    images = (images - mean) * gain.to(images.dtype) + mean + shift.to(images.dtype)
    return _rescale01(images), labels


def default_random_augment(sample: Sample, rng: torch.Generator, cfg: AugmentConfig = AugmentConfig()) -> Sample:
    images = torch.from_numpy(sample.image)[None, None]
    labels = torch.from_numpy(sample.label.astype(np.int64))[None]
    out_img, out_lab = augment_batch(images, labels, rng, cfg)
    return Sample(out_img[0, 0].numpy().astype(np.float32), out_lab[0].numpy().astype(np.uint8), sample.subject_id)


def stack(samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch samples into ``(B, 1, H, W)`` float images and ``(B, H, W)`` long labels."""
    images = torch.from_numpy(np.stack([s.image for s in samples]))[:, None]
    labels = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    return images, labels


# ------------------------------------------------------------------ file I/O


class CorruptFileError(ValueError):
    """A sample file is truncated or its header cannot be parsed."""


def write_sample(path, sample: Sample, endianness: str = "little") -> None:
    if endianness not in ("little", "big"):
        raise ValueError(f"endianness must be 'little' or 'big', got {endianness!r}")
    order = "<" if endianness == "little" else ">"
    image = np.ascontiguousarray(sample.image, dtype=order + "f4").tobytes()
    label = np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes()
    header = {
        "version": FORMAT_VERSION,
        "subject_id": sample.subject_id,
        "shape": list(sample.image.shape),
        "image_dtype": "float32",
        "label_dtype": "uint8",
        "endianness": endianness,
        "image_nbytes": len(image),
        "label_nbytes": len(label),
    }
    Path(path).write_bytes(f"{MAGIC}\n{json.dumps(header)}\n".encode() + image + label)


def read_sample(path) -> Sample:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0 or raw[:first].decode(errors="replace") != MAGIC:
        raise CorruptFileError(f"{path}: missing or corrupt {MAGIC} header")
    try:
        header = json.loads(raw[first + 1:second])
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: corrupt header ({exc})") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('version')}")
    if header.get("image_dtype") != "float32" or header.get("label_dtype") != "uint8":
        raise CorruptFileError(f"{path}: unexpected dtypes in header")
    order = {"little": "<", "big": ">"}.get(header.get("endianness"))
    if order is None:
        raise CorruptFileError(f"{path}: unknown endianness {header.get('endianness')!r}")
    h, w = header["shape"]
    n_img, n_lab = header["image_nbytes"], header["label_nbytes"]
    if n_img != 4 * h * w or n_lab != h * w:
        raise ValueError(f"{path}: payload sizes do not match shape {h}x{w}")
    body = raw[second + 1:]
    if len(body) != n_img + n_lab:
        raise CorruptFileError(f"{path}: expected {n_img + n_lab} payload bytes, found {len(body)}")
    image = np.frombuffer(body[:n_img], dtype=order + "f4").reshape(h, w).astype(np.float32)
    label = np.frombuffer(body[n_img:], dtype=np.uint8).reshape(h, w).copy()
    return Sample(image, label, header["subject_id"])


def save_dataset(path, samples: Sequence[Sample], splits: Sequence[str] | None = None, endianness: str = "little", meta: dict | None = None) -> Path:
    """One ``sample_XXXX.bin`` per sample plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = ["train"] * len(samples)
    if len(splits) != len(samples):
        raise ValueError("one split name per sample is required")
    entries = []
    for i, (s, split) in enumerate(zip(samples, splits)):
        name = f"sample_{i:04d}.bin"
        write_sample(path / name, s, endianness)
        entries.append({"file": name, "subject_id": s.subject_id, "split": split})
    manifest = {"format": MAGIC, "version": FORMAT_VERSION, "samples": entries, "meta": meta or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(path, split: str | None = None) -> list[Sample]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != MAGIC:
        raise CorruptFileError(f"{path}: not a dataset manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')}")
    samples = []
    for e in manifest["samples"]:
        if split is not None and e["split"] != split:
            continue
        s = read_sample(path / e["file"])
        if s.subject_id != e["subject_id"]:
            raise ValueError(f"{e['file']}: subject id does not match manifest")
        samples.append(s)
    return samples


def spec_to_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)
