"""Synthetic dermoscopy-like datasets, on-disk manifests and tensor files.

Each generated sample is a grayscale image with a dark elliptical lesion on
a noisy background. Attributes are drawn independently with preset presence
rates and rendered as textured blobs inside the lesion, one texture per
attribute, so every attribute mask is a subset of the lesion mask.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, IoError, RangeError
from .maskops import ATTRIBUTES, AttributeMaskSet, read_pgm, union_mask, write_pgm

# presence rates of the ISIC 2017/2018 task-2 training sets
PRESETS: dict[str, dict[str, float]] = {
    "isic2018": {"S": 0.0386, "N": 0.0732, "G": 0.2321, "M": 0.2625, "P": 0.5867},
    "isic2017": {"S": 0.0798, "N": 0.0862, "G": 0.0, "M": 0.3355, "P": 0.7903},
    "uniform": {a: 0.5 for a in ATTRIBUTES},
}

TEXTURES = {"G": "dots", "M": "rings", "N": "speckle", "P": "mesh", "S": "ridges"}
# mean brightness added to each attribute region on top of its texture
LIFTS = {"G": 0.2, "M": 0.2, "N": 0.2, "P": 0.2, "S": 0.4}


@dataclass
class GenConfig:
    n_samples: int = 200
    image_size: int = 32
    preset: str = "isic2018"
    probabilities: dict[str, float] | None = None  # overrides the preset
    blob_count: tuple[int, int] = (1, 2)
    blob_radius: tuple[float, float] = (0.10, 0.18)  # fraction of image size
    noise: float = 0.04
    lifts: dict[str, float] | None = None  # overrides LIFTS
    seed: int = 0

    def rates(self) -> dict[str, float]:
        if self.preset == "custom":
            if self.probabilities is None:
                raise ValueError("preset 'custom' needs explicit probabilities")
            rates = {a: 0.0 for a in ATTRIBUTES}
            rates.update(self.probabilities)
        else:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS) + ['custom']}")
            rates = dict(PRESETS[self.preset])
            if self.probabilities:
                rates.update(self.probabilities)
        for a, p in rates.items():
            if a not in ATTRIBUTES:
                raise ValueError(f"unknown attribute {a!r}")
            if not 0.0 <= p <= 1.0:
                raise RangeError(f"probability of {a} must lie in [0, 1], got {p}")
        return rates


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (1, H, W) float64
    masks: AttributeMaskSet

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[1:] != self.masks.shape:
            raise DimensionError(f"image {self.image.shape} does not match masks {self.masks.shape}")

    def target(self, attribute: str) -> np.ndarray:
        return self.masks.get(attribute)


def _texture(kind: str, rr, cc, phase, angle):
    """Intensity offset of an attribute texture on pixel grids ``rr, cc``."""
    if kind == "dots":
        return np.where((rr % 3 == phase % 3) & (cc % 3 == phase % 3), -0.35, 0.05)
    if kind == "rings":
        return np.where(((rr + cc + phase) % 4) < 1, 0.4, -0.05)
    if kind == "speckle":
        return np.where((rr * 7 + cc * 13 + phase) % 5 < 2, 0.3, -0.2)
    if kind == "mesh":
        return np.where((rr % 4 == phase % 4) | (cc % 4 == phase % 4), -0.3, 0.1)
    if kind == "ridges":
        t = rr * np.cos(angle) + cc * np.sin(angle)
        return 0.35 * np.sign(np.sin(t * np.pi / 1.5 + phase))
    raise ValueError(kind)


def _one_sample(rng, size, rates, cfg: GenConfig, idx: int) -> Sample:
    lifts = {**LIFTS, **(cfg.lifts or {})}
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    image = 0.75 + cfg.noise * rng.standard_normal((size, size))
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    ay, ax = rng.uniform(0.22, 0.36, size=2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = rr - cy, cc - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    lesion = (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
    image[lesion] -= 0.3
    lesion_pixels = np.argwhere(lesion)
    masks = {}
    for a in ATTRIBUTES:
        if rng.random() >= rates[a] or lesion_pixels.size == 0:
            continue
        m = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1)):
            r0, c0 = lesion_pixels[rng.integers(len(lesion_pixels))]
            rad = rng.uniform(*cfg.blob_radius) * size
            m |= (rr - r0) ** 2 + (cc - c0) ** 2 <= rad**2
        m &= lesion
        if not m.any():
            continue
        tex = _texture(TEXTURES[a], rr, cc, int(rng.integers(12)), rng.uniform(0, np.pi))
        image[m] += tex[m] + lifts[a]
        masks[a] = m.astype(np.uint8)
    image = np.clip(image, 0.0, 1.0)
    return Sample(
        id=f"s{idx:05d}",
        image=image[None],
        masks=AttributeMaskSet((size, size), masks, lesion.astype(np.uint8)),
    )


def generate(cfg: GenConfig) -> list[Sample]:
    """Deterministic synthetic dataset for ``cfg``."""
    rates = cfg.rates()
    if cfg.image_size < 4:
        raise ValueError("image_size must be >= 4")
    rng = np.random.default_rng(cfg.seed)
    return [_one_sample(rng, cfg.image_size, rates, cfg, i) for i in range(cfg.n_samples)]


def resize_image(image, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resampling of the last two axes (pixel-centre aligned, edge-clamped)."""
    if new_h < 1 or new_w < 1:
        raise RangeError(f"target size must be positive, got {new_h}x{new_w}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]

    def axis(src, dst):
        pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, new_h)
    c0, c1, fc = axis(w, new_w)
    top = img[..., r0, :] * (1 - fr)[:, None] + img[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


# -- tensor files ---------------------------------------------------------

TENSOR_MAGIC = b"TATLT\0"
TENSOR_VERSION = 1


def write_tensor(path, arr) -> None:
    a = np.asarray(arr, dtype=np.float64)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(TENSOR_MAGIC + struct.pack("<HB", TENSOR_VERSION, a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.astype("<f8").tobytes())
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise IoError(f"cannot read tensor file {path}: {exc}", path) from exc
    head = len(TENSOR_MAGIC)
    if buf[:head] != TENSOR_MAGIC or len(buf) < head + 3:
        raise IoError(f"{path} is not a TATLT tensor file", path)
    version, rank = struct.unpack_from("<HB", buf, head)
    if version != TENSOR_VERSION:
        raise IoError(f"{path}: unsupported tensor version {version}", path)
    pos = head + 3
    try:
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
    except struct.error:
        raise IoError(f"{path}: truncated tensor header", path) from None
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != pos + 8 * count:
        raise IoError(f"{path}: payload size does not match dims {dims}", path)
    return np.frombuffer(buf, dtype="<f8", offset=pos).reshape(dims).astype(np.float64)


# -- manifests ------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    image: str
    masks: dict[str, str | None] = field(default_factory=dict)
    lesion: str | None = None

    def to_json(self) -> str:
        masks = {a: self.masks.get(a) for a in ATTRIBUTES}
        return json.dumps({"id": self.id, "image": self.image, "masks": masks, "lesion": self.lesion},
                          sort_keys=True)


def save(samples: list[Sample], out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write images, masks and a JSON-lines manifest; returns the manifest path.

    Paths inside the manifest are relative to its directory. Absent
    attributes are recorded as ``null``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        rec = ManifestRecord(s.id, f"images/{s.id}.tatlt")
        write_tensor(out / rec.image, s.image)
        for a in ATTRIBUTES:
            if a in s.masks.masks:
                rel = f"masks/{s.id}_{a}.pgm"
                write_pgm(out / rel, s.masks.masks[a])
                rec.masks[a] = rel
        if s.masks.lesion is not None:
            rec.lesion = f"masks/{s.id}_lesion.pgm"
            write_pgm(out / rec.lesion, s.masks.lesion)
        records.append(rec)
    path = out / manifest_name
    tmp = path.with_suffix(".tmp")
    tmp.write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")
    os.replace(tmp, path)
    return path


def load(manifest_path) -> list[Sample]:
    """Read a JSON-lines manifest. Missing attribute masks load as all-zero."""
    path = Path(manifest_path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}", str(path)) from exc
    root = path.parent
    samples, seen = [], set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid, image_rel = rec["id"], rec["image"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IoError(f"{path}:{lineno}: malformed record ({exc})", str(path)) from exc
        if sid in seen:
            raise IoError(f"{path}:{lineno}: duplicate id {sid!r}", str(path))
        seen.add(sid)
        image = read_tensor(root / image_rel)
        if image.ndim == 2:
            image = image[None]
        masks = {a: read_pgm(root / p) for a, p in (rec.get("masks") or {}).items() if p}
        lesion = read_pgm(root / rec["lesion"]) if rec.get("lesion") else None
        try:
            ms = AttributeMaskSet(image.shape[-2:], masks, lesion)
            samples.append(Sample(sid, image, ms))
        except (DimensionError, ValueError) as exc:
            raise IoError(f"{path}:{lineno}: {exc}", str(path)) from exc
    return samples


def standardize(images) -> np.ndarray:
    """Centre and scale every channel of every image to zero mean, unit variance."""
    x = np.asarray(images, dtype=np.float64)
    mean = x.mean(axis=(-2, -1), keepdims=True)
    std = x.std(axis=(-2, -1), keepdims=True)
    return (x - mean) / np.maximum(std, 1e-8)


def network_input(samples: list[Sample]) -> np.ndarray:
    """Standardised image batch ``(n,C,H,W)`` ready for a segmenter."""
    return standardize(np.stack([s.image for s in samples]))


def stack(samples: list[Sample], attribute: str | None = None, union: bool = False):
    """Network inputs ``(n,C,H,W)`` and targets ``(n,H,W)``.

    The target is the given attribute's mask, the union mask when ``union``
    is set, or the lesion mask when neither is requested.
    """
    if not samples:
        raise DataError("no samples to stack")
    x = network_input(samples)
    if union:
        y = np.stack([union_mask(s.masks) for s in samples])
    elif attribute is not None:
        y = np.stack([s.target(attribute) for s in samples])
    else:
        if any(s.masks.lesion is None for s in samples):
            raise DataError("lesion masks requested but missing")
        y = np.stack([s.masks.lesion for s in samples])
    return x, y
