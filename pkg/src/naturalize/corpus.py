"""Image corpora: synthetic generators, directory loading, and saving.

Images are held as uint8 arrays of shape (3, S, S).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

logger = logging.getLogger(__name__)

KINDS = ("natural", "cg")
SENSOR_NOISE_SIGMA = 4.0


@dataclass
class ImageCorpus:
    images: np.ndarray
    labels: list[str]
    ids: list[str]
    source: str = "synthetic"
    color: bool = True
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 3 or self.images.shape[2] != self.images.shape[3]:
            raise ValueError(f"corpus images must be (N,3,S,S), got {self.images.shape}")
        if not (len(self.labels) == len(self.ids) == len(self.images)):
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[2]

    def subset(self, idx) -> "ImageCorpus":
        idx = list(idx)
        return ImageCorpus(
            self.images[idx], [self.labels[i] for i in idx], [self.ids[i] for i in idx], self.source, self.color
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(json.dumps([self.labels, self.ids]).encode())
        return h.hexdigest()


# ---------------------------------------------------------------- synthesis


def _grid(rng: np.random.Generator, s: int, cells: int) -> np.ndarray:
    """Smooth value noise: random lattice upsampled with cubic splines, unit-ish amplitude."""
    lattice = rng.standard_normal((cells + 3, cells + 3))
    up = zoom(lattice, s / cells, order=3, mode="nearest")
    off = (up.shape[0] - s) // 2
    return up[off : off + s, off : off + s]


def _coords(s: int) -> tuple[np.ndarray, np.ndarray]:
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    return (x + 0.5) / s * 2 - 1, (y + 0.5) / s * 2 - 1


def _natural_image(rng: np.random.Generator, s: int) -> np.ndarray:
    x, y = _coords(s)
    base = rng.uniform(70, 170, 3)
    slope = rng.uniform(-35, 35, (3, 2))
    img = base[:, None, None] + slope[:, 0, None, None] * x + slope[:, 1, None, None] * y

    # soft-edged face-like blob
    cx, cy = rng.uniform(-0.2, 0.2, 2)
    ax, ay = rng.uniform(0.35, 0.55), rng.uniform(0.5, 0.75)
    r = np.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2)
    blob = 1.0 / (1.0 + np.exp((r - 1.0) * 8.0))
    skin = rng.uniform([150, 100, 80], [230, 170, 140])
    img = img * (1 - blob) + skin[:, None, None] * blob * (0.85 + 0.15 * (1 - r.clip(0, 1)))

    texture = 14.0 * _grid(rng, s, 8) + 7.0 * _grid(rng, s, 16) + 9.0 * _grid(rng, s, s // 2)
    img = img + texture[None] * rng.uniform(0.8, 1.2, 3)[:, None, None]
    img = img + rng.normal(0.0, SENSOR_NOISE_SIGMA, img.shape)

    # slight lateral chromatic misalignment
    img[0] = np.roll(img[0], 1, axis=1)
    img[2] = np.roll(img[2], 1, axis=0)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def _shade_ellipsoid(x, y, cx, cy, ax, ay, light, shininess):
    u, v = (x - cx) / ax, (y - cy) / ay
    rr = u * u + v * v
    inside = rr < 1.0
    nz = np.sqrt(np.clip(1.0 - rr, 0.0, 1.0))
    n = np.stack([u / ax, v / ay, nz])
    n /= np.linalg.norm(n, axis=0, keepdims=True) + 1e-12
    diffuse = np.clip(np.tensordot(light, n, axes=1), 0.0, 1.0)
    half = light + np.array([0.0, 0.0, 1.0])
    half /= np.linalg.norm(half)
    spec = np.clip(np.tensordot(half, n, axes=1), 0.0, 1.0) ** shininess
    return inside, diffuse, spec


def _cg_image(rng: np.random.Generator, s: int) -> np.ndarray:
    x, y = _coords(s)
    levels = int(rng.integers(10, 20))

    def band(v):
        return np.floor(np.clip(v, 0, 1) * levels) / levels

    skin = rng.uniform([150, 100, 80], [235, 180, 150])
    top = skin * rng.uniform(0.55, 0.9, 3)
    bottom = skin * rng.uniform(0.55, 0.9, 3)
    t = band((y + 1) / 2)
    img = top[:, None, None] * (1 - t) + bottom[:, None, None] * t

    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 2.0
    light /= np.linalg.norm(light)

    blobs = [(rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(0.4, 0.6), rng.uniform(0.55, 0.8))]
    for _ in range(int(rng.integers(1, 4))):
        blobs.append((rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.06, 0.18), rng.uniform(0.06, 0.18)))
    for i, (cx, cy, ax, ay) in enumerate(blobs):
        inside, diffuse, spec = _shade_ellipsoid(x, y, cx, cy, ax, ay, light, rng.uniform(12, 40))
        color = skin if i == 0 else skin * rng.uniform(0.7, 1.1, 3)
        shade = band(0.6 + 0.4 * diffuse)
        lit = color[:, None, None] * shade + 255.0 * 0.3 * band(spec)
        img = np.where(inside[None], lit, img)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synth_corpus(kind: str, count: int, size: int = 64, seed: int = 0) -> ImageCorpus:
    """Deterministic synthetic corpus.

    ``natural``: smooth gradients, a soft face-like blob, mid-frequency value
    noise texture, Gaussian sensor noise (sigma 4) and a one-pixel channel
    misalignment. ``cg``: hard-edged shaded ellipsoids with a specular
    highlight and quantized shading bands, no noise.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    make = _natural_image if kind == "natural" else _cg_image
    code = KINDS.index(kind)
    images = np.stack([make(np.random.default_rng([seed, code, i]), size) for i in range(count)])
    ids = [f"{kind}-{seed}-{i:05d}" for i in range(count)]
    return ImageCorpus(images, [kind] * count, ids, source=f"synth:{kind}:{seed}")


# ---------------------------------------------------------------- disk I/O


def read_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Decode PNG / PPM / PGM to a (3,S,S) uint8 array; grayscale is replicated to 3 channels."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("L", "I", "I;16", "F"):
            im = im.convert("L").convert("RGB")
        elif im.mode != "RGB":
            im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).copy()


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise TypeError(f"write_image expects uint8 pixels, got {arr.dtype}")
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def save_corpus(corpus: ImageCorpus, directory: str | Path, fmt: str = "png") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    for img, label, ident in zip(corpus.images, corpus.labels, corpus.ids):
        name = f"{ident}.{fmt}"
        write_image(d / name, img)
        manifest.append({"id": ident, "label": label, "file": name})
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_corpus(path: str | Path, size: int | None = None) -> ImageCorpus:
    """Load a manifest directory. Unreadable files are skipped with a warning and listed in ``skipped``."""
    d = Path(path)
    manifest_path = d / "manifest.json" if d.is_dir() else d
    d = manifest_path.parent
    entries = json.loads(manifest_path.read_text())
    images, labels, ids, skipped = [], [], [], []
    color = False
    for e in entries:
        try:
            with Image.open(d / e["file"]) as im:
                color = color or im.mode not in ("L", "I", "I;16", "F")
            img = read_image(d / e["file"], size)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", e["file"], exc)
            skipped.append(e["file"])
            continue
        if images and img.shape != images[0].shape:
            logger.warning("skipping %s: size %s differs from corpus size %s", e["file"], img.shape, images[0].shape)
            skipped.append(e["file"])
            continue
        images.append(img)
        labels.append(e["label"])
        ids.append(e["id"])
    if not images:
        raise ValueError(f"no readable images under {d}")
    return ImageCorpus(np.stack(images), labels, ids, source=str(d), color=color, skipped=skipped)


# ---------------------------------------------------------------- pixel <-> network domain

CLAMP = 1.8


def normalize(pixels: np.ndarray) -> np.ndarray:
    """[0,255] pixels -> [-1,1] float32 via x/127.5 - 1."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def to_pixels(raw: np.ndarray) -> np.ndarray:
    """Raw network output -> uint8 pixels: clamp to [-1.8, 1.8], then clip(round_half_up((x+1)*127.5), 0, 255)."""
    x = np.clip(np.asarray(raw, dtype=np.float64), -CLAMP, CLAMP)
    return np.clip(np.floor((x + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)
