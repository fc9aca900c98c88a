"""Natural-vs-CG detector built on histograms of differential images.

Two classifiers share the same 116-value feature vector:

* ``mlp``  116 -> 32 (ELU) -> 1 (sigmoid), the discriminator used while
  training H-Net;
* ``flda`` Fisher's linear discriminant with a logistic calibration of the
  projected distance, used as the evaluation detector.

Scores are P(natural); label convention natural = 1, cg = 0.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from . import binfmt
from . import functional as F
from .errors import ContractError, DimensionError
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"DTCT"
VARIANTS = {"mlp": 0, "flda": 1}
HALF_WIDTH = 12
N_BINS = 2 * HALF_WIDTH + 1
N_MOMENTS = 4
DIRECTIONS = ("horizontal", "vertical", "diagonal", "antidiagonal")
N_FEATURES = len(DIRECTIONS) * (N_BINS + N_MOMENTS)
RIDGE = 1e-6

NATURAL, CG = "natural", "cg"


# ---------------------------------------------------------------- features


def to_luma(pixels: np.ndarray) -> np.ndarray:
    """(3,H,W) or (1,H,W) pixel array -> integer luma (H,W); grayscale passes through."""
    p = np.asarray(pixels, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] not in (1, 3):
        raise DimensionError(f"expected (3,H,W) or (1,H,W) pixels, got {p.shape}")
    if p.shape[0] == 1:
        y = p[0]
    else:
        y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.int64)


def difference_images(luma: np.ndarray) -> dict[str, np.ndarray]:
    return {
        "horizontal": luma[:, 1:] - luma[:, :-1],
        "vertical": luma[1:, :] - luma[:-1, :],
        "diagonal": luma[1:, 1:] - luma[:-1, :-1],
        "antidiagonal": luma[1:, :-1] - luma[:-1, 1:],
    }


def difference_histogram(d: np.ndarray) -> np.ndarray:
    """Normalized histogram of integer differences over bins -255..255 (511 entries)."""
    return np.bincount(d.ravel() + 255, minlength=511) / d.size


def _moments(d: np.ndarray) -> list[float]:
    x = d.astype(np.float64).ravel()
    mu = x.mean()
    c = x - mu
    var = (c * c).mean()
    if var == 0.0:
        return [mu, 0.0, 0.0, 0.0]
    return [mu, var, (c**3).mean() / var**1.5, (c**4).mean() / var**2]


def extract_features(pixels: np.ndarray) -> np.ndarray:
    """116 features: per direction, bins -12..12 of the difference histogram then mean, variance, skewness, kurtosis."""
    luma = to_luma(pixels)
    if luma.shape[0] < 2 or luma.shape[1] < 2:
        raise DimensionError(f"image must be at least 2x2, got {luma.shape}")
    out = []
    for name, d in difference_images(luma).items():
        hist = difference_histogram(d)
        out.append(hist[255 - HALF_WIDTH : 255 + HALF_WIDTH + 1])
        out.append(np.asarray(_moments(d)))
    return np.concatenate(out)


def extract_batch(images: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([extract_features(im) for im in images])


# ---------------------------------------------------------------- models


@dataclass
class DetectorModel:
    variant: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    threshold: float = 0.5
    flda_cut: float = 0.0
    flda_slope: float = 1.0
    trained: bool = False

    def _require_trained(self) -> None:
        if not self.trained:
            raise ContractError("detector has not been trained")

    def naturalness(self, feats: np.ndarray) -> np.ndarray:
        """P(natural) for a (N, 116) feature matrix."""
        self._require_trained()
        f = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        t = self.tensors
        if self.variant == "mlp":
            z = (f - t["feature_mean"].astype(np.float64)) / t["feature_std"].astype(np.float64)
            h = z @ t["w1"].astype(np.float64) + t["b1"].astype(np.float64)
            h = np.where(h > 0, h, np.expm1(np.minimum(h, 0)))
            logit = (h @ t["w2"].astype(np.float64) + t["b2"].astype(np.float64))[:, 0]
        else:
            logit = self.flda_slope * (self.project(f) - self.flda_cut)
        return 1.0 / (1.0 + np.exp(-np.clip(logit, -500, 500)))

    def project(self, feats: np.ndarray) -> np.ndarray:
        return np.atleast_2d(feats) @ self.tensors["projection"].astype(np.float64)

    def score(self, pixels: np.ndarray) -> float:
        return float(self.naturalness(extract_features(pixels))[0])

    def score_batch(self, images) -> np.ndarray:
        return self.naturalness(extract_batch(images))

    def classify(self, pixels: np.ndarray) -> str:
        return classify_score(self.score(pixels), self.threshold)

    def fingerprint(self) -> str:
        return hashlib.sha256(encode_detector(self)).hexdigest()


def classify_score(score: float, threshold: float = 0.5) -> str:
    return NATURAL if score >= threshold else CG


class Scorer(Protocol):
    def score(self, images) -> np.ndarray: ...


class BlackBoxScorer:
    """Score-only view of a detector: images in, naturalness probabilities out.

    Holds a bound method rather than the model so there is no route to
    weights or gradients from the scorer. ``calls`` counts invocations.
    """

    __slots__ = ("_fn", "calls")

    def __init__(self, model: DetectorModel):
        model._require_trained()
        self._fn = model.score_batch
        self.calls = 0

    def score(self, images) -> np.ndarray:
        """(N,C,H,W) pixel images in [0,255] -> float64 array of P(natural)."""
        self.calls += 1
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        return np.array(self._fn(arr), dtype=np.float64)


# ---------------------------------------------------------------- training


def _train_mlp(x: np.ndarray, y: np.ndarray, seed: int, hidden: int, max_epochs: int, patience: int) -> dict:
    rng = np.random.default_rng(seed)
    n = len(y)
    order = rng.permutation(n)
    n_val = max(1, n // 5)
    val, tr = order[:n_val], order[n_val:]

    mean = x[tr].mean(axis=0)
    std = x[tr].std(axis=0)
    std[std < 1e-12] = 1.0
    z = (x - mean) / std

    params = {
        "w1": Tensor(rng.standard_normal((x.shape[1], hidden)) * np.sqrt(2.0 / x.shape[1]), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(rng.standard_normal((hidden, 1)) * np.sqrt(1.0 / hidden), requires_grad=True),
        "b2": Tensor(np.zeros(1), requires_grad=True),
    }
    state = AdamState(lr=1e-3)

    def forward(idx):
        h = F.elu(F.linear(Tensor(z[idx]), params["w1"], params["b1"]))
        return F.linear(h, params["w2"], params["b2"])

    def val_loss() -> float:
        return F.bce_with_logits(forward(val), y[val]).item()

    best = (val_loss(), {k: t.data.copy() for k, t in params.items()})
    stale = 0
    for epoch in range(max_epochs):
        perm = rng.permutation(tr)
        for start in range(0, len(perm), 32):
            idx = perm[start : start + 32]
            with Tape() as tape:
                loss = F.bce_with_logits(forward(idx), y[idx])
            tape.backward(loss)
            adam_step(params, {k: t.grad for k, t in params.items()}, state)
            for t in params.values():
                t.zero_grad()
        v = val_loss()
        if v < best[0] - 1e-6:
            best = (v, {k: t.data.copy() for k, t in params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                logger.info("mlp detector: validation plateau after %d epochs (best bce %.4f)", epoch + 1, best[0])
                break
    weights = best[1]
    return {
        "feature_mean": mean.astype(np.float32),
        "feature_std": std.astype(np.float32),
        **{k: v.astype(np.float32) for k, v in weights.items()},
    }


def _train_flda(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float, float]:
    nat, cg = x[y == 1], x[y == 0]
    mu_n, mu_c = nat.mean(axis=0), cg.mean(axis=0)
    sw = (nat - mu_n).T @ (nat - mu_n) + (cg - mu_c).T @ (cg - mu_c)
    diff = mu_n - mu_c
    d = sw.shape[0]
    if np.linalg.matrix_rank(sw) < d or np.linalg.cond(sw) > 1e12:
        scale = np.trace(sw) / d if np.trace(sw) > 0 else 1.0
        warnings.warn("FLDA within-class scatter is degenerate; adding ridge", RuntimeWarning, stacklevel=3)
        sw = sw + RIDGE * scale * np.eye(d)
    w = np.linalg.solve(sw, diff)
    norm = np.linalg.norm(w)
    if not np.isfinite(norm) or norm == 0.0:
        w = np.zeros(d)
        w[0] = 1.0
    else:
        w = w / norm
    w = w.astype(np.float32).astype(np.float64)
    z_n, z_c = nat @ w, cg @ w
    cut = 0.5 * (z_n.mean() + z_c.mean())

    z = np.concatenate([z_n, z_c]) - cut
    t = np.concatenate([np.ones(len(z_n)), np.zeros(len(z_c))])
    spread = z.std() if z.std() > 0 else 1.0
    u = z / spread

    def objective(a: float) -> float:
        logit = a * u
        bce = np.maximum(logit, 0) - logit * t + np.log1p(np.exp(-np.abs(logit)))
        return bce.mean() + 1e-3 * a * a

    a = minimize_scalar(objective, bounds=(0.0, 1e3), method="bounded").x
    return w.astype(np.float32), float(cut), float(a / spread)


def train_detector(
    variant: str,
    natural_images,
    cg_images,
    seed: int = 0,
    hidden: int = 32,
    max_epochs: int = 200,
    patience: int = 10,
) -> DetectorModel:
    """Fit a frozen detector on pixel images of both classes."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown detector variant {variant!r}; choose from {sorted(VARIANTS)}")
    if len(natural_images) == 0 or len(cg_images) == 0:
        raise ValueError("both corpora must be nonempty")
    x = np.concatenate([extract_batch(natural_images), extract_batch(cg_images)])
    y = np.concatenate([np.ones(len(natural_images)), np.zeros(len(cg_images))])
    return train_detector_on_features(variant, x, y, seed, hidden, max_epochs, patience)


def train_detector_on_features(
    variant: str,
    x: np.ndarray,
    y: np.ndarray,
    seed: int = 0,
    hidden: int = 32,
    max_epochs: int = 200,
    patience: int = 10,
) -> DetectorModel:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if variant == "mlp":
        return DetectorModel("mlp", _train_mlp(x, y, seed, hidden, max_epochs, patience), trained=True)
    if variant == "flda":
        w, cut, slope = _train_flda(x, y)
        return DetectorModel("flda", {"projection": w}, flda_cut=cut, flda_slope=slope, trained=True)
    raise ValueError(f"unknown detector variant {variant!r}")


# ---------------------------------------------------------------- checkpoints


def encode_detector(model: DetectorModel) -> bytes:
    model._require_trained()
    fields = {
        "threshold": model.threshold,
        "flda_cut": model.flda_cut,
        "flda_slope": model.flda_slope,
        "n_features": N_FEATURES,
        "half_width": HALF_WIDTH,
    }
    return binfmt.encode(binfmt.Container(MAGIC, fields, model.tensors, variant=VARIANTS[model.variant]))


def save_detector(model: DetectorModel, path: str | Path) -> None:
    Path(path).write_bytes(encode_detector(model))


def load_detector(path: str | Path) -> DetectorModel:
    c = binfmt.read(path, MAGIC, has_variant=True)
    names = {v: k for k, v in VARIANTS.items()}
    if c.variant not in names:
        raise ValueError(f"unknown detector variant byte {c.variant}")
    return DetectorModel(
        names[c.variant],
        dict(c.tensors),
        threshold=float(c.fields["threshold"]),
        flda_cut=float(c.fields["flda_cut"]),
        flda_slope=float(c.fields["flda_slope"]),
        trained=True,
    )
