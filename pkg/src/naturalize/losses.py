"""Reconstruction, perceptual and adversarial losses, and the black-box gradient rescaling.

The detector used for the adversarial term exposes no gradients. Its loss
enters training only through :func:`blackbox_scaled_gradient`, which
rescales the perceptual-loss gradient by ``L_total / L_perceptual``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import binfmt
from . import functional as F
from .errors import DimensionError
from .tensor import Tensor

PNET_MAGIC = b"PNET"
PNET_CHANNELS = (3, 16, 32, 64, 64)
SCORE_CLAMP = 1e-7
LVGG_FLOOR = 1e-8

mse_loss = F.mse_loss


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5e-3

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


class PerceptualNet:
    """Fixed feature extractor: four conv3x3 / stride 2 / ELU stages, 3->16->32->64->64.

    Stands in for the VGG-19 features of the original method. Weights come
    from a seeded He init or from a ``PNET`` weight file; nothing here is
    ever handed to an optimizer.
    """

    def __init__(self, weights: Mapping[str, np.ndarray]):
        self._weights = {k: Tensor(np.array(v, copy=True)) for k, v in weights.items()}
        for i in range(1, len(PNET_CHANNELS)):
            w = self._weights[f"conv{i}.weight"]
            expected = (PNET_CHANNELS[i], PNET_CHANNELS[i - 1], 3, 3)
            if w.shape != expected:
                raise DimensionError(f"perceptual conv{i}.weight has shape {w.shape}, expected {expected}")

    @classmethod
    def seeded(cls, seed: int = 1234) -> "PerceptualNet":
        rng = np.random.default_rng(seed)
        weights = {}
        for i in range(1, len(PNET_CHANNELS)):
            c_in, c_out = PNET_CHANNELS[i - 1], PNET_CHANNELS[i]
            weights[f"conv{i}.weight"] = (rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))).astype(
                np.float32
            )
            weights[f"conv{i}.bias"] = np.zeros(c_out, np.float32)
        return cls(weights)

    @classmethod
    def load(cls, path: str | Path) -> "PerceptualNet":
        return cls(binfmt.read(path, PNET_MAGIC).tensors)

    def save(self, path: str | Path) -> None:
        binfmt.write(path, binfmt.Container(PNET_MAGIC, {"channels": list(PNET_CHANNELS)}, self.weights()))

    def weights(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._weights.items()}

    def astype(self, dtype) -> "PerceptualNet":
        return PerceptualNet({k: t.data.astype(dtype) for k, t in self._weights.items()})

    def feature_maps(self, image: Tensor) -> list[Tensor]:
        """Output of every stage, shallowest first."""
        maps = []
        x = image
        for i in range(1, len(PNET_CHANNELS)):
            w = self._weights[f"conv{i}.weight"]
            b = self._weights.get(f"conv{i}.bias")
            x = F.elu(F.conv2d(x, w, b, stride=2, padding=1))
            maps.append(x)
        return maps

    def features(self, image: Tensor) -> Tensor:
        return self.feature_maps(image)[-1]


def perceptual_loss(net: PerceptualNet, img1: Tensor, img2: Tensor) -> Tensor:
    """Mean feature-map MSE over five levels: the image itself and the four stages.

    The deepest stage alone (64 x S/16 x S/16 values) of a random-weight net
    leaves a large null space, and training against it converges to
    high-frequency noise. The shallower levels close that null space.
    """
    if img1.shape != img2.shape:
        raise DimensionError(f"perceptual_loss: image shapes differ {img1.shape} vs {img2.shape}")
    total = None
    maps1, maps2 = [img1] + net.feature_maps(img1), [img2] + net.feature_maps(img2)
    for a, b in zip(maps1, maps2):
        term = F.mse_loss(a, b)
        total = term if total is None else total + term
    return total * (1.0 / len(maps1))


def adversarial_loss(score, target: float = 1.0) -> float:
    """Binary cross entropy of detector score(s) against the target label, averaged.

    ``score`` is a plain probability (or array of them) from a black-box
    detector; the result carries no gradient.
    """
    s = np.clip(np.asarray(score, dtype=np.float64), SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    t = float(target)
    return float(np.mean(-(t * np.log(s) + (1.0 - t) * np.log1p(-s))))


def total_loss(l_vgg: float, l_adv: float, w: LossWeights | float) -> float:
    alpha = w.alpha if isinstance(w, LossWeights) else float(w)
    return (1.0 - alpha) * l_vgg + alpha * l_adv


def gradient_scale(l_vgg: float, l_adv: float, w: LossWeights | float) -> float:
    """((1-alpha) L_vgg + alpha L_adv) / L_vgg, or 1.0 below the L_vgg floor."""
    if l_vgg < LVGG_FLOOR:
        return 1.0
    return total_loss(l_vgg, l_adv, w) / l_vgg


def blackbox_scaled_gradient(
    l_vgg: float,
    l_adv: float,
    grads: Mapping[str, np.ndarray],
    w: LossWeights | float,
) -> dict[str, np.ndarray]:
    """Approximate d(L_total)/d(theta) from the perceptual gradient alone.

    Returns a new mapping with every gradient multiplied by
    ``((1-alpha) L_vgg + alpha L_adv) / L_vgg``. When ``L_vgg`` is below
    1e-8 the ratio is singular; the gradients are returned unscaled with a
    warning.
    """
    if l_vgg < LVGG_FLOOR:
        warnings.warn(
            f"perceptual loss {l_vgg:.3g} below floor {LVGG_FLOOR}; adversarial scaling skipped",
            RuntimeWarning,
            stacklevel=2,
        )
        return {k: g for k, g in grads.items()}
    scale = total_loss(l_vgg, l_adv, w) / l_vgg
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
