"""H-Net: twin convolutional autoencoders bridged by a latent transformer.

Parameter groups are plain ordered dicts of name -> :class:`Tensor`. Batch
norm running statistics live in the same dicts (``*.running_mean`` /
``*.running_var``) with ``requires_grad=False`` so that checkpoints carry
them and parameter-isolation checks see them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from . import binfmt
from . import functional as F
from .errors import ArchMismatchError, DimensionError
from .tensor import Tensor, add, reshape

ParamGroup = Dict[str, Tensor]

GROUPS = ("enc_natural", "dec_natural", "enc_cg", "dec_cg", "transformer")
MAGIC = b"HNET"


@dataclass(frozen=True)
class ArchSpec:
    input_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 128)
    n_blocks: int = 5
    bottleneck_ratio: int = 4
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.input_size <= 0 or self.input_size % 8:
            raise DimensionError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if len(self.channels) != 4:
            raise ValueError(f"channel plan needs four encoder stages, got {self.channels}")
        if self.latent_channels % self.bottleneck_ratio:
            raise ValueError("latent width must be divisible by the bottleneck ratio")

    @property
    def latent_channels(self) -> int:
        return self.channels[-1]

    @property
    def latent_size(self) -> int:
        return self.input_size // 8

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_size, self.latent_size)

    def to_fields(self) -> dict:
        return {
            "input_size": self.input_size,
            "channels": list(self.channels),
            "n_blocks": self.n_blocks,
            "bottleneck_ratio": self.bottleneck_ratio,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_fields(cls, d: dict) -> "ArchSpec":
        return cls(
            input_size=int(d["input_size"]),
            channels=tuple(int(c) for c in d["channels"]),
            n_blocks=int(d["n_blocks"]),
            bottleneck_ratio=int(d["bottleneck_ratio"]),
            in_channels=int(d["in_channels"]),
        )


# ---------------------------------------------------------------- parameter layout


def _bn(prefix: str, c: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.{k}", (c,)) for k in ("gamma", "beta", "running_mean", "running_var")]


def encoder_layout(arch: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    c_in = arch.in_channels
    for i, c in enumerate(arch.channels, start=1):
        out.append((f"conv{i}.weight", (c, c_in, 3, 3)))
        out += _bn(f"bn{i}", c)
        c_in = c
    return out


def decoder_layout(arch: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    c0, c1, c2, lat = arch.channels
    return [
        ("tconv1.weight", (lat, c2, 3, 3)),
        *_bn("bn1", c2),
        ("conv2.weight", (4 * c1, c2, 3, 3)),
        *_bn("bn2", c1),
        ("conv3.weight", (4 * c0, c1, 3, 3)),
        ("conv3.bias", (4 * c0,)),
        ("conv4.weight", (arch.in_channels, c0, 3, 3)),
        ("conv4.bias", (arch.in_channels,)),
    ]


def transformer_layout(arch: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    lat = arch.latent_channels
    w = lat // arch.bottleneck_ratio
    out = []
    for b in range(arch.n_blocks):
        p = f"block{b}"
        out.append((f"{p}.reduce.weight", (w, lat, 1, 1)))
        out += _bn(f"{p}.bn1", w)
        out.append((f"{p}.conv.weight", (w, w, 3, 3)))
        out += _bn(f"{p}.bn2", w)
        out.append((f"{p}.expand.weight", (lat, w, 1, 1)))
        out += _bn(f"{p}.bn3", lat)
    return out


def group_layout(arch: ArchSpec, group: str) -> list[tuple[str, tuple[int, ...]]]:
    if group.startswith("enc_"):
        return encoder_layout(arch)
    if group.startswith("dec_"):
        return decoder_layout(arch)
    if group == "transformer":
        return transformer_layout(arch)
    raise KeyError(group)


def _is_buffer(name: str) -> bool:
    return name.endswith(("running_mean", "running_var"))


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(("gamma", "running_var")):
        return np.ones(shape, np.float32)
    if name.endswith(("beta", "running_mean", "bias")):
        return np.zeros(shape, np.float32)
    k = shape[2]
    if name.startswith("tconv"):
        fan_in = shape[0] * k * k / 4.0  # stride 2: each output sees ~a quarter of the taps
    else:
        fan_in = shape[1] * k * k
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


@dataclass
class HNetParams:
    enc_natural: ParamGroup
    dec_natural: ParamGroup
    enc_cg: ParamGroup
    dec_cg: ParamGroup
    transformer: ParamGroup
    arch: ArchSpec = field(default_factory=ArchSpec)
    format_version: int = binfmt.FORMAT_VERSION

    def group(self, name: str) -> ParamGroup:
        return getattr(self, name)

    def groups(self) -> dict[str, ParamGroup]:
        return {g: getattr(self, g) for g in GROUPS}

    def snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        """Copies of every array, for before/after comparisons."""
        return {g: {k: t.data.copy() for k, t in grp.items()} for g, grp in self.groups().items()}

    def copy(self) -> "HNetParams":
        groups = {
            g: {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name) for k, t in grp.items()}
            for g, grp in self.groups().items()
        }
        return HNetParams(**groups, arch=self.arch, format_version=self.format_version)

    def n_parameters(self) -> int:
        return sum(t.size for grp in self.groups().values() for k, t in grp.items() if not _is_buffer(k))


def trainable(group: ParamGroup) -> dict[str, Tensor]:
    return {k: t for k, t in group.items() if t.requires_grad}


def init_group(arch: ArchSpec, group: str, rng: np.random.Generator) -> ParamGroup:
    return {
        name: Tensor(_init_value(name, shape, rng), requires_grad=not _is_buffer(name), name=f"{group}.{name}")
        for name, shape in group_layout(arch, group)
    }


def init_weights(arch: ArchSpec | None = None, seed: int = 0) -> HNetParams:
    """He-normal (fan-in) convolution weights, unit/zero batch-norm affine; deterministic in ``seed``."""
    arch = arch or ArchSpec()
    rng = np.random.default_rng(seed)
    return HNetParams(**{g: init_group(arch, g, rng) for g in GROUPS}, arch=arch)


# ---------------------------------------------------------------- forward passes


def _unbatched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _restore(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


def _bn_apply(p: ParamGroup, prefix: str, x: Tensor, train: bool) -> Tensor:
    return F.batch_norm(
        x,
        p[f"{prefix}.gamma"],
        p[f"{prefix}.beta"],
        p[f"{prefix}.running_mean"],
        p[f"{prefix}.running_var"],
        train,
    )


def encode(enc: ParamGroup, image: Tensor, train: bool = False) -> Tensor:
    """Image (3,S,S) in [-1,1] -> latent (128, S/8, S/8)."""
    x, squeeze = _unbatched(image)
    c_in = enc["conv1.weight"].shape[1]
    if x.shape[1] != c_in:
        raise DimensionError(f"encode: expected {c_in} input channels, got {x.shape[1]}")
    if x.shape[2] != x.shape[3] or x.shape[2] % 8:
        raise DimensionError(f"encode: spatial size must be square and divisible by 8, got {x.shape[2:]}")
    for i in range(1, 5):
        x = F.conv2d(x, enc[f"conv{i}.weight"], None, stride=1, padding=1)
        x = F.elu(_bn_apply(enc, f"bn{i}", x, train))
        if i < 4:
            x = F.avg_pool2(x)
    return _restore(x, squeeze)


def decode(dec: ParamGroup, latent: Tensor, train: bool = False) -> Tensor:
    """Latent (128, s, s) -> image (3, 8s, 8s), linear (unsquashed) output."""
    z, squeeze = _unbatched(latent)
    lat = dec["tconv1.weight"].shape[0]
    if z.shape[1] != lat or z.shape[2] != z.shape[3]:
        raise DimensionError(f"decode: expected latent ({lat}, s, s), got {z.shape[1:]}")
    x = F.conv2d_transpose(z, dec["tconv1.weight"], None, stride=2, padding=1)
    x = F.elu(_bn_apply(dec, "bn1", x, train))
    x = F.pixel_shuffle(F.conv2d(x, dec["conv2.weight"], None, padding=1), 2)
    x = F.elu(_bn_apply(dec, "bn2", x, train))
    x = F.pixel_shuffle(F.conv2d(x, dec["conv3.weight"], dec["conv3.bias"], padding=1), 2)
    x = F.elu(x)
    x = F.conv2d(x, dec["conv4.weight"], dec["conv4.bias"], padding=1)
    return _restore(x, squeeze)


def bottleneck_block(t: ParamGroup, b: int, z: Tensor, train: bool) -> Tensor:
    p = f"block{b}"
    h = F.elu(_bn_apply(t, f"{p}.bn1", F.conv2d(z, t[f"{p}.reduce.weight"]), train))
    h = F.elu(_bn_apply(t, f"{p}.bn2", F.conv2d(h, t[f"{p}.conv.weight"], padding=1), train))
    h = _bn_apply(t, f"{p}.bn3", F.conv2d(h, t[f"{p}.expand.weight"]), train)
    return add(z, h)


def transform_latent(t: ParamGroup, latent: Tensor, train: bool = False) -> Tensor:
    z, squeeze = _unbatched(latent)
    lat = t["block0.reduce.weight"].shape[1]
    if z.shape[1] != lat:
        raise DimensionError(f"transform_latent: expected {lat} channels, got {z.shape[1]}")
    n_blocks = sum(1 for k in t if k.endswith(".reduce.weight"))
    for b in range(n_blocks):
        z = bottleneck_block(t, b, z, train)
    return _restore(z, squeeze)


def natural_autoencoder(params: HNetParams, image: Tensor, train: bool = False) -> Tensor:
    return decode(params.dec_natural, encode(params.enc_natural, image, train), train)


def cg_autoencoder(params: HNetParams, image: Tensor, train: bool = False) -> Tensor:
    return decode(params.dec_cg, encode(params.enc_cg, image, train), train)


def forward_transform_path(
    params: HNetParams, image_cg: Tensor, train: bool = False, train_groups: tuple[str, ...] | None = None
) -> Tensor:
    """CG encoder -> transformer -> natural decoder; raw output, no clamp.

    ``train_groups`` selects which groups run batch norm in train mode (all of
    them when ``train`` is true and it is None).
    """
    def mode(g: str) -> bool:
        return train if train_groups is None else g in train_groups

    z = encode(params.enc_cg, image_cg, mode("enc_cg"))
    z = transform_latent(params.transformer, z, mode("transformer"))
    return decode(params.dec_natural, z, mode("dec_natural"))


def set_identity_transformer(params: HNetParams) -> None:
    """Zero every residual branch so the transformer is exactly the identity."""
    for k, t in params.transformer.items():
        if ".bn3." in k and k.endswith(("gamma", "beta")):
            t.data = np.zeros_like(t.data)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: HNetParams, path: str | Path) -> None:
    tensors = {f"{g}.{k}": t.data for g, grp in params.groups().items() for k, t in grp.items()}
    binfmt.write(path, binfmt.Container(MAGIC, params.arch.to_fields(), tensors, params.format_version))


def load_checkpoint(path: str | Path, expected_arch: ArchSpec | None = None) -> HNetParams:
    c = binfmt.read(path, MAGIC)
    arch = ArchSpec.from_fields(c.fields)
    if expected_arch is not None and arch != expected_arch:
        raise ArchMismatchError(f"checkpoint architecture {arch} does not match run architecture {expected_arch}")
    groups: dict[str, ParamGroup] = {}
    for g in GROUPS:
        grp = {}
        for name, shape in group_layout(arch, g):
            key = f"{g}.{name}"
            if key not in c.tensors:
                raise ArchMismatchError(f"checkpoint lacks tensor {key}")
            data = c.tensors[key]
            if data.shape != shape:
                raise ArchMismatchError(f"{key}: shape {data.shape} != {shape}")
            grp[name] = Tensor(data.copy(), requires_grad=not _is_buffer(name), name=key)
        groups[g] = grp
    return HNetParams(**groups, arch=arch, format_version=c.version)
