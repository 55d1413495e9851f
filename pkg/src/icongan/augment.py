"""Orthogonal augmentations for the two discriminators.

Theme branch: x-flip and quarter-turn rotation (geometry only, colors kept).
App branch: central scaling and per-channel RGB gain/bias (layout kept).
Both branches are applied to real and generated images with the same law.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import AugmentConfig

KINDS = ("theme", "app")
IDENTITY_GAIN = (1.0, 1.0, 1.0)
IDENTITY_BIAS = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AugmentParams:
    kind: str
    flip: bool = False
    rotation_quarter_turns: int = 0
    scale: float = 1.0
    gain: tuple[float, float, float] = IDENTITY_GAIN
    bias: tuple[float, float, float] = IDENTITY_BIAS

    @property
    def color_shift(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        return self.gain, self.bias


def sample_augment(kind: str, rng: np.random.Generator,
                   cfg: AugmentConfig | None = None) -> AugmentParams:
    return sample_augment_batch(kind, 1, rng, cfg)[0]


def sample_augment_batch(kind: str, n: int, rng: np.random.Generator,
                         cfg: AugmentConfig | None = None) -> list[AugmentParams]:
    """Independent parameters for ``n`` images."""
    cfg = cfg or AugmentConfig()
    if kind == "theme":
        flips = rng.random(n) < cfg.flip_prob
        rots = rng.integers(0, 4, size=n)
        return [AugmentParams("theme", flip=bool(f), rotation_quarter_turns=int(r))
                for f, r in zip(flips, rots)]
    if kind == "app":
        scales = np.exp(rng.uniform(np.log(cfg.scale_min), np.log(cfg.scale_max), size=n))
        gains = rng.uniform(cfg.gain_min, cfg.gain_max, size=(n, 3))
        biases = rng.uniform(-cfg.bias_max, cfg.bias_max, size=(n, 3))
        return [AugmentParams("app", scale=float(s), gain=tuple(map(float, g)), bias=tuple(map(float, b)))
                for s, g, b in zip(scales, gains, biases)]
    raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")


def _geometric(images: torch.Tensor, flip: bool, turns: int) -> torch.Tensor:
    if flip:
        images = torch.flip(images, dims=(-1,))
    if turns % 4:
        images = torch.rot90(images, turns % 4, dims=(-2, -1))
    return images


def _scale(images: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """Bilinear zoom about the image center; uncovered area is transparent."""
    n = images.shape[0]
    theta = torch.zeros(n, 2, 3, dtype=images.dtype)
    theta[:, 0, 0] = 1.0 / scales
    theta[:, 1, 1] = 1.0 / scales
    grid = F.affine_grid(theta, list(images.shape), align_corners=False)
    # resample in [0, 1] so zero padding means fully transparent black
    out = F.grid_sample((images + 1) * 0.5, grid, mode="bilinear", padding_mode="zeros",
                        align_corners=False)
    return out * 2 - 1


def _color(images: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    rgb = (images[:, :3] * gain[:, :, None, None] + bias[:, :, None, None]).clamp(-1, 1)
    return torch.cat([rgb, images[:, 3:]], 1)


def augment_batch(images: torch.Tensor, params: list[AugmentParams]) -> torch.Tensor:
    """Apply per-image params to an ``(N, 4, H, W)`` batch; differentiable."""
    if len(params) != images.shape[0]:
        raise ValueError("one AugmentParams per image required")
    if not params:
        return images
    kind = params[0].kind
    if any(p.kind != kind for p in params):
        raise ValueError("mixed augmentation kinds in one batch")
    if kind == "theme":
        if images.shape[-1] != images.shape[-2]:
            raise ValueError("rotation needs square images")
        keys = [(p.flip, p.rotation_quarter_turns % 4) for p in params]
        if all(k == (False, 0) for k in keys):
            return images
        out = [None] * len(params)
        for key in sorted(set(keys)):
            idx = [i for i, k in enumerate(keys) if k == key]
            moved = _geometric(images[idx], *key)
            for j, i in enumerate(idx):
                out[i] = moved[j]
        return torch.stack(out)
    scales = torch.tensor([p.scale for p in params], dtype=images.dtype)
    gain = torch.tensor([p.gain for p in params], dtype=images.dtype)
    bias = torch.tensor([p.bias for p in params], dtype=images.dtype)
    out = images
    if bool((scales != 1).any()):
        out = _scale(out, scales)
    if bool((gain != 1).any() or (bias != 0).any()):
        out = _color(out, gain, bias)
    return out


def apply_augment(image: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    """Single ``(4, H, W)`` image version of :func:`augment_batch`."""
    if image.dim() != 3 or image.shape[0] != 4:
        raise ValueError("expected an RGBA image of shape (4, H, W)")
    return augment_batch(image[None], [params])[0]


def params_to_array(params: list[AugmentParams]) -> np.ndarray:
    """Flatten params to rows of (flip, turns, scale, g_r, g_g, g_b, b_r, b_g, b_b)."""
    return np.array([[p.flip, p.rotation_quarter_turns, p.scale, *p.gain, *p.bias] for p in params],
                    dtype=np.float64)
