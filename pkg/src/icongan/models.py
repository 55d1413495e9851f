"""Conditional style-based generator and the two discriminators.

* ``Generator``: one-hot (app, theme) -> linear label projection, joined
  with z, mapped to a style vector w that modulates a small StyleGAN2-like
  synthesis stack. Output is RGBA through tanh.
* ``AppDiscriminator``: residual encoder -> global feature f, scored with
  an unconditional head plus the projection term <v_app, f>.
* ``ThemeDiscriminator``: fully convolutional residual encoder whose
  output cells see roughly a third of the image side; a g x g grid of
  those cells forms the patch features.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig
from .data import ConditionPair

LRELU_SLOPE = 0.2


class EqualizedLinear(nn.Module):
    """Linear layer with runtime He scaling (equalized learning rate)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 bias_init: float = 0.0, lr_mul: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init))) if bias else None
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul

    def forward(self, x):
        b = self.bias * self.lr_mul if self.bias is not None else None
        return F.linear(x, self.weight * self.scale, b)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, bias: bool = True, padding: int | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class ModulatedConv2d(nn.Module):
    """Style-modulated convolution, optionally demodulated."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, w_dim: int, demodulate: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.affine = EqualizedLinear(w_dim, in_ch, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.demodulate = demodulate
        self.padding = kernel // 2

    def forward(self, x, w):
        n, c, h, wd = x.shape
        s = self.affine(w)
        weight = self.weight[None] * self.scale * s[:, None, :, None, None]
        if self.demodulate:
            weight = weight * torch.rsqrt(weight.pow(2).sum((2, 3, 4), keepdim=True) + 1e-8)
        weight = weight.reshape(-1, c, *weight.shape[3:])
        out = F.conv2d(x.reshape(1, n * c, h, wd), weight, padding=self.padding, groups=n)
        return out.reshape(n, -1, h, wd)


class StyleLayer(nn.Module):
    def __init__(self, in_ch, out_ch, w_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, w_dim)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, w):
        return F.leaky_relu(self.conv(x, w) + self.bias[None, :, None, None], LRELU_SLOPE)


class ToRGBA(nn.Module):
    def __init__(self, in_ch, w_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, 4, 1, w_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(4))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias[None, :, None, None]


def _widths(resolution: int, base: int, cap: int) -> dict[int, int]:
    return {2 ** k: min(cap, base * resolution // 2 ** k)
            for k in range(2, int(math.log2(resolution)) + 1)}


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.num_apps, self.num_themes = cfg.num_apps, cfg.num_themes
        self.z_dim = cfg.z_dim
        self.label_projection = EqualizedLinear(cfg.num_apps + cfg.num_themes, cfg.embed_dim)
        layers = []
        dim = cfg.z_dim + cfg.embed_dim
        for _ in range(cfg.mapping_layers):
            layers.append(EqualizedLinear(dim, cfg.w_dim, lr_mul=0.01))
            dim = cfg.w_dim
        self.mapping = nn.ModuleList(layers)

        widths = _widths(cfg.resolution, cfg.base_width, cfg.max_width)
        self.const = nn.Parameter(torch.randn(1, widths[4], 4, 4))
        self.layers = nn.ModuleList([StyleLayer(widths[4], widths[4], cfg.w_dim)])
        self.to_rgba = nn.ModuleList([ToRGBA(widths[4], cfg.w_dim)])
        res = 8
        while res <= cfg.resolution:
            self.layers.append(StyleLayer(widths[res // 2], widths[res], cfg.w_dim))
            self.layers.append(StyleLayer(widths[res], widths[res], cfg.w_dim))
            self.to_rgba.append(ToRGBA(widths[res], cfg.w_dim))
            res *= 2

    def check_labels(self, app_ids: torch.Tensor, theme_ids: torch.Tensor) -> None:
        _check_ids(app_ids, self.num_apps, "app")
        _check_ids(theme_ids, self.num_themes, "theme")

    def condition(self, app_ids, theme_ids, dtype) -> torch.Tensor:
        onehot = torch.cat([F.one_hot(app_ids, self.num_apps), F.one_hot(theme_ids, self.num_themes)], 1)
        return self.label_projection(onehot.to(dtype))

    def mapping_forward(self, z, app_ids, theme_ids) -> torch.Tensor:
        c = self.condition(app_ids, theme_ids, z.dtype)
        # both inputs normalized to unit second moment before joining
        x = torch.cat([_pixel_norm(z), _pixel_norm(c)], 1)
        for layer in self.mapping:
            x = F.leaky_relu(layer(x), LRELU_SLOPE)
        return x

    def forward(self, z, app_ids, theme_ids):
        self.check_labels(app_ids, theme_ids)
        w = self.mapping_forward(z, app_ids, theme_ids)
        x = self.const.expand(z.shape[0], -1, -1, -1)
        x = self.layers[0](x, w)
        rgba = self.to_rgba[0](x, w)
        for i, to_rgba in enumerate(self.to_rgba[1:]):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.layers[2 * i + 1](x, w)
            x = self.layers[2 * i + 2](x, w)
            rgba = F.interpolate(rgba, scale_factor=2, mode="bilinear", align_corners=False) + to_rgba(x, w)
        return torch.tanh(rgba)


def _pixel_norm(x):
    return x * torch.rsqrt(x.pow(2).mean(1, keepdim=True) + 1e-8)


def _check_ids(ids: torch.Tensor, n: int, what: str) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= n):
        raise ValueError(f"{what} id out of range [0, {n})")


class ResBlock(nn.Module):
    """conv3-lrelu-conv3-lrelu-avgpool with a pooled 1x1 skip."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_ch, in_ch, 3)
        self.conv2 = EqualizedConv2d(in_ch, out_ch, 3)
        self.skip = EqualizedConv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), LRELU_SLOPE)
        y = F.avg_pool2d(F.leaky_relu(self.conv2(y), LRELU_SLOPE), 2)
        s = self.skip(F.avg_pool2d(x, 2))
        return (y + s) / math.sqrt(2)


class AppDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_classes = cfg.num_apps
        widths = _widths(cfg.resolution, cfg.d_base_width, cfg.d_max_width)
        self.from_rgba = EqualizedConv2d(4, widths[cfg.resolution], 1)
        blocks = []
        res = cfg.resolution
        while res > 4:
            blocks.append(ResBlock(widths[res], widths[res // 2]))
            res //= 2
        self.blocks = nn.Sequential(*blocks)
        self.final_conv = EqualizedConv2d(widths[4], widths[4], 3)
        self.fc = EqualizedLinear(widths[4] * 16, cfg.app_feature_dim)
        self.unconditional_head = EqualizedLinear(cfg.app_feature_dim, 1) if cfg.use_unconditional_head else None
        self.class_embedding = nn.Embedding(cfg.num_apps, cfg.app_feature_dim)
        nn.init.normal_(self.class_embedding.weight, std=1.0 / math.sqrt(cfg.app_feature_dim))

    def features(self, x):
        x = F.leaky_relu(self.from_rgba(x), LRELU_SLOPE)
        x = self.blocks(x)
        x = F.leaky_relu(self.final_conv(x), LRELU_SLOPE)
        return self.fc(x.flatten(1))

    def forward(self, x, app_ids):
        _check_ids(app_ids, self.num_classes, "app")
        f = self.features(x)
        logit = (self.class_embedding(app_ids) * f).sum(1)
        if self.unconditional_head is not None:
            logit = logit + self.unconditional_head(f)[:, 0]
        return logit, f


@dataclass
class PatchFeatureGrid:
    """``cells`` is ``(N, g, g, D)``; the center cell is ``((g-1)/2, (g-1)/2)``."""

    cells: torch.Tensor

    @property
    def side(self) -> int:
        return self.cells.shape[1]

    @property
    def M(self) -> int:
        return self.side ** 2

    @property
    def flat(self) -> torch.Tensor:
        return self.cells.flatten(1, 2)

    @property
    def center(self) -> torch.Tensor:
        c = (self.side - 1) // 2
        return self.cells[:, c, c]


class ThemeDiscriminator(nn.Module):
    """Patch encoder: ``log2(R) - 4`` downsampling residual blocks bring any
    resolution to a 16 x 16 map, a 2 x 2 valid conv makes it 15 x 15 so a
    true center cell exists; g x g cells are picked at evenly spaced
    (symmetric) positions."""

    MAP_SIDE = 15

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_classes = cfg.num_themes
        self.grid_side = cfg.grid_side
        if cfg.grid_side > self.MAP_SIDE:
            raise ConfigError(f"grid_side must be <= {self.MAP_SIDE}")
        n_down = int(math.log2(cfg.resolution)) - 4
        widths = [min(cfg.d_max_width, cfg.d_base_width * 2 ** k) for k in range(n_down + 1)]
        self.from_rgba = EqualizedConv2d(4, widths[0], 1)
        self.blocks = nn.Sequential(*[ResBlock(widths[k], widths[k + 1]) for k in range(n_down)])
        self.patch_conv = EqualizedConv2d(widths[-1], widths[-1], 2, padding=0)
        self.out = EqualizedConv2d(widths[-1], cfg.patch_feature_dim, 1)
        self.theme_embedding = nn.Embedding(cfg.num_themes, cfg.patch_feature_dim)
        nn.init.normal_(self.theme_embedding.weight, std=1.0 / math.sqrt(cfg.patch_feature_dim))
        idx = np.rint(np.linspace(0, self.MAP_SIDE - 1, cfg.grid_side)).astype(np.int64)
        self.register_buffer("grid_index", torch.from_numpy(idx), persistent=False)
        self.stride = cfg.resolution // 16

    def patch_map(self, x):
        """Dense ``(N, D, 15, 15)`` map of patch features."""
        x = F.leaky_relu(self.from_rgba(x), LRELU_SLOPE)
        x = self.blocks(x)
        x = F.leaky_relu(self.patch_conv(x), LRELU_SLOPE)
        return self.out(x)

    def forward(self, x, theme_ids):
        _check_ids(theme_ids, self.num_classes, "theme")
        dense = self.patch_map(x)
        idx = self.grid_index
        cells = dense[:, :, idx][:, :, :, idx].permute(0, 2, 3, 1)
        return PatchFeatureGrid(cells), self.theme_embedding(theme_ids)


def receptive_field(resolution: int) -> int:
    """Receptive field (pixels) of one theme-discriminator cell."""
    r, j = 1, 1
    for _ in range(int(math.log2(resolution)) - 4):
        r += 2 * j + 2 * j + j  # conv3, conv3, pool2
        j *= 2
    return r + j  # 2x2 patch conv


def init_params(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32):
    """Deterministically build (G, D_app, D_thm) from ``seed``."""
    if cfg.grid_side < 3 or cfg.grid_side % 2 == 0:
        raise ConfigError("grid_side must be odd and >= 3")
    if cfg.resolution < 32 or cfg.resolution & (cfg.resolution - 1):
        raise ConfigError("resolution must be a power of two >= 32")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        g = Generator(cfg).to(dtype)
        d_app = AppDiscriminator(cfg).to(dtype)
        d_thm = ThemeDiscriminator(cfg).to(dtype)
    return g, d_app, d_thm


def param_count(*modules: nn.Module) -> int:
    return sum(p.numel() for m in modules for p in m.parameters())


def generate(z: torch.Tensor, condition: ConditionPair, g: Generator) -> torch.Tensor:
    """Single icon ``(4, R, R)`` for latent ``z`` and one condition pair."""
    if not torch.isfinite(z).all():
        raise ValueError("latent code must be finite")
    app = torch.tensor([condition.app_id])
    thm = torch.tensor([condition.theme_id])
    return g(z.reshape(1, -1).to(g.const.dtype), app, thm)[0]


def app_discriminate(image: torch.Tensor, app_id: int, d: AppDiscriminator):
    logit, f = d(image[None], torch.tensor([app_id]))
    return logit[0], f[0]


def theme_discriminate(image: torch.Tensor, theme_id: int, d: ThemeDiscriminator):
    grid, v = d(image[None], torch.tensor([theme_id]))
    return PatchFeatureGrid(grid.cells), v[0]


def copy_module(m: nn.Module) -> nn.Module:
    return copy.deepcopy(m).requires_grad_(False)
