"""Orthogonal-label icon data: synthesis, manifest I/O, batch sampling and
label grouping for the contrastive terms.

A dataset is a grid of (app, theme) cells holding at most one icon each.
The app decides *what* is drawn (a glyph), the theme decides *how* it is
drawn (palette, stroke, fill, background plate).
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .losses import CFDGroups

STYLES = ("flat", "streak", "hand_drawn")
GLYPHS = ("circle", "square", "triangle", "star", "cross", "ring", "diamond", "bars")
BACKGROUNDS = ("none", "circle", "rounded_square", "square")
MANIFEST_NAME = "manifest.jsonl"
SUPERSAMPLE = 4


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionPair:
    app_id: int
    theme_id: int
    num_apps: int
    num_themes: int

    def __post_init__(self):
        if not 0 <= self.app_id < self.num_apps:
            raise ValueError(f"app_id {self.app_id} outside [0, {self.num_apps})")
        if not 0 <= self.theme_id < self.num_themes:
            raise ValueError(f"theme_id {self.theme_id} outside [0, {self.num_themes})")

    @property
    def onehot_app(self) -> np.ndarray:
        v = np.zeros(self.num_apps, dtype=np.float32)
        v[self.app_id] = 1
        return v

    @property
    def onehot_theme(self) -> np.ndarray:
        v = np.zeros(self.num_themes, dtype=np.float32)
        v[self.theme_id] = 1
        return v


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    app_id: int
    theme_id: int
    style_tag: str


@dataclass(frozen=True)
class LabeledIcon:
    image: torch.Tensor
    app_id: int
    theme_id: int
    style_tag: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    num_apps: int
    num_themes: int
    resolution: int
    root: Path = Path(".")
    # uint8 RGBA, N x 4 x R x R, filled by load_manifest / synthesize_dataset
    pixels: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def A(self) -> int:
        return self.num_apps

    @property
    def T(self) -> int:
        return self.num_themes

    def pairs(self) -> list[tuple[int, int]]:
        return [(r.app_id, r.theme_id) for r in self.records]

    def theme_styles(self) -> dict[int, str]:
        return {r.theme_id: r.style_tag for r in self.records}

    def app_ids(self) -> np.ndarray:
        return np.array([r.app_id for r in self.records], dtype=np.int64)

    def theme_ids(self) -> np.ndarray:
        return np.array([r.theme_id for r in self.records], dtype=np.int64)

    def images(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        if self.pixels is None:
            self.pixels = _read_pixels(self.root, self.records, self.resolution)
        return to_float(self.pixels, dtype)

    def icons(self) -> Iterator[LabeledIcon]:
        imgs = self.images()
        for rec, img in zip(self.records, imgs):
            yield LabeledIcon(img, rec.app_id, rec.theme_id, rec.style_tag)

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        pixels = None if self.pixels is None else self.pixels[np.asarray(indices, dtype=np.int64)]
        return DatasetManifest([self.records[i] for i in indices], self.num_apps,
                               self.num_themes, self.resolution, self.root, pixels)

    def without_pairs(self, drop: set[tuple[int, int]]) -> "DatasetManifest":
        keep = [i for i, p in enumerate(self.pairs()) if p not in drop]
        return self.subset(keep)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        lines = [json.dumps({"A": self.num_apps, "T": self.num_themes,
                             "resolution": self.resolution})]
        lines += [json.dumps({"path": r.path, "app_id": r.app_id, "theme_id": r.theme_id,
                              "style_tag": r.style_tag}) for r in self.records]
        path.write_text("\n".join(lines) + "\n")
        return path


def to_float(pixels: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Map 8-bit RGBA linearly onto [-1, 1]."""
    return torch.from_numpy(pixels).to(dtype) / 127.5 - 1.0


def to_uint8(images: torch.Tensor) -> np.ndarray:
    x = ((images.detach().double().clamp(-1, 1) + 1.0) * 127.5).round()
    return x.to(torch.uint8).cpu().numpy()


def save_png(image: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(to_uint8(image).transpose(1, 2, 0), "RGBA").save(path)


def _read_pixels(root: Path, records: Sequence[ManifestRecord], resolution: int) -> np.ndarray:
    out = np.empty((len(records), 4, resolution, resolution), dtype=np.uint8)
    for i, rec in enumerate(records):
        path = root / rec.path
        if not path.is_file():
            raise ManifestError(f"missing image file: {path}")
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGBA"))
        except Exception as e:  # PIL raises a zoo of types on bad data
            raise ManifestError(f"cannot decode image file: {path} ({e})") from None
        if arr.shape[:2] != (resolution, resolution):
            raise ManifestError(f"{path}: expected {resolution}x{resolution}, got "
                                f"{arr.shape[1]}x{arr.shape[0]}")
        out[i] = arr.transpose(2, 0, 1)
    return out


# --------------------------------------------------------------------------
# synthesis

@dataclass(frozen=True)
class ThemeBundle:
    style_tag: str
    background: str
    corner_radius: float
    bg_color: tuple[int, int, int]
    fg_color: tuple[int, int, int]
    stroke: float
    filled: bool


def _hsv(h: float, s: float, v: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(h % 1.0, s, v)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def theme_bundle(theme_id: int, themes: int, seed: int) -> ThemeBundle:
    rng = np.random.default_rng([seed, 7, theme_id])
    style = STYLES[theme_id % 3]
    background = BACKGROUNDS[(theme_id // 3) % len(BACKGROUNDS)]
    # hues are evenly spaced so no two themes share a palette
    hue = theme_id / themes + (seed % 97) / 97.0
    bg = _hsv(hue, rng.uniform(0.55, 0.8), rng.uniform(0.75, 0.95))
    if background == "none":
        fg = _hsv(hue, 0.85, 0.7)
    elif style == "flat":
        fg = (250, 250, 250)
    else:
        fg = _hsv(hue + 0.5, 0.25, 0.15 + 0.1 * (theme_id % 2))
    return ThemeBundle(
        style_tag=style,
        background=background,
        corner_radius=float(rng.uniform(0.12, 0.3)),
        bg_color=bg,
        fg_color=fg,
        stroke=float(rng.uniform(0.05, 0.08)),
        filled=style == "flat",
    )


def _circle(cx, cy, r, n=48):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([cx + r * np.cos(a), cy + r * np.sin(a)], 1)


def glyph_shapes(app_id: int) -> list[tuple[np.ndarray, bool]]:
    """Closed polygons in unit coordinates [-1, 1]; flag marks holes."""
    kind = GLYPHS[app_id % len(GLYPHS)]
    if kind == "circle":
        shapes = [(_circle(0, 0, 0.9), False)]
    elif kind == "square":
        shapes = [(np.array([[-0.8, -0.8], [0.8, -0.8], [0.8, 0.8], [-0.8, 0.8]]), False)]
    elif kind == "triangle":
        shapes = [(np.array([[0, -0.95], [0.95, 0.75], [-0.95, 0.75]]), False)]
    elif kind == "star":
        a = np.arange(10) * np.pi / 5 - np.pi / 2
        r = np.where(np.arange(10) % 2 == 0, 1.0, 0.42)
        shapes = [(np.stack([r * np.cos(a), r * np.sin(a)], 1), False)]
    elif kind == "cross":
        w = 0.32
        shapes = [(np.array([[-w, -0.95], [w, -0.95], [w, -w], [0.95, -w], [0.95, w], [w, w],
                             [w, 0.95], [-w, 0.95], [-w, w], [-0.95, w], [-0.95, -w],
                             [-w, -w]]), False)]
    elif kind == "ring":
        shapes = [(_circle(0, 0, 0.95), False), (_circle(0, 0, 0.55), True)]
    elif kind == "diamond":
        shapes = [(np.array([[0, -1.0], [0.6, 0], [0, 1.0], [-0.6, 0]]), False)]
    else:  # bars
        shapes = []
        for x0, h in ((-0.9, 0.8), (-0.25, 1.4), (0.4, 1.9)):
            y1 = 0.95
            shapes.append((np.array([[x0, y1 - h], [x0 + 0.5, y1 - h], [x0 + 0.5, y1],
                                     [x0, y1]]), False))
    # apps beyond the first glyph cycle get satellite dots
    for k in range(app_id // len(GLYPHS)):
        shapes.append((_circle(-0.85 + 0.4 * k, -1.25, 0.14, n=16), False))
    return shapes


def render_icon(app_id: int, theme_id: int, themes: int, resolution: int, seed: int) -> Image.Image:
    bundle = theme_bundle(theme_id, themes, seed)
    rng = np.random.default_rng([seed, 11, app_id, theme_id])
    size = resolution * SUPERSAMPLE
    img = Image.new("RGBA", (size, size), (0, 0, 0, 0))
    draw = ImageDraw.Draw(img)
    pad = 0.06 * size
    box = [pad, pad, size - pad, size - pad]
    if bundle.background == "circle":
        draw.ellipse(box, fill=bundle.bg_color + (255,))
    elif bundle.background == "rounded_square":
        draw.rounded_rectangle(box, radius=bundle.corner_radius * size, fill=bundle.bg_color + (255,))
    elif bundle.background == "square":
        draw.rectangle(box, fill=bundle.bg_color + (255,))

    mask = Image.new("L", (size, size), 0)
    mdraw = ImageDraw.Draw(mask)
    half = size / 2
    scale = 0.27 * size
    stroke = max(1, int(round(bundle.stroke * size)))
    for poly, hole in glyph_shapes(app_id):
        pts = poly.copy()
        if bundle.style_tag == "hand_drawn":
            pts = _densify(pts, 6) + rng.normal(0, 0.035, size=(len(pts) * 6, 2))
        xy = [tuple(p) for p in (pts * scale + half)]
        if bundle.filled:
            mdraw.polygon(xy, fill=0 if hole else 255)
        else:
            mdraw.line(xy + [xy[0]], fill=255, width=stroke, joint="curve")
    img.paste(Image.new("RGBA", (size, size), bundle.fg_color + (255,)), (0, 0), mask)
    return img.resize((resolution, resolution), Image.LANCZOS)


def _densify(poly: np.ndarray, k: int) -> np.ndarray:
    nxt = np.roll(poly, -1, axis=0)
    t = np.arange(k)[None, :, None] / k
    return (poly[:, None] * (1 - t) + nxt[:, None] * t).reshape(-1, 2)


def _choose_cells(apps: int, themes: int, dropout: float, rng: np.random.Generator) -> np.ndarray:
    total = apps * themes
    keep = math.ceil(round(total * (1.0 - dropout), 9))
    while True:
        cells = np.sort(rng.choice(total, size=keep, replace=False))
        a, t = cells // themes, cells % themes
        if len(np.unique(a)) == apps and len(np.unique(t)) == themes:
            return cells


def synthesize_dataset(apps: int, themes: int, resolution: int, dropout: float, seed: int,
                       out_dir: str | Path) -> DatasetManifest:
    """Render an apps x themes icon grid, drop a fraction of cells and write
    PNGs plus ``manifest.jsonl`` under ``out_dir``."""
    if apps < 2 or themes < 2:
        raise ValueError("need apps >= 2 and themes >= 2")
    if resolution < 32 or resolution & (resolution - 1):
        raise ValueError("resolution must be a power of two >= 32")
    if not 0 <= dropout < 0.4:
        raise ValueError("dropout must lie in [0, 0.4)")
    out = Path(out_dir)
    try:
        (out / "icons").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e

    rng = np.random.default_rng(seed)
    cells = _choose_cells(apps, themes, dropout, rng)
    records, pixels = [], []
    for cell in cells:
        a, t = int(cell // themes), int(cell % themes)
        rel = f"icons/a{a:03d}_t{t:03d}.png"
        im = render_icon(a, t, themes, resolution, seed)
        im.save(out / rel)
        pixels.append(np.asarray(im).transpose(2, 0, 1))
        records.append(ManifestRecord(rel, a, t, theme_bundle(t, themes, seed).style_tag))
    manifest = DatasetManifest(records, apps, themes, resolution, out, np.stack(pixels))
    manifest.write(out / MANIFEST_NAME)
    return manifest


# --------------------------------------------------------------------------
# manifest loading

def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest (a directory means
    ``<dir>/manifest.jsonl``). Images are decoded eagerly."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    header: dict = {}
    records: list[ManifestRecord] = []
    seen: set[tuple[int, int]] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from None
        if "path" not in obj:
            if records or header:
                raise ManifestError(f"{path}:{lineno}: header must be the first record")
            header = obj
            continue
        try:
            rec = ManifestRecord(str(obj["path"]), int(obj["app_id"]), int(obj["theme_id"]),
                                 str(obj.get("style_tag", "flat")))
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}:{lineno}: malformed record ({e})") from None
        if rec.style_tag not in STYLES:
            raise ManifestError(f"{path}:{lineno}: unknown style_tag {rec.style_tag!r}")
        if rec.app_id < 0 or rec.theme_id < 0:
            raise ManifestError(f"{path}:{lineno}: negative label id")
        key = (rec.app_id, rec.theme_id)
        if key in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate (app, theme) pair {key}")
        seen.add(key)
        records.append(rec)
    if not records:
        raise ManifestError(f"{path}: no icon records")

    A = int(header.get("A", max(r.app_id for r in records) + 1))
    T = int(header.get("T", max(r.theme_id for r in records) + 1))
    if any(r.app_id >= A or r.theme_id >= T for r in records):
        raise ManifestError(f"{path}: label id exceeds declared A={A} / T={T}")
    resolution = header.get("resolution")
    if resolution is None:
        first = path.parent / records[0].path
        if not first.is_file():
            raise ManifestError(f"missing image file: {first}")
        with Image.open(first) as im:
            resolution = im.size[0]
    manifest = DatasetManifest(records, A, T, int(resolution), path.parent)
    manifest.pixels = _read_pixels(manifest.root, records, manifest.resolution)
    return manifest


# --------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    images: torch.Tensor
    app_ids: torch.Tensor
    theme_ids: torch.Tensor
    fake_app_ids: torch.Tensor
    fake_theme_ids: torch.Tensor
    num_apps: int
    num_themes: int

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def fake_conditions(self) -> list[ConditionPair]:
        return [ConditionPair(int(a), int(t), self.num_apps, self.num_themes)
                for a, t in zip(self.fake_app_ids, self.fake_theme_ids)]


def sample_batch(manifest: DatasetManifest, batch_size: int, rng: np.random.Generator,
                 dtype: torch.dtype = torch.float32) -> Batch:
    """Real icons uniformly with replacement; fake conditions independently
    and uniformly over the (app, theme) pairs present in the manifest."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    n = len(manifest)
    if n == 0:
        raise ManifestError("cannot sample from an empty manifest")
    idx = rng.integers(0, n, size=batch_size)
    fake = rng.integers(0, n, size=batch_size)
    if manifest.pixels is None:
        manifest.images()
    apps, themes = manifest.app_ids(), manifest.theme_ids()
    return Batch(
        images=to_float(manifest.pixels[idx], dtype),
        app_ids=torch.from_numpy(apps[idx]),
        theme_ids=torch.from_numpy(themes[idx]),
        fake_app_ids=torch.from_numpy(apps[fake]),
        fake_theme_ids=torch.from_numpy(themes[fake]),
        num_apps=manifest.num_apps,
        num_themes=manifest.num_themes,
    )


def _groups(features: torch.Tensor, keys: np.ndarray) -> dict[int, torch.Tensor]:
    out = {}
    for k in np.unique(keys):
        out[int(k)] = features[torch.from_numpy(np.flatnonzero(keys == k))]
    return out


def group_by_label(app_features: torch.Tensor, theme_features: torch.Tensor,
                   app_ids, theme_ids) -> CFDGroups:
    """Split real-icon features into the four group maps used by the
    alignment and uniformity losses. Singleton groups are kept."""
    app_ids = np.asarray(app_ids, dtype=np.int64)
    theme_ids = np.asarray(theme_ids, dtype=np.int64)
    n = len(app_features)
    if not (len(theme_features) == n == len(app_ids) == len(theme_ids)):
        raise ValueError("features and label vectors must share their leading size")
    return CFDGroups(
        align_apps=_groups(app_features, app_ids),
        unif_apps=_groups(app_features, theme_ids),
        align_thms=_groups(theme_features, theme_ids),
        unif_thms=_groups(theme_features, app_ids),
    )
