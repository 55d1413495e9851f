"""Evaluation protocol: label accuracy of generated icons, Frechet distances
(all / per app / per overall-style), inception score, perceptual diversity,
and a silhouette-based disentanglement report on discriminator features.

All backbones are small classifiers trained on the local dataset.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import silhouette_score
from torch import nn

from .augment import augment_batch, sample_augment_batch
from .config import EvalConfig
from .data import DatasetManifest

SHRINK = 1e-6
METRIC_NAMES = ("acc", "fid", "is", "lpips", "disent")


class AccuracyFloorError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# auxiliary classifiers

def composite_over_white(images: torch.Tensor) -> torch.Tensor:
    rgb = (images[:, :3] + 1) * 0.5
    a = (images[:, 3:4] + 1) * 0.5
    return (rgb * a + (1 - a)) * 2 - 1


class AuxNet(nn.Module):
    """conv-GroupNorm-ReLU stack with max-pool downsampling and a global
    max-pooled feature vector."""

    def __init__(self, num_classes: int, width: int = 16, feature_dim: int = 64):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width, feature_dim]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(chans[:-1], chans[1:]))
        self.norms = nn.ModuleList(nn.GroupNorm(4, b) for b in chans[1:])
        self.head = nn.Linear(feature_dim, num_classes)

    def layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = composite_over_white(images)
        out = []
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = F.relu(norm(conv(x)))
            out.append(x)
            if i < len(self.convs) - 1:
                x = F.max_pool2d(x, 2)
        return out

    def features(self, images):
        return self.layers(images)[-1].amax((2, 3))

    def forward(self, images):
        return self.head(self.features(images))


def recolor(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Random RGB channel permutation and inversion; alpha kept."""
    n = len(images)
    perm = torch.from_numpy(np.stack([rng.permutation(3) for _ in range(n)]))
    rgb = torch.gather(images[:, :3], 1, perm[:, :, None, None].expand(-1, -1, *images.shape[2:]))
    invert = torch.from_numpy(rng.random(n) < 0.5)[:, None, None, None]
    return torch.cat([torch.where(invert, -rgb, rgb), images[:, 3:]], 1)


@dataclass
class FeatureExtractor:
    net: AuxNet
    axis: str
    num_classes: int
    feature_dim: int
    provenance: str = "trained-on-local-data"
    val_accuracy: float = float("nan")

    @torch.no_grad()
    def _batched(self, fn, images: torch.Tensor, batch: int = 256):
        self.net.eval()
        outs = [fn(images[i:i + batch].float()) for i in range(0, len(images), batch)]
        return torch.cat(outs) if outs else torch.zeros(0)

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self._batched(self.net, images)

    def probabilities(self, images: torch.Tensor) -> torch.Tensor:
        return self.logits(images).double().softmax(1)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self._batched(self.net.features, images)

    @torch.no_grad()
    def layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        self.net.eval()
        return self.net.layers(images.float())

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        torch.save({"state": self.net.state_dict(), "axis": self.axis, "num_classes": self.num_classes,
                    "feature_dim": self.feature_dim, "provenance": self.provenance,
                    "val_accuracy": self.val_accuracy}, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FeatureExtractor":
        d = torch.load(path, map_location="cpu", weights_only=True)
        net = AuxNet(d["num_classes"], feature_dim=d["feature_dim"])
        net.load_state_dict(d["state"])
        return cls(net, d["axis"], d["num_classes"], d["feature_dim"], d["provenance"], d["val_accuracy"])


def holdout_split(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Stratified split: each class keeps at least one training icon and
    contributes ``round(fraction * count)`` icons to validation."""
    train, val = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = min(len(idx) - 1, max(1, int(round(fraction * len(idx))))) if len(idx) > 1 else 0
        val.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(train), np.sort(val)


def train_aux_classifiers(manifest: DatasetManifest, axis: str, seed: int,
                          cfg: EvalConfig | None = None) -> FeatureExtractor:
    """Fit a small classifier for one label axis with label-preserving
    augmentation (recolor/rescale for apps, flip/rotate for themes)."""
    cfg = cfg or EvalConfig()
    if axis not in ("app", "theme"):
        raise ValueError("axis must be 'app' or 'theme'")
    labels = manifest.app_ids() if axis == "app" else manifest.theme_ids()
    k = manifest.num_apps if axis == "app" else manifest.num_themes
    rng = np.random.default_rng([seed, 5])
    tr, va = holdout_split(labels, cfg.holdout_fraction, rng)
    images = manifest.images()
    y = torch.from_numpy(labels)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = AuxNet(k)
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    batch = 24
    steps = cfg.classifier_epochs * -(-len(tr) // batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    net.train()
    for _ in range(cfg.classifier_epochs):
        order = rng.permutation(tr)
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            x = images[idx]
            if axis == "app":
                x = recolor(x, rng)
            x = augment_batch(x, sample_augment_batch(axis, len(idx), rng))
            loss = F.cross_entropy(net(x), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    ext = FeatureExtractor(net.eval(), axis, k, net.head.in_features)
    if len(va):
        ext.val_accuracy = float((ext.logits(images[va]).argmax(1) == y[va]).double().mean())
    if not ext.val_accuracy >= cfg.classifier_floor:
        raise AccuracyFloorError(f"{axis} classifier validation accuracy {ext.val_accuracy:.3f} "
                                 f"below floor {cfg.classifier_floor}")
    return ext


def confusion_matrix(extractor: FeatureExtractor, images: torch.Tensor, labels) -> np.ndarray:
    pred = extractor.logits(images).argmax(1).numpy()
    cm = np.zeros((extractor.num_classes, extractor.num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), pred), 1)
    return cm


# --------------------------------------------------------------------------
# accuracy

def topk_accuracy(scores, labels, k: int, num_classes: int | None = None) -> float:
    """Fraction of rows whose requested label is among the top-k scores."""
    scores = torch.as_tensor(scores)
    labels = torch.as_tensor(labels)
    if num_classes is not None and scores.shape[1] != num_classes:
        raise ValueError(f"classifier has {scores.shape[1]} classes, label axis has {num_classes}")
    if len(scores) == 0:
        raise ValueError("no icons to score")
    k = min(k, scores.shape[1])
    top = scores.topk(k, dim=1).indices
    return float((top == labels[:, None]).any(1).double().mean())


@torch.no_grad()
def generate_icons(generator, app_ids, theme_ids, rng: np.random.Generator, batch: int = 256) -> torch.Tensor:
    app_ids = torch.as_tensor(app_ids)
    theme_ids = torch.as_tensor(theme_ids)
    dtype = next(generator.parameters()).dtype
    outs = []
    for i in range(0, len(app_ids), batch):
        a, t = app_ids[i:i + batch], theme_ids[i:i + batch]
        z = torch.from_numpy(rng.standard_normal((len(a), generator.z_dim))).to(dtype)
        outs.append(generator(z, a, t).float())
    return torch.cat(outs)


# --------------------------------------------------------------------------
# Frechet distance and inception score

def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    r = _sqrt_psd(s1)
    w = np.linalg.eigvalsh(r @ s2 @ r)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    # averaging both orders makes the result exactly symmetric
    cross = 0.5 * (_trace_sqrt_product(s1, s2) + _trace_sqrt_product(s2, s1))
    d = float(((mu1 - mu2) ** 2).sum() + np.trace(s1 + s2) - 2 * cross)
    return max(d, 0.0)


def _moments(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("non-finite features")
    if len(x) < 2:
        raise ValueError("need at least two feature vectors")
    sigma = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    if len(x) <= x.shape[1]:
        sigma = sigma + SHRINK * np.eye(x.shape[1])
    return x.mean(0), sigma


def frechet_distance(features_real, features_fake) -> float:
    mu1, s1 = _moments(features_real)
    mu2, s2 = _moments(features_fake)
    return frechet_from_moments(mu1, s1, mu2, s2)


def class_conditional_mfid(real, real_groups, fake, fake_groups) -> tuple[float, dict]:
    """Mean per-group Frechet distance. Groups with fewer than two samples on
    either side are skipped with a warning."""
    real, fake = np.asarray(real), np.asarray(fake)
    real_groups, fake_groups = np.asarray(real_groups), np.asarray(fake_groups)
    per = {}
    for g in np.unique(np.concatenate([real_groups, fake_groups])):
        r, f = real[real_groups == g], fake[fake_groups == g]
        if len(r) < 2 or len(f) < 2:
            warnings.warn(f"group {g!r}: too few samples ({len(r)} real, {len(f)} fake); skipped")
            continue
        per[g.item() if hasattr(g, "item") else g] = frechet_distance(r, f)
    if not per:
        raise ValueError("every group was skipped")
    return float(np.mean(list(per.values()))), per


def inception_score(class_probabilities) -> float:
    p = np.asarray(class_probabilities, dtype=np.float64)
    if p.ndim != 2 or (p < 0).any() or not np.allclose(p.sum(1), 1.0, rtol=0, atol=1e-6):
        raise ValueError("rows must be probability vectors")
    marginal = p.mean(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(1).mean()))


# --------------------------------------------------------------------------
# perceptual diversity

def _unit_channels(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=1, keepdim=True).clamp_min(1e-10)


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractors: Sequence[FeatureExtractor]) -> torch.Tensor:
    """LPIPS-style distance between two batches: channel-normalized squared
    difference, spatially averaged, averaged over layers (and extractors)."""
    per_layer = []
    for ext in extractors:
        for la, lb in zip(ext.layers(a), ext.layers(b)):
            per_layer.append((_unit_channels(la) - _unit_channels(lb)).pow(2).sum(1).mean((1, 2)))
    return torch.stack(per_layer).mean(0)


def pairwise_perceptual(images: torch.Tensor, extractors: Sequence[FeatureExtractor]) -> torch.Tensor:
    """Distances of all C(n, 2) image pairs."""
    n = len(images)
    i, j = torch.triu_indices(n, n, offset=1)
    return perceptual_distance(images[i], images[j], extractors)


def diversity_mlpips(generator, conditions: Sequence[tuple[int, int]], per_condition: int,
                     extractors: Sequence[FeatureExtractor], theme_styles: dict[int, str],
                     rng: np.random.Generator) -> tuple[float, dict]:
    """Mean over overall-styles of the mean over conditions of the mean
    pairwise perceptual distance among ``per_condition`` latents."""
    if per_condition < 2:
        raise ValueError("per_condition must be >= 2")
    by_style: dict[str, list[float]] = {}
    for app, thm in conditions:
        if not (0 <= app < generator.num_apps and 0 <= thm < generator.num_themes):
            raise ValueError(f"condition {(app, thm)} outside the label space")
        imgs = generate_icons(generator, [app] * per_condition, [thm] * per_condition, rng)
        d = float(pairwise_perceptual(imgs, extractors).mean())
        by_style.setdefault(theme_styles.get(thm, "flat"), []).append(d)
    per_style = {s: float(np.mean(v)) for s, v in by_style.items()}
    return float(np.mean(list(per_style.values()))), per_style


# --------------------------------------------------------------------------
# disentanglement

@dataclass
class DisentReport:
    app_feature_theme_separability: float
    theme_feature_theme_separability: float
    app_feature_app_separability: float
    theme_feature_app_separability: float
    app_feature_theme_distance_ratio: float
    theme_feature_theme_distance_ratio: float


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.clip(np.linalg.norm(x, axis=1, keepdims=True), 1e-12, None)


def separability(features, labels) -> float:
    """Silhouette of l2-normalized features under ``labels`` (in [-1, 1])."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least two classes")
    return float(silhouette_score(_unit(features), labels, metric="euclidean"))


def permutation_test(features, labels, shuffles: int = 100,
                     rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Observed separability and its one-sided p-value against ``shuffles``
    random relabelings (label counts preserved)."""
    rng = rng or np.random.default_rng(0)
    labels = np.asarray(labels)
    observed = separability(features, labels)
    null = np.array([separability(features, rng.permutation(labels)) for _ in range(shuffles)])
    return observed, float((1 + np.sum(null >= observed)) / (1 + shuffles))


def distance_ratio(features, labels) -> float:
    """Mean within-class over mean between-class distance."""
    x = _unit(features)
    labels = np.asarray(labels)
    d = np.linalg.norm(x[:, None] - x[None], axis=-1)
    same = labels[:, None] == labels[None]
    off = ~np.eye(len(x), dtype=bool)
    within = d[same & off]
    between = d[~same]
    if within.size == 0 or between.size == 0:
        return float("nan")
    return float(within.mean() / between.mean())


def disentanglement_report(app_features, theme_features, app_ids, theme_ids) -> DisentReport:
    app_ids, theme_ids = np.asarray(app_ids), np.asarray(theme_ids)
    if len(np.unique(app_ids)) < 2 or len(np.unique(theme_ids)) < 2:
        raise ValueError("degenerate input: need at least two classes per axis")
    return DisentReport(
        app_feature_theme_separability=separability(app_features, theme_ids),
        theme_feature_theme_separability=separability(theme_features, theme_ids),
        app_feature_app_separability=separability(app_features, app_ids),
        theme_feature_app_separability=separability(theme_features, app_ids),
        app_feature_theme_distance_ratio=distance_ratio(app_features, theme_ids),
        theme_feature_theme_distance_ratio=distance_ratio(theme_features, theme_ids),
    )


@torch.no_grad()
def discriminator_features(d_app, d_thm, images: torch.Tensor, app_ids, theme_ids, batch: int = 128):
    """App features f and center-patch theme features of un-augmented icons."""
    dtype = next(d_app.parameters()).dtype
    fa, ft = [], []
    app_ids, theme_ids = torch.as_tensor(app_ids), torch.as_tensor(theme_ids)
    for i in range(0, len(images), batch):
        x = images[i:i + batch].to(dtype)
        fa.append(d_app(x, app_ids[i:i + batch])[1].double())
        grid, _ = d_thm(x, theme_ids[i:i + batch])
        ft.append(grid.center.double())
    return torch.cat(fa).numpy(), torch.cat(ft).numpy()


def export_features(path: str | Path, features: np.ndarray, manifest: DatasetManifest) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "app_id", "theme_id", "style_tag"] + [f"f{i}" for i in range(features.shape[1])])
        for rec, row in zip(manifest.records, features):
            w.writerow([rec.path, rec.app_id, rec.theme_id, rec.style_tag] + [repr(float(v)) for v in row])
    return path


# --------------------------------------------------------------------------
# full report

@dataclass
class MetricsReport:
    top1_app: float | None = None
    top5_app: float | None = None
    top1_thm: float | None = None
    top5_thm: float | None = None
    fid_all: float | None = None
    mfid_app: float | None = None
    mfid_sty: float | None = None
    is_score: float | None = None
    mlpips: float | None = None
    disent: DisentReport | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_jsonable)


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def evaluate(generator, manifest: DatasetManifest, app_ext: FeatureExtractor, theme_ext: FeatureExtractor,
             metrics: Sequence[str] = METRIC_NAMES, cfg: EvalConfig | None = None, seed: int = 0,
             d_app=None, d_thm=None) -> MetricsReport:
    cfg = cfg or EvalConfig()
    unknown = set(metrics) - set(METRIC_NAMES)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; valid: {', '.join(METRIC_NAMES)}")
    if app_ext.num_classes != manifest.num_apps or theme_ext.num_classes != manifest.num_themes:
        raise ValueError("auxiliary classifier class counts do not match the dataset")
    rng = np.random.default_rng([seed, 17])
    pairs = np.array(manifest.pairs())
    styles = manifest.theme_styles()
    report = MetricsReport()
    real = manifest.images()

    if "acc" in metrics:
        idx = rng.integers(0, len(pairs), size=cfg.acc_icons)
        apps, thms = pairs[idx, 0], pairs[idx, 1]
        imgs = generate_icons(generator, apps, thms, rng)
        la, lt = app_ext.logits(imgs), theme_ext.logits(imgs)
        report.top1_app = topk_accuracy(la, apps, 1, manifest.num_apps)
        report.top5_app = topk_accuracy(la, apps, 5, manifest.num_apps)
        report.top1_thm = topk_accuracy(lt, thms, 1, manifest.num_themes)
        report.top5_thm = topk_accuracy(lt, thms, 5, manifest.num_themes)

    if "fid" in metrics or "is" in metrics:
        idx = rng.integers(0, len(pairs), size=cfg.fid_icons)
        apps, thms = pairs[idx, 0], pairs[idx, 1]
        imgs = generate_icons(generator, apps, thms, rng)
        if "fid" in metrics:
            fr, ff = joint_features(real, app_ext, theme_ext), joint_features(imgs, app_ext, theme_ext)
            report.fid_all = frechet_distance(fr, ff)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                report.mfid_app, per_app = class_conditional_mfid(fr, manifest.app_ids(), ff, apps)
                real_sty = np.array([r.style_tag for r in manifest.records])
                fake_sty = np.array([styles[t] for t in thms])
                report.mfid_sty, per_sty = class_conditional_mfid(fr, real_sty, ff, fake_sty)
            report.details["fid_per_app"] = {str(k): v for k, v in per_app.items()}
            report.details["fid_per_style"] = {str(k): v for k, v in per_sty.items()}
        if "is" in metrics:
            report.is_score = inception_score(app_ext.probabilities(imgs).numpy())

    if "lpips" in metrics:
        idx = rng.integers(0, len(pairs), size=cfg.lpips_conditions)
        conds = [tuple(map(int, pairs[i])) for i in idx]
        report.mlpips, per_style = diversity_mlpips(generator, conds, cfg.lpips_per_condition,
                                                    [app_ext, theme_ext], styles, rng)
        report.details["lpips_per_style"] = per_style

    if "disent" in metrics:
        if d_app is None or d_thm is None:
            raise ValueError("disentanglement report needs both discriminators")
        fa, ft = discriminator_features(d_app, d_thm, real, manifest.app_ids(), manifest.theme_ids())
        report.disent = disentanglement_report(fa, ft, manifest.app_ids(), manifest.theme_ids())
    return report


def joint_features(images: torch.Tensor, app_ext: FeatureExtractor, theme_ext: FeatureExtractor) -> np.ndarray:
    """Backbone features for Frechet distances: both classifiers' pooled
    features side by side."""
    return torch.cat([app_ext.features(images), theme_ext.features(images)], 1).double().numpy()

