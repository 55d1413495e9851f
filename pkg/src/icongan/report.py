"""Figures and contact sheets written next to the CSV/JSON outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

from .data import to_uint8  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
PNG_META = {"Software": None}

LOSS_PANELS = (
    ("generator", ("loss_G", "L_adv_g", "L_sim_g")),
    ("discriminators", ("loss_Dapp", "loss_Dthm", "L_adv_d", "L_sim_d")),
    ("contrastive / R1", ("L_align", "L_uniform", "r1")),
)


def save_contact_sheet(images: torch.Tensor, path: str | Path, rows: int = 1, pad: int = 2) -> Path:
    """Tile ``(N, 4, R, R)`` images into a transparent RGBA sheet."""
    n, _, h, w = images.shape
    cols = -(-n // rows)
    sheet = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad, 4), dtype=np.uint8)
    px = to_uint8(images).transpose(0, 2, 3, 1)
    for k in range(n):
        r, c = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        sheet[y:y + h, x:x + w] = px[k]
    path = Path(path)
    Image.fromarray(sheet, "RGBA").save(path)
    return path


def read_steplog(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open() as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def plot_steplog(csv_path: str | Path, out_png: str | Path) -> Path | None:
    cols = read_steplog(csv_path)
    if not cols:
        return None
    fig, axes = plt.subplots(1, len(LOSS_PANELS), figsize=(13, 3.6))
    x = cols["images_seen"] / 1000.0
    for ax, (title, keys) in zip(axes, LOSS_PANELS):
        for k in keys:
            ax.plot(x, _smooth(cols[k]), label=k, lw=1)
        ax.set_title(title)
        ax.set_xlabel("real images seen (k)")
        ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110, metadata=PNG_META)
    plt.close(fig)
    return Path(out_png)


def _smooth(y: np.ndarray, width: int = 25) -> np.ndarray:
    if len(y) < width:
        return y
    k = np.ones(width) / width
    head = np.cumsum(y[:width - 1]) / np.arange(1, width)
    return np.concatenate([head, np.convolve(y, k, mode="valid")])


def plot_metrics(report: dict, out_png: str | Path) -> Path:
    acc_keys = ["top1_app", "top5_app", "top1_thm", "top5_thm"]
    disent = report.get("disent") or {}
    sep_keys = [k for k in ("app_feature_theme_separability", "theme_feature_theme_separability",
                            "app_feature_app_separability", "theme_feature_app_separability") if k in disent]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    vals = [report.get(k) for k in acc_keys]
    ax1.bar(acc_keys, [v if v is not None else 0 for v in vals], color="#4c72b0")
    ax1.set_ylim(0, 1)
    ax1.set_title("label accuracy of generated icons")
    ax1.tick_params(axis="x", labelsize=8)
    if sep_keys:
        ax2.barh([k.replace("_separability", "") for k in sep_keys], [disent[k] for k in sep_keys],
                 color="#dd8452")
        ax2.axvline(0, color="k", lw=0.8)
        ax2.set_xlim(-1, 1)
        ax2.set_title("silhouette under label")
        ax2.tick_params(axis="y", labelsize=8)
    else:
        ax2.axis("off")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110, metadata=PNG_META)
    plt.close(fig)
    return Path(out_png)


def plot_ablation(summary: dict, out_png: str | Path) -> Path:
    """Per-seed bars for the with/without contrastive-term comparison."""
    metrics = ("app_feature_theme_separability", "top1_thm", "top1_app")
    fig, axes = plt.subplots(1, len(metrics), figsize=(11, 3.4))
    for ax, m in zip(axes, metrics):
        for i, arm in enumerate(("cfd", "no_cfd")):
            vals = [r[m] for r in summary[arm]]
            ax.scatter(np.full(len(vals), i) + np.linspace(-0.08, 0.08, len(vals)), vals, s=18)
            ax.hlines(np.mean(vals), i - 0.25, i + 0.25, color="k")
        ax.set_xticks([0, 1], ["with CFD", "without"])
        ax.set_title(m, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110, metadata=PNG_META)
    plt.close(fig)
    return Path(out_png)
