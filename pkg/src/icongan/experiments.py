"""Desk-scale experiments: the with/without contrastive-term ablation and
the long smoke run with a held-out (app, theme) cell.

Every run directory caches its result JSON tagged with the config hash, so
re-running an experiment only recomputes what changed.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import EvalConfig, RunConfig, load_config
from .data import DatasetManifest, load_manifest
from .evaluation import (FeatureExtractor, evaluate, generate_icons, joint_features,
                         frechet_distance, train_aux_classifiers)
from .report import plot_ablation, plot_steplog
from .training import TrainState, load_checkpoint, train

log = logging.getLogger(__name__)

# Reduced widths that make a 50k-image run take minutes on one CPU core. The
# smaller batch buys four times as many updates for the same image budget, and
# the EMA half-life is scaled down with the budget.
DESK_OVERRIDES = (
    "model.base_width=8", "model.max_width=64", "model.d_base_width=8", "model.d_max_width=64",
    "model.w_dim=64", "model.app_feature_dim=64", "model.patch_feature_dim=64",
    "train.batch_size=16", "train.ema_halflife=2500",
)


def desk_config(seed: int, images: int, overrides: Sequence[str] = (), cfd: bool = True,
                manifest: DatasetManifest | None = None) -> RunConfig:
    cfg = load_config(overrides=list(DESK_OVERRIDES) + list(overrides))
    cfg.seed = seed
    cfg.train.cfd_enabled = cfd
    if manifest is not None:
        cfg.model.num_apps, cfg.model.num_themes = manifest.num_apps, manifest.num_themes
        cfg.model.resolution = manifest.resolution
    bs = cfg.train.batch_size
    cfg.train.total_images = math.ceil(images / bs) * bs
    cfg.train.checkpoint_every = cfg.train.sample_every = 250
    return cfg.validate()


def aux_extractors(manifest: DatasetManifest, out: Path, seed: int = 0,
                   cfg: EvalConfig | None = None) -> tuple[FeatureExtractor, FeatureExtractor]:
    """Load the auxiliary classifiers cached under ``out``, training any that
    are missing."""
    out.mkdir(parents=True, exist_ok=True)
    exts = []
    for axis in ("app", "theme"):
        path = out / f"{axis}.pt"
        if path.exists():
            ext = FeatureExtractor.load(path)
        else:
            ext = train_aux_classifiers(manifest, axis, seed, cfg)
            ext.save(path)
        exts.append(ext)
    return exts[0], exts[1]


def _cached(path: Path, key: str) -> dict | None:
    if path.exists():
        d = json.loads(path.read_text())
        if d.get("key") == key:
            return d
    return None


def _key(cfg: RunConfig) -> str:
    return f"{cfg.hash()}:{cfg.train.total_images}"


def train_or_resume(cfg: RunConfig, manifest: DatasetManifest, run_dir: Path, **kw) -> TrainState:
    latest = run_dir / "checkpoints" / "latest.pt"
    resume = None
    if latest.exists():
        try:
            load_checkpoint(latest, cfg)
            resume = latest
        except Exception as e:  # stale checkpoint from another config
            log.warning("ignoring %s: %s", latest, e)
    state = train(cfg, manifest, run_dir, resume=resume, **kw)
    plot_steplog(run_dir / "steplog.csv", run_dir / "loss_curves.png")
    return state


def fid_all(generator, manifest: DatasetManifest, app_ext, theme_ext, n: int, seed: int) -> float:
    rng = np.random.default_rng([seed, 23])
    pairs = np.array(manifest.pairs())
    idx = rng.integers(0, len(pairs), size=n)
    imgs = generate_icons(generator, pairs[idx, 0], pairs[idx, 1], rng)
    real = joint_features(manifest.images(), app_ext, theme_ext)
    return frechet_distance(real, joint_features(imgs, app_ext, theme_ext))


def run_single(cfg: RunConfig, manifest: DatasetManifest, run_dir: Path, app_ext, theme_ext,
               eval_cfg: EvalConfig | None = None) -> dict:
    """Train one configuration and score its EMA generator at step 0 and at
    the end of the budget."""
    eval_cfg = eval_cfg or EvalConfig()
    run_dir.mkdir(parents=True, exist_ok=True)
    result_path = run_dir / "result.json"
    key = _key(cfg)
    hit = _cached(result_path, key)
    if hit is not None:
        return hit
    fid0 = fid_all(TrainState(cfg).G_ema.eval(), manifest, app_ext, theme_ext, eval_cfg.fid_icons, cfg.seed)
    nonfinite = []

    def watch(state, entry):
        vals = [v for k, v in vars(entry).items() if k not in ("step", "images_seen")]
        if not all(math.isfinite(v) for v in vals):
            nonfinite.append(entry.step)

    state = train_or_resume(cfg, manifest, run_dir, callback=watch)
    g = state.G_ema.eval()
    rep = evaluate(g, manifest, app_ext, theme_ext, ("acc", "fid", "disent"), eval_cfg, seed=cfg.seed,
                   d_app=state.D_app.eval(), d_thm=state.D_thm.eval())
    result = {
        "key": key, "seed": cfg.seed, "cfd": cfg.train.cfd_enabled, "steps": state.step,
        "images_seen": state.images_seen, "nonfinite_steps": nonfinite,
        "fid_step0": fid0, "fid_all": rep.fid_all,
        "top1_app": rep.top1_app, "top1_thm": rep.top1_thm,
        "top5_app": rep.top5_app, "top5_thm": rep.top5_thm,
        **{k: v for k, v in vars(rep.disent).items()},
    }
    result_path.write_text(json.dumps(result, indent=2))
    return result


def run_desk_ablation(data: str | Path, out: str | Path, seeds: Sequence[int] = (0, 1, 2),
                      images: int = 50_000, overrides: Sequence[str] = (),
                      eval_cfg: EvalConfig | None = None) -> dict:
    """Train each seed with and without the contrastive term and compare
    theme separability of app features and generated-icon label accuracy."""
    manifest = load_manifest(data)
    out = Path(out)
    app_ext, theme_ext = aux_extractors(manifest, out / "aux", cfg=eval_cfg)
    summary: dict = {"cfd": [], "no_cfd": []}
    for seed in seeds:
        for arm, cfd in (("cfd", True), ("no_cfd", False)):
            cfg = desk_config(seed, images, overrides, cfd, manifest)
            log.info("ablation: seed %d, %s", seed, arm)
            summary[arm].append(run_single(cfg, manifest, out / f"{arm}_seed{seed}", app_ext, theme_ext,
                                           eval_cfg))

    def mean(arm, k):
        return float(np.mean([r[k] for r in summary[arm]]))

    sep = {arm: mean(arm, "app_feature_theme_separability") for arm in ("cfd", "no_cfd")}
    thm = {arm: mean(arm, "top1_thm") for arm in ("cfd", "no_cfd")}
    summary["verdict"] = {
        "mean_app_feature_theme_separability": sep,
        "mean_top1_thm": thm,
        "mean_top1_app": {arm: mean(arm, "top1_app") for arm in ("cfd", "no_cfd")},
        "separability_lower_with_cfd": sep["cfd"] < sep["no_cfd"],
        "theme_accuracy_higher_with_cfd": thm["cfd"] > thm["no_cfd"],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    plot_ablation(summary, out / "ablation.png")
    return summary


def run_holdout_smoke(data: str | Path, out: str | Path, held_out: tuple[int, int], steps: int = 2000,
                      seed: int = 0, samples: int = 8,
                      overrides: Sequence[str] = ("train.batch_size=64",)) -> dict:
    """Train without one (app, theme) cell, then sample that cell and check
    how many samples the app classifier assigns to the requested app.

    The budget here is counted in steps, so the default keeps the full
    64-image batch instead of the small desk batch.
    """
    full = load_manifest(data)
    manifest = full.without_pairs([held_out])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = desk_config(seed, 0, overrides, True, manifest)
    cfg.train.total_images = steps * cfg.train.batch_size
    cfg.validate()
    key = _key(cfg) + f":{held_out}:{samples}"
    hit = _cached(out / "result.json", key)
    if hit is not None:
        return hit
    app_ext, _ = aux_extractors(manifest, out / "aux")
    nonfinite = []

    def watch(state, entry):
        vals = [v for k, v in vars(entry).items() if k not in ("step", "images_seen")]
        if not all(math.isfinite(v) for v in vals):
            nonfinite.append(entry.step)

    state = train_or_resume(cfg, manifest, out / "run", callback=watch)
    rng = np.random.default_rng([seed, 31])
    a, t = held_out
    imgs = generate_icons(state.G_ema.eval(), np.full(samples, a), np.full(samples, t), rng)
    pred = app_ext.logits(imgs).argmax(1)
    result = {
        "key": key, "steps": state.step, "nonfinite_steps": nonfinite, "held_out": list(held_out),
        "in_training_pairs": list(held_out) in [list(p) for p in state.train_pairs],
        "app_predictions": pred.tolist(), "app_hits": int((pred == a).sum()),
        "checkpoint": str(out / "run" / "checkpoints" / "latest.pt"),
    }
    (out / "result.json").write_text(json.dumps(result, indent=2))
    torch.save(imgs, out / "heldout_samples.pt")
    return result
