"""Training loop: one step = fake synthesis, orthogonal augmentation of both
branches, dual discriminator passes, real-only contrastive grouping, loss
assembly and three independent Adam updates, followed by the EMA update.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses
from .augment import augment_batch, sample_augment_batch
from .config import RunConfig
from .data import Batch, DatasetManifest, group_by_label, sample_batch
from .models import copy_module, init_params

log = logging.getLogger(__name__)

MAGIC = b"ICONGAN-CKPT-v1\n"
NETWORKS = ("G", "D_app", "D_thm")


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class StepLog:
    step: int
    images_seen: int
    loss_G: float
    loss_Dapp: float
    loss_Dthm: float
    L_adv_d: float
    L_adv_g: float
    L_sim_d: float
    L_sim_g: float
    L_align: float
    L_uniform: float
    r1: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return list(astuple(self))


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


class TrainState:
    """Networks, EMA generator, optimizers, counters and the RNG stream."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.config = cfg
        self.dtype = torch_dtype(cfg.train.dtype)
        self.G, self.D_app, self.D_thm = init_params(cfg.model, cfg.seed, self.dtype)
        self.G_ema = copy_module(self.G)
        tc = cfg.train

        def adam(m):
            return torch.optim.Adam(m.parameters(), lr=tc.learning_rate,
                                    betas=(tc.adam_beta1, tc.adam_beta2), eps=tc.adam_eps)

        self.optimizers = {"G": adam(self.G), "D_app": adam(self.D_app), "D_thm": adam(self.D_thm)}
        self.step = 0
        self.images_seen = 0
        self.rng = np.random.default_rng(cfg.seed)
        # (app, theme) pairs present in the training data; empty if unknown
        self.train_pairs: list[tuple[int, int]] = []

    def network(self, name: str) -> torch.nn.Module:
        return {"G": self.G, "D_app": self.D_app, "D_thm": self.D_thm}[name]

    def next_batch(self, manifest: DatasetManifest) -> Batch:
        return sample_batch(manifest, self.config.train.batch_size, self.rng, self.dtype)


def draw_step_augments(rng: np.random.Generator, n: int, cfg) -> dict:
    """Augmentation params for one step, keyed by (kind, branch). Real and
    fake branches get independent draws from the same law."""
    out = {}
    for kind, enabled in (("theme", cfg.theme_enabled), ("app", cfg.app_enabled)):
        for branch in ("real", "fake"):
            out[kind, branch] = sample_augment_batch(kind, n, rng, cfg) if enabled else None
    return out


def _aug(images, params):
    return images if params is None else augment_batch(images, params)


def compute_gradients(state: TrainState, batch: Batch):
    """Forward everything once and return per-network gradients and the
    step's loss components. Parameters are not touched."""
    cfg = state.config
    lw = cfg.loss
    n = len(batch)
    rng = state.rng
    z = torch.from_numpy(rng.standard_normal((n, cfg.model.z_dim))).to(state.dtype)
    augs = draw_step_augments(rng, n, cfg.augment)
    do_r1 = lw.r1_weight > 0 and state.step % lw.r1_interval == 0

    fakes = state.G(z, batch.fake_app_ids, batch.fake_theme_ids)
    real = batch.images.to(state.dtype)
    real_app = _aug(real, augs["app", "real"])
    real_thm = _aug(real, augs["theme", "real"])
    if do_r1:
        real_app = real_app.detach().requires_grad_(True)
        real_thm = real_thm.detach().requires_grad_(True)
    fake_app = _aug(fakes, augs["app", "fake"])
    fake_thm = _aug(fakes, augs["theme", "fake"])

    logit_r, feat_r = state.D_app(real_app, batch.app_ids)
    logit_f, _ = state.D_app(fake_app, batch.fake_app_ids)
    grid_r, v_r = state.D_thm(real_thm, batch.theme_ids)
    grid_f, v_f = state.D_thm(fake_thm, batch.fake_theme_ids)

    comp = {
        "adv_d": losses.adv_loss_app(logit_r, logit_f, "discriminator"),
        "adv_g": losses.adv_loss_app(None, logit_f, "generator"),
        "sim_d": losses.sim_adv_loss(grid_r.flat, v_r, "disc_real")
        + losses.sim_adv_loss(grid_f.flat, v_f, "disc_fake"),
        "sim_g": losses.sim_adv_loss(grid_f.flat, v_f, "generator"),
    }
    if cfg.train.cfd_enabled:
        groups = group_by_label(feat_r, grid_r.center, batch.app_ids, batch.theme_ids)
        comp["align"] = losses.align_loss(groups, lw.eps_app, lw.eps_theme)
        comp["uniform"] = losses.uniform_loss(groups, lw.t)
    else:
        comp["align"] = comp["uniform"] = fakes.new_zeros(())
    loss_g, loss_dapp, loss_dthm = losses.total_losses(comp, lw)

    r1 = fakes.new_zeros(())
    if do_r1:
        r1_app = losses.penalty_from_scores(logit_r, real_app, lw.r1_weight)
        r1_thm = losses.penalty_from_scores(losses.theme_score(grid_r.flat, v_r), real_thm, lw.r1_weight)
        loss_dapp = loss_dapp + lw.r1_interval * r1_app
        loss_dthm = loss_dthm + lw.r1_interval * r1_thm
        r1 = r1_app + r1_thm

    values = {
        "L_adv_d": comp["adv_d"], "L_adv_g": comp["adv_g"], "L_sim_d": comp["sim_d"],
        "L_sim_g": comp["sim_g"], "L_align": comp["align"], "L_uniform": comp["uniform"], "r1": r1,
        "loss_G": loss_g, "loss_Dapp": loss_dapp, "loss_Dthm": loss_dthm,
    }
    # components first so the diagnostic names the source, not a total
    for name, v in values.items():
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(f"non-finite {name} at step {state.step + 1}: {float(v.detach())}")

    grads = {}
    for name, loss, retain in (("G", loss_g, True), ("D_app", loss_dapp, True), ("D_thm", loss_dthm, False)):
        params = list(state.network(name).parameters())
        g = torch.autograd.grad(loss, params, retain_graph=retain, allow_unused=True)
        grads[name] = [torch.zeros_like(p) if gi is None else gi for p, gi in zip(params, g)]
    scalars = {k: float(v.detach()) for k, v in values.items()}
    return grads, scalars


def apply_gradients(state: TrainState, name: str, grads: list[torch.Tensor]) -> None:
    net = state.network(name)
    for p, g in zip(net.parameters(), grads):
        p.grad = g
    state.optimizers[name].step()
    for p in net.parameters():
        p.grad = None


@torch.no_grad()
def ema_update(generator: torch.nn.Module, ema: torch.nn.Module, images_seen_delta: float,
               halflife: float) -> torch.nn.Module:
    """Move ``ema`` toward ``generator`` with decay 0.5 ** (delta / halflife)."""
    params = list(generator.parameters())
    ema_params = list(ema.parameters())
    if len(params) != len(ema_params) or any(a.shape != b.shape for a, b in zip(params, ema_params)):
        raise ValueError("EMA copy is not shape-congruent with the generator")
    beta = 0.5 ** (images_seen_delta / halflife) if math.isfinite(halflife) else 1.0
    for p, e in zip(params, ema_params):
        e.copy_(torch.lerp(p, e, beta))
    for b, eb in zip(generator.buffers(), ema.buffers()):
        eb.copy_(b)
    return ema


def train_step(state: TrainState, batch: Batch) -> tuple[TrainState, StepLog]:
    grads, scalars = compute_gradients(state, batch)
    for name in NETWORKS:
        apply_gradients(state, name, grads[name])
    ema_update(state.G, state.G_ema, len(batch), state.config.train.ema_halflife)
    state.step += 1
    state.images_seen += len(batch)
    return state, StepLog(step=state.step, images_seen=state.images_seen, **scalars)


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "config": state.config.to_json(),
        "config_hash": state.config.hash(),
        "step": state.step,
        "images_seen": state.images_seen,
        "rng": json.dumps(state.rng.bit_generator.state),
        "G": state.G.state_dict(),
        "D_app": state.D_app.state_dict(),
        "D_thm": state.D_thm.state_dict(),
        "G_ema": state.G_ema.state_dict(),
        "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()},
        "train_pairs": [list(p) for p in state.train_pairs],
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an icongan checkpoint (bad magic header)")
    return torch.load(io.BytesIO(raw[len(MAGIC):]), map_location="cpu", weights_only=True)


def load_checkpoint(path: str | Path, config: RunConfig | None = None) -> TrainState:
    """Restore a TrainState. If ``config`` is given its hash must match the
    one stored in the checkpoint."""
    payload = read_checkpoint(path)
    stored = RunConfig.from_dict(json.loads(payload["config"]))
    if config is not None and config.hash() != payload["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch; refusing to resume with a different config")
    state = TrainState(config if config is not None else stored)
    state.G.load_state_dict(payload["G"])
    state.D_app.load_state_dict(payload["D_app"])
    state.D_thm.load_state_dict(payload["D_thm"])
    state.G_ema.load_state_dict(payload["G_ema"])
    for k, o in state.optimizers.items():
        o.load_state_dict(payload["optimizers"][k])
    state.step = int(payload["step"])
    state.images_seen = int(payload["images_seen"])
    state.rng.bit_generator.state = json.loads(payload["rng"])
    state.train_pairs = [tuple(p) for p in payload.get("train_pairs", [])]
    return state


def load_generator(path: str | Path, ema: bool = True):
    """(generator, config) from a checkpoint, for sampling and evaluation."""
    payload = read_checkpoint(path)
    cfg = RunConfig.from_dict(json.loads(payload["config"]))
    g, d_app, d_thm = init_params(cfg.model, cfg.seed, torch_dtype(cfg.train.dtype))
    g.load_state_dict(payload["G_ema" if ema else "G"])
    d_app.load_state_dict(payload["D_app"])
    d_thm.load_state_dict(payload["D_thm"])
    return g.eval().requires_grad_(False), d_app.eval(), d_thm.eval(), cfg


# --------------------------------------------------------------------------
# loop

def probe_inputs(cfg: RunConfig, manifest: DatasetManifest, n: int = 8):
    """Fixed conditions and latents for periodic sample grids; drawn from a
    stream separate from training so probing never perturbs training."""
    rng = np.random.default_rng([cfg.seed, 99])
    pairs = manifest.pairs()
    idx = rng.integers(0, len(pairs), size=n)
    apps = torch.tensor([pairs[i][0] for i in idx])
    thms = torch.tensor([pairs[i][1] for i in idx])
    z = torch.from_numpy(rng.standard_normal((n, cfg.model.z_dim)))
    return z, apps, thms


def train(cfg: RunConfig, manifest: DatasetManifest, out_dir: str | Path | None = None,
          resume: str | Path | None = None, max_steps: int | None = None,
          callback: Callable[[TrainState, StepLog], None] | None = None) -> TrainState:
    """Run until the image budget (or ``max_steps``) is reached. With an
    ``out_dir`` the step log is streamed to CSV and checkpoints and probe
    grids are written periodically."""
    if (manifest.num_apps, manifest.num_themes, manifest.resolution) != (
            cfg.model.num_apps, cfg.model.num_themes, cfg.model.resolution):
        raise ValueError("dataset shape (A, T, resolution) does not match model config")
    state = load_checkpoint(resume, cfg) if resume else TrainState(cfg)
    state.train_pairs = [tuple(map(int, p)) for p in manifest.pairs()]
    total_steps = cfg.train.total_images // cfg.train.batch_size
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    writer = fh = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "samples").mkdir(exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        log_path = out / "steplog.csv"
        rows = []
        if resume and log_path.exists():
            with log_path.open() as f:
                rows = [r for r in csv.reader(f)][1:]
            rows = [r for r in rows if int(r[0]) <= state.step]
        fh = log_path.open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(StepLog.header())
        writer.writerows(rows)
        probe = probe_inputs(cfg, manifest)
    try:
        while state.step < total_steps:
            batch = state.next_batch(manifest)
            state, entry = train_step(state, batch)
            if callback is not None:
                callback(state, entry)
            if writer is not None:
                if state.step % cfg.train.log_every == 0:
                    writer.writerow(entry.row())
                    fh.flush()
                last = state.step == total_steps
                if state.step % cfg.train.checkpoint_every == 0 or last:
                    save_checkpoint(state, out / "checkpoints" / f"ckpt_{state.step:06d}.pt")
                    save_checkpoint(state, out / "checkpoints" / "latest.pt")
                if state.step % cfg.train.sample_every == 0 or last:
                    write_probe_grid(state, probe, out / "samples" / f"step_{state.step:06d}.png")
            if state.step % 100 == 0:
                log.info("step %d  G %.3f  Dapp %.3f  Dthm %.3f", state.step, entry.loss_G,
                         entry.loss_Dapp, entry.loss_Dthm)
    finally:
        if fh is not None:
            fh.close()
    return state


@torch.no_grad()
def write_probe_grid(state: TrainState, probe, path: Path) -> None:
    from .report import save_contact_sheet

    z, apps, thms = probe
    imgs = state.G_ema(z.to(state.dtype), apps, thms)
    save_contact_sheet(imgs, path, rows=1)
