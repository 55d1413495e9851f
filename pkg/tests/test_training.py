import copy
import csv
import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from icongan import training
from icongan.config import RunConfig
from icongan.training import (MAGIC, CheckpointError, NonFiniteLossError, StepLog, TrainState,
                              apply_gradients, compute_gradients, ema_update, load_checkpoint,
                              save_checkpoint, train, train_step)


def snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def run(cfg, manifest, steps):
    state = TrainState(cfg)
    logs = []
    for _ in range(steps):
        state, log = train_step(state, state.next_batch(manifest))
        logs.append(log)
    return state, logs


def test_step_log_fields():
    assert StepLog.header() == ["step", "images_seen", "loss_G", "loss_Dapp", "loss_Dthm", "L_adv_d",
                                "L_adv_g", "L_sim_d", "L_sim_g", "L_align", "L_uniform", "r1"]


def test_step_counters_and_finite_log(small_set):
    state, logs = run(tiny_config(), small_set, 3)
    assert state.step == 3 and state.images_seen == 24
    assert [l.step for l in logs] == [1, 2, 3]
    for l in logs:
        assert all(math.isfinite(v) for v in l.row())
    assert logs[0].r1 > 0 and logs[1].r1 == 0


def test_determinism_float64(small_set):
    cfg = tiny_config("train.dtype=float64")
    _, a = run(cfg, small_set, 10)
    _, b = run(cfg, small_set, 10)
    assert a == b


def test_determinism_float32(small_set):
    cfg = tiny_config()
    _, a = run(cfg, small_set, 10)
    _, b = run(cfg, small_set, 10)
    for x, y in zip(a, b):
        assert np.allclose(x.row(), y.row(), rtol=1e-5, atol=0)


def test_update_isolation(small_set):
    state = TrainState(tiny_config("train.dtype=float64"))
    grads, _ = compute_gradients(state, state.next_batch(small_set))
    for name in training.NETWORKS:
        before = {n: snapshot(state.network(n)) for n in training.NETWORKS}
        apply_gradients(state, name, grads[name])
        for other in training.NETWORKS:
            unchanged = same(before[other], snapshot(state.network(other)))
            assert unchanged == (other != name)


def test_gradients_do_not_cross_networks(small_set):
    state = TrainState(tiny_config("train.dtype=float64"))
    batch = state.next_batch(small_set)
    rng_state = state.rng.bit_generator.state
    grads, _ = compute_gradients(state, batch)
    # CFD reaches both discriminators but never the generator
    state.rng.bit_generator.state = rng_state
    state.config = copy.deepcopy(state.config)
    state.config.loss.lambda_align = state.config.loss.lambda_uniform = 0.0
    grads0, _ = compute_gradients(state, batch)
    assert same(grads["G"], grads0["G"])
    assert not same(grads["D_app"], grads0["D_app"])
    assert not same(grads["D_thm"], grads0["D_thm"])


class _ZeroFakes(torch.nn.Module):
    def __init__(self, g):
        super().__init__()
        self.g = g

    def forward(self, *a):
        return self.g(*a) * 0


def test_cfd_uses_only_real_features(small_set):
    state = TrainState(tiny_config("train.dtype=float64"))
    batch = state.next_batch(small_set)
    rng_state = state.rng.bit_generator.state
    _, a = compute_gradients(state, batch)
    state.rng.bit_generator.state = rng_state
    state.G = _ZeroFakes(state.G)
    _, b = compute_gradients(state, batch)
    assert a["L_align"] == b["L_align"] and a["L_uniform"] == b["L_uniform"]
    assert a["L_adv_d"] != b["L_adv_d"]


def test_zero_lambdas_equal_cfd_free_run(small_set):
    on = tiny_config("train.dtype=float64", "loss.lambda_align=0", "loss.lambda_uniform=0")
    off = tiny_config("train.dtype=float64", "train.cfd_enabled=false")
    sa, _ = run(on, small_set, 3)
    sb, _ = run(off, small_set, 3)
    for name in training.NETWORKS:
        assert same(snapshot(sa.network(name)), snapshot(sb.network(name)))


def test_both_branches_augmented_every_step(small_set, monkeypatch):
    calls = []
    real = training.augment_batch

    def spy(images, params):
        calls.append(params[0].kind)
        return real(images, params)

    monkeypatch.setattr(training, "augment_batch", spy)
    state = TrainState(tiny_config())
    for _ in range(3):
        calls.clear()
        train_step(state, state.next_batch(small_set))
        assert sorted(calls) == ["app", "app", "theme", "theme"]


def test_non_finite_loss_names_component(small_set, monkeypatch):
    state = TrainState(tiny_config())
    monkeypatch.setattr(training.losses, "uniform_loss", lambda g, t: torch.tensor(float("nan")))
    with pytest.raises(NonFiniteLossError, match="L_uniform"):
        train_step(state, state.next_batch(small_set))


def test_ema_examples():
    g = torch.nn.Linear(3, 2).double()
    e = copy.deepcopy(g)
    with torch.no_grad():
        for p in e.parameters():
            p.add_(1.0)
    before = snapshot(e)
    ema_update(g, e, 64, float("inf"))
    assert same(before, snapshot(e))
    ema_update(g, e, 100, 100)
    for b, p, q in zip(before, g.parameters(), e.parameters()):
        assert torch.allclose(q, (b + p) / 2, atol=1e-15)
    for _ in range(40):
        ema_update(g, e, 100, 100)
    for p, q in zip(g.parameters(), e.parameters()):
        assert torch.allclose(q, p, atol=1e-6)


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        ema_update(torch.nn.Linear(3, 2), torch.nn.Linear(2, 2), 1, 1)


def test_checkpoint_magic_and_roundtrip(small_set, tmp_path):
    cfg = tiny_config("train.dtype=float64")
    state, _ = run(cfg, small_set, 2)
    path = save_checkpoint(state, tmp_path / "c.pt")
    assert path.read_bytes().startswith(MAGIC)
    loaded = load_checkpoint(path, cfg)
    assert (loaded.step, loaded.images_seen) == (2, 16)
    for name in training.NETWORKS:
        assert same(snapshot(state.network(name)), snapshot(loaded.network(name)))
    assert same(snapshot(state.G_ema), snapshot(loaded.G_ema))
    _, a = train_step(state, state.next_batch(small_set))
    _, b = train_step(loaded, loaded.next_batch(small_set))
    assert a == b


def test_checkpoint_rejects_other_files_and_configs(small_set, tmp_path):
    bad = tmp_path / "x.pt"
    bad.write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    cfg = tiny_config()
    state = TrainState(cfg)
    path = save_checkpoint(state, tmp_path / "c.pt")
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(path, tiny_config("loss.t=3"))
    # budget changes do not alter the hash
    load_checkpoint(path, tiny_config("train.total_images=1600"))


def test_train_writes_outputs_and_resumes(small_set, tmp_path):
    cfg = tiny_config("train.dtype=float64", "train.checkpoint_every=3", "train.sample_every=3")
    full = train(cfg, small_set, tmp_path / "full", max_steps=6)
    part = train(cfg, small_set, tmp_path / "part", max_steps=3)
    assert part.step == 3
    resumed = train(cfg, small_set, tmp_path / "part", resume=tmp_path / "part" / "checkpoints" / "latest.pt",
                    max_steps=6)
    for name in training.NETWORKS:
        assert same(snapshot(full.network(name)), snapshot(resumed.network(name)))
    with open(tmp_path / "full" / "steplog.csv") as f:
        rows_full = list(csv.reader(f))
    with open(tmp_path / "part" / "steplog.csv") as f:
        rows_part = list(csv.reader(f))
    assert rows_full == rows_part and len(rows_full) == 7
    assert (tmp_path / "full" / "samples" / "step_000006.png").exists()
    assert (tmp_path / "full" / "checkpoints" / "ckpt_000003.pt").exists()
    assert RunConfig.from_dict(__import__("json").loads((tmp_path / "full" / "config.json").read_text())).hash() == cfg.hash()
    assert sorted(map(tuple, resumed.train_pairs)) == sorted(small_set.pairs())


def test_train_rejects_shape_mismatch(small_set):
    with pytest.raises(ValueError):
        train(tiny_config(apps=5), small_set, max_steps=1)


def test_probe_does_not_perturb_training(small_set, tmp_path):
    cfg = tiny_config("train.dtype=float64", "train.sample_every=1")
    with_io = train(cfg, small_set, tmp_path / "a", max_steps=3)
    without = train(cfg, small_set, None, max_steps=3)
    assert same(snapshot(with_io.G), snapshot(without.G))
