"""Loop-based reference implementations used to check the vectorized
losses and metrics. Plain Python floats and numpy only."""

from __future__ import annotations

import math

import numpy as np


def softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / max(math.sqrt(float(v @ v)), 1e-8)


def sqdist(a, b) -> float:
    d = unit(a) - unit(b)
    return float(d @ d)


def adv_loss(real, fake, side):
    if side == "generator":
        return sum(softplus(-f) for f in fake) / len(fake)
    return sum(softplus(-r) for r in real) / len(real) + sum(softplus(f) for f in fake) / len(fake)


def pair_score(p_i, p_j, v) -> float:
    return float(unit(p_i) @ unit(p_j)) + float(np.asarray(p_i) @ np.asarray(v))


def sim_adv_loss(patches, embedding, side):
    """patches: (N, M, D); embedding: (N, D)."""
    total, count = 0.0, 0
    for n in range(len(patches)):
        M = len(patches[n])
        for i in range(M):
            for j in range(i + 1, M):
                s = pair_score(patches[n][i], patches[n][j], embedding[n])
                total += softplus(s) if side == "disc_fake" else softplus(-s)
                count += 1
    return total / count


def _nested(groups: dict, term) -> float:
    per_group = []
    for key in sorted(groups):
        g = groups[key]
        vals = [term(sqdist(g[i], g[j])) for i in range(len(g)) for j in range(i + 1, len(g))]
        if vals:
            per_group.append(sum(vals) / len(vals))
    return sum(per_group) / len(per_group) if per_group else 0.0


def groups_from_labels(app_feats, thm_feats, apps, thms) -> dict:
    out = {"align_apps": {}, "unif_apps": {}, "align_thms": {}, "unif_thms": {}}
    for i in range(len(apps)):
        out["align_apps"].setdefault(apps[i], []).append(app_feats[i])
        out["unif_apps"].setdefault(thms[i], []).append(app_feats[i])
        out["align_thms"].setdefault(thms[i], []).append(thm_feats[i])
        out["unif_thms"].setdefault(apps[i], []).append(thm_feats[i])
    return out


def align_loss(groups: dict, eps_app: float, eps_theme: float) -> float:
    return (_nested(groups["align_apps"], lambda d: max(d - eps_app, 0.0))
            + _nested(groups["align_thms"], lambda d: max(d - eps_theme, 0.0)))


def uniform_loss(groups: dict, t: float) -> float:
    return (_nested(groups["unif_apps"], lambda d: math.exp(-t * d))
            + _nested(groups["unif_thms"], lambda d: math.exp(-t * d)))


def inception_score(probs) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    marginal = probs.mean(0)
    kls = []
    for p in probs:
        kls.append(sum(pi * math.log(pi / mi) for pi, mi in zip(p, marginal) if pi > 0))
    return math.exp(sum(kls) / len(kls))


def frechet_gaussian_1d_shift(shift: float) -> float:
    """N(0, I) vs N(shift e1, I): only the mean term survives."""
    return shift * shift


def fd_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = fn(x)
        flat[k] = old - h
        fm = fn(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
