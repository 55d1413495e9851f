"""Command line for synthesizing data and training, sampling and
evaluating icon generators.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import EVAL_PRESETS, ConfigError, RunConfig, load_config, merge

log = logging.getLogger("icongan")


class UsageError(Exception):
    """Raised for bad flags or configuration; maps to exit code 2."""


def _dropout(s: str) -> float:
    v = float(s)
    if not 0 <= v < 0.4:
        raise argparse.ArgumentTypeError("dropout must lie in [0, 0.4)")
    return v


def _resolution(s: str) -> int:
    v = int(s)
    if v < 32 or v & (v - 1):
        raise argparse.ArgumentTypeError("resolution must be a power of two >= 32")
    return v


def _at_least(n: int):
    def parse(s: str) -> int:
        v = int(s)
        if v < n:
            raise argparse.ArgumentTypeError(f"must be >= {n}")
        return v
    return parse


def _write_run_config(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    d = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    (out_dir / "run_config.json").write_text(json.dumps({"command": command, **d}, indent=2, sort_keys=True))


# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import synthesize_dataset

    m = synthesize_dataset(args.apps, args.themes, args.res, args.dropout, args.seed, args.out)
    _write_run_config(Path(args.out), "synth", args)
    print(f"wrote {len(m)} icons ({m.num_apps} apps x {m.num_themes} themes) to {args.out}")
    return 0


def resolve_train_config(args, manifest) -> RunConfig:
    cfg = load_config(args.config, None)
    # dataset shape always comes from the data
    merge(cfg, {"model": {"num_apps": manifest.num_apps, "num_themes": manifest.num_themes,
                          "resolution": manifest.resolution}})
    if args.set:
        from .config import parse_overrides
        merge(cfg, parse_overrides(args.set))
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def cmd_train(args) -> int:
    from .data import load_manifest
    from .report import plot_steplog
    from .training import CheckpointError, train

    manifest = load_manifest(args.data)
    try:
        cfg = resolve_train_config(args, manifest)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        state = train(cfg, manifest, out, resume=args.resume, max_steps=args.max_steps)
    except CheckpointError as e:
        raise UsageError(str(e)) from None
    plot_steplog(out / "steplog.csv", out / "loss_curves.png")
    print(f"trained to step {state.step} ({state.images_seen} images); outputs in {out}")
    return 0


def _parse_grid(s: str | None, n: int) -> int:
    if s is None:
        return 1
    try:
        rows, cols = (int(v) for v in s.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid must look like ROWSxCOLS, got {s!r}") from None
    if rows * cols < n:
        raise UsageError(f"--grid {s} holds fewer than --n {n} icons")
    return rows


def cmd_sample(args) -> int:
    from .report import save_contact_sheet
    from .training import load_generator, read_checkpoint

    g, _, _, cfg = load_generator(args.ckpt)
    if not 0 <= args.app < cfg.model.num_apps or not 0 <= args.theme < cfg.model.num_themes:
        raise UsageError(f"label out of range: app in [0, {cfg.model.num_apps}), "
                         f"theme in [0, {cfg.model.num_themes})")
    rows = _parse_grid(args.grid, args.n)
    pairs = read_checkpoint(args.ckpt).get("train_pairs")
    if pairs and [args.app, args.theme] not in pairs:
        print(f"note: (app={args.app}, theme={args.theme}) was not in the training data; "
              "generating an unseen combination", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    z = torch.from_numpy(rng.standard_normal((args.n, cfg.model.z_dim))).to(g.const.dtype)
    with torch.no_grad():
        imgs = g(z, torch.full((args.n,), args.app), torch.full((args.n,), args.theme))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_contact_sheet(imgs, out, rows=rows)
    print(f"wrote {args.n} samples to {out}")
    return 0


def _load_extractors(aux_dir: Path):
    from .evaluation import FeatureExtractor

    paths = {axis: aux_dir / f"{axis}.pt" for axis in ("app", "theme")}
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        raise UsageError(f"auxiliary classifiers not found ({', '.join(missing)}); "
                         f"run `icongan aux --data DATA` (train_aux_classifiers) first")
    return FeatureExtractor.load(paths["app"]), FeatureExtractor.load(paths["theme"])


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .evaluation import METRIC_NAMES, evaluate
    from .report import plot_metrics
    from .training import load_generator

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRIC_NAMES]
    if bad or not metrics:
        raise UsageError(f"unknown metric(s) {bad}; valid names: {', '.join(METRIC_NAMES)}")
    manifest = load_manifest(args.data)
    g, d_app, d_thm, cfg = load_generator(args.ckpt)
    _check_shape(cfg, manifest)
    aux = Path(args.aux) if args.aux else manifest.root / "aux"
    app_ext, thm_ext = _load_extractors(aux)
    merge(cfg.eval, EVAL_PRESETS[args.budget_preset])
    report = evaluate(g, manifest, app_ext, thm_ext, metrics, cfg.eval, args.seed, d_app, d_thm)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    plot_metrics(report.to_dict(), out.with_suffix(".png"))
    print(report.to_json())
    return 0


def _check_shape(cfg: RunConfig, manifest) -> None:
    m = cfg.model
    if (m.num_apps, m.num_themes, m.resolution) != (manifest.num_apps, manifest.num_themes, manifest.resolution):
        raise UsageError(f"checkpoint expects A={m.num_apps}, T={m.num_themes}, R={m.resolution}; "
                         f"data has A={manifest.num_apps}, T={manifest.num_themes}, R={manifest.resolution}")


def cmd_features(args) -> int:
    from .data import load_manifest
    from .evaluation import discriminator_features, export_features
    from .training import load_generator

    manifest = load_manifest(args.data)
    _, d_app, d_thm, cfg = load_generator(args.ckpt)
    _check_shape(cfg, manifest)
    fa, ft = discriminator_features(d_app, d_thm, manifest.images(), manifest.app_ids(), manifest.theme_ids())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_features(out / "app_features.csv", fa, manifest)
    export_features(out / "theme_features.csv", ft, manifest)
    _write_run_config(out, "features", args)
    print(f"exported {len(fa)} rows: app features ({fa.shape[1]}), theme features ({ft.shape[1]}) to {out}")
    return 0


def cmd_aux(args) -> int:
    from .config import EvalConfig
    from .data import load_manifest
    from .evaluation import train_aux_classifiers

    manifest = load_manifest(args.data)
    out = Path(args.out) if args.out else manifest.root / "aux"
    out.mkdir(parents=True, exist_ok=True)
    cfg = EvalConfig(classifier_floor=args.floor)
    axes = ("app", "theme") if args.axis == "both" else (args.axis,)
    for axis in axes:
        ext = train_aux_classifiers(manifest, axis, args.seed, cfg)
        ext.save(out / f"{axis}.pt")
        print(f"{axis} classifier: validation top-1 {ext.val_accuracy:.3f} -> {out / f'{axis}.pt'}")
    return 0


def cmd_ablation(args) -> int:
    from .experiments import run_desk_ablation

    overrides = args.set or []
    summary = run_desk_ablation(args.data, args.out, seeds=args.seeds, images=args.images,
                                overrides=overrides)
    print(json.dumps(summary["verdict"], indent=2))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icongan", description=" ".join(__doc__.split("\n\n")[0].split()))
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize an orthogonal-label icon dataset")
    s.add_argument("--out", default="data/synthetic")
    s.add_argument("--apps", type=_at_least(2), default=8)
    s.add_argument("--themes", type=_at_least(2), default=12)
    s.add_argument("--res", type=_resolution, default=64)
    s.add_argument("--dropout", type=_dropout, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train generator and both discriminators")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON config file (one section per module)")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    sm = sub.add_parser("sample", help="render a contact sheet from the EMA generator")
    sm.add_argument("--ckpt", required=True)
    sm.add_argument("--app", type=int, required=True)
    sm.add_argument("--theme", type=int, required=True)
    sm.add_argument("--n", type=_at_least(1), default=8)
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--grid", help="layout ROWSxCOLS (default 1xN)")
    sm.add_argument("--out", default="samples.png")
    sm.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="compute the metrics report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", default="acc,fid,is,lpips,disent")
    e.add_argument("--budget-preset", choices=sorted(EVAL_PRESETS), default="desk")
    e.add_argument("--aux", help="directory holding app.pt / theme.pt (default DATA/aux)")
    e.add_argument("--out", default="metrics.json")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("features", help="export discriminator features of real icons")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_features)

    a = sub.add_parser("aux", help="train the auxiliary evaluation classifiers")
    a.add_argument("--data", required=True)
    a.add_argument("--axis", choices=("app", "theme", "both"), default="both")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--floor", type=float, default=0.9)
    a.add_argument("--out")
    a.set_defaults(func=cmd_aux)

    b = sub.add_parser("ablation", help="desk-scale with/without contrastive-term comparison")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    b.add_argument("--images", type=int, default=50_000)
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.set_defaults(func=cmd_ablation)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"icongan {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # surfaced as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"icongan {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
