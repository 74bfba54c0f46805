"""Command line entry point: synth, train, eval, infer, pvf-dump, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, trainer, viz
from .config import dump_config, load_config
from .errors import ChangeRelError, ConfigError
from .metrics import format_table, write_report

log = logging.getLogger("changerel")


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="key-value (YAML) config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key; repeatable")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="changerel", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic bi-temporal split")
    _common(p, config=False)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--rate", type=float, default=0.1, help="target changed-pixel fraction")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))

    p = sub.add_parser("train", help="train a model")
    _common(p)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("infer", help="predict a change map for one image pair")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pre", required=True)
    p.add_argument("--post", required=True)
    p.add_argument("--label", default=None)
    p.add_argument("--debug", action="store_true", help="also dump activation and head grids")

    p = sub.add_parser("pvf-dump", help="write the pseudo video frames of a pair as PNGs")
    _common(p, config=False)
    p.add_argument("--pre", required=True)
    p.add_argument("--post", required=True)
    p.add_argument("--frames", type=int, default=4)

    p = sub.add_parser("ablate", help="run the SCR/CCR and frame-count ablation grid")
    _common(p)
    p.add_argument("--grid", default="scr,ccr")
    p.add_argument("--frames", default="2,3,4")
    p.add_argument("--no-temporal", action="store_true")
    return ap


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    return load_config(args.config, overrides)


def _out(args, default="out") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    out = _out(args, "data")
    m = data.synth_dataset(args.seed if args.seed is not None else 0, args.n, args.size, args.rate, out, args.split)
    print(f"wrote {len(m)} samples to {out} (manifest {out / (args.split + '.txt')})")


def cmd_train(args):
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    ckpt = trainer.train(cfg)
    path = cfg.checkpoint or out / "final.ckpt"
    first, last = (ckpt.history[0], ckpt.history[-1]) if ckpt.history else (float("nan"),) * 2
    print(f"trained {ckpt.step} steps; loss {first:.4f} -> {last:.4f}; checkpoint {path}")


def cmd_eval(args):
    cfg = _config(args) if (args.config or args.overrides) else None
    ckpt = trainer.load_checkpoint(args.checkpoint)
    saved = ckpt.train_config()
    manifest = data.read_manifest(args.manifest, tile_size=saved.tile_size)
    rep = trainer.evaluate(ckpt, manifest, cfg)
    out = _out(args, "eval")
    table = format_table({Path(args.manifest).stem: rep.scores})
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    write_report(rep.scores, rep.counts, out / "metrics.kv")
    print(table)
    if rep.scores.degenerate:
        print(f"degenerate ratios (reported as 0): {', '.join(rep.scores.degenerate)}")


def _read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def cmd_infer(args):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config()
    model = trainer.model_from_checkpoint(ckpt)
    pre, post = _read_rgb(args.pre), _read_rgb(args.post)
    label = None
    if args.label:
        with Image.open(args.label) as im:
            label = data.binarize_label(np.asarray(im.convert("L")))
    has_label = label is not None
    if not has_label:
        label = np.zeros(pre.shape[:2], dtype=np.uint8)  # placeholder so the pair can be tiled
    sample = data.BiTemporalSample(pre, post, label, id=Path(args.pre).stem)
    t = cfg.tile_size
    tiles = [sample] if sample.shape == (t, t) else data.tile_pair(sample, t)
    cols = sample.shape[1] // t
    cm = np.zeros(((len(tiles) // cols) * t, cols * t), dtype=np.float32)
    colors = np.zeros(cm.shape + (3,), dtype=np.uint8)
    out = _out(args, "infer")
    for k, tile in enumerate(tiles):
        r, c = divmod(k, cols)
        p, col = trainer.infer(ckpt, tile.image_pre, tile.image_post, tile.label if has_label else None, model=model)
        cm[r * t:(r + 1) * t, c * t:(c + 1) * t] = p
        if col is not None:
            colors[r * t:(r + 1) * t, c * t:(c + 1) * t] = col
        if args.debug and k == 0:
            import torch
            to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]  # noqa: E731
            with torch.no_grad():
                o = model(to_t(tile.image_pre), to_t(tile.image_post))
            viz.save_grid([a[0] for row in o.activations for a in row], out / "activations.png")
            viz.save_grid([h[0, 0] for h in o.head_probs], out / "heads.png")
    Image.fromarray((np.clip(cm, 0, 1) * 255 + 0.5).astype(np.uint8)).save(out / "change_prob.png")
    np.save(out / "change_prob.npy", cm)
    if has_label:
        Image.fromarray(colors).save(out / "change_colors.png")
    print(f"mean change probability {cm.mean():.4f}; outputs in {out}")


def cmd_pvf_dump(args):
    with Image.open(args.pre) as a, Image.open(args.post) as b:
        pre, post = np.asarray(a.convert("RGB")), np.asarray(b.convert("RGB"))
    paths = viz.dump_pvf(pre, post, args.frames, _out(args, "pvf"))
    print("\n".join(str(p) for p in paths))


def cmd_ablate(args):
    cfg = _config(args)
    grid = tuple(g.strip() for g in args.grid.split(",") if g.strip())
    unknown = set(grid) - {"scr", "ccr"}
    if unknown:
        raise ConfigError(f"unknown grid axes: {', '.join(sorted(unknown))}")
    try:
        frames = tuple(int(f) for f in args.frames.split(",") if f.strip())
    except ValueError:
        raise ConfigError(f"--frames expects comma-separated integers, got {args.frames!r}") from None
    rows = trainer.run_ablation(cfg, grid, frames, temporal=not args.no_temporal)
    table = trainer.format_ablation(rows)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps(rows, indent=1, sort_keys=True), encoding="utf-8")
    print(table)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "pvf-dump": cmd_pvf_dump, "ablate": cmd_ablate}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except ChangeRelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
