"""PNG dumps for debugging: PVF frames, activation grids, head maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .pvf import build_pvf


def dump_pvf(pre_u8: np.ndarray, post_u8: np.ndarray, frames: int, out_dir) -> list:
    """Write ``frame_00.png`` ... for an 8-bit pair; the end frames reproduce the inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = build_pvf(pre_u8.astype(np.float64), post_u8.astype(np.float64), frames)
    paths = []
    for w, frame in enumerate(stack.frames):
        p = out_dir / f"frame_{w:02d}.png"
        Image.fromarray(np.clip(np.rint(frame), 0, 255).astype(np.uint8)).save(p)
        paths.append(p)
    return paths


def _to_gray(fmap) -> np.ndarray:
    a = fmap.detach().float().abs().mean(dim=0).cpu().numpy() if hasattr(fmap, "detach") else np.asarray(fmap)
    lo, hi = float(a.min()), float(a.max())
    a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    return (a * 255).astype(np.uint8)


def save_grid(maps, path, cell: int = 128, cols: int = 3) -> Path:
    """Tile 2-D maps (or CHW tensors, shown as mean |activation|) into one image."""
    rows = (len(maps) + cols - 1) // cols
    canvas = Image.new("L", (cols * cell, rows * cell), 0)
    for k, m in enumerate(maps):
        im = Image.fromarray(_to_gray(m)).resize((cell, cell), Image.NEAREST)
        canvas.paste(im, ((k % cols) * cell, (k // cols) * cell))
    canvas.save(path)
    return Path(path)
