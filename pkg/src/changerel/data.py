"""Bi-temporal samples: manifests, loading, tiling, augmentation and synthetic scenes."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .errors import DegenerateInputError, GeometryError, ManifestError, ParameterError

AUGMENT_OPS = ("identity", "flip_h", "flip_v", "rot90", "rot180", "rot270")
LABEL_THRESHOLD = 127
SUBDIRS = ("A", "B", "label")


@dataclass
class BiTemporalSample:
    image_pre: np.ndarray   # (H, W, 3) float32 in [0, 1]
    image_post: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: np.ndarray       # (H, W) uint8 in {0, 1}
    id: str = ""

    def __post_init__(self):
        hw = self.image_pre.shape[:2]
        if self.image_post.shape[:2] != hw or self.label.shape != hw:
            raise GeometryError(
                f"sample {self.id!r}: pre {self.image_pre.shape}, post {self.image_post.shape}, "
                f"label {self.label.shape} do not share H and W")

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape


class ManifestEntry(NamedTuple):
    pre: Path
    post: Path
    label: Path

    @property
    def id(self) -> str:
        return Path(self.pre).stem


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    split: str
    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)
    tile_size: int = 256

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ManifestError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.entries)

    def validate(self) -> None:
        """Check every entry's files exist and decode to rasters of one size."""
        for entry in self.entries:
            sizes = []
            for p in entry:
                if not Path(p).is_file():
                    raise ManifestError(f"missing file: {p}")
                with Image.open(p) as im:
                    sizes.append(im.size)
            if len(set(sizes)) != 1:
                raise GeometryError(f"entry {entry.id!r}: raster sizes differ {sizes}")


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    """Serialize as ``pre<TAB>post<TAB>label`` lines, paths relative to the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    lines = []
    for e in manifest.entries:
        rel = [os.path.relpath(Path(p).resolve(), base) for p in e]
        lines.append("\t".join(Path(r).as_posix() for r in rel))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | os.PathLike, split: str | None = None, tile_size: int = 256,
                  check: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"missing file: {path}")
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated paths")
        entries.append(ManifestEntry(*[(base / p) for p in parts]))
    if split is None:
        split = path.stem if path.stem in ("train", "val", "test") else "test"
    manifest = DatasetManifest(root=base, split=split, entries=tuple(entries), tile_size=tile_size)
    if check:
        for e in manifest.entries:
            for p in e:
                if not p.is_file():
                    raise ManifestError(f"missing file: {p}")
    return manifest


def scan_dataset(root: str | os.PathLike, split: str = "test", tile_size: int = 256) -> DatasetManifest:
    """Build a manifest from the ``root/{A,B,label}/<id>.png`` layout."""
    root = Path(root)
    for sub in SUBDIRS:
        if not (root / sub).is_dir():
            raise ManifestError(f"missing directory: {root / sub}")
    entries = []
    for pre in sorted((root / "A").glob("*.png")):
        post, label = root / "B" / pre.name, root / "label" / pre.name
        for p in (post, label):
            if not p.is_file():
                raise ManifestError(f"missing file: {p}")
        entries.append(ManifestEntry(pre, post, label))
    return DatasetManifest(root=root, split=split, entries=tuple(entries), tile_size=tile_size)


def _read_8bit(path: Path) -> Image.Image:
    if not Path(path).is_file():
        raise ManifestError(f"missing file: {path}")
    im = Image.open(path)
    if im.mode not in ("L", "P", "RGB", "RGBA"):
        raise ManifestError(f"{path}: expected an 8-bit raster, got mode {im.mode}")
    return im


def binarize_label(raw: np.ndarray) -> np.ndarray:
    return (np.asarray(raw) > LABEL_THRESHOLD).astype(np.uint8)


def load_sample(entry: ManifestEntry) -> BiTemporalSample:
    with _read_8bit(entry.pre) as a, _read_8bit(entry.post) as b, _read_8bit(entry.label) as m:
        pre = np.asarray(a.convert("RGB"), dtype=np.float32) / 255.0
        post = np.asarray(b.convert("RGB"), dtype=np.float32) / 255.0
        raw = np.asarray(m.convert("L"))
    if not (pre.shape == post.shape and pre.shape[:2] == raw.shape):
        raise GeometryError(f"entry {entry.id!r}: sizes differ pre={pre.shape[:2]} "
                            f"post={post.shape[:2]} label={raw.shape}")
    return BiTemporalSample(pre, post, binarize_label(raw), id=entry.id)


def tile_pair(sample: BiTemporalSample, tile_size: int = 256) -> list[BiTemporalSample]:
    """Cut non-overlapping row-major tiles; trailing remainders are dropped."""
    h, w = sample.shape
    if h < tile_size or w < tile_size:
        raise DegenerateInputError(f"sample {sample.id!r} ({h}x{w}) smaller than tile {tile_size}")
    tiles = []
    for r in range(h // tile_size):
        for c in range(w // tile_size):
            ys = slice(r * tile_size, (r + 1) * tile_size)
            xs = slice(c * tile_size, (c + 1) * tile_size)
            tiles.append(BiTemporalSample(
                sample.image_pre[ys, xs].copy(), sample.image_post[ys, xs].copy(),
                sample.label[ys, xs].copy(), id=f"{sample.id}_r{r}c{c}"))
    return tiles


def augment_array(arr: np.ndarray, op: str) -> np.ndarray:
    """Apply one geometric op to the two leading (spatial) axes."""
    if op == "identity":
        return arr
    if op == "flip_h":
        return arr[:, ::-1].copy()
    if op == "flip_v":
        return arr[::-1].copy()
    if op in ("rot90", "rot180", "rot270"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
        return np.rot90(arr, k, axes=(0, 1)).copy()
    raise ParameterError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")


def augment(sample: BiTemporalSample, op: str) -> BiTemporalSample:
    if op not in AUGMENT_OPS:
        raise ParameterError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")
    h, w = sample.shape
    if op in ("rot90", "rot270") and h != w:
        raise GeometryError(f"{op} needs a square tile, got {h}x{w}")
    return BiTemporalSample(augment_array(sample.image_pre, op), augment_array(sample.image_post, op),
                            augment_array(sample.label, op), id=sample.id)


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells)).astype(np.float32)
    im = Image.fromarray(coarse, mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.55, size=3).astype(np.float32)
    low = _smooth_noise(rng, size, 4) - 0.5
    mid = _smooth_noise(rng, size, max(4, size // 8)) - 0.5
    tint = rng.uniform(0.5, 1.5, size=3).astype(np.float32)
    img = base + 0.25 * low[..., None] * tint + 0.12 * mid[..., None]
    img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    return img


def _roof(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    # keep roofs away from mid-grey so they contrast with the background
    color = np.where(np.abs(color - 0.45) < 0.25, color + np.sign(color - 0.45 + 1e-6) * 0.3, color)
    patch = np.broadcast_to(color, (h, w, 3)).copy()
    patch += rng.normal(0.0, 0.02, size=patch.shape).astype(np.float32)
    if h > 4 and w > 4:
        patch[[0, -1], :] *= 0.7
        patch[:, [0, -1]] *= 0.7
    return patch


def _random_rect(rng, size, min_side, max_side, budget=None):
    h = int(rng.integers(min_side, max_side + 1))
    w = int(rng.integers(min_side, max_side + 1))
    if budget is not None and h * w > 1.3 * budget:
        w = max(1, int(budget / h))
        if h * w > 1.3 * budget or w < min_side:
            h = w = max(1, int(np.sqrt(budget)))
    y = int(rng.integers(0, size - h + 1))
    x = int(rng.integers(0, size - w + 1))
    return y, x, h, w


def _shadow_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask)
    for _ in range(int(rng.integers(1, 4))):
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(size / 12, size / 5)
        n = int(rng.integers(3, 6))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        pts = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a in ang]
        draw.polygon(pts, fill=255)
    mask = mask.filter(ImageFilter.GaussianBlur(radius=max(1.0, size / 64)))
    return np.asarray(mask, dtype=np.float32) / 255.0


def synth_sample(rng: np.random.Generator, size: int, change_rate: float):
    """Return (pre, post, label) uint8 rasters for one synthetic scene."""
    bg = _background(rng, size)
    pre, post = bg.copy(), bg.copy()
    min_side, max_side = max(4, size // 16), max(6, size // 4)

    for _ in range(int(rng.integers(2, 6))):  # static buildings, present in both
        y, x, h, w = _random_rect(rng, size, min_side, max_side)
        roof = _roof(rng, h, w)
        pre[y:y + h, x:x + w] = roof
        post[y:y + h, x:x + w] = roof

    label = np.zeros((size, size), dtype=bool)
    target = change_rate * size * size
    tries = 0
    while target >= 1 and label.sum() < 0.85 * target and tries < 1000:
        tries += 1
        budget = target - label.sum()
        y, x, h, w = _random_rect(rng, size, min_side, max_side, budget)
        grown = label.sum() + h * w - label[y:y + h, x:x + w].sum()
        if grown > 1.3 * target:
            continue
        roof = _roof(rng, h, w)
        (post if rng.random() < 0.5 else pre)[y:y + h, x:x + w] = roof
        label[y:y + h, x:x + w] = True

    # non-semantic changes, each on one image only
    target_img = pre if rng.random() < 0.5 else post
    gain, offset = rng.uniform(0.8, 1.2), rng.uniform(-0.08, 0.08)
    target_img *= np.float32(gain)
    target_img += np.float32(offset)
    shade_img = pre if rng.random() < 0.5 else post
    shade = _shadow_mask(rng, size)
    shade_img *= (1.0 - rng.uniform(0.3, 0.5) * shade)[..., None].astype(np.float32)

    to8 = lambda a: (np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)  # noqa: E731
    return to8(pre), to8(post), label.astype(np.uint8) * 255


def synth_dataset(seed: int, n_samples: int, size: int, change_rate: float,
                  root: str | os.PathLike, split: str = "train") -> DatasetManifest:
    """Write a deterministic synthetic split under ``root`` and return its manifest.

    Rectangles inserted in or removed from one date are the labelled (semantic)
    changes. A global gain/offset and blurred shadow polygons applied to one
    date only are unlabelled nuisance changes.
    """
    if size < 64:
        raise ParameterError(f"size must be >= 64, got {size}")
    if not 0.0 < change_rate < 1.0:
        raise ParameterError(f"change_rate must lie in (0, 1), got {change_rate}")
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        pre, post, label = synth_sample(rng, size, change_rate)
        name = f"{split}_{i:05d}.png"
        paths = ManifestEntry(root / "A" / name, root / "B" / name, root / "label" / name)
        Image.fromarray(pre).save(paths.pre)
        Image.fromarray(post).save(paths.post)
        Image.fromarray(label).save(paths.label)
        entries.append(paths)
    manifest = DatasetManifest(root=root, split=split, entries=tuple(entries), tile_size=size)
    write_manifest(manifest, root / f"{split}.txt")
    return manifest


def load_split(manifest: DatasetManifest, tile_size: int | None = None) -> list[BiTemporalSample]:
    """Load every entry and tile it to the manifest's tile size."""
    tile_size = tile_size or manifest.tile_size
    out = []
    for entry in manifest.entries:
        s = load_sample(entry)
        out.extend([s] if s.shape == (tile_size, tile_size) else tile_pair(s, tile_size))
    return out


def stack_batch(samples: Sequence[BiTemporalSample]):
    """Stack samples into NCHW float32 arrays (pre, post) and an N1HW label array."""
    pre = np.stack([s.image_pre for s in samples]).transpose(0, 3, 1, 2)
    post = np.stack([s.image_post for s in samples]).transpose(0, 3, 1, 2)
    label = np.stack([s.label for s in samples])[:, None].astype(np.float32)
    return np.ascontiguousarray(pre), np.ascontiguousarray(post), label
