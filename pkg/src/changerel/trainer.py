"""Training, evaluation, inference, checkpoints and the ablation grid."""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .baselines import SiamConcBaseline
from .config import TrainConfig, model_spec
from .data import AUGMENT_OPS, augment, load_split, read_manifest, stack_batch
from .errors import CompatibilityError, ConfigError, NumericalAbort, ShapeError
from .losses import total_loss
from .metrics import ConfusionCounts, Scores, color_map, confusion, scores
from .model import ChangeRelationNet

log = logging.getLogger(__name__)

CKPT_FORMAT = "changerel-ckpt/1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
# keys that change the parameter layout; a checkpoint only loads into a matching model
ARCH_KEYS = ("model", "backbone", "enable_scr", "enable_ccr", "ccr_mode", "frames")


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_model(config: TrainConfig) -> torch.nn.Module:
    spec = model_spec(config.backbone)
    mode = config.effective_ccr_mode
    if config.model == "baseline":
        return SiamConcBaseline(spec, ccr_mode=mode, frames=config.frames)
    return ChangeRelationNet(spec, enable_scr=config.enable_scr, ccr_mode=mode, frames=config.frames)


def n_decoder_heads(model) -> int:
    return 1 if isinstance(model, SiamConcBaseline) else 3


def count_parameters(model) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    step: int
    model_state: "OrderedDict[str, torch.Tensor]"
    optim_state: Optional[dict] = None
    history: list = field(default_factory=list)

    @property
    def namespaces(self) -> list:
        return sorted({k.split(".", 1)[0] for k in self.model_state})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def _npy_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def _writestr(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write a zip archive with one ``.npy`` blob per tensor under its namespace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(ckpt.model_state)
    meta = {"format": CKPT_FORMAT, "step": ckpt.step, "config": ckpt.config,
            "history": ckpt.history, "tensors": names}
    with zipfile.ZipFile(path, "w") as zf:
        _writestr(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1))
        for name in names:
            ns, rest = name.split(".", 1) if "." in name else ("root", name)
            _writestr(zf, f"params/{ns}/{rest}.npy", _npy_bytes(ckpt.model_state[name]))
        if ckpt.optim_state is not None:
            groups = ckpt.optim_state["param_groups"]
            _writestr(zf, "optim/param_groups.json", json.dumps(groups, sort_keys=True, indent=1))
            for idx in sorted(ckpt.optim_state["state"]):
                for key, val in sorted(ckpt.optim_state["state"][idx].items()):
                    _writestr(zf, f"optim/state/{idx}/{key}.npy", _npy_bytes(torch.as_tensor(val)))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CompatibilityError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CKPT_FORMAT:
            raise CompatibilityError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        state = OrderedDict()
        for name in meta["tensors"]:
            ns, rest = name.split(".", 1) if "." in name else ("root", name)
            state[name] = torch.from_numpy(np.load(io.BytesIO(zf.read(f"params/{ns}/{rest}.npy"))))
        optim = None
        members = set(zf.namelist())
        if "optim/param_groups.json" in members:
            optim = {"param_groups": json.loads(zf.read("optim/param_groups.json")), "state": {}}
            for m in sorted(members):
                if m.startswith("optim/state/"):
                    idx, key = m[len("optim/state/"):-len(".npy")].split("/", 1)
                    arr = torch.from_numpy(np.load(io.BytesIO(zf.read(m))))
                    optim["state"].setdefault(int(idx), {})[key] = arr
    return Checkpoint(meta["config"], meta["step"], state, optim, meta.get("history", []))


def model_from_checkpoint(ckpt: Checkpoint, config: Optional[TrainConfig] = None) -> torch.nn.Module:
    saved = ckpt.train_config()
    if config is not None:
        diff = [k for k in ARCH_KEYS if getattr(config, k) != getattr(saved, k)]
        if config.effective_ccr_mode != saved.effective_ccr_mode:
            diff.append("effective ccr mode")
        if diff:
            raise CompatibilityError(f"config and checkpoint disagree on: {', '.join(diff)}")
    model = build_model(saved)
    try:
        model.load_state_dict(ckpt.model_state, strict=True)
    except RuntimeError as exc:
        raise CompatibilityError(f"checkpoint does not match the {saved.backbone!r} model: {exc}") from None
    model.eval()
    return model


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

def _normalizer(config: TrainConfig):
    if config.normalize_mean is None and config.normalize_std is None:
        return lambda x: x
    mean = torch.tensor(config.normalize_mean or [0.0, 0.0, 0.0]).view(1, 3, 1, 1)
    std = torch.tensor(config.normalize_std or [1.0, 1.0, 1.0]).view(1, 3, 1, 1)
    return lambda x: (x - mean) / std


def _to_tensors(samples, norm):
    pre, post, label = stack_batch(samples)
    return norm(torch.from_numpy(pre)), norm(torch.from_numpy(post)), torch.from_numpy(label)


def forward_loss(model, pre, post, label, config: TrainConfig):
    out = model(pre, post)
    report = total_loss(out.head_probs, out.aux_prob, label, lam=config.lam,
                        sigma=config.dice_sigma, n_heads=n_decoder_heads(model))
    return out, report


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    counts: ConfusionCounts
    scores: Scores
    tile_counts: list

    def as_dict(self) -> dict:
        d = self.scores.as_dict()
        d.update(tp=self.counts.tp, fp=self.counts.fp, fn=self.counts.fn, tn=self.counts.tn)
        return d


def train(config: TrainConfig, samples=None, val_samples=None) -> Checkpoint:
    """Optimize the configured model and return the final checkpoint.

    ``samples`` / ``val_samples`` may be passed pre-loaded; otherwise they
    are read from the manifests named in the config.
    """
    set_seed(config.seed)
    if samples is None:
        if not config.train_manifest:
            raise ConfigError("train_manifest is not set")
        samples = load_split(read_manifest(config.train_manifest, "train", config.tile_size))
    if val_samples is None and config.val_manifest:
        val_samples = load_split(read_manifest(config.val_manifest, "val", config.tile_size))
    if not samples:
        raise ConfigError("training split is empty")
    for s in samples:
        if s.shape != (config.tile_size, config.tile_size):
            raise ShapeError(f"sample {s.id!r} is {s.shape}, expected tile {config.tile_size}")

    model = build_model(config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    norm = _normalizer(config)
    rng = np.random.default_rng(config.seed)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = []
    order, cursor = rng.permutation(len(samples)), 0

    with open(out_dir / "train.log", "w", encoding="utf-8", buffering=1) as logf:
        for step in range(1, config.steps + 1):
            batch = []
            for _ in range(config.batch_size):
                if cursor == len(order):
                    order, cursor = rng.permutation(len(samples)), 0
                s = samples[order[cursor]]
                cursor += 1
                if config.augment:
                    s = augment(s, AUGMENT_OPS[rng.integers(len(AUGMENT_OPS))])
                batch.append(s)
            pre, post, label = _to_tensors(batch, norm)
            opt.zero_grad(set_to_none=True)
            _, report = forward_loss(model, pre, post, label, config)
            total = float(report.total.detach())
            if not math.isfinite(total):
                ids = [s.id for s in batch]
                dump = out_dir / "abort.txt"
                dump.write_text(f"step={step}\nbatch={','.join(ids)}\n{report.log_line(step)}\n", encoding="utf-8")
                raise NumericalAbort(f"non-finite loss at step {step}; batch {ids}; see {dump}")
            report.total.backward()
            opt.step()
            history.append(total)
            if step % max(config.log_every, 1) == 0 or step == config.steps:
                logf.write(report.log_line(step) + "\n")
            if val_samples and config.val_every and step % config.val_every == 0:
                rep = evaluate_model(model, val_samples, config)
                model.train()
                logf.write(f"val step={step} " + " ".join(f"{k}={v:.4f}" for k, v in rep.scores.as_dict().items()) + "\n")
                log.info("step %d loss %.4f val f1 %.4f", step, total, rep.scores.f1)
            if config.ckpt_every and step % config.ckpt_every == 0:
                save_checkpoint(_snapshot(model, opt, config, step, history), out_dir / f"step_{step:06d}.ckpt")

    ckpt = _snapshot(model, opt, config, config.steps, history)
    save_checkpoint(ckpt, config.checkpoint or out_dir / "final.ckpt")
    return ckpt


def _snapshot(model, opt, config, step, history) -> Checkpoint:
    state = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
    osd = opt.state_dict()
    optim = {"param_groups": osd["param_groups"],
             "state": {i: {k: v.detach().clone() if torch.is_tensor(v) else v for k, v in s.items()}
                       for i, s in osd["state"].items()}}
    return Checkpoint(config.to_dict(), step, state, optim, list(history))


def restore_optimizer(ckpt: Checkpoint, model) -> torch.optim.Optimizer:
    cfg = ckpt.train_config()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if ckpt.optim_state is not None:
        opt.load_state_dict(ckpt.optim_state)
    return opt


# --------------------------------------------------------------------------
# evaluation and inference
# --------------------------------------------------------------------------

@torch.no_grad()
def predict(model, samples, config: TrainConfig, batch_size: int = 8):
    """Yield (sample, change probability map) pairs."""
    model.eval()
    norm = _normalizer(config)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        pre, post, _ = _to_tensors(chunk, norm)
        cm = model(pre, post).cm[:, 0].numpy()
        yield from zip(chunk, cm)


def evaluate_model(model, samples, config: TrainConfig, batch_size: int = 8) -> EvalReport:
    tile_counts = [confusion(cm, s.label, config.threshold) for s, cm in predict(model, samples, config, batch_size)]
    if not tile_counts:
        raise ConfigError("evaluation split is empty")
    counts = ConfusionCounts.merge(tile_counts)
    return EvalReport(counts, scores(counts), tile_counts)


def evaluate(checkpoint: Checkpoint, manifest, config: Optional[TrainConfig] = None,
             batch_size: int = 8) -> EvalReport:
    model = model_from_checkpoint(checkpoint, config)
    cfg = checkpoint.train_config()
    samples = load_split(manifest, cfg.tile_size)
    return evaluate_model(model, samples, cfg, batch_size)


@torch.no_grad()
def infer(checkpoint: Checkpoint, image_pre: np.ndarray, image_post: np.ndarray,
          label: Optional[np.ndarray] = None, model=None):
    """Return the (H, W) change probability map and, with a label, its TP/TN/FP/FN rendering."""
    cfg = checkpoint.train_config()
    if image_pre.shape != image_post.shape:
        raise ShapeError(f"image shapes differ: {image_pre.shape} vs {image_post.shape}")
    if image_pre.shape[:2] != (cfg.tile_size, cfg.tile_size):
        raise ShapeError(f"pair is {image_pre.shape[:2]}, model expects {cfg.tile_size}x{cfg.tile_size} tiles")
    model = model or model_from_checkpoint(checkpoint)
    norm = _normalizer(cfg)
    to_t = lambda a: norm(torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1), dtype=np.float32))[None])  # noqa: E731
    cm = model(to_t(image_pre), to_t(image_post)).cm[0, 0].numpy()
    colors = color_map(cm, label, cfg.threshold) if label is not None else None
    return cm, colors


# --------------------------------------------------------------------------
# ablation grid
# --------------------------------------------------------------------------

def ablation_cells(grid=("scr", "ccr"), frames=(2, 3, 4), temporal=True):
    """Yield (table, label, overrides) for the SCR/CCR cells and the frame-count rows."""
    cells = []
    if "scr" in grid or "ccr" in grid:
        scr_opts = (False, True) if "scr" in grid else (True,)
        ccr_opts = (False, True) if "ccr" in grid else (True,)
        for scr in scr_opts:
            for ccr in ccr_opts:
                cells.append(("overall", f"scr={int(scr)} ccr={int(ccr)}",
                              dict(enable_scr=scr, enable_ccr=ccr, ccr_mode="ccr" if ccr else "none", frames=4)))
    cells.append(("ccr", "none", dict(enable_scr=True, enable_ccr=False, ccr_mode="none", frames=4)))
    if temporal:
        cells.append(("ccr", "temporal W=4", dict(enable_scr=True, enable_ccr=True, ccr_mode="temporal", frames=4)))
    for w in frames:
        cells.append(("ccr", f"ccr W={w}", dict(enable_scr=True, enable_ccr=True, ccr_mode="ccr", frames=w)))
    return cells


def run_ablation(base: TrainConfig, grid=("scr", "ccr"), frames=(2, 3, 4), temporal=True,
                 samples=None, val_samples=None) -> list:
    """Train and score every cell; identical configurations are trained once."""
    if samples is None:
        samples = load_split(read_manifest(base.train_manifest, "train", base.tile_size))
    if val_samples is None:
        val_samples = (load_split(read_manifest(base.val_manifest, "val", base.tile_size))
                       if base.val_manifest else samples)
    cache, rows = {}, []
    for table, label, overrides in ablation_cells(grid, frames, temporal):
        key = tuple(sorted(overrides.items()))
        if key not in cache:
            tag = label.replace(" ", "_").replace("=", "")
            cfg = base.replace(**overrides, out_dir=str(Path(base.out_dir) / f"{table}_{tag}"), checkpoint="")
            ckpt = train(cfg, samples, val_samples)
            model = model_from_checkpoint(ckpt)
            rep = evaluate_model(model, val_samples, cfg)
            cache[key] = dict(params=count_parameters(model), final_loss=ckpt.history[-1] if ckpt.history else float("nan"),
                              degenerate=list(rep.scores.degenerate), **rep.scores.as_dict())
        rows.append(dict(table=table, cell=label, **cache[key]))
    return rows


def format_ablation(rows) -> str:
    cols = ("table", "cell", "params", "final_loss", "precision", "recall", "f1", "iou", "oa")
    body = [[str(r["table"]), r["cell"], str(r["params"]), f"{r['final_loss']:.4f}"]
            + [f"{100 * r[k]:.2f}" for k in cols[4:]] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(cols, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)), "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)
