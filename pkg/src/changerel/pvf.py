"""Pseudo video frames and the continuous-change-relation (CCR) branch.

Frames are linear blends of the two dates, ``V_w = I1 + w/(W-1) * (I2 - I1)``.
The CCR branch runs three blocks over the frame stack; each block is a
per-frame conv stack with shared weights followed by a cross-frame mixing
step. Block 2 and block 3 outputs are aggregated by CRAM into the two detail
features handed to the decoder, and block 3 also feeds a supervision head.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError


@dataclass
class PvfStack:
    frames: np.ndarray  # (W, H, W_img, C)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


def _check_frames(frame_count: int) -> None:
    if frame_count < 2:
        raise ParameterError(f"frame_count must be >= 2, got {frame_count}")


def build_pvf(image_pre: np.ndarray, image_post: np.ndarray, frame_count: int = 4) -> PvfStack:
    _check_frames(frame_count)
    a = np.asarray(image_pre)
    b = np.asarray(image_post)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    dtype = np.result_type(a.dtype, np.float32)
    frames = np.empty((frame_count,) + a.shape, dtype=dtype)
    diff = b.astype(dtype) - a.astype(dtype)
    for w in range(frame_count):
        if w == 0:
            frames[w] = a
        elif w == frame_count - 1:
            frames[w] = b
        else:
            frames[w] = a + (w / (frame_count - 1)) * diff
    return PvfStack(frames)


def pvf_frames(pre: torch.Tensor, post: torch.Tensor, frame_count: int = 4) -> torch.Tensor:
    """Batched frames: (N, C, H, W) x2 -> (N, frame_count, C, H, W)."""
    _check_frames(frame_count)
    if pre.shape != post.shape:
        raise ShapeError(f"image shapes differ: {tuple(pre.shape)} vs {tuple(post.shape)}")
    diff = post - pre
    frames = [pre]
    frames += [pre + (w / (frame_count - 1)) * diff for w in range(1, frame_count - 1)]
    frames.append(post)
    return torch.stack(frames, dim=1)


def conv_bn_relu(cin, cout, stride=1, k=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class CcrBlock(nn.Module):
    """Shared per-frame conv stack, then a cross-frame context added to every frame.

    The context is a 1x1 conv over the frame-stacked channels, so it is
    order-aware and its size grows with the frame count. Adding the same
    context to every frame keeps a constant sequence constant.
    """

    def __init__(self, cin, width, frames, stride=1):
        super().__init__()
        self.frames = frames
        self.convs = nn.Sequential(conv_bn_relu(cin, width, stride), conv_bn_relu(width, width))
        self.mix = nn.Conv2d(frames * width, width, 1, bias=False)

    def forward(self, x):
        # x: (N, T, C, H, W)
        n, t = x.shape[:2]
        if t != self.frames:
            raise ShapeError(f"expected {self.frames} frames, got {t}")
        y = self.convs(x.flatten(0, 1))
        y = y.view(n, t, *y.shape[1:])
        ctx = self.mix(y.flatten(1, 2))
        return y + ctx.unsqueeze(1)


class CRAM(nn.Module):
    """Change relationship aggregation.

    Three streams are concatenated and fused by a 1x1 conv: the frame mean,
    the summed absolute first-order frame differences, and the absolute
    endpoint difference.
    """

    def __init__(self, width, out_channels=64):
        super().__init__()
        self.fuse = nn.Sequential(
            nn.Conv2d(3 * width, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    @staticmethod
    def streams(feats):
        if isinstance(feats, (list, tuple)):
            shapes = {tuple(f.shape) for f in feats}
            if len(shapes) != 1:
                raise ShapeError(f"per-frame features have mismatched shapes {sorted(shapes)}")
            feats = torch.stack(list(feats), dim=1)
        if feats.dim() != 5 or feats.shape[1] < 2:
            raise ShapeError(f"expected (N, T>=2, C, H, W) features, got {tuple(feats.shape)}")
        mean = feats.mean(dim=1)
        steps = (feats[:, 1:] - feats[:, :-1]).abs().sum(dim=1)
        ends = (feats[:, -1] - feats[:, 0]).abs()
        return mean, steps, ends

    def forward(self, feats):
        return self.fuse(torch.cat(self.streams(feats), dim=1))


def cram(module: CRAM, per_frame_features: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    return module(per_frame_features)


@dataclass
class CcrOutputs:
    f_pvf_1: torch.Tensor           # (N, C, H/2, W/2)
    f_pvf_2: torch.Tensor           # (N, C, H, W)
    supervision_logits: torch.Tensor  # (N, 1, H, W)


class CcrBranch(nn.Module):
    def __init__(self, frames=4, width=64, out_channels=64):
        super().__init__()
        _check_frames(frames)
        self.frames = frames
        self.block1 = CcrBlock(3, width, frames)
        self.block2 = CcrBlock(width, width, frames, stride=2)
        self.block3 = CcrBlock(width, width, frames)
        self.cram1 = CRAM(width, out_channels)
        self.cram2 = CRAM(width, out_channels)
        self.sup_head = nn.Conv2d(out_channels, 1, 1)

    def forward(self, pre, post) -> CcrOutputs:
        if pre.shape != post.shape:
            raise ShapeError(f"frame geometry mismatch: {tuple(pre.shape)} vs {tuple(post.shape)}")
        if pre.shape[-1] % 2 or pre.shape[-2] % 2:
            raise ShapeError(f"CCR branch needs even sides, got {tuple(pre.shape[-2:])}")
        v = pvf_frames(pre, post, self.frames)
        b1 = self.block1(v)
        b2 = self.block2(b1)
        n, t = b2.shape[:2]
        up = F.interpolate(b2.flatten(0, 1), size=b1.shape[-2:], mode="bilinear", align_corners=False)
        b3 = self.block3(up.view(n, t, *up.shape[1:]) + b1)
        f1 = self.cram1(b2)
        f2 = self.cram2(b3)
        logits = self.sup_head(f2)
        if logits.shape[-2:] != pre.shape[-2:]:
            logits = F.interpolate(logits, size=pre.shape[-2:], mode="bilinear", align_corners=False)
        return CcrOutputs(f1, f2, logits)


def ccr_forward(branch: CcrBranch, pre: torch.Tensor, post: torch.Tensor) -> CcrOutputs:
    return branch(pre, post)
