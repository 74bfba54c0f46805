"""Feature interaction, multi-scale fusion and the three-head decoder."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ArityError, ShapeError


class CrossInteraction(nn.Module):
    """Bidirectional cross-attention between two same-shaped maps.

    One set of 1x1 projections serves both directions, so swapping the inputs
    swaps the outputs. Keys and values are average-pooled to at most
    ``kv_side`` x ``kv_side`` positions to bound the affinity matrix.
    """

    def __init__(self, channels, kv_side=32):
        super().__init__()
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)
        self.kv_side = kv_side
        self.scale = channels ** -0.5

    def _kv_source(self, x):
        h, w = x.shape[-2:]
        if h * w > self.kv_side ** 2:
            x = F.adaptive_avg_pool2d(x, (min(h, self.kv_side), min(w, self.kv_side)))
        return x

    def affinity(self, a, b):
        """Row-stochastic affinity of every position of ``a`` to (pooled) ``b``."""
        q = self.q(a).flatten(2).transpose(1, 2)
        k = self.k(self._kv_source(b)).flatten(2)
        return torch.softmax((q @ k) * self.scale, dim=-1)

    def _attend(self, a, b):
        attn = self.affinity(a, b)
        v = self.v(self._kv_source(b)).flatten(2).transpose(1, 2)
        y = (attn @ v).transpose(1, 2).reshape(a.shape)
        return a + self.out(y)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"isci: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")
        return self._attend(a, b), self._attend(b, a)


class ISCI(nn.Module):
    """Intra-scale cross-interaction applied level by level."""

    def __init__(self, channels, levels, kv_side=32):
        super().__init__()
        self.blocks = nn.ModuleList([CrossInteraction(channels, kv_side) for _ in range(levels)])

    def forward(self, fa: Sequence[torch.Tensor], fb: Sequence[torch.Tensor]):
        if len(fa) != len(fb) or len(fa) != len(self.blocks):
            raise ShapeError(f"isci: level counts {len(fa)} / {len(fb)}, expected {len(self.blocks)}")
        pairs = [blk(a, b) for blk, a, b in zip(self.blocks, fa, fb)]
        return [p[0] for p in pairs], [p[1] for p in pairs]


class ISFF(nn.Module):
    """Inter-scale fusion producing the three activation slots.

    Each interacted pair is merged per level by a 1x1 conv, then a top-down
    pass upsamples and adds down to stride 4. Slot 1 is read at stride 8,
    slots 2 and 3 at stride 4, each through its own 3x3 conv. Linear and
    bias-free by default, so zero input gives zero output.
    """

    slot_strides = (8, 4, 4)

    def __init__(self, channels, strides=(4, 8, 16, 32), bias=False):
        super().__init__()
        self.strides = tuple(strides)
        self.lateral = nn.ModuleList([nn.Conv2d(2 * channels, channels, 1, bias=bias) for _ in strides])
        self.slots = nn.ModuleList([nn.Conv2d(channels, channels, 3, padding=1, bias=bias) for _ in range(3)])

    def forward(self, fa: Sequence[torch.Tensor], fb: Sequence[torch.Tensor], image_size):
        if len(fa) != len(self.strides) or len(fb) != len(self.strides):
            raise ShapeError(f"isff: expected {len(self.strides)} levels, got {len(fa)} / {len(fb)}")
        lat = {s: conv(torch.cat([a, b], dim=1))
               for s, conv, a, b in zip(self.strides, self.lateral, fa, fb)}
        h, w = image_size
        merged = {}
        p = None
        for s in sorted(set(self.strides) | {4, 8}, reverse=True):
            size = (h // s, w // s)
            if p is not None:
                p = F.interpolate(p, size=size, mode="bilinear", align_corners=False)
            if s in lat:
                p = lat[s] if p is None else p + lat[s]
            merged[s] = p
        return tuple(conv(merged[s]) for conv, s in zip(self.slots, self.slot_strides))


class BranchMerge(nn.Module):
    """Concatenate (pre, post, relation) activations and convolve to one map."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(3 * channels, channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, a1, a2, a3):
        if not (a1.shape[-2:] == a2.shape[-2:] == a3.shape[-2:]):
            raise ShapeError(f"fuse_branches: spatial sizes differ "
                             f"{tuple(a1.shape[-2:])}, {tuple(a2.shape[-2:])}, {tuple(a3.shape[-2:])}")
        return F.relu(self.bn(self.conv(torch.cat([a1, a2, a3], dim=1))), inplace=True)


class DecodeStep(nn.Module):
    """``Conv(Concat(F_sd1, Up(D), F_sd2, F_pvf))`` with 2x bilinear upsampling of D."""

    def __init__(self, channels, detail_channels, pvf_channels):
        super().__init__()
        cin = 2 * detail_channels + channels + pvf_channels
        self.conv = nn.Conv2d(cin, channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, d, f_sd_1, f_sd_2, f_pvf):
        size = f_sd_1.shape[-2:]
        for name, t in (("f_sd_2", f_sd_2), ("f_pvf", f_pvf)):
            if t.shape[-2:] != size:
                raise ShapeError(f"decode_step: {name} is {tuple(t.shape[-2:])}, expected {tuple(size)}")
        if (d.shape[-2] * 2, d.shape[-1] * 2) != tuple(size):
            raise ShapeError(f"decode_step: d is {tuple(d.shape[-2:])}, expected half of {tuple(size)}")
        up = F.interpolate(d, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.cat([f_sd_1, up, f_sd_2, f_pvf], dim=1)
        return F.relu(self.bn(self.conv(x)), inplace=True)


def fuse_branches(merge: BranchMerge, a1, a2, a3):
    return merge(a1, a2, a3)


def decode_step(step: DecodeStep, d, f_sd_1, f_sd_2, f_pvf):
    return step(d, f_sd_1, f_sd_2, f_pvf)


def ensemble_heads(head_probs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Average the three head probability maps."""
    if len(head_probs) != 3:
        raise ArityError(f"expected 3 head maps, got {len(head_probs)}")
    return (head_probs[0] + head_probs[1] + head_probs[2]) / 3
