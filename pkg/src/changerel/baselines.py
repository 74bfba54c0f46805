"""Comparison modules: the temporal-branch stand-in and a siamese-concatenation baseline."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import ConvBlock
from .config import ModelSpec
from .errors import GeometryError
from .model import ChangeOutput
from .pvf import CcrBranch, conv_bn_relu, pvf_frames


class TemporalBranch(nn.Module):
    """Frame-sequence encoder that only exports deep features.

    A shared per-frame encoder reaches strides 4 and 8; a temporal conv
    spanning all frames collapses the time axis at each scale. Returns the
    stride-8 and stride-4 maps plus full-resolution supervision logits.
    """

    def __init__(self, frames=4, width=32, out_channels=64):
        super().__init__()
        self.frames = frames
        self.enc4 = nn.Sequential(conv_bn_relu(3, width, 2), conv_bn_relu(width, width, 2))
        self.enc8 = conv_bn_relu(width, 2 * width, 2)
        self.time4 = nn.Conv3d(width, out_channels, (frames, 1, 1))
        self.time8 = nn.Conv3d(2 * width, out_channels, (frames, 1, 1))
        self.sup_head = nn.Conv2d(out_channels, 1, 1)

    def forward(self, pre, post):
        v = pvf_frames(pre, post, self.frames)
        n, t = v.shape[:2]
        e4 = self.enc4(v.flatten(0, 1))
        e8 = self.enc8(e4)
        # (N*T, C, H, W) -> (N, C, T, H, W)
        f4 = self.time4(e4.view(n, t, *e4.shape[1:]).transpose(1, 2)).squeeze(2)
        f8 = self.time8(e8.view(n, t, *e8.shape[1:]).transpose(1, 2)).squeeze(2)
        f4, f8 = F.relu(f4), F.relu(f8)
        logits = F.interpolate(self.sup_head(f4), size=pre.shape[-2:], mode="bilinear", align_corners=False)
        return f8, f4, logits


class SiamConcBaseline(nn.Module):
    """FC-Siam-Conc style encoder-decoder with optional CCR detail features.

    CCR features join the last two decoder stages (strides 2 and 1), the same
    slots they take in the triple-branch decoder.
    """

    def __init__(self, spec: ModelSpec, ccr_mode="ccr", frames=4):
        super().__init__()
        c1, c2, c3, c4 = spec.baseline_widths
        self.ccr_mode = ccr_mode
        self.encoder = nn.ModuleList([ConvBlock(3, c1), ConvBlock(c1, c2, 2), ConvBlock(c2, c3, 2), ConvBlock(c3, c4, 2)])
        pc = spec.pvf_channels if ccr_mode == "ccr" else 0
        self.ccr = CcrBranch(frames, spec.ccr_width, spec.pvf_channels) if ccr_mode == "ccr" else None
        self.dec3 = ConvBlock(2 * c4 + 2 * c3, c3)
        self.dec2 = ConvBlock(c3 + 2 * c2 + pc, c2)
        self.dec1 = ConvBlock(c2 + 2 * c1 + pc, c1)
        self.head = nn.Conv2d(c1, 1, 1)

    def parameter_groups(self):
        groups = {"encoder": self.encoder, "ccr": self.ccr,
                  "decoder": nn.ModuleList([self.dec3, self.dec2, self.dec1]), "heads": self.head}
        return {k: list(m.parameters()) for k, m in groups.items() if m is not None}

    def forward(self, pre, post) -> ChangeOutput:
        if pre.shape != post.shape:
            raise GeometryError(f"image shapes differ: {tuple(pre.shape)} vs {tuple(post.shape)}")
        n = pre.shape[0]
        x = torch.cat([pre, post], dim=0)
        skips = []
        for blk in self.encoder:
            x = blk(x)
            skips.append(x)
        e1, e2, e3, e4 = skips
        up = lambda t, ref: F.interpolate(t, size=ref.shape[-2:], mode="bilinear", align_corners=False)  # noqa: E731
        y = torch.cat([e4[:n], e4[n:]], dim=1)
        y = self.dec3(torch.cat([up(y, e3), e3[:n], e3[n:]], dim=1))
        pvf_out, aux = None, None
        extra2, extra1 = [], []
        if self.ccr is not None:
            pvf_out = self.ccr(pre, post)
            extra2, extra1 = [pvf_out.f_pvf_1], [pvf_out.f_pvf_2]
            aux = pvf_out.supervision_logits
        y = self.dec2(torch.cat([up(y, e2), e2[:n], e2[n:], *extra2], dim=1))
        y = self.dec1(torch.cat([up(y, e1), e1[:n], e1[n:], *extra1], dim=1))
        logit = self.head(y)
        prob = torch.sigmoid(logit)
        return ChangeOutput(prob, [logit], [prob], aux, pvf=pvf_out, d_tilde=[y])
