"""The triple-branch change detection network."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import PvtBranch, ResNetBranch, ScrBranch
from .config import ModelSpec
from .errors import GeometryError
from .fusion import ISCI, ISFF, BranchMerge, DecodeStep, ensemble_heads
from .pvf import CcrBranch, CcrOutputs


@dataclass
class ChangeOutput:
    cm: torch.Tensor                       # (N, 1, H, W) ensemble probability
    head_logits: list
    head_probs: list
    aux_logits: Optional[torch.Tensor] = None   # CCR / temporal supervision head
    activations: list = field(default_factory=list)  # activations[j][i], j, i in 0..2
    d: list = field(default_factory=list)
    d_tilde: list = field(default_factory=list)
    pvf: Optional[CcrOutputs] = None

    @property
    def aux_prob(self):
        return None if self.aux_logits is None else torch.sigmoid(self.aux_logits)


class Fusion(nn.Module):
    """Lateral alignment, ISCI/ISFF for the image and relation streams, merge and decode."""

    def __init__(self, spec: ModelSpec, pvf_channels: int):
        super().__init__()
        ch = spec.channels
        self.align_c = nn.ModuleList([nn.Conv2d(c, ch, 1) for c in spec.cnn_widths])
        self.align_t = nn.ModuleList([nn.Conv2d(c, ch, 1) for c in spec.pvt_dims])
        self.align_s = nn.Conv2d(spec.scr_widths[-1], ch, 1)
        self.isci_img = ISCI(ch, 4, spec.isci_kv_side)
        self.isff_img = ISFF(ch, (4, 8, 16, 32))
        self.isci_rel = ISCI(ch, 1, spec.isci_kv_side)
        self.isff_rel = ISFF(ch, (16,))
        self.merge = nn.ModuleList([BranchMerge(ch) for _ in range(3)])
        detail = spec.scr_widths[:2]
        # decode[j][0] runs at stride 2, decode[j][1] at stride 1
        self.decode = nn.ModuleList([
            nn.ModuleList([DecodeStep(ch, detail[1], pvf_channels), DecodeStep(ch, detail[0], pvf_channels)])
            for _ in range(3)])


class ChangeRelationNet(nn.Module):
    """CNN + transformer + SCR branches, ISCI/ISFF fusion and three decoder heads.

    ``ccr_mode`` selects what fills the decoder's detail slots: the CCR branch,
    the temporal stand-in (which feeds the deep stages instead), or zeros.
    """

    def __init__(self, spec: ModelSpec, enable_scr=True, ccr_mode="ccr", frames=4):
        super().__init__()
        from .baselines import TemporalBranch

        self.spec = spec
        self.enable_scr = enable_scr
        self.ccr_mode = ccr_mode
        self.frames = frames
        ch = spec.channels
        self.cnn = ResNetBranch(spec.cnn_widths)
        self.transformer = PvtBranch(spec.pvt_dims, spec.pvt_heads, spec.pvt_sr, spec.pvt_depths, spec.pvt_mlp_ratio)
        self.scr = ScrBranch(spec.scr_widths, spec.swin_heads, spec.swin_window, spec.cpb_hidden) if enable_scr else None
        if ccr_mode == "ccr":
            self.ccr = CcrBranch(frames, spec.ccr_width, spec.pvf_channels)
        elif ccr_mode == "temporal":
            self.ccr = TemporalBranch(frames, spec.ccr_width, ch)
        else:
            self.ccr = None
        self.fusion = Fusion(spec, spec.pvf_channels)
        if not enable_scr:
            del self.fusion.isci_rel, self.fusion.isff_rel, self.fusion.align_s
        self.heads = nn.ModuleList([nn.Conv2d(ch, 1, 1) for _ in range(3)])

    def parameter_groups(self):
        groups = {"cnn": self.cnn, "transformer": self.transformer, "scr": self.scr,
                  "ccr": self.ccr, "fusion": self.fusion, "heads": self.heads}
        return {k: list(m.parameters()) for k, m in groups.items() if m is not None}

    def forward(self, pre, post) -> ChangeOutput:
        if pre.shape != post.shape:
            raise GeometryError(f"image shapes differ: {tuple(pre.shape)} vs {tuple(post.shape)}")
        n, _, h, w = pre.shape
        fu = self.fusion
        both = torch.cat([pre, post], dim=0)

        # image streams: CNN and transformer features of each date interact, then fuse
        fc = [a(f) for a, f in zip(fu.align_c, self.cnn(both))]
        ft = [a(f) for a, f in zip(fu.align_t, self.transformer(both))]
        fc, ft = fu.isci_img(fc, ft)
        a_img = fu.isff_img(fc, ft, (h, w))
        a_pre = [a[:n] for a in a_img]
        a_post = [a[n:] for a in a_img]

        if self.scr is not None:
            scr = self.scr(pre, post)
            s1, s2 = fu.isci_rel([fu.align_s(scr.f_s_1)], [fu.align_s(scr.f_s_2)])
            a_rel = list(fu.isff_rel(s1, s2, (h, w)))
            sd_pre, sd_post = scr.f_sd_1, scr.f_sd_2
        else:
            a_rel = [torch.zeros_like(a) for a in a_pre]
            c1, c2 = self.spec.scr_widths[:2]
            sd_pre = (pre.new_zeros(n, c2, h // 2, w // 2), pre.new_zeros(n, c1, h, w))
            sd_post = sd_pre

        pvf_out, aux_logits = None, None
        deep_extra = [None, None, None]
        if self.ccr_mode == "ccr":
            pvf_out = self.ccr(pre, post)
            pvf = (pvf_out.f_pvf_1, pvf_out.f_pvf_2)
            aux_logits = pvf_out.supervision_logits
        else:
            pc = self.spec.pvf_channels
            pvf = (pre.new_zeros(n, pc, h // 2, w // 2), pre.new_zeros(n, pc, h, w))
            if self.ccr_mode == "temporal":
                t8, t4, aux_logits = self.ccr(pre, post)
                deep_extra = [t8, t4, t4]

        activations = [[a_pre[j], a_post[j], a_rel[j]] for j in range(3)]
        ds, d_tilde, logits = [], [], []
        for j in range(3):
            d = fu.merge[j](*activations[j])
            if deep_extra[j] is not None:
                d = d + deep_extra[j]
            ds.append(d)
            x = d
            if x.shape[-2:] != (h // 4, w // 4):  # slot 1 sits at stride 8
                x = F.interpolate(x, size=(h // 4, w // 4), mode="bilinear", align_corners=False)
            step1, step2 = fu.decode[j]
            x = step1(x, sd_pre[0], sd_post[0], pvf[0])
            x = step2(x, sd_pre[1], sd_post[1], pvf[1])
            d_tilde.append(x)
            logits.append(self.heads[j](x))
        probs = [torch.sigmoid(l) for l in logits]
        return ChangeOutput(ensemble_heads(probs), logits, probs, aux_logits, activations, ds, d_tilde, pvf_out)
