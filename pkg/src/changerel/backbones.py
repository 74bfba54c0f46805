"""Encoders: a ResNet18-style CNN, a PVTv2-style transformer and the serial SCR branch."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GeometryError, ShapeError
from .pvf import conv_bn_relu


def _check_side(x, multiple, who):
    h, w = x.shape[-2:]
    if h % multiple or w % multiple:
        raise ShapeError(f"{who}: input sides must be divisible by {multiple}, got {h}x{w}")


# --------------------------------------------------------------------------
# CNN branch
# --------------------------------------------------------------------------

class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        y = F.relu(self.bn1(self.conv1(x)), inplace=True)
        y = self.bn2(self.conv2(y))
        return F.relu(y + idt, inplace=True)


class ResNetBranch(nn.Module):
    """ResNet18 layout returning the four stage outputs (strides 4, 8, 16, 32)."""

    def __init__(self, widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2)):
        super().__init__()
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 7, 2, 3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        layers, cin = [], widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            stride = 1 if i == 0 else 2
            layers.append(nn.Sequential(*[BasicBlock(cin if k == 0 else w, w, stride if k == 0 else 1)
                                          for k in range(n)]))
            cin = w
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        _check_side(x, 32, "cnn branch")
        x = self.stem(x)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


# --------------------------------------------------------------------------
# transformer branch
# --------------------------------------------------------------------------

class OverlapPatchEmbed(nn.Module):
    def __init__(self, cin, dim, patch, stride):
        super().__init__()
        self.proj = nn.Conv2d(cin, dim, patch, stride, patch // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        h, w = x.shape[-2:]
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


class SRAttention(nn.Module):
    """Multi-head self-attention with spatially reduced keys and values."""

    def __init__(self, dim, heads, sr_ratio):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, sr_ratio)
            self.norm = nn.LayerNorm(dim)
        self.keep_attn = False
        self.last_attn = None

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).view(b, n, self.heads, c // self.heads).transpose(1, 2)
        if self.sr_ratio > 1:
            r = self.sr(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
            r = self.norm(r)
        else:
            r = x
        kv = self.kv(r).view(b, -1, 2, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class DWMlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, 1, 1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        b, n, c = x.shape
        x = self.dw(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class PvtBlock(nn.Module):
    def __init__(self, dim, heads, sr_ratio, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SRAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = DWMlp(dim, int(dim * mlp_ratio))

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x), h, w)


class PvtBranch(nn.Module):
    """PVTv2-B1 layout: overlapping patch embeddings and spatial-reduction attention."""

    def __init__(self, dims=(64, 128, 320, 512), heads=(1, 2, 5, 8), sr_ratios=(8, 4, 2, 1),
                 depths=(2, 2, 2, 2), mlp_ratio=8):
        super().__init__()
        self.widths = tuple(dims)
        self.embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        cin = 3
        for i, d in enumerate(dims):
            patch, stride = (7, 4) if i == 0 else (3, 2)
            self.embeds.append(OverlapPatchEmbed(cin, d, patch, stride))
            self.stages.append(nn.ModuleList([PvtBlock(d, heads[i], sr_ratios[i], mlp_ratio)
                                              for _ in range(depths[i])]))
            self.norms.append(nn.LayerNorm(d))
            cin = d

    def attention_modules(self):
        return [m for m in self.modules() if isinstance(m, SRAttention)]

    def forward(self, x):
        _check_side(x, 32, "transformer branch")
        b = x.shape[0]
        feats = []
        for embed, blocks, norm in zip(self.embeds, self.stages, self.norms):
            t, h, w = embed(x)
            for blk in blocks:
                t = blk(t, h, w)
            x = norm(t).transpose(1, 2).reshape(b, -1, h, w)
            feats.append(x)
        return feats


# --------------------------------------------------------------------------
# Swin-V2 block
# --------------------------------------------------------------------------

class WindowAttentionV2(nn.Module):
    """Scaled cosine window attention with a log-spaced continuous position bias."""

    def __init__(self, dim, heads, pretrained_window=8, cpb_hidden=512):
        super().__init__()
        self.heads = heads
        self.pretrained_window = pretrained_window
        self.logit_scale = nn.Parameter(torch.log(10 * torch.ones(heads, 1, 1)))
        self.cpb_mlp = nn.Sequential(nn.Linear(2, cpb_hidden), nn.ReLU(inplace=True),
                                     nn.Linear(cpb_hidden, heads, bias=False))
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self._tables = {}
        self.keep_attn = False
        self.last_cosine = None

    def _coords(self, ws, device):
        key = (ws, device)
        if key not in self._tables:
            r = torch.arange(-(ws - 1), ws, dtype=torch.float32)
            table = torch.stack(torch.meshgrid(r, r, indexing="ij"), dim=-1)
            table = table / max(self.pretrained_window - 1, 1) * 8
            table = torch.sign(table) * torch.log2(table.abs() + 1.0) / math.log2(8)
            c = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
            rel = (c[:, :, None] - c[:, None, :]).permute(1, 2, 0) + (ws - 1)
            index = rel[..., 0] * (2 * ws - 1) + rel[..., 1]
            self._tables[key] = (table.to(device), index.to(device))
        return self._tables[key]

    def forward(self, x, ws, mask=None):
        bw, n, c = x.shape
        qkv = self.qkv(x).view(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        cosine = F.normalize(q, dim=-1) @ F.normalize(k, dim=-1).transpose(-2, -1)
        if self.keep_attn:
            self.last_cosine = cosine.detach()
        scale = torch.clamp(self.logit_scale, max=math.log(100.0)).exp()
        table, index = self._coords(ws, x.device)
        bias = self.cpb_mlp(table.to(x.dtype)).view(-1, self.heads)[index.view(-1)]
        bias = 16 * torch.sigmoid(bias.view(n, n, self.heads).permute(2, 0, 1))
        attn = cosine * scale + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(bw, n, c))


def _windows(x, ws):
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def _unwindows(win, ws, b, h, w):
    c = win.shape[-1]
    x = win.view(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


class SwinV2Block(nn.Module):
    """Post-norm Swin-V2 block: ``x + norm(attn(x))`` then ``x + norm(mlp(x))``."""

    def __init__(self, dim, heads, window=8, shifted=False, mlp_ratio=4, cpb_hidden=512):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.attn = WindowAttentionV2(dim, heads, window, cpb_hidden)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))
        self.norm2 = nn.LayerNorm(dim)
        self._masks = {}

    def _mask(self, h, w, ws, shift, device):
        key = (h, w, ws, shift, device)
        if key not in self._masks:
            img = torch.zeros(1, h, w, 1)
            cnt = 0
            for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                    img[:, hs, wsl, :] = cnt
                    cnt += 1
            win = _windows(img, ws).squeeze(-1)
            m = win[:, None, :] - win[:, :, None]
            self._masks[key] = m.masked_fill(m != 0, -100.0).masked_fill(m == 0, 0.0).to(device)
        return self._masks[key]

    def forward(self, x):
        # x: (B, C, H, W)
        b, c, h, w = x.shape
        ws = min(self.window, h, w)
        if h % ws or w % ws:
            raise ShapeError(f"swin block: {h}x{w} not divisible by window {ws}")
        shift = ws // 2 if (self.shifted and min(h, w) > ws) else 0
        t = x.permute(0, 2, 3, 1)
        s = torch.roll(t, (-shift, -shift), dims=(1, 2)) if shift else t
        mask = self._mask(h, w, ws, shift, x.device).to(x.dtype) if shift else None
        a = _unwindows(self.attn(_windows(s, ws), ws, mask), ws, b, h, w)
        if shift:
            a = torch.roll(a, (shift, shift), dims=(1, 2))
        t = t + self.norm1(a)
        t = t + self.norm2(self.mlp(t))
        return t.permute(0, 3, 1, 2).contiguous()


# --------------------------------------------------------------------------
# SCR branch
# --------------------------------------------------------------------------

class ConvBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU layers; the first one carries the stride."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.body = nn.Sequential(conv_bn_relu(cin, cout, stride), conv_bn_relu(cout, cout))

    def forward(self, x):
        return self.body(x)


class Downsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, 2, 1)
        self.norm = nn.LayerNorm(cout)

    def forward(self, x):
        x = self.conv(x)
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


@dataclass
class ScrOutputs:
    f_s_1: torch.Tensor
    f_s_2: torch.Tensor
    f_sd_1: tuple   # pre-image detail features, (stride 2, stride 1)
    f_sd_2: tuple   # post-image detail features, (stride 2, stride 1)


class ScrBranch(nn.Module):
    """Five serial stages at strides 1, 2, 4, 8, 16.

    Block counts per stage: 2 conv, 2 conv, 1 Swin-V2, 3 conv, 3 Swin-V2.
    Both images go through the same weights.
    """

    def __init__(self, widths=(32, 64, 128, 256, 256), heads=4, window=8, cpb_hidden=512):
        super().__init__()
        c1, c2, c3, c4, c5 = widths
        self.widths = tuple(widths)
        self.stage1 = nn.Sequential(ConvBlock(3, c1), ConvBlock(c1, c1))
        self.stage2 = nn.Sequential(ConvBlock(c1, c2, 2), ConvBlock(c2, c2))
        self.stage3 = nn.Sequential(Downsample(c2, c3), SwinV2Block(c3, heads, window, False, cpb_hidden=cpb_hidden))
        self.stage4 = nn.Sequential(ConvBlock(c3, c4, 2), ConvBlock(c4, c4), ConvBlock(c4, c4))
        self.stage5 = nn.Sequential(Downsample(c4, c5), *[
            SwinV2Block(c5, heads, window, shifted=bool(i % 2), cpb_hidden=cpb_hidden) for i in range(3)])

    def encode(self, x):
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        s5 = self.stage5(self.stage4(self.stage3(s2)))
        return s5, (s2, s1)

    def forward(self, pre, post) -> ScrOutputs:
        if pre.shape != post.shape:
            raise GeometryError(f"scr branch: image shapes differ {tuple(pre.shape)} vs {tuple(post.shape)}")
        _check_side(pre, 16, "scr branch")
        n = pre.shape[0]
        deep, (d2, d1) = self.encode(torch.cat([pre, post], dim=0))
        return ScrOutputs(deep[:n], deep[n:], (d2[:n], d1[:n]), (d2[n:], d1[n:]))


def cnn_branch(branch: ResNetBranch, image):
    return branch(image)


def transformer_branch(branch: PvtBranch, image):
    return branch(image)


def scr_branch(branch: ScrBranch, image_pre, image_post) -> ScrOutputs:
    return branch(image_pre, image_post)
