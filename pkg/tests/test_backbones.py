import pytest
import torch

from changerel.backbones import (
    PvtBranch, ResNetBranch, ScrBranch, SwinV2Block, WindowAttentionV2, cnn_branch, scr_branch,
    transformer_branch,
)
from changerel.errors import GeometryError, ShapeError


def _sides(feats):
    return [tuple(f.shape[-2:]) for f in feats]


@pytest.fixture(scope="module")
def cnn():
    torch.manual_seed(0)
    return ResNetBranch().eval()


@pytest.fixture(scope="module")
def pvt():
    torch.manual_seed(0)
    return PvtBranch().eval()


@torch.no_grad()
def test_cnn_pyramid_and_siamese(cnn):
    x = torch.rand(1, 3, 256, 256)
    feats = cnn_branch(cnn, x)
    assert _sides(feats) == [(64, 64), (32, 32), (16, 16), (8, 8)]
    assert [f.shape[1] for f in feats] == [64, 128, 256, 512]
    again = cnn_branch(cnn, x.clone())
    assert all(torch.equal(a, b) for a, b in zip(feats, again))
    assert all(torch.isfinite(f).all() for f in cnn_branch(cnn, torch.zeros(1, 3, 256, 256)))


@torch.no_grad()
def test_transformer_pyramid_and_attention_rows(pvt):
    x = torch.rand(1, 3, 256, 256)
    for m in pvt.attention_modules():
        m.keep_attn = True
    try:
        feats = transformer_branch(pvt, x)
        rows = [m.last_attn.sum(-1) for m in pvt.attention_modules()]
    finally:
        for m in pvt.attention_modules():
            m.keep_attn = False
    assert _sides(feats) == [(64, 64), (32, 32), (16, 16), (8, 8)]
    assert [f.shape[1] for f in feats] == [64, 128, 320, 512]
    for r in rows:
        torch.testing.assert_close(r, torch.ones_like(r), atol=1e-5, rtol=0)
    again = transformer_branch(pvt, x.clone())
    assert all(torch.equal(a, b) for a, b in zip(feats, again))
    assert all(torch.isfinite(f).all() for f in transformer_branch(pvt, torch.zeros(1, 3, 256, 256)))


@torch.no_grad()
def test_pyramids_scale_with_input(cnn, pvt):
    x = torch.rand(1, 3, 512, 512)
    expected = [(128, 128), (64, 64), (32, 32), (16, 16)]
    assert _sides(cnn(x)) == expected
    assert _sides(pvt(x)) == expected


def test_indivisible_sides_rejected(cnn, pvt):
    with pytest.raises(ShapeError):
        cnn(torch.rand(1, 3, 250, 256))
    with pytest.raises(ShapeError):
        pvt(torch.rand(1, 3, 256, 200))
    scr = ScrBranch((8, 8, 16, 16, 16), heads=2, cpb_hidden=16)
    with pytest.raises(ShapeError):
        scr(torch.rand(1, 3, 40, 40), torch.rand(1, 3, 40, 40))
    with pytest.raises(GeometryError):
        scr(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 64, 64))


@torch.no_grad()
def test_scr_shapes_at_256():
    torch.manual_seed(0)
    scr = ScrBranch().eval()
    out = scr_branch(scr, torch.rand(1, 3, 256, 256), torch.rand(1, 3, 256, 256))
    assert tuple(out.f_s_1.shape) == (1, 256, 16, 16)
    assert tuple(out.f_s_2.shape) == (1, 256, 16, 16)
    for sd in (out.f_sd_1, out.f_sd_2):
        assert tuple(sd[0].shape) == (1, 64, 128, 128)
        assert tuple(sd[1].shape) == (1, 32, 256, 256)


@torch.no_grad()
def test_scr_identical_inputs_give_identical_features():
    torch.manual_seed(1)
    scr = ScrBranch((8, 16, 32, 32, 32), heads=2, cpb_hidden=32).eval()
    x = torch.rand(2, 3, 64, 64)
    out = scr(x, x.clone())
    assert torch.equal(out.f_s_1, out.f_s_2)
    assert all(torch.equal(a, b) for a, b in zip(out.f_sd_1, out.f_sd_2))


@torch.no_grad()
def test_scr_batch_halves_independent():
    # siamese by batch concatenation must not mix the two dates in eval mode
    torch.manual_seed(2)
    scr = ScrBranch((8, 16, 32, 32, 32), heads=2, cpb_hidden=32).eval()
    a, b, c = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
    o1, o2 = scr(a, b), scr(a, c)
    torch.testing.assert_close(o1.f_s_1, o2.f_s_1)
    assert not torch.allclose(o1.f_s_2, o2.f_s_2)


@torch.no_grad()
def test_window_attention_cosine_bounded():
    torch.manual_seed(3)
    attn = WindowAttentionV2(32, 4, cpb_hidden=32)
    attn.keep_attn = True
    attn(torch.randn(6, 64, 32) * 50, 8)
    assert attn.last_cosine.abs().max() <= 1 + 1e-5
    assert tuple(attn.last_cosine.shape) == (6, 4, 64, 64)


@torch.no_grad()
def test_swin_block_window_clamped_to_resolution():
    blk = SwinV2Block(16, 2, window=8, shifted=True, cpb_hidden=16).eval()
    for side in (4, 8, 16):
        y = blk(torch.rand(1, 16, side, side))
        assert tuple(y.shape) == (1, 16, side, side) and torch.isfinite(y).all()
    with pytest.raises(ShapeError):
        blk(torch.rand(1, 16, 12, 12))


@torch.no_grad()
def test_shifted_block_masks_wrapped_neighbours():
    # a shifted block over a single 8x8 map equals an unshifted one (no shift below the window)
    torch.manual_seed(4)
    a = SwinV2Block(16, 2, 8, shifted=True, cpb_hidden=16).eval()
    b = SwinV2Block(16, 2, 8, shifted=False, cpb_hidden=16).eval()
    b.load_state_dict(a.state_dict())
    x = torch.rand(1, 16, 8, 8)
    torch.testing.assert_close(a(x), b(x))
    x = torch.rand(1, 16, 16, 16)
    assert not torch.allclose(a(x), b(x))
