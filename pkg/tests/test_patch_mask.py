import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sgmim.errors import ConfigurationError, GeometryError
from sgmim.patch_mask import (
    RANDOM_BOTH, SELECTIVE, PatchGrid, apply_mask_tokens, complement_mask, embed_patches,
    gather_visible_structured, mask_count, patchify, sample_image_mask, sample_mask_pair,
    sincos_pos_table, unpatchify,
)


def test_grid_geometry():
    g = PatchGrid()
    assert (g.rows, g.cols, g.N, g.patch_dim(3), g.patch_dim(1)) == (8, 8, 64, 192, 64)
    with pytest.raises(GeometryError):
        PatchGrid(H=30, W=32, P=8)


def test_patchify_shapes():
    assert patchify(torch.rand(32, 32, 3), PatchGrid(32, 32, 8)).shape == (16, 192)
    m = torch.rand(8, 8, 1)
    assert torch.equal(patchify(m, PatchGrid(8, 8, 8, C_s=1)), m.reshape(1, 64))


def test_patchify_order_raster_channel_fastest():
    g = PatchGrid(4, 4, 2)
    x = torch.arange(4 * 4 * 3).reshape(4, 4, 3)
    p = patchify(x, g)
    # patch 1 is rows 0-1, cols 2-3; its first pixel is (0, 2)
    assert p[1, :3].tolist() == x[0, 2].tolist()
    assert p[1, 3:6].tolist() == x[0, 3].tolist()
    assert p[1, 6:9].tolist() == x[1, 2].tolist()
    assert p[2, :3].tolist() == x[2, 0].tolist()


def test_patchify_rejects_wrong_size():
    with pytest.raises(GeometryError):
        patchify(torch.rand(32, 32, 3), PatchGrid())


def test_roundtrip_bit_identical():
    g = PatchGrid()
    x = torch.rand(64, 64, 3)
    assert torch.equal(unpatchify(patchify(x, g), g), x)
    xb = torch.rand(2, 64, 64, 1)
    assert torch.equal(unpatchify(patchify(xb, g), g), xb)


def test_embed_zero_projection_gives_positions():
    proj = torch.nn.Linear(192, 64)
    torch.nn.init.zeros_(proj.weight)
    torch.nn.init.zeros_(proj.bias)
    pos = torch.randn(64, 64)
    out = embed_patches(torch.rand(64, 192), proj, pos)
    assert out.shape == (64, 64) and torch.equal(out, pos)


def test_embed_identity_projection():
    D = 16
    proj = torch.nn.Linear(D, D)
    with torch.no_grad():
        proj.weight.copy_(torch.eye(D))
        proj.bias.zero_()
    row = torch.randn(1, D)
    assert torch.equal(embed_patches(row, proj, torch.zeros(1, D)), row)


def test_embed_width_mismatch():
    with pytest.raises(GeometryError):
        embed_patches(torch.rand(64, 100), torch.nn.Linear(192, 64), torch.zeros(64, 64))


def test_mask_counts():
    assert mask_count(16, 0.6) == 10
    assert mask_count(64, 0.6) == 38
    assert mask_count(64, 0.5) == 32
    assert mask_count(64, 0.7) == 45
    m = sample_image_mask(16, 0.6, 3)
    assert m.sum() == 10
    assert np.array_equal(m, sample_image_mask(16, 0.6, 3))


@pytest.mark.parametrize("N,ratio", [(4, 0.05), (4, 0.95), (16, 0.0), (16, 1.0)])
def test_degenerate_counts_rejected(N, ratio):
    with pytest.raises(ConfigurationError):
        sample_image_mask(N, ratio, 0)


def test_complement():
    assert complement_mask(np.array([1, 0, 1, 0])).tolist() == [0, 1, 0, 1]
    with pytest.raises(ConfigurationError):
        complement_mask(np.array([0, 2]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.5, 0.6, 0.7]))
def test_pairs_are_complementary(seed, ratio):
    pair = sample_mask_pair(64, ratio, seed)
    assert pair.complementary
    assert pair.image.sum() + pair.structured.sum() == 64
    assert pair.image.sum() == mask_count(64, ratio)


def test_mask_sampling_is_uniform():
    freq = np.mean([sample_image_mask(16, 0.5, s) for s in range(10_000)], axis=0)
    assert freq.min() >= 0.47 and freq.max() <= 0.53


def test_random_both_overlaps_sometimes():
    pairs = [sample_mask_pair(64, 0.6, s, RANDOM_BOTH) for s in range(20)]
    assert any(not p.complementary for p in pairs)
    assert all(p.structured.sum() == 38 for p in pairs)


def test_unknown_strategy():
    with pytest.raises(ConfigurationError):
        sample_mask_pair(64, 0.6, 0, "semantic")


def test_apply_mask_tokens():
    N, D = 6, 4
    tokens, pos = torch.randn(N, D), torch.randn(N, D)
    tok = torch.randn(D)
    assert torch.equal(apply_mask_tokens(tokens, torch.zeros(N), tok, pos), tokens)
    m = torch.tensor([1, 0, 1, 0, 0, 1])
    out = apply_mask_tokens(tokens, m, tok, pos)
    assert out.shape == (N, D)
    assert torch.equal(out[1], tokens[1])
    assert torch.allclose(out[0] - pos[0], out[2] - pos[2], atol=1e-6)
    assert torch.allclose(out[0] - pos[0], tok, atol=1e-6)
    zero = apply_mask_tokens(tokens, m, torch.zeros(D), torch.zeros(N, D))
    assert torch.equal(zero[m.bool()], torch.zeros(3, D))


def test_gather_visible_structured():
    seq = torch.arange(8.0).reshape(4, 2)
    rows, idx = gather_visible_structured(seq, torch.tensor([0, 1, 0, 1]))
    assert idx.tolist() == [0, 2]
    assert torch.equal(rows, seq[[0, 2]])
    pair = sample_mask_pair(16, 0.6, 11)
    rows, idx = gather_visible_structured(torch.randn(16, 3), torch.from_numpy(pair.structured))
    assert rows.shape[0] == 10 == pair.image.sum()
    assert set(idx.tolist()) == set(np.flatnonzero(pair.image).tolist())
    with pytest.raises(ConfigurationError):
        gather_visible_structured(seq, torch.ones(4))


def test_sincos_table():
    t = sincos_pos_table(8, 8, 64)
    assert t.shape == (64, 64)
    assert torch.unique(t, dim=0).shape[0] == 64
    with pytest.raises(GeometryError):
        sincos_pos_table(8, 8, 30)
