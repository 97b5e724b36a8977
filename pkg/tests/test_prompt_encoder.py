import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pseg.errors import BoxError, ShapeError
from pseg.numerics import Tensor, ops
from pseg.prompt_encoder import (
    BACKGROUND, FOREGROUND, BoxPrompt, MaskPrompt, PointPrompt, PositionalEncoder, PromptEncoder,
    PromptEncoderConfig, PromptSet, fuse_dense,
)


@pytest.fixture
def enc():
    return PromptEncoder(PromptEncoderConfig(), np.random.default_rng(0))


unit = st.floats(0.0, 1.0)


def test_zero_frequencies_give_sin_zero_cos_one():
    pe = PositionalEncoder(8)
    pe.freqs[:] = 0.0
    out = pe(np.array([[0.3, 0.9]]))
    np.testing.assert_array_equal(out[0, :4], 0.0)
    np.testing.assert_array_equal(out[0, 4:], 1.0)


def test_positional_encoding_deterministic():
    c = np.array([0.25, 0.75])
    np.testing.assert_array_equal(PositionalEncoder(32, seed=3)(c), PositionalEncoder(32, seed=3)(c))
    assert not np.array_equal(PositionalEncoder(32, seed=3)(c), PositionalEncoder(32, seed=4)(c))


@settings(max_examples=100, deadline=None)
@given(unit, unit)
def test_positional_encoding_norm_bound(x, y):
    v = PositionalEncoder(32)(np.array([x, y]))
    assert v.shape == (32,)
    assert np.sum(v * v) <= 32 + 1e-9


def test_pe_grid_is_cell_centres(enc):
    grid = enc.pe_grid(4)
    assert grid.shape == (4, 4, 32)
    np.testing.assert_allclose(grid[1, 2], enc.pe(np.array([2.5 / 4, 1.5 / 4])), rtol=0, atol=1e-14)


def test_point_tokens(enc):
    assert enc.encode_sparse([PromptSet()]) is None
    fg = enc.encode_points([[[0.4, 0.6]]], [[FOREGROUND]]).data
    bg = enc.encode_points([[[0.4, 0.6]]], [[BACKGROUND]]).data
    np.testing.assert_allclose(fg - bg, (enc.point_fg.data - enc.point_bg.data)[None, None], atol=1e-15)


def test_points_keep_order(enc):
    pts = [PointPrompt(0.1, 0.2), PointPrompt(0.9, 0.5), PointPrompt(0.5, 0.5, BACKGROUND)]
    tok = enc.encode_sparse([PromptSet(points=pts)]).data
    assert tok.shape == (1, 3, 32)
    for i, p in enumerate(pts):
        single = enc.encode_sparse([PromptSet(points=[p])]).data
        np.testing.assert_allclose(tok[0, i], single[0, 0], rtol=0, atol=1e-14)


def test_box_tokens(enc):
    tok = enc.encode_box(np.array([[0.0, 0.0, 1.0, 1.0]])).data
    assert tok.shape == (1, 2, 32)
    np.testing.assert_allclose(tok[0, 0], enc.pe(np.array([0.0, 0.0])) + enc.box_tl.data, atol=1e-15)
    np.testing.assert_allclose(tok[0, 1], enc.pe(np.array([1.0, 1.0])) + enc.box_br.data, atol=1e-15)


def test_near_point_box_limit(enc):
    eps = 1e-9
    tok = enc.encode_box(np.array([[0.3, 0.3, 0.3 + eps, 0.3 + eps]])).data[0]
    np.testing.assert_allclose(tok[0] - tok[1], enc.box_tl.data - enc.box_br.data, atol=1e-6)


def test_inverted_box_rejected(enc):
    with pytest.raises(BoxError):
        enc.encode_box(np.array([[0.6, 0.1, 0.4, 0.5]]))
    with pytest.raises(BoxError):
        BoxPrompt(0.6, 0.1, 0.4, 0.5)
    with pytest.raises(BoxError):
        BoxPrompt(0.0, 0.0, 1.2, 0.5)


@pytest.mark.parametrize("k,box", [(0, False), (0, True), (1, False), (3, True), (5, True)])
def test_token_count(enc, k, box):
    rng = np.random.default_rng(k)
    ps = PromptSet(points=[PointPrompt(*rng.random(2)) for _ in range(k)],
                   box=BoxPrompt(0.1, 0.2, 0.7, 0.8) if box else None)
    tok = enc.encode_sparse([ps, ps])
    assert ps.num_tokens == k + 2 * box
    assert (0 if tok is None else tok.shape[1]) == k + 2 * box


def test_mixed_structures_rejected(enc):
    with pytest.raises(ValueError):
        enc.encode_sparse([PromptSet(), PromptSet(box=BoxPrompt(0.1, 0.1, 0.5, 0.5))])


def test_mask_path_shapes(enc):
    out = enc.encode_mask(np.random.default_rng(0).random((2, 32, 32)))
    assert out.shape == (2, 8, 8, 32)
    with pytest.raises(ShapeError):
        enc.encode_mask(np.zeros((1, 16, 16)))


def test_zero_mask_gives_zero_before_affine(enc):
    # zero input, zero biases: conv -> gelu -> LN of a constant is exactly 0
    x = Tensor(np.zeros((1, 1, 32, 32)))
    h = enc.mask_norm1(ops.gelu(enc.mask_conv1(x)))
    np.testing.assert_array_equal(h.data, 0.0)


def test_full_scale_mask_path():
    big = PromptEncoder(PromptEncoderConfig(embed_dim=256, input_size=1024, mask_channels=(4, 16)),
                        np.random.default_rng(0))
    assert big.encode_mask(np.zeros((1, 256, 256))).shape == (1, 64, 64, 256)


def test_dense_fusion(enc):
    grid = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 32)))
    np.testing.assert_array_equal(fuse_dense(grid, Tensor(np.zeros((2, 4, 4, 32)))).data, grid.data)
    fused = fuse_dense(grid, enc.dense([PromptSet(), PromptSet()], 4)).data
    delta = fused - grid.data
    np.testing.assert_allclose(delta, np.broadcast_to(enc.no_mask.data, delta.shape), atol=1e-15)


def test_dense_fusion_commutes_with_cell_permutation():
    rng = np.random.default_rng(0)
    grid, dense = rng.normal(size=(1, 4, 4, 8)), rng.normal(size=(1, 4, 4, 8))
    perm = rng.permutation(16)

    def shuffle(a):
        return a.reshape(1, 16, 8)[:, perm].reshape(1, 4, 4, 8)

    a = shuffle(fuse_dense(Tensor(grid), Tensor(dense)).data)
    b = fuse_dense(Tensor(shuffle(grid)), Tensor(shuffle(dense))).data
    np.testing.assert_array_equal(a, b)


def test_mask_prompt_dense_path(enc):
    ps = PromptSet(mask=MaskPrompt(np.ones((32, 32))))
    assert enc.dense([ps], 8).shape == (1, 8, 8, 32)
    assert ps.num_tokens == 0


def test_point_validation():
    with pytest.raises(ValueError):
        PointPrompt(1.2, 0.5)
    with pytest.raises(ValueError):
        PointPrompt(0.5, 0.5, label=2)
