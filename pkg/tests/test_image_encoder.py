import numpy as np
import pytest

from pseg.errors import ConfigError, ShapeError
from pseg.image_encoder import (
    EncoderBlock, EncoderConfig, ImageEncoder, encode_image, window_partition, window_unpartition,
)
from pseg.numerics import Tensor, finite_diff_check, ops


def _encoder(**kw):
    return ImageEncoder(EncoderConfig(**kw), np.random.default_rng(0))


def test_patch_embedding_shape():
    enc = _encoder()
    tokens = enc.patch_embed_tokens(Tensor(np.random.default_rng(0).random((1, 128, 128, 3))))
    assert tokens.shape == (1, 8, 8, 64)


def test_zero_image_zero_bias_gives_zero_tokens():
    enc = _encoder()
    assert np.all(enc.patch_embed.bias.data == 0)
    tokens = enc.patch_embed_tokens(Tensor(np.zeros((2, 128, 128, 3))))
    np.testing.assert_array_equal(tokens.data, 0.0)


def test_patch_change_is_local():
    enc = _encoder()
    a = np.random.default_rng(1).random((1, 128, 128, 3))
    b = a.copy()
    b[0, 32:48, 80:96] += 0.3  # patch (row 2, col 5)
    diff = np.abs(enc.patch_embed_tokens(Tensor(b)).data - enc.patch_embed_tokens(Tensor(a)).data)
    changed = diff.sum(-1)[0] > 0
    expected = np.zeros((8, 8), bool)
    expected[2, 5] = True
    np.testing.assert_array_equal(changed, expected)


def test_wrong_image_size_rejected():
    with pytest.raises(ShapeError):
        _encoder().patch_embed_tokens(Tensor(np.zeros((1, 64, 64, 3))))


def test_window_partition_roundtrip():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 8, 3)))
    parts = window_partition(x, 4)
    assert parts.shape == (2 * 4, 16, 3)
    # window (0, 1) of image 0 covers rows 0-3, cols 4-7
    np.testing.assert_array_equal(parts.data[1].reshape(4, 4, 3), x.data[0, :4, 4:])
    np.testing.assert_array_equal(window_unpartition(parts, 4, 2, 8).data, x.data)


def test_full_window_equals_global_block():
    rng = np.random.default_rng(2)
    windowed = EncoderBlock(16, 4, 8, np.random.default_rng(5))
    global_ = EncoderBlock(16, 4, 0, np.random.default_rng(5))
    x = Tensor(rng.normal(size=(2, 8, 8, 16)))
    assert windowed(x).data.tobytes() == global_(x).data.tobytes()


@pytest.mark.parametrize("window", [0, 2, 4])
def test_block_preserves_shape(window):
    blk = EncoderBlock(8, 2, window, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4, 4, 8)))
    assert blk(x).shape == x.shape


def test_global_block_permutation_equivariance():
    blk = EncoderBlock(8, 2, 0, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, 2, 2, 8))
    swapped = x.copy()
    swapped[0, 0, 0], swapped[0, 1, 1] = x[0, 1, 1], x[0, 0, 0]
    y = blk(Tensor(x)).data
    ys = blk(Tensor(swapped)).data
    ys[0, 0, 0], ys[0, 1, 1] = ys[0, 1, 1].copy(), ys[0, 0, 0].copy()
    np.testing.assert_allclose(ys, y, rtol=0, atol=1e-12)


def test_default_embedding_shape_and_neck_norm():
    enc = _encoder()
    img = np.random.default_rng(0).random((2, 128, 128, 3))
    emb = enc(Tensor(img))
    assert emb.shape == (2, 8, 8, 32)
    # neck ends in a channel layer norm with identity affine at init
    assert np.all(np.abs(emb.data.mean(-1)) < 1e-9)
    assert enc.config.grid * enc.config.patch_size == enc.config.input_size


@pytest.mark.parametrize("G", [2, 4, 8])
def test_neck_keeps_spatial_extent(G):
    enc = _encoder(input_size=16 * G, window_size=2, num_blocks=2, global_block_indices=(1,))
    assert enc(Tensor(np.zeros((1, 16 * G, 16 * G, 3)))).shape == (1, G, G, 32)


def test_encoder_deterministic():
    img = np.random.default_rng(3).random((1, 128, 128, 3))
    a, b = _encoder()(Tensor(img)).data, _encoder()(Tensor(img)).data
    assert a.tobytes() == b.tobytes()


def test_encode_image_attaches_pe_grid():
    enc = _encoder()
    pe = np.ones((8, 8, 32))
    emb = encode_image(np.zeros((128, 128, 3)), enc, pe)
    assert emb.side == 8 and emb.pe_grid is pe and emb.grid.shape == (1, 8, 8, 32)


def test_full_scale_grid():
    cfg = EncoderConfig(input_size=1024, patch_size=16, embed_dim=256, neck_channels=256,
                        num_heads=8, num_blocks=0, global_block_indices=())
    assert cfg.validate().grid == 64
    enc = ImageEncoder(cfg, np.random.default_rng(0))
    assert enc(Tensor(np.zeros((1, 1024, 1024, 3)))).shape == (1, 64, 64, 256)


@pytest.mark.parametrize("kw", [
    dict(input_size=100),                          # not divisible by patch
    dict(window_size=3),                           # grid 8 not divisible by 3
    dict(global_block_indices=(1, 3, 8)),          # outside [0, 8)
    dict(global_block_indices=(0, 1, 5)),          # not equidistant
    dict(embed_dim=30, num_heads=4),
])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        EncoderConfig(**kw).validate()


def test_one_block_encoder_gradients():
    enc = _encoder(input_size=8, patch_size=4, embed_dim=8, num_heads=2, window_size=1,
                   num_blocks=1, global_block_indices=(0,), neck_channels=4)
    img = np.random.default_rng(0).random((1, 8, 8, 3))
    w = np.random.default_rng(1).normal(size=(1, 2, 2, 4))
    loss = lambda _: ops.sum_(enc(Tensor(img)) * w)  # noqa: E731
    for name, p in enc.named_parameters():
        assert finite_diff_check(loss, p, max_components=6) < 1e-4, name
    x = Tensor(img)
    assert finite_diff_check(lambda t: ops.sum_(enc(t) * w), x, max_components=20) < 1e-4
