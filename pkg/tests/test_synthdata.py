import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pseg.errors import EmptyMaskError, LengthError, MaskDomainError, ParseError
from pseg.pnm import encode_pgm, encode_ppm, read_pnm
from pseg.prompt_generator import box_from_mask
from pseg.synthdata import (
    DomainSpec, Manifest, domain_spec, generate, ingest_external, load_sample, render,
    resize_mask_nearest, save_sample, split,
)


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_is_byte_identical(tmp_path):
    generate(domain_spec("A"), 10, 7, tmp_path / "a")
    generate(domain_spec("A"), 10, 7, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert len(a) == 21 and a == b


def test_substreams_are_per_index():
    spec = domain_spec("B")
    for i in (0, 5, 9, 99):
        assert render(spec, 3, i).image.tobytes() == render(spec, 3, i).image.tobytes()
    assert render(spec, 3, 0).image.tobytes() != render(spec, 4, 0).image.tobytes()


def test_prefix_regenerates_identically(tmp_path):
    big = generate(domain_spec("A", 32), 30, 2, tmp_path / "big")
    small = generate(domain_spec("A", 32), 10, 2, tmp_path / "small")
    for i in range(10):
        assert (big.root / big.records[i].image).read_bytes() == \
               (small.root / small.records[i].image).read_bytes()


@pytest.mark.parametrize("domain", "ABC")
def test_sample_invariants_and_coverage(domain):
    spec = domain_spec(domain)
    for i in range(60):
        s = render(spec, 0, i)
        assert s.image.shape == (128, 128, 3) and s.image.dtype == np.uint8
        assert 0.01 <= s.mask.mean() <= 0.60
        assert s.box == box_from_mask(s.mask)


def test_domain_c_has_tongue_coloured_distractors():
    spec = domain_spec("C")
    lo, hi = np.array(spec.tongue_rgb_lo) * 0.7, np.array(spec.tongue_rgb_hi) * 1.2
    for i in range(30):
        s = render(spec, 0, i)
        assert 1 <= s.distractors <= 3
        off = s.image[s.mask == 0].astype(float)
        tongueish = np.all((off >= lo) & (off <= hi), axis=1)
        assert tongueish.sum() >= 0.5 * np.pi * spec.distractor_radius[0] ** 2
    assert all(render(domain_spec("A"), 0, i).distractors == 0 for i in range(10))


def test_domains_differ():
    a = np.mean([render(domain_spec("A"), 0, i).image[render(domain_spec("A"), 0, i).mask == 0].mean()
                 for i in range(10)])
    b = np.mean([render(domain_spec("B"), 0, i).image[render(domain_spec("B"), 0, i).mask == 0].mean()
                 for i in range(10)])
    assert b - a > 50  # booth backdrop is much lighter


@pytest.mark.parametrize("kw", [dict(scale=(1.2, 0.8)), dict(semi_axis_x=(float("nan"), 3.0)),
                                dict(background="mauve"), dict(image_size=8)])
def test_invalid_spec_rejected(tmp_path, kw):
    spec = DomainSpec("A", **kw)
    with pytest.raises(ValueError):
        generate(spec, 2, 0, tmp_path)
    with pytest.raises(ValueError):
        generate(domain_spec("A"), 0, 0, tmp_path)


# -- split ----------------------------------------------------------------------------------


def _manifest(n):
    from pseg.synthdata import ManifestRecord
    return Manifest("/x", [ManifestRecord(f"i{i}", f"m{i}", "A", i) for i in range(n)])


def test_split_examples():
    man = _manifest(10)
    tr, te = split(man, 0.8, 0)
    assert len(tr) == 8 and len(te) == 2
    assert set(tr.records).isdisjoint(te.records)
    assert set(tr.records) | set(te.records) == set(man.records)
    assert split(man, 0.8, 0)[1].records == te.records


@pytest.mark.parametrize("frac", [0.0, 1.0, 0.01, 0.99])
def test_split_rejects_empty_side(frac):
    with pytest.raises(ValueError):
        split(_manifest(10), frac, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partitions(n, frac, seed):
    man = _manifest(n)
    try:
        tr, te = split(man, frac, seed)
    except ValueError:
        return
    assert sorted(r.index for r in tr.records + te.records) == list(range(n))


def test_manifest_round_trip(tmp_path):
    man = generate(domain_spec("C", 32), 3, 5, tmp_path)
    back = Manifest.read(tmp_path)
    assert back.records == man.records and back.seed == 5 and back.spec_hash == man.spec_hash
    s = back.load(2)
    assert s.domain == "C" and s.index == 2


def test_manifest_bad_line(tmp_path):
    (tmp_path / "manifest.tsv").write_text("a\tb\tc\n", encoding="utf-8")
    with pytest.raises(ParseError, match="manifest.tsv"):
        Manifest.read(tmp_path)


# -- sample files ---------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    s = render(domain_spec("B"), 0, 1)
    save_sample(s, tmp_path / "x.ppm", tmp_path / "x.pgm")
    back = load_sample(tmp_path / "x.ppm", tmp_path / "x.pgm")
    assert back.image.tobytes() == s.image.tobytes()
    assert back.mask.tobytes() == s.mask.tobytes() and back.box == s.box


def test_mask_value_seven_rejected(tmp_path):
    s = render(domain_spec("A", 32), 0, 0)
    save_sample(s, tmp_path / "x.ppm", tmp_path / "x.pgm")
    gray = s.mask * 255
    gray[0, 0] = 7
    (tmp_path / "x.pgm").write_bytes(encode_pgm(gray))
    with pytest.raises(MaskDomainError, match="x.pgm"):
        load_sample(tmp_path / "x.ppm", tmp_path / "x.pgm")


def test_truncated_pixmap_rejected(tmp_path):
    s = render(domain_spec("A", 32), 0, 0)
    save_sample(s, tmp_path / "x.ppm", tmp_path / "x.pgm")
    data = (tmp_path / "x.ppm").read_bytes()
    (tmp_path / "x.ppm").write_bytes(data[:-10])
    with pytest.raises(LengthError, match="x.ppm"):
        load_sample(tmp_path / "x.ppm", tmp_path / "x.pgm")


@pytest.mark.parametrize("blob", [b"", b"P3\n2 2\n255\n", b"P6\n2", b"P6\n2 x\n255\n" + bytes(12),
                                  b"P6\n2 2\n65535\n" + bytes(24), b"P6\n0 2\n255\n"])
def test_malformed_headers(tmp_path, blob):
    p = tmp_path / "bad.ppm"
    p.write_bytes(blob)
    with pytest.raises(ParseError, match="bad.ppm"):
        read_pnm(p)


def test_header_comments_and_small_maxval(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6 # comment\n1 1\n15\n" + bytes([15, 0, 3]))
    arr, maxval = read_pnm(p)
    assert maxval == 15 and arr.tolist() == [[[15, 0, 3]]]


def test_dimension_mismatch(tmp_path):
    s = render(domain_spec("A", 32), 0, 0)
    (tmp_path / "x.ppm").write_bytes(encode_ppm(s.image))
    (tmp_path / "x.pgm").write_bytes(encode_pgm(np.full((16, 16), 255, np.uint8)))
    with pytest.raises(ParseError, match="x.pgm"):
        load_sample(tmp_path / "x.ppm", tmp_path / "x.pgm")


def test_empty_mask_file_rejected(tmp_path):
    (tmp_path / "x.ppm").write_bytes(encode_ppm(np.zeros((4, 4, 3), np.uint8)))
    (tmp_path / "x.pgm").write_bytes(encode_pgm(np.zeros((4, 4), np.uint8)))
    with pytest.raises(EmptyMaskError):
        load_sample(tmp_path / "x.ppm", tmp_path / "x.pgm")


# -- ingestion / resize ------------------------------------------------------------------------


def test_ingest_identity_at_size(tmp_path):
    s = render(domain_spec("A", 32), 0, 0)
    save_sample(s, tmp_path / "x.ppm", tmp_path / "x.pgm")
    got = ingest_external(tmp_path / "x.ppm", tmp_path / "x.pgm", 32)
    assert got.image.tobytes() == s.image.tobytes() and got.mask.tobytes() == s.mask.tobytes()


def test_ingest_downscale_solid_mask(tmp_path):
    (tmp_path / "x.ppm").write_bytes(encode_ppm(np.full((64, 64, 3), 90, np.uint8)))
    (tmp_path / "x.pgm").write_bytes(encode_pgm(np.full((64, 64), 255, np.uint8)))
    got = ingest_external(tmp_path / "x.ppm", tmp_path / "x.pgm", 32)
    assert got.mask.all() and got.image.shape == (32, 32, 3) and (got.image == 90).all()


def _nonempty_after_resize_oracle(mask, size):
    # brute force: every nonempty source with >= 4 foreground pixels stays nonempty
    return resize_mask_nearest(mask, size).any()


def test_resize_keeps_small_masks_nonempty():
    # all 4x4 masks with at least 4 foreground pixels, down to 2x2 and 1x1
    for bits in itertools.product((0, 1), repeat=16):
        m = np.array(bits, np.uint8).reshape(4, 4)
        if m.sum() < 4:
            continue
        assert _nonempty_after_resize_oracle(m, 2)
        assert _nonempty_after_resize_oracle(m, 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 16), st.integers(0, 2**31))
def test_resize_nonempty_property(h, w, size, seed):
    rng = np.random.default_rng(seed)
    m = np.zeros((h, w), np.uint8)
    m[rng.integers(h), rng.integers(w)] = 1
    out = resize_mask_nearest(m, size)
    assert out.shape == (size, size) and out.any()
    assert set(np.unique(out)) <= {0, 1}
