import itertools

import numpy as np
import pytest

from linerec.errors import ContractError
from linerec.image import estimate_skew, load_pgm
from linerec.synthdata import (AugmentationSpec, GlyphAtlas, augment,
                               builtin_atlas, default_augmentations,
                               generate_dataset, load_atlas, read_manifest,
                               render_line, save_atlas)
from linerec.tokenizer import build_char_vocab


def test_builtin_atlas_covers_alphabet_and_heights_match():
    atlas = builtin_atlas()
    assert "a" in atlas and " " in atlas and "9" in atlas
    heights = {g.shape[0] for g in atlas.glyphs.values()}
    assert len(heights) == 1


def test_builtin_atlas_glyphs_pairwise_distinct():
    atlas = builtin_atlas()
    seen = {}
    for ch, g in atlas.glyphs.items():
        key = (g.shape, g.tobytes())
        assert key not in seen, (ch, seen.get(key))
        seen[key] = ch


def test_render_empty_text():
    img, transcript = render_line("", builtin_atlas())
    assert transcript == ""
    assert img.pixels.sum() == 0.0
    assert img.width >= 1 and img.height >= 1


def test_render_single_glyph_bit_exact():
    atlas = builtin_atlas()
    img, _ = render_line("a", atlas, margin=2)
    g = atlas.glyphs["a"]
    np.testing.assert_array_equal(img.pixels[2:2 + g.shape[0], 2:2 + g.shape[1]], g)
    assert img.pixels[:2].sum() == 0.0


def test_render_width_arithmetic():
    atlas = builtin_atlas()
    img, _ = render_line("ab", atlas, margin=3)
    wa = atlas.glyphs["a"].shape[1]
    wb = atlas.glyphs["b"].shape[1]
    assert img.width == wa + atlas.spacing + wb + 2 * 3


def test_render_unknown_char_lists_it():
    with pytest.raises(ContractError, match="Q"):
        render_line("aQb", builtin_atlas())


def test_render_nonempty_text_has_ink():
    img, _ = render_line("hello", builtin_atlas())
    assert (img.pixels > 0).sum() > 0


def test_rtl_mirrors_ltr_layout():
    ltr = builtin_atlas(direction="ltr")
    rtl = builtin_atlas(direction="rtl")
    img_ltr, t1 = render_line("ba", ltr)
    img_rtl, t2 = render_line("ab", rtl)
    np.testing.assert_array_equal(img_ltr.pixels, img_rtl.pixels)
    assert (t1, t2) == ("ba", "ab")  # transcripts stay in logical order


def test_augment_all_probs_zero_identity():
    img, _ = render_line("abc", builtin_atlas())
    out = augment(img, AugmentationSpec(seed=5), draw_index=3)
    np.testing.assert_array_equal(out.pixels, img.pixels)


def test_augment_deterministic_per_draw():
    img, _ = render_line("abc", builtin_atlas())
    spec = default_augmentations(seed=9)
    a = augment(img, spec, draw_index=4)
    b = augment(img, spec, draw_index=4)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    c = augment(img, spec, draw_index=5)
    assert a.pixels.shape != c.pixels.shape or not np.array_equal(a.pixels, c.pixels)


def test_rotation_recovered_by_skew_estimator():
    # ruled pattern: strong horizontal bars
    from linerec.image import LineImage
    px = np.zeros((40, 200))
    for r in (10, 20, 30):
        px[r:r + 2, 4:196] = 1.0
    spec = AugmentationSpec(rotation_deg=(3.0, 3.0), rotation_prob=1.0, seed=1)
    out = augment(LineImage(px), spec, draw_index=0)
    assert abs(estimate_skew(out) - 3.0) <= 0.5


def test_shear_rotation_preserve_ink_mass():
    img, _ = render_line("abcdef", builtin_atlas())
    base_mass = img.pixels.sum()
    spec = AugmentationSpec(shear_prob=1.0, rotation_prob=1.0, seed=11)
    out = augment(img, spec, draw_index=0)
    assert abs(out.pixels.sum() - base_mass) / base_mass < 0.10


def test_invalid_probability_rejected():
    with pytest.raises(ContractError):
        AugmentationSpec(noise_prob=1.5)


def test_atlas_height_mismatch_rejected():
    with pytest.raises(ContractError):
        GlyphAtlas({"a": np.zeros((4, 3)), "b": np.zeros((5, 3))})


def test_atlas_save_load_roundtrip(tmp_path):
    atlas = builtin_atlas()
    save_atlas(atlas, tmp_path / "atlas")
    loaded = load_atlas(tmp_path / "atlas")
    assert set(loaded.glyphs) == set(atlas.glyphs)
    for ch in atlas.glyphs:
        np.testing.assert_allclose(loaded.glyphs[ch], atlas.glyphs[ch], atol=1 / 255)


def test_generate_dataset_single(tmp_path):
    atlas = builtin_atlas()
    manifest = generate_dataset(["hi"], atlas, AugmentationSpec(seed=2), 1,
                                tmp_path / "data")
    rows = read_manifest(manifest)
    assert len(rows) == 1
    img = load_pgm(tmp_path / "data" / rows[0][0])
    assert img.pixels.sum() > 0
    assert rows[0][1] == "hi"


def test_generate_dataset_reproducible(tmp_path):
    atlas = builtin_atlas()
    spec = default_augmentations(seed=3)
    corpus = ["abc", "de f", "ghij"]
    m1 = generate_dataset(corpus, atlas, spec, 5, tmp_path / "a")
    m2 = generate_dataset(corpus, atlas, spec, 5, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    for rel, _ in read_manifest(m1):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generate_dataset_resume_keeps_bytes(tmp_path):
    atlas = builtin_atlas()
    spec = default_augmentations(seed=4)
    m1 = generate_dataset(["one", "two"], atlas, spec, 4, tmp_path / "d")
    first = {rel: (tmp_path / "d" / rel).read_bytes() for rel, _ in read_manifest(m1)}
    # drop one image, then resume
    (tmp_path / "d" / "images" / "000002.pgm").unlink()
    m2 = generate_dataset(["one", "two"], atlas, spec, 4, tmp_path / "d")
    for rel, data in first.items():
        assert (tmp_path / "d" / rel).read_bytes() == data


def test_manifest_transcripts_roundtrip_through_tokenizer(tmp_path):
    atlas = builtin_atlas()
    corpus = ["hello world", "abc 123", "x.y,z"]
    manifest = generate_dataset(corpus, atlas, AugmentationSpec(seed=6), 6,
                                tmp_path / "ds")
    rows = read_manifest(manifest)
    vocab = build_char_vocab([t for _, t in rows])
    for _, transcript in rows:
        assert vocab.decode(vocab.encode(transcript)) == transcript


def test_empty_corpus_and_bad_count(tmp_path):
    with pytest.raises(ContractError):
        generate_dataset([], builtin_atlas(), AugmentationSpec(), 1, tmp_path / "x")
    with pytest.raises(ContractError):
        generate_dataset(["a"], builtin_atlas(), AugmentationSpec(), 0, tmp_path / "y")
