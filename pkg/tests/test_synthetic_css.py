import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maaf.netpbm import read_pnm, write_pnm
from maaf.synthetic_css import (BACKGROUND, COLORS, POSITIONS, CommandError, ModCommand, Scene, SceneObject,
                                TripletDataset, apply_command, caption, catalog_paths, cell_of, gen_dataset,
                                gen_scene, invert, load_manifest, random_command, render, render_pixels,
                                vocabulary_words)
from maaf.text_encoder import Vocabulary, tokenize


def _scene():
    return Scene((SceneObject((0, 0), "sphere", "yellow", "large"), SceneObject((1, 2), "cube", "red", "small")))


def test_make_yellow_sphere_small():
    s = _scene()
    cmd = ModCommand("make", ("yellow", "sphere"), "small")
    assert caption(cmd) == "make yellow sphere small"
    t = apply_command(s, cmd)
    assert t.at((0, 0)).size == "small" and t.at((1, 2)) == s.at((1, 2))


def test_captions_for_each_verb():
    assert caption(ModCommand("remove", "middle-right")) == "remove middle-right"
    assert caption(ModCommand("remove", ("red", "cube"))) == "remove red cube"
    assert caption(ModCommand("add", "top-center", ("blue", "cylinder"))) == "add blue cylinder to top-center"


@pytest.mark.parametrize("cmd", [
    ModCommand("add", "top-left", ("red", "cube")),     # occupied
    ModCommand("remove", ("green", "cube")),            # nothing matches
    ModCommand("make", "top-left", "small"),            # make needs color+shape
    ModCommand("make", ("yellow", "sphere"), "huge"),   # bad argument
    ModCommand("shrink", ("yellow", "sphere")),
])
def test_inapplicable_commands_raise(cmd):
    with pytest.raises(CommandError):
        apply_command(_scene(), cmd)


def test_one_object_per_cell():
    o = SceneObject((0, 0), "sphere", "red", "small")
    with pytest.raises(ValueError):
        Scene((o, SceneObject((0, 0), "cube", "red", "small")))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_commands_change_scene_and_invert(seed):
    rng = np.random.default_rng(seed)
    s = gen_scene(rng)
    assert 2 <= len(s.objects) <= 6
    cmd = random_command(s, rng)
    t = apply_command(s, cmd)
    assert t.key() != s.key()
    back = invert(s, cmd)
    if back is not None:
        assert apply_command(t, back) == s


def test_render_geometry():
    s = Scene((SceneObject((1, 1), "cube", "red", "large"), SceneObject((0, 2), "sphere", "blue", "small")))
    img = render_pixels(s, 48)
    assert img.shape == (48, 48, 3) and img.dtype == np.uint8
    assert tuple(img[24, 24]) == COLORS["red"]          # centre of the middle cell
    assert tuple(img[8, 40]) == COLORS["blue"]          # centre of top-right cell
    assert tuple(img[1, 1]) == BACKGROUND
    # large square: half-width 6.4 px, so 12 pixel centres per row
    assert (img[24, 16:32] == COLORS["red"]).all(axis=1).sum() == 12


def test_render_is_deterministic_and_scales(rng):
    s = gen_scene(rng)
    assert np.array_equal(render(s), render(s))
    big = render_pixels(s, 96)
    assert big.shape == (96, 96, 3)
    with pytest.raises(ValueError):
        render_pixels(s, 50)


def test_vocabulary_covers_all_positions():
    words = vocabulary_words()
    for p in POSITIONS:
        assert tokenize(p).words[0] in words


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_pnm(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(read_pnm(tmp_path / "x.ppm"), img)
    grey = rng.integers(0, 256, (4, 3), dtype=np.uint8)
    write_pnm(tmp_path / "x.pgm", grey)
    np.testing.assert_array_equal(read_pnm(tmp_path / "x.pgm"), grey)


def _digest_tree(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_is_byte_identical_for_a_seed(tmp_path):
    gen_dataset(12, 4, seed=7, out_dir=tmp_path / "a")
    gen_dataset(12, 4, seed=7, out_dir=tmp_path / "b")
    gen_dataset(12, 4, seed=8, out_dir=tmp_path / "c")
    assert _digest_tree(tmp_path / "a") == _digest_tree(tmp_path / "b")
    assert _digest_tree(tmp_path / "a") != _digest_tree(tmp_path / "c")


def test_dataset_triples_are_consistent(tiny_data):
    train = TripletDataset.from_manifest(tiny_data / "train.jsonl")
    test = TripletDataset.from_manifest(tiny_data / "test.jsonl")
    assert (len(train), len(test)) == (48, 16)
    vocab = Vocabulary.load(tiny_data / "vocab.txt")
    for r in train.records + test.records:
        assert 0 not in vocab.encode(tokenize(r.caption).words), r.caption
        assert r.category == r.caption.split()[0]
        assert train.image(r.query).shape == (48, 48, 3)
    # scene pools are disjoint and targets identify records
    scenes = lambda ds: {p for r in ds.records for p in (r.query, r.target)}  # noqa: E731
    assert not scenes(train) & scenes(test)
    assert len(catalog_paths(train, test)) == 64


def test_bad_manifest_line_reports_location(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"query": "a"}\n')
    with pytest.raises(ValueError, match="m.jsonl:1"):
        load_manifest(tmp_path / "m.jsonl")


def test_missing_image_is_named(tmp_path):
    ds = TripletDataset([])
    with pytest.raises(FileNotFoundError, match="nope.ppm"):
        ds.image(str(tmp_path / "nope.ppm"))


def test_cell_of_positions():
    assert cell_of("top-left") == (0, 0) and cell_of("bottom-center") == (2, 1)
