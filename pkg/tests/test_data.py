import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossvit_sca.data import (
    DatasetError,
    LabelError,
    PgmFormatError,
    Sample,
    SyntheticSpec,
    _brain,
    _lesion_mask,
    generate_synthetic,
    load_dataset,
    read_pgm,
    render_sample,
    resize_nearest,
    split,
    write_dataset,
    write_pgm,
)
from crossvit_sca.rng import make_rng


def test_label_counts_are_exact():
    samples = generate_synthetic(SyntheticSpec(n_samples=10, seed=2))
    assert sorted(s.label for s in samples) == [0] * 5 + [1] * 5


def test_generation_is_deterministic():
    a = generate_synthetic(SyntheticSpec(n_samples=6, seed=9))
    b = generate_synthetic(SyntheticSpec(n_samples=6, seed=9))
    assert all(np.array_equal(x.image, y.image) and x.label == y.label for x, y in zip(a, b))
    c = generate_synthetic(SyntheticSpec(n_samples=6, seed=10))
    assert not all(np.array_equal(x.image, y.image) for x, y in zip(a, c))


def test_lesion_changes_only_masked_pixels():
    spec = SyntheticSpec(noise_sigma=0.0, lesion_intensity_range=(1.0, 1.0), seed=4)
    for index in range(20):
        pos, neg = render_sample(spec, index, True), render_sample(spec, index, False)
        _, brain = _brain(spec, make_rng(spec.seed, index, 0))
        mask, _ = _lesion_mask(spec, brain, make_rng(spec.seed, index, 1))
        assert mask.any()
        assert np.array_equal(pos[~mask], neg[~mask])
        assert np.all(pos[mask] == 1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_samples_satisfy_invariants(seed):
    for s in generate_synthetic(SyntheticSpec(n_samples=50, seed=seed)):
        assert s.image.shape == (32, 32) and s.label in (0, 1)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_spec_rejects_impossible_lesion():
    with pytest.raises(ValueError, match="lesion cannot fit"):
        SyntheticSpec(lesion_radius_range=(0.3, 0.4)).validate()


# ---------------------------------------------------------------- PGM and directories


def test_pgm_round_trip_within_quantisation(tmp_path, rng):
    img = rng.uniform(size=(7, 5))
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (7, 5)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_pgm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]


def test_load_two_image_fixture(tmp_path):
    write_dataset(tmp_path, [Sample(np.zeros((4, 4)), 0), Sample(np.ones((4, 4)), 1)])
    manifest, samples = load_dataset(tmp_path)
    assert [s.label for s in samples] == [0, 1]
    assert manifest.entries == [("img_00000.pgm", 0), ("img_00001.pgm", 1)]
    _, resized = load_dataset(tmp_path, image_size=8)
    assert resized[1].image.shape == (8, 8)


def test_missing_image_names_the_path(tmp_path):
    write_dataset(tmp_path, [Sample(np.zeros((4, 4)), 0)])
    (tmp_path / "img_00000.pgm").unlink()
    with pytest.raises(DatasetError, match="img_00000.pgm"):
        load_dataset(tmp_path)


@pytest.mark.parametrize("case, error, message", [
    ("bad_magic", PgmFormatError, "not a binary PGM"),
    ("short_file", PgmFormatError, "short file"),
    ("bad_maxval", PgmFormatError, "maxval"),
    ("bad_label", LabelError, "not in"),
    ("bad_header", LabelError, "header"),
    ("no_labels", DatasetError, "missing labels"),
])
def test_broken_fixtures_have_distinct_errors(tmp_path, case, error, message):
    write_dataset(tmp_path, [Sample(np.zeros((4, 4)), 0)])
    img = tmp_path / "img_00000.pgm"
    labels = tmp_path / "labels.csv"
    if case == "bad_magic":
        img.write_bytes(b"P2\n4 4\n255\n" + bytes(16))
    elif case == "short_file":
        img.write_bytes(img.read_bytes()[:-3])
    elif case == "bad_maxval":
        img.write_bytes(b"P5\n4 4\n65535\n" + bytes(32))
    elif case == "bad_label":
        labels.write_text("path,label\nimg_00000.pgm,3\n")
    elif case == "bad_header":
        labels.write_text("file,class\nimg_00000.pgm,0\n")
    else:
        labels.unlink()
    with pytest.raises(error, match=message):
        load_dataset(tmp_path)


def test_label_errors_carry_line_numbers(tmp_path):
    write_dataset(tmp_path, [Sample(np.zeros((4, 4)), 0)])
    (tmp_path / "labels.csv").write_text("path,label\nimg_00000.pgm,0\nimg_00000.pgm,yes\n")
    with pytest.raises(LabelError, match=r"labels.csv:3"):
        load_dataset(tmp_path)


def test_resize_nearest():
    img = np.arange(4.0).reshape(2, 2)
    assert resize_nearest(img, 4).tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
    assert resize_nearest(img, 2) is img


# ---------------------------------------------------------------- split


def test_split_examples():
    samples = generate_synthetic(SyntheticSpec(n_samples=10, seed=1))
    train, val = split(samples, 0.2, seed=5)
    assert (len(train), len(val)) == (8, 2)
    assert sorted(s.label for s in val) == [0, 1]
    again_train, again_val = split(samples, 0.2, seed=5)
    assert [id(s) for s in val] == [id(s) for s in again_val]
    assert {id(s) for s in train} | {id(s) for s in val} == {id(s) for s in samples}
