import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from gccunet.data import (
    DataError,
    DatasetSpec,
    FundusSample,
    drive_split,
    extract_patches,
    generate_synthetic,
    load_drive_layout,
    load_mask,
    mask_to_bytes,
    save_mask,
)

from oracles import components8


def write_tree(root, n, h, w, rgb=True, mask_format="gif"):
    rng = np.random.default_rng(0)
    for d in ("images", "labels", "masks"):
        (root / d).mkdir(parents=True)
    for i in range(n):
        stem = f"{i + 1:02d}"
        shape = (h, w, 3) if rgb else (h, w)
        Image.fromarray(rng.integers(0, 256, shape, dtype=np.uint8)).save(root / "images" / f"{stem}.png")
        Image.fromarray((rng.random((h, w)) < 0.1).astype(np.uint8) * 255).save(root / "labels" / f"{stem}.png")
        fov = np.zeros((h, w), np.uint8)
        fov[2:-2, 2:-2] = 255
        Image.fromarray(fov).save(root / "masks" / f"{stem}.{mask_format}")


def test_drive_tree_full_size(tmp_path):
    write_tree(tmp_path, 40, 584, 565)
    samples = load_drive_layout(tmp_path)
    train, test = drive_split(samples)
    assert len(train) == 20 and len(test) == 20
    assert all(s.shape == (584, 565) for s in samples)
    assert [s.name for s in samples] == [f"{i:02d}" for i in range(1, 41)]
    assert train[-1].name == "20" and test[0].name == "21"


def test_drive_green_channel_and_binary_masks(tmp_path):
    write_tree(tmp_path, 1, 8, 8)
    s = load_drive_layout(tmp_path)[0]
    rgb = np.array(Image.open(tmp_path / "images" / "01.png"))
    assert np.array_equal(s.image[0], rgb[..., 1] / 255.0)
    assert s.fov.sum() == 16 and set(np.unique(s.label)) <= {0, 1}


def test_drive_missing_mask_names_sample(tmp_path):
    write_tree(tmp_path, 3, 8, 8)
    (tmp_path / "masks" / "02.gif").unlink()
    with pytest.raises(FileNotFoundError, match="'02'"):
        load_drive_layout(tmp_path)


def test_drive_rejects_gray_label(tmp_path):
    write_tree(tmp_path, 1, 8, 8, mask_format="png")
    lab = np.zeros((8, 8), np.uint8)
    lab[0, 0] = 128
    Image.fromarray(lab).save(tmp_path / "labels" / "01.png")
    with pytest.raises(DataError, match="128"):
        load_drive_layout(tmp_path)


def test_drive_size_mismatch(tmp_path):
    write_tree(tmp_path, 1, 8, 8, rgb=False, mask_format="png")
    Image.fromarray(np.zeros((8, 9), np.uint8)).save(tmp_path / "labels" / "01.png")
    with pytest.raises(DataError, match="differ"):
        load_drive_layout(tmp_path)


def test_sample_invariants():
    with pytest.raises(DataError):
        FundusSample(np.zeros((1, 4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))
    with pytest.raises(DataError):
        FundusSample(np.zeros((1, 4, 4)), np.full((4, 4), 2), np.zeros((4, 4)))
    with pytest.raises(DataError):
        FundusSample(np.full((1, 4, 4), 1.5), np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(DataError):
        DatasetSpec(patch_size=44).validate(3)


def test_synthetic_deterministic_and_valid():
    a, b = generate_synthetic(5, 3, 32), generate_synthetic(5, 3, 32)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.label, y.label)
        assert x.fov.all() and x.image.min() >= 0 and x.image.max() <= 1
    assert not np.array_equal(a[0].label, generate_synthetic(6, 1, 32)[0].label)
    with pytest.raises(DataError):
        generate_synthetic(0, 1, 20)


def test_synthetic_vessel_fraction_bound():
    fractions = [generate_synthetic(seed, 1, 64)[0].label.mean() for seed in range(100)]
    assert 0.02 <= min(fractions) and max(fractions) <= 0.25


def test_synthetic_branches_are_connected():
    samples, branches = generate_synthetic(3, 20, 48, return_branches=True)
    for s, skels in zip(samples, branches):
        assert 2 <= len(skels) <= 4
        for skel in skels:
            assert components8(skel) == 1
            assert ndimage.label(skel, np.ones((3, 3)))[1] == 1
            assert np.all(s.label[skel] == 1)


def test_patch_examples():
    s = generate_synthetic(0, 1, 64)[0]
    one = extract_patches(s, 64, 8)
    assert len(one) == 1 and np.array_equal(one[0].image, s.image)
    tiles = extract_patches(s, 32, 32)
    assert len(tiles) == 4
    label = np.block([[tiles[0].label, tiles[1].label], [tiles[2].label, tiles[3].label]])
    image = np.block([[tiles[0].image, tiles[1].image], [tiles[2].image, tiles[3].image]])
    assert np.array_equal(label, s.label) and np.array_equal(image, s.image)
    with pytest.raises(DataError):
        extract_patches(s, 65, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(16, 40), st.integers(16, 40), st.integers(1, 16), st.integers(1, 12))
def test_patch_count_and_bounds(h, w, size, stride):
    s = FundusSample(np.random.default_rng(h * w).random((1, h, w)), np.zeros((h, w)), np.ones((h, w)))
    patches = extract_patches(s, size, stride)
    assert len(patches) == ((h - size) // stride + 1) * ((w - size) // stride + 1)
    for p in patches:
        i, j = map(int, p.name.split("@")[1].split(","))
        assert i + size <= h and j + size <= w
        assert np.array_equal(p.image, s.image[:, i:i + size, j:j + size])


def test_mask_io(tmp_path):
    assert mask_to_bytes(np.array([[0.5]]))[0, 0] == 128
    rng = np.random.default_rng(1)
    m = rng.random((9, 7))
    save_mask(m, tmp_path / "m.png")
    assert np.max(np.abs(load_mask(tmp_path / "m.png") - m)) <= 1 / 255
    save_mask(np.zeros((4, 4)), tmp_path / "z.png")
    assert np.array_equal(np.array(Image.open(tmp_path / "z.png")), np.zeros((4, 4), np.uint8))
    with pytest.raises(DataError):
        save_mask(np.full((2, 2), 1.2), tmp_path / "bad.png")
    with pytest.raises(OSError, match="nope"):
        save_mask(np.zeros((2, 2)), tmp_path / "nope" / "m.png")
