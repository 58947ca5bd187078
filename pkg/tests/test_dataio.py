import json
import os

import numpy as np
import pytest
from PIL import Image

from segchange.dataio import (
    BitemporalSample,
    DatasetSplit,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    load_mask,
    save_mask,
    write_dataset,
)
from segchange.errors import GenerationError, LoadError, ValidationError


def _write_tree(root, names, size=(512, 512), label_values=(0, 255), split="train"):
    rng = np.random.default_rng(0)
    for sub in ("A", "B", "label", "list"):
        os.makedirs(root / sub, exist_ok=True)
    for name in names:
        for sub in ("A", "B"):
            img = rng.integers(0, 256, size=size + (3,), dtype=np.uint8)
            Image.fromarray(img).save(root / sub / name)
        lab = rng.choice(np.array(label_values, dtype=np.uint8), size=size)
        Image.fromarray(lab, mode="L").save(root / "label" / name)
    (root / "list" / f"{split}.txt").write_text("".join(n + "\n" for n in names))


def test_load_three_512_triplets(tmp_path):
    _write_tree(tmp_path, ["c.png", "a.png", "b.png"])
    split = load_dataset(str(tmp_path), "train")
    assert len(split) == 3
    assert [s.id for s in split] == ["c", "a", "b"]  # listed order
    for s in split:
        assert s.image_t1.shape == (512, 512, 3)
        assert s.mask.shape == (512, 512)
        assert s.prompt is None


def test_label_binarized_at_128(tmp_path):
    _write_tree(tmp_path, ["x.png"], size=(32, 32))
    split = load_dataset(str(tmp_path), "train")
    raw = np.asarray(Image.open(tmp_path / "label" / "x.png"))
    assert set(np.unique(split[0].mask)) <= {0, 1}
    np.testing.assert_array_equal(split[0].mask, (raw >= 128).astype(np.uint8))


def test_antialiased_labels_threshold(tmp_path):
    _write_tree(tmp_path, ["x.png"], size=(32, 32), label_values=(0, 127, 128, 255))
    raw = np.asarray(Image.open(tmp_path / "label" / "x.png"))
    mask = load_dataset(str(tmp_path), "train")[0].mask
    assert np.all(mask[raw == 127] == 0) and np.all(mask[raw == 128] == 1)


def test_missing_file_names_path(tmp_path):
    _write_tree(tmp_path, ["x.png"], size=(32, 32))
    os.remove(tmp_path / "A" / "x.png")
    with pytest.raises(LoadError, match="A/x.png"):
        load_dataset(str(tmp_path), "train")


def test_missing_directory(tmp_path):
    _write_tree(tmp_path, ["x.png"], size=(32, 32))
    os.rename(tmp_path / "label", tmp_path / "labels")
    with pytest.raises(LoadError, match="label"):
        load_dataset(str(tmp_path), "train")


def test_size_mismatch_names_sample(tmp_path):
    _write_tree(tmp_path, ["x.png"], size=(32, 32))
    Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(tmp_path / "B" / "x.png")
    with pytest.raises(ValidationError, match="'x'"):
        load_dataset(str(tmp_path), "train")


def test_non_divisible_size_rejected(tmp_path):
    _write_tree(tmp_path, ["x.png"], size=(48, 48))
    with pytest.raises(ValidationError, match="divisible"):
        load_dataset(str(tmp_path), "train")


def test_prompts_joined_by_id(tmp_path):
    _write_tree(tmp_path, ["a.png", "b.png"], size=(32, 32))
    (tmp_path / "prompts.jsonl").write_text(json.dumps({"id": "b", "prompt": "new roof"}) + "\n")
    split = load_dataset(str(tmp_path), "train", default_prompt="generic")
    assert split[0].prompt == "generic"
    assert split[1].prompt == "new roof"


def test_parallel_load_keeps_order(tmp_path):
    names = [f"{c}.png" for c in "qwertyuiop"]
    _write_tree(tmp_path, names, size=(32, 32))
    serial = load_dataset(str(tmp_path), "train")
    parallel = load_dataset(str(tmp_path), "train", workers=4)
    assert [s.id for s in serial] == [s.id for s in parallel]
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.image_t1, b.image_t1)


def test_split_invariants():
    s = generate_synthetic(SynthConfig(n_samples=2, height=32, width=32, seed=1))
    with pytest.raises(ValidationError):
        DatasetSplit("train", [s[0], s[0]])
    with pytest.raises(ValidationError):
        DatasetSplit("holdout", [])
    shuffled = DatasetSplit("train", list(s)).shuffled(3)
    assert [x.id for x in shuffled.sorted()] == sorted(x.id for x in s)


@pytest.mark.parametrize("mutate", ["t2_shape", "mask_shape", "mask_values", "range", "stride"])
def test_sample_invariant_violations(mutate):
    img = np.zeros((32, 32, 3), np.float32)
    mask = np.zeros((32, 32), np.uint8)
    kw = dict(id="s", image_t1=img, image_t2=img.copy(), mask=mask)
    if mutate == "t2_shape":
        kw["image_t2"] = np.zeros((64, 32, 3), np.float32)
    elif mutate == "mask_shape":
        kw["mask"] = np.zeros((32, 64), np.uint8)
    elif mutate == "mask_values":
        kw["mask"] = np.full((32, 32), 2, np.uint8)
    elif mutate == "range":
        kw["image_t1"] = np.full((32, 32, 3), 1.5, np.float32)
    else:
        kw = dict(id="s", image_t1=np.zeros((40, 40, 3)), image_t2=np.zeros((40, 40, 3)),
                  mask=np.zeros((40, 40), np.uint8))
    with pytest.raises(ValidationError):
        BitemporalSample(**kw)


# synthetic generation --------------------------------------------------------

def test_synthetic_determinism():
    cfg = SynthConfig(n_samples=4, seed=7)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert [s.id for s in a] == [s.id for s in b]
    for x, y in zip(a, b):
        assert x.image_t1.tobytes() == y.image_t1.tobytes()
        assert x.image_t2.tobytes() == y.image_t2.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
        assert x.prompt == y.prompt


def test_synthetic_change_fraction_bounds():
    split = generate_synthetic(SynthConfig(n_samples=16, height=64, width=64,
                                           change_fraction_bounds=(0.05, 0.3), seed=11))
    assert len(split) == 16
    for s in split:
        frac = int(s.mask.sum()) / s.mask.size
        assert 0.05 <= frac <= 0.3
        assert s.mask.sum() >= 1


def test_synthetic_mask_is_exactly_altered_pixels():
    for s in generate_synthetic(SynthConfig(n_samples=8, seed=3)):
        altered = np.any(s.image_t1 != s.image_t2, axis=-1)
        np.testing.assert_array_equal(s.mask.astype(bool), altered)
        assert s.prompt.startswith("buildings")


def test_zero_shapes_disallowed():
    with pytest.raises(ValidationError):
        generate_synthetic(SynthConfig(n_shapes_range=(0, 0)))


def test_infeasible_bounds_raise():
    # one 8x8 shape on 64x64 covers at most ~1.6% of the image
    cfg = SynthConfig(n_shapes_range=(1, 1), shape_size_range=(8, 8),
                      change_fraction_bounds=(0.5, 0.9))
    with pytest.raises(GenerationError):
        generate_synthetic(cfg)


def test_synthetic_write_load_roundtrip(tmp_path):
    split = generate_synthetic(SynthConfig(n_samples=3, seed=2))
    write_dataset(str(tmp_path), [split])
    loaded = load_dataset(str(tmp_path), "train")
    for a, b in zip(split, loaded):
        assert a.id == b.id and a.prompt == b.prompt
        np.testing.assert_array_equal(a.image_t1, b.image_t1)
        np.testing.assert_array_equal(a.image_t2, b.image_t2)
        np.testing.assert_array_equal(a.mask, b.mask)


# masks -------------------------------------------------------------------------

def test_save_all_zero_mask(tmp_path):
    save_mask(np.zeros((4, 4), np.uint8), tmp_path / "m.png")
    with Image.open(tmp_path / "m.png") as im:
        assert im.mode == "L"
        assert np.asarray(im).max() == 0


def test_save_single_pixel(tmp_path):
    m = np.zeros((4, 4), np.uint8)
    m[0, 0] = 1
    save_mask(m, tmp_path / "m.png")
    px = np.asarray(Image.open(tmp_path / "m.png"))
    assert px[0, 0] == 255 and px.sum() == 255


def test_mask_roundtrip_random(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(100):
        m = rng.integers(0, 2, size=(32, 32)).astype(np.uint8)
        path = tmp_path / f"{k}.png"
        save_mask(m, path)
        np.testing.assert_array_equal(load_mask(path), m)


def test_save_mask_unwritable(tmp_path):
    with pytest.raises(OSError):
        save_mask(np.zeros((4, 4), np.uint8), tmp_path / "missing" / "m.png")
