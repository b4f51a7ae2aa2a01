import numpy as np
import pytest

from mtunet.data import (SampleBatch, SynthSpec, class_intensities, flip, rotate90, synth_generate)
from mtunet.errors import ConfigError, ConfigMismatchError, CorruptionError, DataError, FormatError
from mtunet.fileio import load_array, load_checkpoint, load_tensor, restore_into, save_checkpoint, save_tensor
from mtunet.model import ModelConfig, build_model
from mtunet.optim import ParameterStore, adam_step
from mtunet.tensor import Tensor

SMALL = ModelConfig(input_size=16, stage_widths=[4, 8, 16, 32], mtm_stages=[1, 2], ea_slots=8)


# ---------------------------------------------------------------- synthetic data

def test_same_spec_twice_is_bit_identical():
    a = synth_generate(SynthSpec(seed=3, count=5, size=32))
    b = synth_generate(SynthSpec(seed=3, count=5, size=32))
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_different_seeds_differ():
    a = synth_generate(SynthSpec(seed=1, count=2, size=32))
    b = synth_generate(SynthSpec(seed=2, count=2, size=32))
    assert not np.array_equal(a.labels, b.labels)


def test_offset_generation_matches_full_range():
    spec = SynthSpec(seed=0, count=6, size=32)
    full = synth_generate(spec)
    tail = synth_generate(SynthSpec(seed=0, count=2, size=32), start=4)
    np.testing.assert_array_equal(full.labels[4:], tail.labels)


def test_every_class_present_and_labels_aligned_at_zero_noise():
    spec = SynthSpec(seed=0, count=10, size=32, num_classes=4, noise=0.0)
    batch = synth_generate(spec)
    base = class_intensities(4)
    for img, lab in zip(batch.images, batch.labels):
        assert set(np.unique(lab)) == {0, 1, 2, 3}
        np.testing.assert_array_equal(img[0], base[lab])


def test_images_in_unit_range_and_shapes():
    b = synth_generate(SynthSpec(count=3, size=32, noise=0.2))
    assert b.images.shape == (3, 1, 32, 32) and b.labels.shape == (3, 32, 32)
    assert b.images.min() >= 0 and b.images.max() <= 1
    assert b.labels.dtype == np.int64


@pytest.mark.parametrize("kwargs", [dict(size=16), dict(size=32, num_classes=9), dict(noise=0.5),
                                    dict(num_classes=1)])
def test_impossible_specs_rejected(kwargs):
    with pytest.raises(ConfigError):
        synth_generate(SynthSpec(**kwargs))


def test_flip_is_involution_and_rotation_cycles():
    b = synth_generate(SynthSpec(count=1, size=32))
    img, lab = b.images[0], b.labels[0]
    for axis in ("horizontal", "vertical"):
        i2, l2 = flip(*flip(img, lab, axis), axis)
        np.testing.assert_array_equal(i2, img)
        np.testing.assert_array_equal(l2, lab)
    i4, l4 = img, lab
    for _ in range(4):
        i4, l4 = rotate90(i4, l4)
    np.testing.assert_array_equal(i4, img)
    np.testing.assert_array_equal(l4, lab)


def test_sample_batch_validation():
    with pytest.raises(DataError):
        SampleBatch(np.zeros((2, 1, 8, 8)), np.zeros((3, 8, 8), np.int64))
    b = SampleBatch(np.zeros((1, 1, 4, 4)), np.full((1, 4, 4), 5))
    with pytest.raises(DataError):
        b.check_labels(3)


# ---------------------------------------------------------------- tensor files

@pytest.mark.parametrize("arr", [
    np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32),
    np.random.default_rng(1).standard_normal((2, 3)),
    np.array(2.5, dtype=np.float32),
    np.zeros((0, 3), np.float32),
])
def test_tensor_round_trip_bit_exact(tmp_path, arr):
    path = tmp_path / "t.mtt"
    save_tensor(Tensor(arr), path)
    back = load_tensor(path).data
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
    save_tensor(back, tmp_path / "u.mtt")
    assert (tmp_path / "u.mtt").read_bytes() == path.read_bytes()


def test_integer_arrays_round_trip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 3, (2, 4, 4))
    save_tensor(lab, tmp_path / "l.mtt")
    np.testing.assert_array_equal(load_array(tmp_path / "l.mtt"), lab)


def test_truncated_body(tmp_path):
    path = tmp_path / "t.mtt"
    save_tensor(np.ones((3, 4), np.float32), path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CorruptionError, match="expected 48 bytes, found 47"):
        load_tensor(path)


@pytest.mark.parametrize("header,field", [
    (b'{"shape": [2], "dtype": "f16", "byte_order": "little"}', "dtype"),
    (b'{"shape": "x", "dtype": "f32", "byte_order": "little"}', "shape"),
    (b'{"shape": [2], "dtype": "f32", "byte_order": "big"}', "byte_order"),
])
def test_malformed_header_names_field(tmp_path, header, field):
    path = tmp_path / "t.mtt"
    path.write_bytes(header + b"\n" + b"\0" * 8)
    with pytest.raises(FormatError, match=field):
        load_tensor(path)


def test_missing_header_terminator(tmp_path):
    path = tmp_path / "t.mtt"
    path.write_bytes(b'{"shape": []}')
    with pytest.raises(FormatError):
        load_tensor(path)


# ---------------------------------------------------------------- checkpoints

def _trained_model():
    from mtunet.model import forward, loss
    model = build_model(SMALL, seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((2, 1, 16, 16)).astype(np.float32)
    y = rng.integers(0, 3, (2, 16, 16))
    for _ in range(2):
        loss(forward(model, x), y).backward()
        adam_step(model.store)
    return model


def test_checkpoint_save_load_save_byte_identical(tmp_path):
    model = _trained_model()
    a, b = tmp_path / "a.mtc", tmp_path / "b.mtc"
    save_checkpoint(model.store, SMALL, a, seed=7)
    store, config, seed = load_checkpoint(a, expected_config=SMALL)
    assert seed == 7 and config == SMALL.to_dict() and store.t == 2
    for name, p in model.store.items():
        assert store[name].data.tobytes() == p.data.tobytes()
        assert store.m[name].tobytes() == model.store.m[name].tobytes()
        assert store.v[name].tobytes() == model.store.v[name].tobytes()
    save_checkpoint(store, config, b, seed=seed)
    assert a.read_bytes() == b.read_bytes()


def test_fresh_store_round_trip(tmp_path):
    model = build_model(SMALL, seed=1)
    save_checkpoint(model.store, SMALL, tmp_path / "c.mtc")
    store, _, _ = load_checkpoint(tmp_path / "c.mtc")
    assert store.t == 0
    assert all(not store.m[n].any() and not store.v[n].any() for n in store)


def test_config_mismatch_names_field(tmp_path):
    model = build_model(SMALL, seed=1)
    save_checkpoint(model.store, SMALL, tmp_path / "c.mtc")
    other = ModelConfig(**{**SMALL.to_dict(), "num_classes": 4})
    with pytest.raises(ConfigMismatchError, match="num_classes"):
        load_checkpoint(tmp_path / "c.mtc", expected_config=other)


def test_truncated_checkpoint(tmp_path):
    model = build_model(SMALL, seed=1)
    path = tmp_path / "c.mtc"
    save_checkpoint(model.store, SMALL, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_restore_into_rejects_other_layout():
    a = ParameterStore()
    a.add("x", np.zeros(3))
    b = ParameterStore()
    b.add("y", np.zeros(3))
    with pytest.raises(ConfigMismatchError):
        restore_into(a, b)
