import json

import numpy as np
import pytest

from augsearch import data as dt
from augsearch.augment import SignalBatch
from augsearch.data import SplitPlan, generate_synthetic, lowpass, split, \
    standardize
from augsearch.rng import RandomStream

SFREQ = 128.0


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synthetic_deterministic_label_allocation():
    spec = dt.default_synthetic_spec()
    batch = generate_synthetic(spec, 1000, RandomStream(0))
    counts = np.bincount(batch.labels)
    assert counts.tolist() == [500, 500]


def test_synthetic_bitwise_reproducible():
    spec = dt.default_synthetic_spec()
    a = generate_synthetic(spec, 20, RandomStream(5))
    b = generate_synthetic(spec, 20, RandomStream(5))
    assert a.data.tobytes() == b.data.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_synthetic_shapes_and_finiteness():
    spec = dt.default_synthetic_spec()
    batch = generate_synthetic(spec, 12, RandomStream(1))
    assert batch.data.shape == (12, spec.n_channels, spec.n_times)
    assert np.isfinite(batch.data).all()


def test_synthetic_rejects_peak_above_nyquist():
    spec = dt.default_synthetic_spec()
    spec.classes[0].peaks.append((80.0, 1.0))
    with pytest.raises(ValueError):
        dt.SyntheticSpec(classes=spec.classes)


def test_synthetic_class1_sawtooths_single_polarity():
    # class-1 events always deflect negative first: mean skew is negative
    spec = dt.default_synthetic_spec()
    batch = generate_synthetic(spec, 400, RandomStream(2))
    x = batch.data[:, 0, :]
    skews = ((x - x.mean(-1, keepdims=True)) ** 3).mean(-1)
    sk0 = np.mean(skews[batch.labels == 0])
    sk1 = np.mean(skews[batch.labels == 1])
    assert sk1 < sk0 - 0.05


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def test_standardize_moments():
    batch = generate_synthetic(dt.default_synthetic_spec(), 10, RandomStream(3))
    out = standardize(batch)
    assert np.max(np.abs(out.data.mean(axis=-1))) < 1e-10
    assert np.max(np.abs(out.data.std(axis=-1) - 1.0)) < 1e-10


def test_standardize_idempotent():
    batch = generate_synthetic(dt.default_synthetic_spec(), 5, RandomStream(4))
    once = standardize(batch)
    twice = standardize(once)
    assert np.max(np.abs(twice.data - once.data)) < 1e-10


def test_standardize_two_point_case():
    batch = SignalBatch(np.array([[[1.0, 3.0]]]), SFREQ)
    out = standardize(batch)
    assert np.allclose(out.data, [[[-1.0, 1.0]]])


def test_standardize_constant_channel_error():
    data = np.random.default_rng(5).standard_normal((2, 2, 16))
    data[1, 0, :] = 7.0
    with pytest.raises(ValueError, match="record 1, channel 0"):
        standardize(SignalBatch(data, SFREQ))


def test_lowpass_dc_preserved():
    batch = SignalBatch(np.ones((1, 1, 512)), SFREQ)
    out = lowpass(batch, cutoff=30.0, transition=7.0)
    core = out.data[0, 0, 64:-64]
    assert np.max(np.abs(core - 1.0)) < 1e-6


def test_lowpass_stopband_tone():
    t = np.arange(1280) / SFREQ
    tone = np.sin(2 * np.pi * 45.0 * t)[None, None, :]
    out = lowpass(SignalBatch(tone, SFREQ), cutoff=30.0, transition=7.0)
    assert np.sqrt((out.data ** 2).mean()) <= 0.01 * np.sqrt((tone ** 2).mean())


def test_lowpass_passband_tone():
    t = np.arange(1280) / SFREQ
    tone = np.sin(2 * np.pi * 10.0 * t)[None, None, :]
    out = lowpass(SignalBatch(tone, SFREQ), cutoff=30.0, transition=7.0)
    ratio = np.sqrt((out.data ** 2).mean()) / np.sqrt((tone ** 2).mean())
    assert abs(ratio - 1.0) < 0.05


def test_lowpass_invalid_band():
    batch = SignalBatch(np.ones((1, 1, 64)), SFREQ)
    with pytest.raises(ValueError):
        lowpass(batch, cutoff=62.0, transition=7.0)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def test_split_stratified_counts():
    labels = np.repeat([0, 1], 50)
    out = split(labels, SplitPlan(train=0.8, valid=0.2, test=0.0, seed=1))
    for cls in (0, 1):
        assert np.sum(labels[out["train"]] == cls) == 40
        assert np.sum(labels[out["valid"]] == cls) == 10


def test_split_partition_property():
    labels = np.repeat([0, 1, 2], 40)
    out = split(labels, SplitPlan(train=0.6, valid=0.2, test=0.2, seed=2))
    allidx = np.concatenate([out["train"], out["valid"], out["test"]])
    assert sorted(allidx.tolist()) == list(range(120))


def test_split_subset_exponent():
    labels = np.repeat([0, 1], 50)
    plan = SplitPlan(train=0.8, valid=0.2, test=0.0, seed=3, subset_log2=1)
    out = split(labels, plan)
    assert len(out["train"]) == 40
    assert np.sum(labels[out["train"]] == 0) == 20


def test_split_deterministic():
    labels = np.repeat([0, 1], 30)
    a = split(labels, SplitPlan(seed=9))
    b = split(labels, SplitPlan(seed=9))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_split_class_too_small():
    labels = np.array([0] * 50 + [1])
    with pytest.raises(ValueError, match="class 1"):
        split(labels, SplitPlan())


# ---------------------------------------------------------------------------
# container io
# ---------------------------------------------------------------------------

def test_container_roundtrip_f64(tmp_path):
    batch = generate_synthetic(dt.default_synthetic_spec(), 6, RandomStream(6))
    dt.write_dataset(batch, tmp_path / "ds")
    back = dt.read_dataset(tmp_path / "ds")
    assert back.data.tobytes() == batch.data.tobytes()
    assert np.array_equal(back.labels, batch.labels)
    assert back.sfreq == batch.sfreq


def test_container_roundtrip_f32(tmp_path):
    batch = generate_synthetic(dt.default_synthetic_spec(), 4, RandomStream(7))
    dt.write_dataset(batch, tmp_path / "ds", dtype="f32le")
    back = dt.read_dataset(tmp_path / "ds")
    assert back.data.tobytes() == \
        batch.data.astype("<f4").astype(np.float64).tobytes()


def test_container_truncated_file(tmp_path):
    batch = generate_synthetic(dt.default_synthetic_spec(), 4, RandomStream(8))
    dt.write_dataset(batch, tmp_path / "ds")
    data_file = tmp_path / "ds" / "data.bin"
    data_file.write_bytes(data_file.read_bytes()[:-16])
    with pytest.raises(dt.DatasetError, match="corrupt"):
        dt.read_dataset(tmp_path / "ds")


def test_container_bad_sfreq(tmp_path):
    batch = generate_synthetic(dt.default_synthetic_spec(), 4, RandomStream(9))
    dt.write_dataset(batch, tmp_path / "ds")
    mpath = tmp_path / "ds" / "manifest.json"
    doc = json.loads(mpath.read_text())
    doc["sfreq"] = 0
    mpath.write_text(json.dumps(doc))
    with pytest.raises(dt.DatasetError, match="sfreq"):
        dt.read_dataset(tmp_path / "ds")


def test_container_unknown_version(tmp_path):
    batch = generate_synthetic(dt.default_synthetic_spec(), 4, RandomStream(10))
    dt.write_dataset(batch, tmp_path / "ds")
    mpath = tmp_path / "ds" / "manifest.json"
    doc = json.loads(mpath.read_text())
    doc["version"] = 99
    mpath.write_text(json.dumps(doc))
    with pytest.raises(dt.DatasetError, match="version"):
        dt.read_dataset(tmp_path / "ds")
