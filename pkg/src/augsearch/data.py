"""Dataset I/O, preprocessing, stratified splits, and synthetic signals.

The synthetic generator is the desk-scale stand-in for real sleep
recordings. Classes are built from three ingredients: spectral peaks with
random phases, symmetric "spindle" bursts, and asymmetric sawtooth events
("K-complex"-like, a sharp drop followed by a slow linear recovery).

The default two-class task plants an exact invariance: class 0 draws every
sawtooth with random polarity and random time orientation (so its
distribution is invariant to sign flips and time reversal), while class 1
uses a fixed negative, forward-oriented sawtooth (so it is invariant to
neither). Spindles and background are shared by both classes and carry no
label information.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .augment import SignalBatch
from .rng import RandomStream

MANIFEST_NAME = "manifest.json"
DATA_NAME = "data.bin"
MANIFEST_VERSION = 1

_DTYPES = {"f32le": "<f4", "f64le": "<f8"}


class DatasetError(ValueError):
    """Manifest/data-file validation failure."""


# ---------------------------------------------------------------------------
# container format: manifest.json + raw little-endian data.bin
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    version: int
    n_records: int
    channel_names: list[str]
    sfreq: float
    samples_per_window: int
    dtype: str
    label_map: dict[str, str]
    labels: list[int]

    def validate(self):
        if self.version != MANIFEST_VERSION:
            raise DatasetError(f"unknown manifest version {self.version}")
        if self.dtype not in _DTYPES:
            raise DatasetError(f"unknown dtype tag {self.dtype!r}")
        if self.sfreq <= 0:
            raise DatasetError("sfreq must be positive")
        if self.n_records < 1 or self.samples_per_window < 2:
            raise DatasetError("empty dataset")
        if len(self.labels) != self.n_records:
            raise DatasetError("labels must have one entry per record")


def write_dataset(batch: SignalBatch, directory,
                  channel_names: list[str] | None = None,
                  label_map: dict[int, str] | None = None,
                  dtype: str = "f64le"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if batch.labels is None:
        raise DatasetError("container datasets carry labels in the manifest")
    names = channel_names or [f"ch{i}" for i in range(batch.n_channels)]
    label_map = label_map or {int(c): f"class{int(c)}"
                              for c in np.unique(batch.labels)}
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        n_records=batch.n,
        channel_names=names,
        sfreq=float(batch.sfreq),
        samples_per_window=batch.n_times,
        dtype=dtype,
        label_map={str(k): v for k, v in label_map.items()},
        labels=[int(v) for v in batch.labels],
    )
    manifest.validate()
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)
    batch.data.astype(_DTYPES[dtype]).tofile(directory / DATA_NAME)


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"missing {path}")
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest: {exc}")
    try:
        manifest = DatasetManifest(**doc)
    except TypeError as exc:
        raise DatasetError(f"manifest fields do not match schema: {exc}")
    manifest.validate()
    return manifest


def read_dataset(directory) -> SignalBatch:
    directory = Path(directory)
    manifest = read_manifest(directory)
    dtype = _DTYPES[manifest.dtype]
    itemsize = np.dtype(dtype).itemsize
    expected = (manifest.n_records * len(manifest.channel_names) *
                manifest.samples_per_window * itemsize)
    actual = (directory / DATA_NAME).stat().st_size
    if actual != expected:
        raise DatasetError(
            f"corrupt data file: expected {expected} bytes, found {actual}")
    raw = np.fromfile(directory / DATA_NAME, dtype=dtype)
    data = raw.astype(np.float64).reshape(
        manifest.n_records, len(manifest.channel_names),
        manifest.samples_per_window)
    return SignalBatch(data, manifest.sfreq,
                       np.asarray(manifest.labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# synthetic planted-invariance generator
# ---------------------------------------------------------------------------

@dataclass
class EventSpec:
    """Transient template dropped into a window at random positions."""
    kind: str                    # "spindle" | "sawtooth"
    count: int = 2
    amplitude: float = 1.0
    duration_s: float = 0.5
    random_polarity: bool = False
    random_orientation: bool = False
    carrier_hz: float = 12.0     # spindles only

    def __post_init__(self):
        if self.kind not in ("spindle", "sawtooth"):
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass
class ClassSpec:
    peaks: list[tuple[float, float]] = field(default_factory=list)
    events: list[EventSpec] = field(default_factory=list)
    noise_sigma: float = 0.3


@dataclass
class SyntheticSpec:
    classes: list[ClassSpec]
    n_channels: int = 2
    n_times: int = 1024
    sfreq: float = 128.0
    class_balance: list[float] | None = None
    channel_gains: list[float] | None = None

    def __post_init__(self):
        if self.class_balance is None:
            self.class_balance = [1.0 / len(self.classes)] * len(self.classes)
        if abs(sum(self.class_balance) - 1.0) > 1e-9:
            raise ValueError("class balance must sum to 1")
        nyquist = self.sfreq / 2
        for cls in self.classes:
            for freq, _ in cls.peaks:
                if freq >= nyquist:
                    raise ValueError(f"peak {freq} Hz at or above Nyquist")
        if self.channel_gains is None:
            self.channel_gains = [1.0 - 0.3 * (i % 2)
                                  for i in range(self.n_channels)]


def default_synthetic_spec() -> SyntheticSpec:
    """Two classes: polarity/orientation-randomized vs fixed sawtooths."""
    shared_peak = [(10.0, 0.2)]
    spindles = EventSpec("spindle", count=2, amplitude=0.8, duration_s=0.4,
                         random_polarity=True, carrier_hz=12.0)
    class0 = ClassSpec(
        peaks=list(shared_peak),
        events=[spindles,
                EventSpec("sawtooth", count=4, amplitude=1.4, duration_s=0.4,
                          random_polarity=True, random_orientation=True)],
    )
    class1 = ClassSpec(
        peaks=list(shared_peak),
        events=[spindles,
                EventSpec("sawtooth", count=4, amplitude=1.4, duration_s=0.4,
                          random_polarity=False, random_orientation=False)],
    )
    return SyntheticSpec(classes=[class0, class1])


def _sawtooth_template(n: int) -> np.ndarray:
    """Sharp negative drop, slow linear recovery; zero mean-ish edges."""
    drop = max(2, n // 8)
    t = np.zeros(n)
    t[:drop] = -np.linspace(0.0, 1.0, drop)
    t[drop:] = np.linspace(-1.0, 0.0, n - drop)
    return t


def _spindle_template(n: int, carrier_cycles: float, phase: float) -> np.ndarray:
    x = np.linspace(-1.0, 1.0, n)
    envelope = np.exp(-(x / 0.5) ** 2)
    return envelope * np.cos(np.pi * carrier_cycles * x + phase)


def _render_events(ev: EventSpec, T: int, sfreq: float,
                   rng: RandomStream) -> np.ndarray:
    out = np.zeros(T)
    n = max(4, int(round(ev.duration_s * sfreq)))
    n = min(n, T)
    starts = rng.integers(0, T - n + 1, size=ev.count)
    polarity = (rng.uniform(size=ev.count) < 0.5) * 2.0 - 1.0 \
        if ev.random_polarity else np.ones(ev.count)
    flip = rng.uniform(size=ev.count) < 0.5 \
        if ev.random_orientation else np.zeros(ev.count, dtype=bool)
    phases = rng.uniform(size=ev.count, low=0.0, high=2 * np.pi)
    for i in range(ev.count):
        if ev.kind == "sawtooth":
            tpl = _sawtooth_template(n)
            if flip[i]:
                tpl = tpl[::-1]
        else:
            cycles = ev.carrier_hz * ev.duration_s
            tpl = _spindle_template(n, cycles, phases[i])
        out[starts[i]:starts[i] + n] += ev.amplitude * polarity[i] * tpl
    return out


def generate_synthetic(spec: SyntheticSpec, n: int,
                       rng: RandomStream) -> SignalBatch:
    """Deterministic allocation of labels; every record is white noise plus
    class-specific sinusoids with random phases plus event templates."""
    counts = [int(round(n * b)) for b in spec.class_balance]
    counts[-1] = n - sum(counts[:-1])
    labels = np.concatenate([np.full(c, i, dtype=np.int64)
                             for i, c in enumerate(counts)])
    T, C = spec.n_times, spec.n_channels
    t = np.arange(T) / spec.sfreq
    data = np.empty((n, C, T))
    gains = np.asarray(spec.channel_gains)
    for r in range(n):
        cls = spec.classes[labels[r]]
        record_rng = rng.child(("record", r))
        base = np.zeros(T)
        for pi, (freq, power) in enumerate(cls.peaks):
            phase = record_rng.child(("peak", pi)).uniform(low=0, high=2 * np.pi)
            base += np.sqrt(2 * power) * np.cos(2 * np.pi * freq * t + phase)
        for ei, ev in enumerate(cls.events):
            base += _render_events(ev, T, spec.sfreq,
                                   record_rng.child(("event", ei)))
        noise = cls.noise_sigma * record_rng.child("noise").normal(size=(C, T))
        data[r] = gains[:, None] * base[None, :] + noise
    return SignalBatch(data, spec.sfreq, labels)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def standardize(batch: SignalBatch) -> SignalBatch:
    """Per record and channel: zero mean, unit variance."""
    mean = batch.data.mean(axis=-1, keepdims=True)
    std = batch.data.std(axis=-1, keepdims=True)
    flat = np.nonzero(std[:, :, 0] < 1e-12)
    if len(flat[0]):
        r, c = int(flat[0][0]), int(flat[1][0])
        raise ValueError(f"constant channel: record {r}, channel {c}")
    return batch.with_data((batch.data - mean) / std)


def _lowpass_kernel(sfreq: float, cutoff: float, transition: float
                    ) -> np.ndarray:
    """Hamming-windowed sinc, length set by the transition bandwidth."""
    L = int(np.ceil(3.3 * sfreq / transition))
    if L % 2 == 0:
        L += 1
    mid = L // 2
    nvec = np.arange(L) - mid
    h = 2 * cutoff / sfreq * np.sinc(2 * cutoff / sfreq * nvec)
    h *= np.hamming(L)
    return h / h.sum()   # exact unit DC gain


def lowpass(batch: SignalBatch, cutoff: float,
            transition: float = 7.0) -> SignalBatch:
    """Zero-phase windowed-sinc lowpass (centered symmetric kernel)."""
    nyq = batch.sfreq / 2
    if cutoff <= 0 or cutoff + transition / 2 >= nyq:
        raise ValueError(
            f"invalid band: cutoff {cutoff} + transition {transition} "
            f"exceeds Nyquist {nyq}")
    h = _lowpass_kernel(batch.sfreq, cutoff, transition)
    B, C, T = batch.data.shape
    flat = batch.data.reshape(B * C, T)
    out = np.empty_like(flat)
    for i in range(B * C):
        out[i] = np.convolve(flat[i], h, mode="same")
    return batch.with_data(out.reshape(B, C, T))


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    train: float = 0.8
    valid: float = 0.2
    test: float = 0.0
    subset_log2: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.valid) <= 0 or self.test < 0:
            raise ValueError("train and valid fractions must be positive")
        if self.train + self.valid + self.test > 1.0 + 1e-9:
            raise ValueError("fractions must sum to at most 1")
        if self.subset_log2 < 0:
            raise ValueError("subset exponent must be >= 0")


def split(labels: np.ndarray, plan: SplitPlan) -> dict[str, np.ndarray]:
    """Stratified, disjoint, seed-deterministic index sets.

    ``test`` is carved out first; ``train``/``valid`` fractions apply to the
    remainder. The subset exponent keeps ceil(n * 2**-k) training records,
    stratified per class.
    """
    labels = np.asarray(labels)
    rng = RandomStream(plan.seed, 0).child("split")
    sets = {"train": [], "valid": [], "test": []}
    for cls in sorted(set(int(v) for v in labels)):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.child(("class", cls)).permutation(len(idx))]
        n_test = int(round(len(idx) * plan.test))
        rest = len(idx) - n_test
        denom = plan.train + plan.valid
        n_train = int(round(rest * plan.train / denom))
        n_valid = rest - n_train
        if min(n_train, n_valid) < 1 or (plan.test > 0 and n_test < 1):
            raise ValueError(f"class {cls} too small to split")
        sets["test"].append(idx[:n_test])
        sets["train"].append(idx[n_test:n_test + n_train])
        sets["valid"].append(idx[n_test + n_train:])
    if plan.subset_log2 > 0:
        kept = []
        for part in sets["train"]:
            keep = int(np.ceil(len(part) * 2.0 ** (-plan.subset_log2)))
            kept.append(part[:keep])
        sets["train"] = kept
    return {k: np.sort(np.concatenate(v)) if v else np.array([], dtype=int)
            for k, v in sets.items()}


def take(batch: SignalBatch, rows: np.ndarray) -> SignalBatch:
    labels = None if batch.labels is None else batch.labels[rows]
    return SignalBatch(batch.data[rows], batch.sfreq, labels)
