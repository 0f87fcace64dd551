"""Sensor-recording ingest, preprocessing, and synthetic dataset generation.

The preprocessing chain mirrors standard practice for windowed activity
recognition: trim unreliable seconds off both ends of each recording, cut
fixed-length windows with a fixed stride, split train/test by subject
identity (never by window), and standardize with train statistics only.

The synthetic generator stands in for real recordings at desk scale: each
class is a parametric waveform family, each subject perturbs the family
parameters (frequency drift, amplitude, channel mixing), and recordings add
noise plus junk edges so the trim step has something to do. Generation is
fully seed-deterministic.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .variation import ModalityLayout

_DATA_MAGIC = b"EEDS"
_DATA_VERSION = 1


# -- core types ---------------------------------------------------------------------


@dataclass
class RawRecording:
    """One labeled multi-channel recording from a single subject."""

    subject_id: str
    activity_label: str
    sample_rate: float
    samples: np.ndarray  # (channels, length)
    channel_names: tuple[str, ...] = ()
    modalities: ModalityLayout | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be (channels, length), got shape "
                             f"{self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.channel_names and len(self.channel_names) != self.samples.shape[0]:
            raise ValueError("channel_names length does not match channel count")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class WindowedDataset:
    """Fixed-length labeled windows with subject identities."""

    windows: np.ndarray  # (n, channels, width)
    labels: np.ndarray  # (n,) int class indices
    subjects: np.ndarray  # (n,) str identifiers
    num_classes: int
    class_names: tuple[str, ...] = ()
    layout: ModalityLayout | None = None

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects)
        if self.windows.ndim != 3:
            raise ValueError(f"windows must be (n, channels, width), got "
                             f"{self.windows.shape}")
        n = self.windows.shape[0]
        if self.labels.shape != (n,) or self.subjects.shape != (n,):
            raise ValueError("labels/subjects length does not match window count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.windows.shape[0]

    @property
    def num_channels(self) -> int:
        return self.windows.shape[1]

    @property
    def width(self) -> int:
        return self.windows.shape[2]

    def subject_set(self) -> set[str]:
        return set(str(s) for s in self.subjects)


@dataclass(frozen=True)
class SubjectSplit:
    train_subjects: frozenset[str]
    test_subjects: frozenset[str]

    def __post_init__(self):
        if not self.train_subjects or not self.test_subjects:
            raise ValueError("both split sides must be nonempty")
        if self.train_subjects & self.test_subjects:
            raise ValueError("train and test subjects overlap")


# -- CSV + manifest ingest ---------------------------------------------------------------


def _parse_layout(entry) -> ModalityLayout | None:
    if entry is None:
        return None
    if isinstance(entry, ModalityLayout):
        return entry
    return ModalityLayout.from_dict(entry)


def load_csv(directory, manifest=None) -> list[RawRecording]:
    """Load recordings listed in a manifest of per-recording CSV files.

    Each CSV holds one recording: one row per sample, one comma-separated
    column per channel, no header. The manifest is either a JSON array of
    ``{path, subject, label, sample_rate, modalities}`` entries or an object
    ``{"classes": [...], "recordings": [...]}``; with a declared class list,
    labels outside it are rejected.
    """
    directory = Path(directory)
    if manifest is None:
        manifest = directory / "manifest.json"
    if isinstance(manifest, (str, Path)):
        manifest = json.loads(Path(manifest).read_text())

    declared_classes = None
    if isinstance(manifest, dict):
        declared_classes = manifest.get("classes")
        entries = manifest["recordings"]
    else:
        entries = manifest

    recordings = []
    for entry in entries:
        label = str(entry["label"])
        if declared_classes is not None and label not in declared_classes:
            raise ValueError(f"label {label!r} of {entry['path']} is not in the "
                             f"declared class set {declared_classes}")
        fpath = directory / entry["path"]
        if not fpath.exists():
            raise FileNotFoundError(f"recording file missing: {fpath}")
        rows = []
        width = None
        with open(fpath, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                cells = line.split(",")
                if width is None:
                    width = len(cells)
                elif len(cells) != width:
                    raise ValueError(f"{fpath}:{lineno}: ragged row with "
                                     f"{len(cells)} cells, expected {width}")
                try:
                    rows.append([float(c) for c in cells])
                except ValueError:
                    raise ValueError(f"{fpath}:{lineno}: non-numeric cell") from None
        if not rows:
            raise ValueError(f"{fpath}: empty recording")
        samples = np.asarray(rows, dtype=np.float64).T
        recordings.append(RawRecording(
            subject_id=str(entry["subject"]), activity_label=label,
            sample_rate=float(entry["sample_rate"]), samples=samples,
            modalities=_parse_layout(entry.get("modalities"))))
    return recordings


def write_csv(recordings: Sequence[RawRecording], directory,
              classes: Sequence[str] | None = None) -> Path:
    """Write recordings as per-file CSVs plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(recordings):
        name = f"rec{i:04d}_{rec.subject_id}_{rec.activity_label}.csv"
        with open(directory / name, "w", encoding="utf-8") as fh:
            for row in rec.samples.T:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        entries.append({"path": name, "subject": rec.subject_id,
                        "label": rec.activity_label, "sample_rate": rec.sample_rate,
                        "modalities": rec.modalities.to_dict() if rec.modalities else None})
    manifest = {"recordings": entries}
    if classes is not None:
        manifest["classes"] = list(classes)
    mpath = directory / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2))
    return mpath


# -- preprocessing ------------------------------------------------------------------------


def trim_edges(rec: RawRecording, seconds: float = 2.0) -> RawRecording | None:
    """Drop the first and last ``seconds`` of a recording.

    Recordings too short to survive the trim are skipped (returns ``None``
    with a warning) rather than raising, matching how bulk ingest treats
    unusable files.
    """
    cut = int(round(seconds * rec.sample_rate))
    if cut == 0:
        return rec
    if rec.length <= 2 * cut:
        warnings.warn(f"recording of {rec.length} samples too short to trim "
                      f"{seconds}s at {rec.sample_rate}Hz; skipped", stacklevel=2)
        return None
    return replace(rec, samples=rec.samples[:, cut:rec.length - cut])


def sliding_window(rec: RawRecording, window: int = 256, stride: int = 256) -> np.ndarray:
    """Cut fixed-length windows: floor((len - window) / stride) + 1 of them.

    Returns (n_windows, channels, window); zero windows when the recording
    is shorter than one window.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    length = rec.length
    if length < window:
        return np.empty((0, rec.num_channels, window), dtype=np.float64)
    count = (length - window) // stride + 1
    out = np.empty((count, rec.num_channels, window), dtype=np.float64)
    for i in range(count):
        out[i] = rec.samples[:, i * stride:i * stride + window]
    return out


def windowize(recordings: Sequence[RawRecording], *, window: int = 256,
              stride: int = 256, class_names: Sequence[str] | None = None) -> WindowedDataset:
    """Assemble a WindowedDataset from recordings; labels map via class_names."""
    if class_names is None:
        class_names = sorted({rec.activity_label for rec in recordings})
    index = {name: i for i, name in enumerate(class_names)}
    chunks, labels, subjects = [], [], []
    layout = recordings[0].modalities if recordings else None
    for rec in recordings:
        if rec.activity_label not in index:
            raise ValueError(f"label {rec.activity_label!r} not in class set "
                             f"{list(class_names)}")
        wins = sliding_window(rec, window=window, stride=stride)
        if len(wins) == 0:
            continue
        chunks.append(wins)
        labels.extend([index[rec.activity_label]] * len(wins))
        subjects.extend([rec.subject_id] * len(wins))
    if not chunks:
        raise ValueError("no recording produced a single window")
    return WindowedDataset(windows=np.concatenate(chunks, axis=0),
                           labels=np.asarray(labels, dtype=np.int64),
                           subjects=np.asarray(subjects),
                           num_classes=len(class_names),
                           class_names=tuple(class_names), layout=layout)


def subject_split(recordings: Sequence[RawRecording], n_train: int, n_test: int,
                  seed: int, *, window: int = 256,
                  stride: int = 256) -> tuple[WindowedDataset, WindowedDataset]:
    """Split by subject identity, then window each side.

    No subject's windows can appear on both sides; the subject assignment is
    deterministic in ``seed``.
    """
    subjects = sorted({rec.subject_id for rec in recordings})
    if len(subjects) < n_train + n_test:
        raise ValueError(f"need {n_train + n_test} distinct subjects, have "
                         f"{len(subjects)}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(subjects))
    split = SubjectSplit(train_subjects=frozenset(order[:n_train]),
                         test_subjects=frozenset(order[n_train:n_train + n_test]))
    class_names = sorted({rec.activity_label for rec in recordings})
    train = windowize([r for r in recordings if r.subject_id in split.train_subjects],
                      window=window, stride=stride, class_names=class_names)
    test = windowize([r for r in recordings if r.subject_id in split.test_subjects],
                     window=window, stride=stride, class_names=class_names)
    return train, test


def standardize(train: WindowedDataset,
                test: WindowedDataset) -> tuple[WindowedDataset, WindowedDataset, dict]:
    """Per-channel zero-mean unit-variance using train statistics only.

    The identical affine transform is applied to the test side, so no test
    information leaks into scaling. Channels with zero variance are left
    unscaled (with a warning).
    """
    if len(train) == 0:
        raise ValueError("cannot standardize an empty training set")
    mean = train.windows.mean(axis=(0, 2))
    std = train.windows.std(axis=(0, 2))
    degenerate = std == 0
    if degenerate.any():
        warnings.warn(f"channels {np.nonzero(degenerate)[0].tolist()} have zero "
                      f"variance; left unscaled", stacklevel=2)
        std = np.where(degenerate, 1.0, std)
        mean = np.where(degenerate, 0.0, mean)
    stats = {"mean": mean, "std": std}

    def apply(ds: WindowedDataset) -> WindowedDataset:
        scaled = (ds.windows - mean[None, :, None]) / std[None, :, None]
        return replace(ds, windows=scaled)

    return apply(train), apply(test), stats


# -- synthetic generator -------------------------------------------------------------------

# Per-class waveform families: base frequency (Hz), harmonic mix, amplitude
# modulation (Hz), and a shaping exponent. Calibrated once so that a small
# CNN separates the classes well while a linear readout of raw samples does
# not; committed values feed the acceptance runs.
SYNTH_CLASS_PARAMS = (
    dict(freq=1.6, harmonic=0.0, am=0.0, shape=1.0),
    dict(freq=2.4, harmonic=0.6, am=0.0, shape=1.0),
    dict(freq=2.0, harmonic=0.0, am=0.9, shape=1.0),
    dict(freq=3.4, harmonic=0.0, am=0.0, shape=3.0),
    dict(freq=4.6, harmonic=0.4, am=1.3, shape=1.0),
    dict(freq=1.2, harmonic=1.0, am=0.0, shape=1.0),
)

SYNTH_DEFAULTS = dict(
    sample_rate=100.0,
    recordings_per_class=2,
    windows_per_recording=3,
    trim_seconds=2.0,
    noise_sigma=0.45,
    subject_freq_sigma=0.06,
    subject_mix_sigma=0.25,
    amplitude_sigma=0.15,
)


def synth_generate(num_subjects: int, classes: int = 6, channels: int = 3,
                   width: int = 256, seed: int = 0, **overrides) -> list[RawRecording]:
    """Generate labeled synthetic sensor recordings for desk-scale runs.

    Every class is a distinct parametric waveform family; every subject
    perturbs frequency, amplitude, and channel mixing (simulating person and
    device-orientation variation), and every recording draws fresh phases
    and noise. Recordings carry junk edges sized for the standard trim, and
    their usable length yields ``windows_per_recording`` stride-``width``
    windows.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if num_subjects < 1 or channels < 1 or width < 8:
        raise ValueError("invalid synthetic dataset dimensions")
    cfg = dict(SYNTH_DEFAULTS)
    cfg.update(overrides)

    fs = cfg["sample_rate"]
    trim = int(round(cfg["trim_seconds"] * fs))
    usable = cfg["windows_per_recording"] * width
    root = np.random.default_rng(np.random.SeedSequence(seed))

    params = [SYNTH_CLASS_PARAMS[k % len(SYNTH_CLASS_PARAMS)] for k in range(classes)]
    recordings = []
    for s in range(num_subjects):
        subject = f"subj{s:03d}"
        freq_factor = float(np.exp(root.normal(0.0, cfg["subject_freq_sigma"])))
        amp_factor = float(np.exp(root.normal(0.0, cfg["amplitude_sigma"])))
        # random per-subject channel mixing around identity (orientation drift)
        mix = np.eye(channels) + root.normal(0.0, cfg["subject_mix_sigma"],
                                             size=(channels, channels))
        for k in range(classes):
            fam = params[k]
            for _ in range(cfg["recordings_per_class"]):
                length = usable + 2 * trim
                t = np.arange(length) / fs
                phases = root.uniform(0.0, 2 * np.pi, size=channels)
                chan_amp = 1.0 + root.normal(0.0, 0.1, size=channels)
                base_f = fam["freq"] * freq_factor
                sig = np.empty((channels, length))
                for c in range(channels):
                    wave = np.sin(2 * np.pi * base_f * t + phases[c])
                    if fam["shape"] != 1.0:
                        wave = np.sign(wave) * np.abs(wave) ** fam["shape"]
                    if fam["harmonic"]:
                        wave = wave + fam["harmonic"] * np.sin(
                            2 * np.pi * 2 * base_f * t + 2 * phases[c])
                    if fam["am"]:
                        wave = wave * (0.6 + 0.4 * np.sin(2 * np.pi * fam["am"] * t
                                                          + phases[c] / 2))
                    sig[c] = amp_factor * chan_amp[c] * wave
                sig = mix @ sig
                sig += root.normal(0.0, cfg["noise_sigma"], size=sig.shape)
                recordings.append(RawRecording(
                    subject_id=subject, activity_label=f"class{k}",
                    sample_rate=fs, samples=sig,
                    modalities=ModalityLayout(groups=(("acc", (0, channels)),))))
    return recordings


def make_synth_dataset(num_subjects: int = 16, n_train: int = 8, n_test: int = 8,
                       seed: int = 0, *, classes: int = 6, channels: int = 3,
                       width: int = 256,
                       **overrides) -> tuple[WindowedDataset, WindowedDataset]:
    """Full committed pipeline: generate, trim, window, subject-split, standardize."""
    recs = synth_generate(num_subjects, classes=classes, channels=channels,
                          width=width, seed=seed, **overrides)
    trim_seconds = overrides.get("trim_seconds", SYNTH_DEFAULTS["trim_seconds"])
    trimmed = [r for r in (trim_edges(rec, trim_seconds) for rec in recs)
               if r is not None]
    train, test = subject_split(trimmed, n_train, n_test, seed=seed,
                                window=width, stride=width)
    train, test, _ = standardize(train, test)
    return train, test


# -- dataset cache -------------------------------------------------------------------------


def save_datasets(path, splits: dict[str, WindowedDataset]) -> Path:
    """Write named dataset splits to one binary container.

    Layout: magic, version, JSON header (shapes, labels, subjects, class
    names, modality layout), then the raw little-endian window buffers in
    header order.
    """
    header = {"format": "easyens-dataset", "version": _DATA_VERSION, "splits": {}}
    buffers = []
    for name, ds in splits.items():
        header["splits"][name] = {
            "shape": list(ds.windows.shape),
            "num_classes": ds.num_classes,
            "class_names": list(ds.class_names),
            "labels": ds.labels.tolist(),
            "subjects": [str(s) for s in ds.subjects],
            "layout": ds.layout.to_dict() if ds.layout else None,
        }
        buffers.append(np.ascontiguousarray(ds.windows).astype("<f8").tobytes())
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<II", _DATA_VERSION, len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)
    return path


def load_datasets(path) -> dict[str, WindowedDataset]:
    raw = Path(path).read_bytes()
    if raw[:4] != _DATA_MAGIC:
        raise ValueError(f"{path} is not a dataset cache (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _DATA_VERSION:
        raise ValueError(f"unsupported dataset cache version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    splits = {}
    for name, meta in header["splits"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape))
        windows = np.frombuffer(raw, dtype="<f8", count=count,
                                offset=offset).reshape(shape).copy()
        offset += count * 8
        layout = ModalityLayout.from_dict(meta["layout"]) if meta["layout"] else None
        splits[name] = WindowedDataset(
            windows=windows, labels=np.asarray(meta["labels"], dtype=np.int64),
            subjects=np.asarray(meta["subjects"]), num_classes=meta["num_classes"],
            class_names=tuple(meta["class_names"]), layout=layout)
    return splits
