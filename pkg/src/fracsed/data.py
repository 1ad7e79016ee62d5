"""Synthetic spectrogram-shaped classification data.

Each class is a fixed pattern of a few Gaussian blobs on a time x frequency
grid (band-limited in both axes). A sample is its class pattern, circularly
shifted in time by a few frames, scaled by a random gain, plus white noise.
The noise level sets how hard the task is.
"""
import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class SynthDatasetSpec:
    num_classes: int = 10
    samples_per_class: int = 100
    time_frames: int = 32
    freq_bins: int = 16
    noise: float = 0.5
    max_shift: int = 2
    gain_jitter: float = 0.1
    blobs_per_class: int = 3
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.time_frames < 1 or self.freq_bins < 1:
            raise ValueError("time_frames and freq_bins must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class Dataset:
    x: np.ndarray          # [N, 1, T, F] float64
    y: np.ndarray          # [N] int64
    train_idx: np.ndarray
    val_idx: np.ndarray
    spec: SynthDatasetSpec

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def input_shape(self):
        return self.x.shape[1:]

    def split(self, name):
        idx = {"train": self.train_idx, "val": self.val_idx}[name]
        return self.x[idx], self.y[idx]


def class_patterns(spec, rng):
    t = np.arange(spec.time_frames)[:, None]
    f = np.arange(spec.freq_bins)[None, :]
    protos = np.zeros((spec.num_classes, spec.time_frames, spec.freq_bins))
    for c in range(spec.num_classes):
        for _ in range(spec.blobs_per_class):
            tc = rng.uniform(0.15, 0.85) * spec.time_frames
            fc = rng.uniform(0, spec.freq_bins - 1)
            st = rng.uniform(1.0, 3.0)
            sf = rng.uniform(0.6, 1.5)
            amp = rng.uniform(0.5, 1.0)
            protos[c] += amp * np.exp(-0.5 * (((t - tc) / st) ** 2 + ((f - fc) / sf) ** 2))
        protos[c] /= protos[c].max()
    return protos


def generate_dataset(spec):
    """Deterministic labelled set with a stratified train/validation split."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    protos = class_patterns(spec, rng)
    n_per = spec.samples_per_class
    n = spec.num_classes * n_per
    x = np.empty((n, 1, spec.time_frames, spec.freq_bins))
    y = np.repeat(np.arange(spec.num_classes, dtype=np.int64), n_per)
    shifts = rng.integers(-spec.max_shift, spec.max_shift + 1, size=n)
    gains = 1.0 + spec.gain_jitter * rng.uniform(-1.0, 1.0, size=n)
    noise = rng.standard_normal(x.shape)
    for i in range(n):
        x[i, 0] = gains[i] * np.roll(protos[y[i]], shifts[i], axis=0)
    x += spec.noise * noise

    n_val = max(1, int(round(spec.val_fraction * n_per)))
    train, val = [], []
    for c in range(spec.num_classes):
        members = np.flatnonzero(y == c)[rng.permutation(n_per)]
        val.append(members[:n_val])
        train.append(members[n_val:])
    return Dataset(x, y, np.sort(np.concatenate(train)), np.sort(np.concatenate(val)), spec)


def save_dataset(ds, stem):
    """Write ``<stem>.bin`` (little-endian float64 inputs) and ``<stem>.json``."""
    stem = str(stem)
    ds.x.astype("<f8").tofile(stem + ".bin")
    meta = {
        "shape": list(ds.x.shape),
        "dtype": "<f8",
        "labels": ds.y.tolist(),
        "train_idx": ds.train_idx.tolist(),
        "val_idx": ds.val_idx.tolist(),
        "seed": ds.spec.seed,
        "spec": asdict(ds.spec),
    }
    with open(stem + ".json", "w") as fh:
        json.dump(meta, fh)


def load_dataset(stem):
    stem = str(stem)
    if stem.endswith(".json") or stem.endswith(".bin"):
        stem = stem[:-5] if stem.endswith(".json") else stem[:-4]
    with open(stem + ".json") as fh:
        meta = json.load(fh)
    x = np.fromfile(stem + ".bin", dtype=meta["dtype"]).astype(np.float64).reshape(meta["shape"])
    return Dataset(x, np.asarray(meta["labels"], dtype=np.int64),
                   np.asarray(meta["train_idx"], dtype=np.int64),
                   np.asarray(meta["val_idx"], dtype=np.int64),
                   SynthDatasetSpec(**meta["spec"]))
