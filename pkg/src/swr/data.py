"""Deterministic synthetic transfer benchmark.

Each class is a sinusoid-grid pattern over the (freq, time) plane under a
time envelope, loosely like a keyword's spectrogram. Family B re-renders the
family-A generators through a fixed frequency warp and a saturating
amplitude map, giving a distribution-shifted sibling ("second language").
The union task labels all classes of both families separately.

Per-example nuisances all scale with the noise level (phase and shift
saturate at noise 0.5), so noise 0 yields the bare prototype: random phase
in time, envelope shift, gain jitter and additive Gaussian noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import container
from .rng import Rng

FAMILY_SIZE = 12
SPLITS = ("train", "val", "test")

# generator constants per family-A class: (freq rate, time rate, freq phase, envelope centre)
_FREQ_RATES = (0.5, 1.0, 1.5, 2.25)
_TIME_RATES = (1.0, 2.0, 3.5)


def _class_constants(k: int) -> tuple[float, float, float, float]:
    fr = _FREQ_RATES[k % len(_FREQ_RATES)]
    tr = _TIME_RATES[k // len(_FREQ_RATES)]
    phase = 0.37 * k
    centre = 0.35 + 0.3 * ((k * 5) % 7) / 6
    return fr, tr, phase, centre


def warp_freq(f: np.ndarray) -> np.ndarray:
    """Fixed frequency warp of normalized bins in [0, 1]."""
    return f ** 1.6


def amp_transform(x: np.ndarray) -> np.ndarray:
    return 0.8 * np.tanh(1.7 * x)


def render(k: int, family: str, freq_bins: int, time_steps: int, time_phase: float = 0.0,
           shift: float = 0.0) -> np.ndarray:
    """One class pattern on the (freq, time) grid, before gain and noise."""
    fr, tr, phase, centre = _class_constants(k)
    f = (np.arange(freq_bins) + 0.5) / freq_bins
    t = (np.arange(time_steps) + 0.5) / time_steps
    if family == "B":
        f = warp_freq(f)
    freq_part = np.sin(2 * np.pi * fr * f * 2 + phase)
    time_part = np.cos(2 * np.pi * tr * t * 2 + time_phase)
    env = np.exp(-0.5 * ((t - centre - shift) / 0.22) ** 2)
    x = freq_part[:, None] * (time_part * env)[None, :]
    if family == "B":
        x = amp_transform(x)
    return x


@dataclass(frozen=True)
class SyntheticTaskSpec:
    family: str = "A"  # "A", "B" or "union"
    num_classes: int = FAMILY_SIZE
    examples_per_class: tuple[int, int, int] = (40, 10, 20)  # train, val, test
    input_shape: tuple[int, int, int] = (1, 16, 32)
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("A", "B", "union"):
            raise ValueError(f"unknown family {self.family!r}")
        limit = 2 * FAMILY_SIZE if self.family == "union" else FAMILY_SIZE
        if not 1 <= self.num_classes <= limit:
            raise ValueError(f"family {self.family} supports 1..{limit} classes")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")

    def class_source(self, label: int) -> tuple[str, int]:
        """(family, generator index) for a label."""
        if self.family == "union":
            half = (self.num_classes + 1) // 2
            return ("A", label) if label < half else ("B", label - half)
        return self.family, label

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        d = dict(d)
        d["examples_per_class"] = tuple(d["examples_per_class"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    splits: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def size(self, split: str) -> int:
        return len(self.splits[split][1])


def prototype(spec: SyntheticTaskSpec, label: int) -> np.ndarray:
    c, fb, ts = spec.input_shape
    fam, k = spec.class_source(label)
    x = render(k, fam, fb, ts)
    return np.broadcast_to(x, (c, fb, ts)).astype(np.float32)


def generate(spec: SyntheticTaskSpec) -> Dataset:
    c, fb, ts = spec.input_shape
    root = Rng(spec.seed, ("data", spec.family, spec.num_classes))
    ds = Dataset(spec)
    for split, per_class in zip(SPLITS, spec.examples_per_class):
        xs = np.empty((spec.num_classes * per_class, c, fb, ts), dtype=np.float32)
        ys = np.repeat(np.arange(spec.num_classes), per_class).astype(np.int64)
        for label in range(spec.num_classes):
            fam, k = spec.class_source(label)
            r = root.split(split, label)
            jitter = min(1.0, 2.0 * spec.noise)
            phases = r.uniform(per_class, -np.pi, np.pi) * jitter
            shifts = r.uniform(per_class, -0.2, 0.2) * jitter
            gains = 1.0 + 0.25 * spec.noise * r.normal(per_class)
            noise = r.normal((per_class, c, fb, ts), spec.noise)
            for i in range(per_class):
                pat = render(k, fam, fb, ts, float(phases[i]), float(shifts[i]))
                xs[label * per_class + i] = gains[i] * pat[None] + noise[i]
        ds.splits[split] = (xs, ys)
    return ds


def batches(dataset: Dataset, split: str, batch_size: int, epoch_seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle of one split; the final partial batch is kept."""
    if split not in dataset.splits:
        raise KeyError(f"dataset has no split {split!r}")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    x, y = dataset.splits[split]
    order = Rng(epoch_seed, ("batches", split)).permutation(len(y))
    for start in range(0, len(y), batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def save_dataset(path, dataset: Dataset):
    counts = []
    tensors = []
    for split in SPLITS:
        if split not in dataset.splits:
            continue
        x, y = dataset.splits[split]
        for label in range(dataset.spec.num_classes):
            counts.append([label, split, int((y == label).sum())])
        tensors += [(f"{split}.x", x), (f"{split}.y", y.astype(np.float32))]
    manifest = {"kind": "dataset", "spec": asdict(dataset.spec), "counts": counts}
    container.save(path, container.DATA_MAGIC, manifest, tensors)


def load_dataset(path) -> Dataset:
    manifest, arrays = container.load(path, container.DATA_MAGIC)
    ds = Dataset(SyntheticTaskSpec.from_dict(manifest["spec"]))
    for split in SPLITS:
        if f"{split}.x" in arrays:
            ds.splits[split] = (arrays[f"{split}.x"], arrays[f"{split}.y"].astype(np.int64))
    return ds
