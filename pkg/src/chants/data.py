"""Dataset ingestion, normalization, batching, and the synthetic fixture.

Two on-disk formats are supported: the sequence format used by the public
multivariate classification archives (an ``@``-header followed by ``@data``
records whose channels are colon-separated runs of comma-separated values,
with an optional trailing class label) and plain CSV in either a wide layout
(one row per sample, channels concatenated) or a blocked layout (one row per
channel). All series in a dataset share the same (C, T).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError

__all__ = [
    "MtsBatch",
    "MtsDataset",
    "NormStats",
    "apply_norm_stats",
    "batches",
    "denormalize",
    "load_dataset",
    "load_norm_stats",
    "make_synthetic_fixture",
    "parse_csv",
    "parse_ts",
    "save_norm_stats",
    "serialize_ts",
    "subsample",
    "train_test_split",
    "znormalize",
]


@dataclass
class MtsDataset:
    """An (M, C, T) stack of equal-length series with optional class labels."""

    series: np.ndarray
    labels: np.ndarray | None
    class_count: int
    name: str
    label_names: list[str] | None = None

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 3:
            raise DataError(f"series must be (M, C, T), got shape {self.series.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.series.shape[0],):
                raise DataError(
                    f"{self.labels.shape[0]} labels for {self.series.shape[0]} series"
                )
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise DataError(f"labels must lie in [0, {self.class_count})")

    @property
    def size(self) -> int:
        return self.series.shape[0]

    @property
    def channels(self) -> int:
        return self.series.shape[1]

    @property
    def steps(self) -> int:
        return self.series.shape[2]


@dataclass
class MtsBatch:
    """One minibatch plus the source indices it was drawn from."""

    x: np.ndarray
    labels: np.ndarray | None
    indices: np.ndarray


# ---------------------------------------------------------------------------
# sequence-format parsing
# ---------------------------------------------------------------------------


def parse_ts(path) -> MtsDataset:
    """Parse the ``@``-header sequence format; errors carry 1-based line numbers."""
    path = Path(path)
    name = path.stem
    series_length: int | None = None
    dimensions: int | None = None
    univariate: bool | None = None
    has_labels = False
    label_names: list[str] = []
    in_data = False
    records: list[np.ndarray] = []
    labels: list[int] = []

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not in_data and line.startswith("@"):
                key, _, rest = line[1:].partition(" ")
                key = key.lower()
                rest = rest.strip()
                if key == "data":
                    in_data = True
                elif key == "problemname":
                    name = rest or name
                elif key == "univariate":
                    univariate = rest.lower() == "true"
                elif key == "serieslength":
                    try:
                        series_length = int(rest)
                    except ValueError:
                        raise DataError(f"{path}: line {lineno}: bad seriesLength {rest!r}")
                elif key == "dimensions":
                    try:
                        dimensions = int(rest)
                    except ValueError:
                        raise DataError(f"{path}: line {lineno}: bad dimensions {rest!r}")
                elif key == "classlabel":
                    parts = rest.split()
                    if not parts or parts[0].lower() not in ("true", "false"):
                        raise DataError(f"{path}: line {lineno}: malformed classLabel line")
                    has_labels = parts[0].lower() == "true"
                    label_names = parts[1:]
                    if has_labels and not label_names:
                        raise DataError(f"{path}: line {lineno}: classLabel true needs label names")
                # other @keys (equalLength, timeStamps, ...) carry no information we need
                continue
            if not in_data:
                raise DataError(f"{path}: line {lineno}: expected @-header or @data before records")
            fields = line.split(":")
            if has_labels:
                if len(fields) < 2:
                    raise DataError(f"{path}: line {lineno}: record is missing its class label")
                label_str = fields[-1].strip()
                if label_str not in label_names:
                    raise DataError(f"{path}: line {lineno}: unknown class label {label_str!r}")
                labels.append(label_names.index(label_str))
                fields = fields[:-1]
            try:
                chans = [np.array([float(v) for v in field.split(",")]) for field in fields]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric value")
            lengths = {len(c) for c in chans}
            if len(lengths) != 1:
                raise DataError(f"{path}: line {lineno}: ragged channel lengths {sorted(lengths)}")
            (length,) = lengths
            if series_length is not None and length != series_length:
                raise DataError(
                    f"{path}: line {lineno}: {length} values but header declares seriesLength {series_length}"
                )
            if records and records[0].shape != (len(chans), length):
                raise DataError(
                    f"{path}: line {lineno}: record shape ({len(chans)}, {length}) "
                    f"differs from first record {records[0].shape}"
                )
            records.append(np.stack(chans))

    if not in_data:
        raise DataError(f"{path}: no @data section")
    if not records:
        raise DataError(f"{path}: no records after @data")
    channels = records[0].shape[0]
    if dimensions is not None and channels != dimensions:
        raise DataError(f"{path}: header declares {dimensions} dimensions but records have {channels}")
    if univariate is True and channels != 1:
        raise DataError(f"{path}: header declares univariate but records have {channels} channels")
    return MtsDataset(
        series=np.stack(records),
        labels=np.array(labels, dtype=np.int64) if has_labels else None,
        class_count=len(label_names) if has_labels else 0,
        name=name,
        label_names=label_names or None,
    )


def serialize_ts(ds: MtsDataset, path) -> None:
    """Write a dataset back out in the sequence format, value-exactly."""
    names = ds.label_names
    if ds.labels is not None and names is None:
        names = [str(k) for k in range(ds.class_count)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"@problemName {ds.name}\n")
        fh.write(f"@univariate {'true' if ds.channels == 1 else 'false'}\n")
        fh.write(f"@dimensions {ds.channels}\n")
        fh.write("@equalLength true\n")
        fh.write(f"@seriesLength {ds.steps}\n")
        if ds.labels is not None:
            fh.write("@classLabel true " + " ".join(names) + "\n")
        else:
            fh.write("@classLabel false\n")
        fh.write("@data\n")
        for i in range(ds.size):
            chans = [",".join(repr(float(v)) for v in row) for row in ds.series[i]]
            line = ":".join(chans)
            if ds.labels is not None:
                line += f":{names[ds.labels[i]]}"
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# CSV parsing
# ---------------------------------------------------------------------------


def parse_csv(path, channels: int, *, layout: str = "wide", labeled: bool = False) -> MtsDataset:
    """Reshape flat CSV into (M, C, T).

    ``wide``: one row per sample holding C*T values channel-by-channel, plus a
    trailing label when ``labeled``. ``blocked``: C consecutive rows of T
    values per sample; when labeled, every row of a block carries the same
    trailing label.
    """
    if layout not in ("wide", "blocked"):
        raise DataError(f"unknown CSV layout {layout!r} (expected 'wide' or 'blocked')")
    if channels < 1:
        raise DataError(f"channels must be >= 1, got {channels}")
    path = Path(path)
    rows: list[list[str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            rows.append([cell.strip() for cell in line.split(",")])

    def to_floats(cells: list[str], lineno_hint: int) -> np.ndarray:
        try:
            return np.array([float(v) for v in cells])
        except ValueError:
            raise DataError(f"{path}: row {lineno_hint}: non-numeric cell")

    series: list[np.ndarray] = []
    raw_labels: list[str] = []
    if layout == "wide":
        for i, cells in enumerate(rows, start=1):
            if labeled:
                raw_labels.append(cells[-1])
                cells = cells[:-1]
            if len(cells) % channels != 0:
                raise DataError(f"{path}: row {i}: {len(cells)} values not divisible by {channels} channels")
            series.append(to_floats(cells, i).reshape(channels, -1))
    else:
        if len(rows) % channels != 0:
            raise DataError(f"{path}: {len(rows)} rows not divisible by {channels} channels")
        for s in range(len(rows) // channels):
            block = rows[s * channels : (s + 1) * channels]
            if labeled:
                block_labels = {cells[-1] for cells in block}
                if len(block_labels) != 1:
                    raise DataError(f"{path}: sample {s}: rows disagree on the label")
                raw_labels.append(block[0][-1])
                block = [cells[:-1] for cells in block]
            widths = {len(cells) for cells in block}
            if len(widths) != 1:
                raise DataError(f"{path}: sample {s}: ragged channel lengths {sorted(widths)}")
            series.append(np.stack([to_floats(cells, s * channels + j + 1) for j, cells in enumerate(block)]))

    shapes = {arr.shape for arr in series}
    if len(shapes) != 1:
        raise DataError(f"{path}: inconsistent sample shapes {sorted(shapes)}")
    labels = None
    label_names = None
    class_count = 0
    if labeled:
        label_names = sorted(set(raw_labels))
        labels = np.array([label_names.index(v) for v in raw_labels], dtype=np.int64)
        class_count = len(label_names)
    return MtsDataset(
        series=np.stack(series),
        labels=labels,
        class_count=class_count,
        name=path.stem,
        label_names=label_names,
    )


def load_dataset(path, *, channels: int | None = None, layout: str = "wide", labeled: bool = False) -> MtsDataset:
    """Dispatch on file extension: ``.ts`` or ``.csv``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset file: {path}")
    if path.suffix == ".ts":
        return parse_ts(path)
    if path.suffix == ".csv":
        if channels is None:
            raise DataError("CSV input needs an explicit channel count")
        return parse_csv(path, channels, layout=layout, labeled=labeled)
    raise DataError(f"unrecognized dataset extension {path.suffix!r} (expected .ts or .csv)")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

_STD_FLOOR = 1e-8


@dataclass
class NormStats:
    """Per-channel mean/std computed on a training split."""

    mean: np.ndarray
    std: np.ndarray


def znormalize(ds: MtsDataset) -> tuple[MtsDataset, NormStats]:
    """Per-channel z-normalization; near-constant channels are centered only.

    Compute stats on the training split and reuse them (via
    :func:`apply_norm_stats`) on every other split.
    """
    mean = ds.series.mean(axis=(0, 2))
    std = ds.series.std(axis=(0, 2))
    stats = NormStats(mean=mean, std=std)
    return apply_norm_stats(ds, stats), stats


def apply_norm_stats(ds: MtsDataset, stats: NormStats) -> MtsDataset:
    scale = np.where(stats.std < _STD_FLOOR, 1.0, stats.std)
    series = (ds.series - stats.mean[None, :, None]) / scale[None, :, None]
    return replace(ds, series=series)


def denormalize(ds: MtsDataset, stats: NormStats) -> MtsDataset:
    scale = np.where(stats.std < _STD_FLOOR, 1.0, stats.std)
    series = ds.series * scale[None, :, None] + stats.mean[None, :, None]
    return replace(ds, series=series)


def save_norm_stats(stats: NormStats, path) -> None:
    payload = {"mean": [float(v) for v in stats.mean], "std": [float(v) for v in stats.std]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_norm_stats(path) -> NormStats:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return NormStats(mean=np.array(payload["mean"]), std=np.array(payload["std"]))


# ---------------------------------------------------------------------------
# subsampling and batching
# ---------------------------------------------------------------------------


def subsample(ds: MtsDataset, fraction: float, seed: int) -> MtsDataset:
    """Stratified subsample: max(1, floor(fraction * count)) per class."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if ds.labels is None:
        raise DataError("subsample needs a labeled dataset")
    if fraction == 1.0:
        return ds
    rng = np.random.default_rng([seed, 0x5B5A])
    keep: list[np.ndarray] = []
    for cls in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size == 0:
            continue
        take = max(1, int(fraction * idx.size))
        keep.append(rng.choice(idx, size=take, replace=False))
    chosen = np.sort(np.concatenate(keep))
    return replace(ds, series=ds.series[chosen], labels=ds.labels[chosen])


def train_test_split(ds: MtsDataset, test_fraction: float, seed: int) -> tuple[MtsDataset, MtsDataset]:
    """Deterministic shuffled split; stratified when labels are present."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng([seed, 0x7E57])
    if ds.labels is None:
        order = rng.permutation(ds.size)
        cut = max(1, int(round(test_fraction * ds.size)))
        test_idx, train_idx = np.sort(order[:cut]), np.sort(order[cut:])
    else:
        test_parts = []
        for cls in range(ds.class_count):
            idx = rng.permutation(np.flatnonzero(ds.labels == cls))
            cut = max(1, int(round(test_fraction * idx.size)))
            test_parts.append(idx[:cut])
        test_idx = np.sort(np.concatenate(test_parts))
        train_idx = np.sort(np.setdiff1d(np.arange(ds.size), test_idx))
    def pick(idx):
        return replace(ds, series=ds.series[idx], labels=None if ds.labels is None else ds.labels[idx])

    return pick(train_idx), pick(test_idx)


def batches(
    ds: MtsDataset, batch_size: int, shuffle: bool, seed: int, epoch: int = 0
) -> Iterator[MtsBatch]:
    """Minibatches in a deterministic per-(seed, epoch) order; the final short
    batch is emitted."""
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(ds.size)
    else:
        order = np.arange(ds.size)
    for start in range(0, ds.size, batch_size):
        idx = order[start : start + batch_size]
        yield MtsBatch(
            x=ds.series[idx],
            labels=None if ds.labels is None else ds.labels[idx],
            indices=idx.copy(),
        )


# ---------------------------------------------------------------------------
# synthetic fixture
# ---------------------------------------------------------------------------


def make_synthetic_fixture(
    m: int = 400,
    channels: int = 4,
    steps: int = 32,
    seed: int = 0,
    *,
    lag: int = 2,
    noise: float = 0.15,
    slow_freqs: tuple[float, ...] = (1.0, 2.0),
    fast_freqs: tuple[float, ...] = (4.0, 6.0),
) -> MtsDataset:
    """Two balanced classes distinguished only by dynamics, not by level.

    Every sample is built from a random-phase sinusoid mixture; the class
    decides (a) the *direction* of the inter-channel lag (each channel is a
    shifted copy of the base signal, leading for one class and trailing for
    the other) and (b) the trend tempo (slow components give long monotone
    runs, fast components frequent reversals). Random phases keep the
    class-conditional means identical, so a linear readout of the raw values
    carries no class signal.
    """
    rng = np.random.default_rng([seed, 0xF1C5])
    margin = lag * (channels - 1)
    length = steps + 2 * margin
    grid = np.arange(length, dtype=np.float64) - margin
    series = np.empty((m, channels, steps))
    labels = np.empty(m, dtype=np.int64)
    for i in range(m):
        cls = i % 2
        freqs = slow_freqs if cls == 0 else fast_freqs
        base = np.zeros(length)
        for f in freqs:
            amp = rng.uniform(0.6, 1.4)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            f_jit = f * rng.uniform(0.9, 1.1)
            base += amp * np.sin(2.0 * np.pi * f_jit * grid / steps + phase)
        direction = 1 if cls == 0 else -1
        for j in range(channels):
            start = margin + direction * lag * j
            series[i, j] = base[start : start + steps]
        series[i] += rng.normal(0.0, noise, size=(channels, steps))
        labels[i] = cls
    return MtsDataset(
        series=series,
        labels=labels,
        class_count=2,
        name="synthetic-lagged-pair",
        label_names=["0", "1"],
    )
