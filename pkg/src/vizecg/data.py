"""ECG records, preprocessing, synthetic data generation and dataset files.

Binary dataset format (all integers little-endian):

.. code-block::

    offset  size        field
    0       4           magic b"VZEC"
    4       4           u32 version = 1
    8       4           u32 number of records
    12      4           u32 number of leads = 12
    16      4           u32 samples per lead T
    20      ...         records, each 12·T f32 samples (lead-major) followed by one u8 label bitmask

Label bit `k` corresponds to ``CLASS_NAMES[k]``. Samples are stored as f32 and widened to f64 on load. The
generator produces f32-representable values, so generated datasets round-trip bit-exactly.
"""

import csv
import struct
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from math import isfinite
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from vizecg.errors import ConfigurationError, ContractError, DimensionError, FormatError, LabelError, ParseError
from vizecg.utils import derive_seed

__all__ = [
    "LEAD_NAMES",
    "CLASS_NAMES",
    "N_LEADS",
    "N_CLASSES",
    "EcgRecord",
    "SynthConfig",
    "Dataset",
    "Split",
    "detrend",
    "generate_record",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "import_csv",
    "parse_class_name",
]

LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
CLASS_NAMES = ("1dAVb", "RBBB", "LBBB", "SB", "AF", "ST")
N_LEADS = len(LEAD_NAMES)
N_CLASSES = len(CLASS_NAMES)
AVB, RBBB, LBBB, SB, AF, ST = range(N_CLASSES)

MAGIC = b"VZEC"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")

RBBB_LEADS = slice(6, 9)  #: V1-V3
LBBB_LEADS = slice(9, 12)  #: V4-V6

# wave amplitudes (mV) per lead for the P, Q, R, S, T and R' components
_AMPLITUDES = np.array(
    [
        [0.10, -0.05, 0.80, -0.10, 0.25, 0.0],
        [0.15, -0.08, 1.20, -0.15, 0.35, 0.0],
        [0.05, -0.05, 0.50, -0.10, 0.15, 0.0],
        [-0.12, 0.05, -0.90, 0.10, -0.30, 0.0],
        [0.05, -0.04, 0.40, -0.05, 0.10, 0.0],
        [0.10, -0.06, 0.80, -0.12, 0.25, 0.0],
        [0.08, 0.00, 0.30, -0.90, 0.10, 0.0],
        [0.10, 0.00, 0.50, -1.00, 0.30, 0.0],
        [0.10, -0.05, 0.80, -0.70, 0.35, 0.0],
        [0.10, -0.08, 1.20, -0.40, 0.40, 0.0],
        [0.10, -0.10, 1.10, -0.20, 0.35, 0.0],
        [0.10, -0.08, 0.90, -0.10, 0.30, 0.0],
    ]
)
_P, _Q, _R, _S, _T, _R2 = range(6)


@dataclass(frozen=True, eq=False)
class EcgRecord:
    """12-lead recording with its multi-label vector."""

    leads: np.ndarray
    """12×T samples in millivolts, lead order is :py:data:`~vizecg.data.LEAD_NAMES`."""

    labels: tuple[bool, ...] = (False,) * N_CLASSES
    """One flag per class in :py:data:`~vizecg.data.CLASS_NAMES` order."""

    sample_rate_hz: float = 400.0

    def __post_init__(self):
        leads = np.array(self.leads, dtype=np.float64)
        if leads.ndim != 2 or leads.shape[0] != N_LEADS or leads.shape[1] < 1:
            raise DimensionError(f"Expected a 12×T lead matrix, got shape {leads.shape}.", shape=list(leads.shape))
        if len(self.labels) != N_CLASSES:
            raise ContractError(f"Expected {N_CLASSES} labels, got {len(self.labels)}.")
        if self.sample_rate_hz <= 0:
            raise ContractError(f"Sample rate must be positive, got {self.sample_rate_hz}.")
        leads.flags.writeable = False
        object.__setattr__(self, "leads", leads)
        object.__setattr__(self, "labels", tuple(bool(label) for label in self.labels))

    @property
    def length(self) -> int:
        return self.leads.shape[1]

    @property
    def label_mask(self) -> int:
        """Label bitmask, bit 0 is 1dAVb and bit 5 is ST."""
        return sum(1 << idx for idx, label in enumerate(self.labels) if label)

    @property
    def label_array(self) -> np.ndarray:
        return np.array(self.labels, dtype=bool)

    @classmethod
    def from_mask(cls, leads: np.ndarray, mask: int, sample_rate_hz: float = 400.0) -> "EcgRecord":
        return cls(leads, tuple(bool(mask >> idx & 1) for idx in range(N_CLASSES)), sample_rate_hz)

    def __eq__(self, other, /) -> bool:
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.labels == other.labels
            and self.sample_rate_hz == other.sample_rate_hz
            and np.array_equal(self.leads, other.leads)
        )

    __hash__ = None  # type: ignore[assignment]


def parse_class_name(name: str, /) -> int:
    """Get a class index from its case-insensitive name.

    >>> parse_class_name('af'), parse_class_name('1davb')
    (4, 0)
    """
    names = [class_name.lower() for class_name in CLASS_NAMES]
    try:
        return names.index(name.strip().lower())
    except ValueError:
        raise ConfigurationError(
            f"Unknown class name: {name}\n\nFix: Use one of {', '.join(CLASS_NAMES)}.", name=name
        ) from None


def _check_range(name: str, value: tuple[float, float]) -> None:
    if len(value) != 2 or not value[0] <= value[1]:
        raise ConfigurationError(f"Invalid range for {name}: {value}\n\nFix: Use a [low, high] pair with low <= high.")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic 12-lead generator settings.

    Each beat is a sum of Gaussian bumps (P, Q, R, S, T and a secondary R' wave) repeated at the RR interval.
    Labels distort the beat: SB and ST change the rate, AF jitters the RR intervals and suppresses the P wave,
    1dAVb prolongs the PR interval, RBBB and LBBB widen the QRS complex and change wave polarity in the V1-V3 and
    V4-V6 leads respectively.
    """

    sample_rate_hz: float = 400.0
    length: int = 4096
    rate_normal_bpm: tuple[float, float] = (65.0, 95.0)
    rate_sb_bpm: tuple[float, float] = (40.0, 55.0)
    rate_st_bpm: tuple[float, float] = (110.0, 150.0)
    pr_interval_s: tuple[float, float] = (0.14, 0.18)
    pr_offset_avb_s: tuple[float, float] = (0.09, 0.14)
    qrs_multiplier_rbbb: tuple[float, float] = (1.8, 2.3)
    qrs_multiplier_lbbb: tuple[float, float] = (2.0, 2.5)
    sinus_rr_jitter: float = 0.02
    af_rr_jitter: float = 0.3
    af_p_suppression: float = 0.1
    noise_mv: float = 0.02
    wander_mv: float = 0.1
    prevalence: tuple[float, ...] = (0.2,) * N_CLASSES
    """Probability of each class label, in :py:data:`~vizecg.data.CLASS_NAMES` order."""

    co_occurrence: float = 0.5
    """Probability that a record keeps all of its sampled labels, otherwise a single label is kept."""

    def __post_init__(self):
        for name in ("rate_normal_bpm", "rate_sb_bpm", "rate_st_bpm", "pr_interval_s", "pr_offset_avb_s"):
            _check_range(name, getattr(self, name))
        for name in ("qrs_multiplier_rbbb", "qrs_multiplier_lbbb"):
            _check_range(name, getattr(self, name))
        object.__setattr__(self, "prevalence", tuple(float(value) for value in self.prevalence))
        if len(self.prevalence) != N_CLASSES or not all(0.0 <= value <= 1.0 for value in self.prevalence):
            raise ConfigurationError(f"Invalid prevalence: {self.prevalence}\n\nFix: Use 6 values in [0, 1].")
        if not 0.0 <= self.co_occurrence <= 1.0:
            raise ConfigurationError(f"Invalid co-occurrence probability: {self.co_occurrence}")
        if self.length < 2 or self.sample_rate_hz <= 0:
            raise ConfigurationError(f"Invalid record length {self.length} or sample rate {self.sample_rate_hz}.")
        if min(self.noise_mv, self.wander_mv, self.sinus_rr_jitter, self.af_rr_jitter) < 0:
            raise ConfigurationError("Noise, wander and jitter amplitudes must be non-negative.")

    @classmethod
    def from_dict(cls, settings: dict[str, Any], /) -> "SynthConfig":
        settings = dict(settings)
        prevalence = settings.get("prevalence")
        if isinstance(prevalence, dict):
            values = list(cls.prevalence)
            for name, value in prevalence.items():
                values[parse_class_name(name)] = float(value)
            settings["prevalence"] = tuple(values)
        for key, value in settings.items():
            if isinstance(value, list):
                settings[key] = tuple(value)
        try:
            return cls(**settings)
        except TypeError as exc:
            raise ConfigurationError(
                f"Invalid data settings: {exc}\n\nFix: Check the `data` section keys against SynthConfig fields."
            ) from exc

    def with_prevalence(self, **prevalence: float) -> "SynthConfig":
        """Copy the config changing the prevalence of some classes.

        >>> SynthConfig().with_prevalence(af=1.0).prevalence
        (0.2, 0.2, 0.2, 0.2, 1.0, 0.2)
        """
        values = list(self.prevalence)
        for name, value in prevalence.items():
            values[parse_class_name(name)] = value
        return replace(self, prevalence=tuple(values))

    def json_repr(self) -> dict[str, Any]:
        data = asdict(self)
        data["prevalence"] = {name: value for name, value in zip(CLASS_NAMES, self.prevalence)}
        return {key: list(value) if isinstance(value, tuple) else value for key, value in data.items()}


class Split(NamedTuple):
    """Disjoint index partition of a dataset."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class Dataset:
    """Ordered collection of records with a deterministic train/val/test split."""

    records: list[EcgRecord]
    split_seed: int = 0
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        self.fractions = tuple(float(value) for value in self.fractions)  # type: ignore[assignment]
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"Invalid split fractions: {self.fractions}\n\nFix: Use 3 values summing to 1.")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int) -> EcgRecord:
        return self.records[idx]

    @property
    def labels(self) -> np.ndarray:
        """N×6 boolean label matrix."""
        return np.array([record.labels for record in self.records], dtype=bool).reshape(-1, N_CLASSES)

    def split(self) -> Split:
        """Partition record indices, identical seeds give identical partitions.

        >>> ds = Dataset([EcgRecord(np.zeros((12, 2)))] * 20, split_seed=1)
        >>> [len(part) for part in ds.split()]
        [14, 3, 3]
        """
        n = len(self.records)
        order = np.random.default_rng(self.split_seed).permutation(n)
        n_train = min(n, int(round(n * self.fractions[0])))
        n_val = min(n - n_train, int(round(n * self.fractions[1])))
        return Split(
            np.sort(order[:n_train]), np.sort(order[n_train : n_train + n_val]), np.sort(order[n_train + n_val :])
        )

    def subset(self, indices: Sequence[int], /) -> list[EcgRecord]:
        return [self.records[idx] for idx in indices]


def detrend(record: EcgRecord, /) -> EcgRecord:
    """Remove the least-squares linear trend of every lead, then the residual mean.

    >>> flat = detrend(EcgRecord(np.full((12, 5), 3.0)))
    >>> float(np.abs(flat.leads).max())
    0.0
    """
    leads = record.leads
    if record.length < 2:
        raise ContractError(f"Detrending needs at least 2 samples, got {record.length}.")
    t = np.arange(record.length, dtype=np.float64)
    t -= t.mean()
    mean = leads.mean(axis=1, keepdims=True)
    slope = (leads - mean) @ t / (t @ t)
    residual = leads - mean - slope[:, None] * t[None, :]
    residual = residual - residual.mean(axis=1, keepdims=True)
    return replace(record, leads=residual)


def _check_labels(labels: Sequence[bool]) -> tuple[bool, ...]:
    labels = tuple(bool(label) for label in labels)
    if len(labels) != N_CLASSES:
        raise ContractError(f"Expected {N_CLASSES} labels, got {len(labels)}.")
    if labels[SB] and labels[ST]:
        raise LabelError(
            "Contradictory labels: sinus bradycardia and sinus tachycardia cannot co-occur.",
            labels=list(labels),
        )
    return labels


def _bumps(t: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((t[None, :] - centers[:, None]) / sigma) ** 2).sum(axis=0)


def generate_record(config: SynthConfig, labels: Sequence[bool], seed: int) -> EcgRecord:
    """Generate one synthetic record, deterministic for `(config, labels, seed)`.

    :raises LabelError: on the contradictory SB and ST combination
    """
    labels = _check_labels(labels)
    rng = np.random.default_rng(seed)
    fs, n = config.sample_rate_hz, config.length
    t = np.arange(n) / fs
    duration = n / fs

    if labels[SB]:
        rate = rng.uniform(*config.rate_sb_bpm)
    elif labels[ST]:
        rate = rng.uniform(*config.rate_st_bpm)
    else:
        rate = rng.uniform(*config.rate_normal_bpm)
    rr = 60.0 / rate
    pr = rng.uniform(*config.pr_interval_s)
    if labels[AVB]:
        pr += rng.uniform(*config.pr_offset_avb_s)
    qrs = 1.0
    if labels[RBBB]:
        qrs = max(qrs, rng.uniform(*config.qrs_multiplier_rbbb))
    if labels[LBBB]:
        qrs = max(qrs, rng.uniform(*config.qrs_multiplier_lbbb))
    jitter = config.af_rr_jitter if labels[AF] else config.sinus_rr_jitter

    beats = []
    beat = rng.uniform(0.05, rr)
    while beat < duration + 0.5:
        beats.append(beat)
        beat += rr * (1.0 + jitter * rng.uniform(-1.0, 1.0))
    centers = np.array(beats)

    qt = 0.16 + 0.2 * np.sqrt(rr) + 0.02 * (qrs - 1.0)
    components = np.stack(
        [
            _bumps(t, centers - pr, 0.02),
            _bumps(t, centers - 0.02 * qrs, 0.008 * qrs),
            _bumps(t, centers, 0.01 * qrs),
            _bumps(t, centers + 0.022 * qrs, 0.008 * qrs),
            _bumps(t, centers + qt, 0.04),
            _bumps(t, centers + 0.045 * qrs, 0.01 * qrs),
        ]
    )

    amplitudes = _AMPLITUDES * rng.uniform(0.85, 1.15, size=_AMPLITUDES.shape)
    if labels[AF]:
        amplitudes[:, _P] *= config.af_p_suppression
    if labels[RBBB]:
        amplitudes[RBBB_LEADS, _R2] = 0.9
        amplitudes[RBBB_LEADS, _S] *= 0.3
        amplitudes[RBBB_LEADS, _T] *= -1.0
    if labels[LBBB]:
        amplitudes[LBBB_LEADS, _Q] = 0.0
        amplitudes[LBBB_LEADS, _S] = 0.0
        amplitudes[LBBB_LEADS, _R2] = 0.6
        amplitudes[LBBB_LEADS, _T] *= -1.0
    leads = amplitudes @ components

    wander_freq = rng.uniform(0.1, 0.4, size=(N_LEADS, 1))
    wander_phase = rng.uniform(0.0, 2.0 * np.pi, size=(N_LEADS, 1))
    drift = rng.uniform(-1.0, 1.0, size=(N_LEADS, 1)) * config.wander_mv / duration
    leads += config.wander_mv * np.sin(2.0 * np.pi * wander_freq * t[None, :] + wander_phase)
    leads += drift * t[None, :] + rng.uniform(-1.0, 1.0, size=(N_LEADS, 1)) * config.wander_mv
    leads += rng.normal(0.0, config.noise_mv, size=leads.shape)
    leads = leads.astype(np.float32).astype(np.float64)
    return EcgRecord(leads, labels, fs)


def _sample_labels(config: SynthConfig, rng: np.random.Generator) -> tuple[bool, ...]:
    labels = rng.random(N_CLASSES) < np.array(config.prevalence)
    positive = np.flatnonzero(labels)
    if len(positive) > 1 and rng.random() >= config.co_occurrence:
        keep = rng.choice(positive)
        labels[:] = False
        labels[keep] = True
    if labels[SB] and labels[ST]:
        labels[rng.choice([SB, ST])] = False
    return tuple(bool(label) for label in labels)


def generate_dataset(config: SynthConfig, n: int, seed: int) -> Dataset:
    """Generate `n` labelled records, deterministic for `(config, n, seed)`.

    Label vectors are drawn per class from the configured prevalence, so with co-occurrence the records are
    multi-label. The dataset split seed equals `seed`.
    """
    if n < 1:
        raise ContractError(f"Dataset size must be at least 1, got {n}.")
    label_rng = np.random.default_rng(derive_seed(seed, 0))
    records = []
    for idx in range(n):
        labels = _sample_labels(config, label_rng)
        records.append(generate_record(config, labels, derive_seed(seed, idx + 1)))
    return Dataset(records, split_seed=seed)


def save_dataset(dataset: Dataset, path: str | Path, /) -> None:
    records = dataset.records
    length = records[0].length if records else 0
    if any(record.length != length for record in records):
        raise DimensionError("All records of a dataset file must have the same length.")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(records), N_LEADS, length))
        for record in records:
            f.write(record.leads.astype("<f4").tobytes())
            f.write(bytes((record.label_mask,)))


def load_dataset(
    path: str | Path, /, *, split_seed: int = 0, fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
) -> Dataset:
    """Load a dataset file.

    :raises FormatError: on bad magic, unsupported version or lead count, truncation or trailing bytes, the
        error extras contain the byte `offset`
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(
            f"Dataset header truncated: expected {_HEADER.size} bytes, got {len(data)}.",
            offset=len(data),
            expected=_HEADER.size,
            actual=len(data),
        )
    magic, version, n_records, n_leads, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"Invalid dataset magic {magic!r} at offset 0, expected {MAGIC!r}.", offset=0)
    if version != VERSION:
        raise FormatError(f"Unsupported dataset version {version} at offset 4.", offset=4, version=version)
    if n_leads != N_LEADS:
        raise FormatError(f"Unsupported lead count {n_leads} at offset 12, expected 12.", offset=12)
    samples = N_LEADS * length
    record_size = samples * 4 + 1
    expected = _HEADER.size + n_records * record_size
    if len(data) != expected:
        complete = (len(data) - _HEADER.size) // record_size if record_size else 0
        kind = "truncated" if len(data) < expected else "has trailing bytes"
        raise FormatError(
            f"Dataset file {kind}: expected {expected} bytes, got {len(data)}.",
            offset=_HEADER.size + min(complete, n_records) * record_size,
            expected=expected,
            actual=len(data),
            record=min(complete, n_records),
        )
    records = []
    offset = _HEADER.size
    for _ in range(n_records):
        leads = np.frombuffer(data, dtype="<f4", count=samples, offset=offset).reshape(N_LEADS, length)
        mask = data[offset + samples * 4]
        if mask >> N_CLASSES:
            raise FormatError(f"Invalid label mask {mask} at offset {offset + samples * 4}.", offset=offset)
        records.append(EcgRecord.from_mask(leads.astype(np.float64), mask))
        offset += record_size
    return Dataset(records, split_seed=split_seed, fractions=fractions)


def import_csv(path: str | Path, /, *, sample_rate_hz: float = 400.0) -> EcgRecord:
    """Read a 12-column CSV file (header row of lead names) into an unlabelled record.

    Data rows are counted from 1, the header excluded.

    :raises ParseError: on a wrong column count, a non-numeric cell or less than 2 data rows
    """
    rows: list[list[float]] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or len(header) != N_LEADS:
            actual = 0 if header is None else len(header)
            raise ParseError(
                f"Expected {N_LEADS} columns in the header, got {actual}.", expected=N_LEADS, actual=actual, row=0
            )
        for row_idx, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != N_LEADS:
                raise ParseError(
                    f"Expected {N_LEADS} columns at row {row_idx}, got {len(row)}.",
                    expected=N_LEADS,
                    actual=len(row),
                    row=row_idx,
                )
            values = []
            for col_idx, cell in enumerate(row, start=1):
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(
                        f"Non-numeric value {cell!r} at row {row_idx}, column {col_idx}.",
                        row=row_idx,
                        column=col_idx,
                        value=cell,
                    ) from None
                if not isfinite(value):
                    raise ParseError(
                        f"Non-finite value {cell!r} at row {row_idx}, column {col_idx}.",
                        row=row_idx,
                        column=col_idx,
                        value=cell,
                    )
                values.append(value)
            rows.append(values)
    if len(rows) < 2:
        raise ParseError(f"Expected at least 2 data rows, got {len(rows)}.", actual=len(rows))
    return EcgRecord(np.array(rows).T, sample_rate_hz=sample_rate_hz)
