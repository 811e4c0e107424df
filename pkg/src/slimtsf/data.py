"""Loading, validation, labeling, imputation, and partition handling.

On-disk layout of a dataset bundle:

* manifest: JSON array of objects with keys ``instance_id``, ``file``
  (path relative to the manifest), ``partition_id``, ``label`` (flare class
  string such as ``M1.0`` or ``FQ``), optional ``ar_number``, ``start_ts``
  and ``end_ts`` (ISO 8601, UTC).
* one delimited text file per instance: header row with the timestamp column
  followed by the parameter columns, one row per timestep. Missing values are
  spelled ``NaN`` or left as an empty cell. Comma and tab delimiters are both
  accepted (sniffed from the header).

Datasets and instances are immutable after construction and safe to share
across threads. Instances are returned sorted by instance_id so the result
does not depend on load order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import DataValidationError, LabelError, SchemaError

FLARE_CLASSES = ("X", "M", "C", "B", "A", "FQ")
FLARING_CLASSES = frozenset({"M", "X"})


@dataclass(frozen=True)
class FlareLabel:
    """Flare class letter plus peak-flux magnitude, e.g. M1.0. FQ has none."""

    class_letter: str
    magnitude: float | None = None

    def __post_init__(self):
        if self.class_letter not in FLARE_CLASSES:
            raise LabelError(f"unknown flare class {self.class_letter!r}")
        if self.class_letter == "FQ" and self.magnitude is not None:
            raise LabelError("FQ labels carry no magnitude")
        if self.magnitude is not None and not self.magnitude >= 0:
            raise LabelError(f"magnitude must be >= 0, got {self.magnitude}")

    def __str__(self):
        if self.magnitude is None:
            return self.class_letter
        return f"{self.class_letter}{self.magnitude!r}"


class BinaryLabel:
    """Two-state prediction target. Use the module-level singletons."""

    __slots__ = ("name",)
    _instances: dict[str, "BinaryLabel"] = {}

    def __new__(cls, name: str):
        if name not in ("Flaring", "NonFlaring"):
            raise LabelError(f"unknown binary label {name!r}")
        inst = cls._instances.get(name)
        if inst is None:
            inst = super().__new__(cls)
            inst.name = name
            cls._instances[name] = inst
        return inst

    def __repr__(self):
        return f"BinaryLabel({self.name!r})"

    def __str__(self):
        return self.name


FLARING = BinaryLabel("Flaring")
NON_FLARING = BinaryLabel("NonFlaring")


def parse_flare_label(text: str) -> FlareLabel:
    """Parse a raw label string like ``M1.0``, ``X10.3``, ``B``, or ``FQ``."""
    s = text.strip()
    if s == "FQ":
        return FlareLabel("FQ")
    if not s:
        raise LabelError("empty label string")
    letter, rest = s[0], s[1:]
    if letter not in FLARE_CLASSES:
        raise LabelError(f"unparseable flare label {text!r}")
    if not rest:
        return FlareLabel(letter)
    try:
        magnitude = float(rest)
    except ValueError:
        raise LabelError(f"unparseable flare label {text!r}") from None
    if not math.isfinite(magnitude) or magnitude < 0:
        raise LabelError(f"unparseable flare label {text!r}")
    return FlareLabel(letter, magnitude)


def binarize_label(raw: FlareLabel) -> BinaryLabel:
    """M- and X-class labels are Flaring; C, B, A, and FQ are NonFlaring.

    Depends only on the class letter, never on the magnitude: the letter
    already encodes the peak-flux decade, so anything below the M threshold
    is negative regardless of its within-class magnitude.
    """
    return FLARING if raw.class_letter in FLARING_CLASSES else NON_FLARING


@dataclass(frozen=True, eq=False)
class TimeSeriesInstance:
    """One observation-window slice: P parameter series over T timesteps."""

    instance_id: str
    partition_id: str
    start_ts: datetime
    end_ts: datetime
    values: np.ndarray
    parameter_names: tuple[str, ...]
    label: BinaryLabel
    raw_label: FlareLabel
    ar_number: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataValidationError(
                f"{self.instance_id}: values must be a P x T matrix"
            )
        if values.shape[0] != len(self.parameter_names):
            raise DataValidationError(
                f"{self.instance_id}: {values.shape[0]} rows but "
                f"{len(self.parameter_names)} parameter names"
            )
        if values.shape[1] < 2:
            raise DataValidationError(
                f"{self.instance_id}: needs at least 2 timesteps, got {values.shape[1]}"
            )
        if len(set(self.parameter_names)) != len(self.parameter_names):
            raise DataValidationError(
                f"{self.instance_id}: duplicate parameter names"
            )
        if not self.start_ts < self.end_ts:
            raise DataValidationError(
                f"{self.instance_id}: start_ts must precede end_ts"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "parameter_names", tuple(self.parameter_names))

    @property
    def n_parameters(self) -> int:
        return self.values.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[1]

    def is_imputed(self) -> bool:
        return bool(np.isfinite(self.values).all())


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered, id-sorted collection of instances sharing one parameter order."""

    instances: tuple[TimeSeriesInstance, ...]
    parameter_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        instances = tuple(self.instances)
        params = tuple(self.parameter_names) or (
            instances[0].parameter_names if instances else ()
        )
        ids = [inst.instance_id for inst in instances]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataValidationError(f"duplicate instance ids: {dupes}")
        for inst in instances:
            if inst.parameter_names != params:
                raise DataValidationError(
                    f"{inst.instance_id}: parameter names differ from dataset order"
                )
        instances = tuple(sorted(instances, key=lambda i: i.instance_id))
        object.__setattr__(self, "instances", instances)
        object.__setattr__(self, "parameter_names", params)

    def __len__(self):
        return len(self.instances)

    @property
    def instance_ids(self) -> tuple[str, ...]:
        return tuple(inst.instance_id for inst in self.instances)

    @property
    def partition_ids(self) -> tuple[str, ...]:
        """Sorted unique partition ids present in the dataset."""
        return tuple(sorted({inst.partition_id for inst in self.instances}))


@dataclass(frozen=True)
class IngestSchema:
    """Column and manifest-key names for :func:`load_dataset`.

    parameter_names left as None means the first instance file fixes the
    parameter order for the whole dataset.
    """

    timestamp_column: str = "timestamp"
    parameter_names: tuple[str, ...] | None = None
    id_key: str = "instance_id"
    file_key: str = "file"
    partition_key: str = "partition_id"
    label_key: str = "label"
    ar_key: str = "ar_number"
    start_key: str = "start_ts"
    end_key: str = "end_ts"


@dataclass(frozen=True)
class ImputePolicy:
    """How to remove non-finite values.

    kind "linear": per-parameter linear interpolation between nearest valid
    neighbors, then edge forward/backward fill. kind "constant": replace every
    non-finite entry with ``fill``. Either way a parameter with no valid entry
    at all becomes ``fill`` everywhere and the instance is flagged.
    """

    kind: str = "linear"
    fill: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "constant"):
            raise ValueError(f"unknown impute policy {self.kind!r}")


def _parse_ts(text: str) -> datetime:
    try:
        ts = datetime.fromisoformat(str(text).replace("Z", "+00:00"))
    except ValueError:
        raise DataValidationError(f"unparseable timestamp {text!r}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _parse_cell(cell: str) -> float:
    s = cell.strip()
    if not s:
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise DataValidationError(f"unparseable numeric cell {cell!r}") from None


def _sniff_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


class _RaggedRows(Exception):
    pass


def _read_instance_file(path: Path, schema: IngestSchema,
                        parameter_names: tuple[str, ...] | None):
    """Returns (parameter_names, T x P value rows sorted by timestamp)."""
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty instance file")
    delim = _sniff_delimiter(lines[0])
    header = [h.strip() for h in lines[0].split(delim)]
    if schema.timestamp_column not in header:
        raise SchemaError(
            f"{path}: missing column {schema.timestamp_column!r}"
        )
    if parameter_names is None:
        parameter_names = tuple(
            h for h in header if h != schema.timestamp_column
        )
    missing = [p for p in parameter_names if p not in header]
    if missing:
        raise SchemaError(f"{path}: missing column {missing[0]!r}")
    col_of = {name: header.index(name) for name in header}
    ts_col = col_of[schema.timestamp_column]
    param_cols = [col_of[p] for p in parameter_names]

    rows = []
    ragged = False
    for ln in lines[1:]:
        cells = ln.split(delim)
        if len(cells) != len(header):
            ragged = True
            continue
        ts = _parse_ts(cells[ts_col])
        rows.append((ts, [_parse_cell(cells[c]) for c in param_cols]))
    if ragged:
        raise _RaggedRows(str(path))
    rows.sort(key=lambda r: r[0])
    return parameter_names, [vals for _, vals in rows]


def load_dataset(path: str | Path, schema: IngestSchema | None = None) -> Dataset:
    """Load a dataset bundle from its manifest.

    ``path`` is the manifest file or a directory containing ``manifest.json``.
    Validates every instance invariant except the no-NaN rule; imputation is a
    separate step (:func:`impute_missing`).
    """
    schema = schema or IngestSchema()
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    try:
        entries = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{manifest_path}: invalid JSON ({exc})") from None
    if not isinstance(entries, list):
        raise SchemaError(f"{manifest_path}: manifest must be a JSON array")

    base = manifest_path.parent
    parameter_names = schema.parameter_names
    instances = []
    ragged_ids = []
    for entry in entries:
        for key in (schema.id_key, schema.file_key, schema.partition_key,
                    schema.label_key, schema.start_key, schema.end_key):
            if key not in entry:
                raise SchemaError(
                    f"{manifest_path}: manifest entry missing key {key!r}"
                )
        instance_id = str(entry[schema.id_key])
        try:
            parameter_names, value_rows = _read_instance_file(
                base / entry[schema.file_key], schema, parameter_names
            )
        except _RaggedRows:
            ragged_ids.append(instance_id)
            continue
        raw = parse_flare_label(str(entry[schema.label_key]))
        ar = entry.get(schema.ar_key)
        instances.append(TimeSeriesInstance(
            instance_id=instance_id,
            partition_id=str(entry[schema.partition_key]),
            start_ts=_parse_ts(entry[schema.start_key]),
            end_ts=_parse_ts(entry[schema.end_key]),
            values=np.array(value_rows, dtype=np.float64).T,
            parameter_names=parameter_names,
            label=binarize_label(raw),
            raw_label=raw,
            ar_number=int(ar) if ar is not None else None,
        ))
    if ragged_ids:
        raise DataValidationError(
            f"ragged series lengths in instances: {sorted(ragged_ids)}"
        )
    return Dataset(tuple(instances), parameter_names or ())


def save_dataset(ds: Dataset, out_dir: str | Path, delimiter: str = ",") -> Path:
    """Write a dataset bundle (manifest + one file per instance).

    Floats are written with repr so a reload is bit-exact; re-saving a loaded
    bundle reproduces it byte for byte.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for inst in ds.instances:
        fname = f"{inst.instance_id}.csv"
        header = delimiter.join(("timestamp",) + ds.parameter_names)
        lines = [header]
        t0 = inst.start_ts
        step = (inst.end_ts - inst.start_ts) / inst.n_timesteps
        for t in range(inst.n_timesteps):
            ts = (t0 + t * step).isoformat()
            cells = [ts] + [_format_value(v) for v in inst.values[:, t]]
            lines.append(delimiter.join(cells))
        (out_dir / fname).write_text("\n".join(lines) + "\n")
        entry = {
            "instance_id": inst.instance_id,
            "file": fname,
            "partition_id": inst.partition_id,
            "label": str(inst.raw_label),
            "start_ts": inst.start_ts.isoformat(),
            "end_ts": inst.end_ts.isoformat(),
        }
        if inst.ar_number is not None:
            entry["ar_number"] = inst.ar_number
        entries.append(entry)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _format_value(v: float) -> str:
    return "NaN" if math.isnan(v) else repr(float(v))


def impute_missing(
    instance: TimeSeriesInstance, policy: ImputePolicy | None = None
) -> tuple[TimeSeriesInstance, tuple[str, ...]]:
    """Remove non-finite values from one instance.

    Returns the imputed instance and the names of parameters that had no valid
    entry at all (filled with the policy constant); an empty tuple means no
    flag. Idempotent: an already-finite instance comes back unchanged.
    """
    policy = policy or ImputePolicy()
    values = instance.values
    finite = np.isfinite(values)
    if finite.all():
        return instance, ()
    out = values.copy()
    flagged = []
    for p, name in enumerate(instance.parameter_names):
        mask = finite[p]
        if mask.all():
            continue
        if not mask.any():
            out[p, :] = policy.fill
            flagged.append(name)
        elif policy.kind == "constant":
            out[p, ~mask] = policy.fill
        else:
            idx = np.flatnonzero(mask)
            out[p, :] = np.interp(np.arange(values.shape[1]), idx, values[p, idx])
    new = TimeSeriesInstance(
        instance_id=instance.instance_id,
        partition_id=instance.partition_id,
        start_ts=instance.start_ts,
        end_ts=instance.end_ts,
        values=out,
        parameter_names=instance.parameter_names,
        label=instance.label,
        raw_label=instance.raw_label,
        ar_number=instance.ar_number,
    )
    return new, tuple(flagged)


def impute_dataset(
    ds: Dataset, policy: ImputePolicy | None = None
) -> tuple[Dataset, dict[str, tuple[str, ...]]]:
    """Impute every instance; returns the dataset and {instance_id: flagged params}."""
    imputed = []
    flags: dict[str, tuple[str, ...]] = {}
    for inst in ds.instances:
        new, flagged = impute_missing(inst, policy)
        imputed.append(new)
        if flagged:
            flags[inst.instance_id] = flagged
    return Dataset(tuple(imputed), ds.parameter_names), flags


def partition_split(
    ds: Dataset, train_parts: set[str], test_parts: set[str]
) -> tuple[Dataset, Dataset]:
    """Split by partition id; every named instance lands on exactly one side."""
    train_parts, test_parts = set(train_parts), set(test_parts)
    if not train_parts or not test_parts:
        raise ValueError("train and test partition sets must be nonempty")
    overlap = train_parts & test_parts
    if overlap:
        raise ValueError(f"overlapping partition sets: {sorted(overlap)}")
    known = set(ds.partition_ids)
    unknown = (train_parts | test_parts) - known
    if unknown:
        raise ValueError(f"unknown partition ids: {sorted(unknown)}")
    train = tuple(i for i in ds.instances if i.partition_id in train_parts)
    test = tuple(i for i in ds.instances if i.partition_id in test_parts)
    return (Dataset(train, ds.parameter_names),
            Dataset(test, ds.parameter_names))


def class_ratio(ds: Dataset) -> tuple[int, int, float]:
    """(flaring count, non-flaring count, nonflaring/flaring ratio).

    The ratio is math.inf when there are no flaring instances.
    """
    if not ds.instances:
        raise ValueError("empty dataset")
    flaring = sum(1 for i in ds.instances if i.label is FLARING)
    nonflaring = len(ds.instances) - flaring
    ratio = math.inf if flaring == 0 else nonflaring / flaring
    return flaring, nonflaring, ratio
