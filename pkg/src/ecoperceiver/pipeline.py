"""Eddy-covariance table processing.

Release CSVs are fused into one table per site, brought to hourly cadence,
filtered by QC flag and min-max normalised with statistics from training
sites. Sites are split into train and test sets per IGBP class.

Tables are ``pandas.DataFrame`` objects indexed by a ``DatetimeIndex`` named
``TIMESTAMP_START`` (local standard time). Missing values are NaN in memory
and the literal ``NA`` on disk.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from datetime import date, datetime
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd

from . import catalog
from .catalog import CIRCULAR, CYCLIC, SUM, Variable
from .errors import ConfigError, InputError

logger = logging.getLogger(__name__)

TIME_COLUMN = "TIMESTAMP_START"
TIME_FORMAT = "%Y%m%d%H%M"
MISSING_TOKENS = ("", "NA", "-9999", "-9999.0")
MANIFEST_VERSION = 1
MAX_TEST_SITES = 5


class FusionError(InputError):
    """Releases of one site cannot be fused."""


class CadenceError(InputError):
    """Timestamps are not on the expected grid."""


class ManifestError(InputError):
    """Normalisation statistics cannot be computed or parsed."""


class SplitError(ConfigError):
    """A site split is impossible with the given inputs."""


class CSVFormatError(InputError):
    """Malformed CSV; the message carries file and line."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


# ---------------------------------------------------------------------------
# releases and CSV i/o
# ---------------------------------------------------------------------------
@dataclass
class RawRelease:
    release_id: str
    release_date: date
    table: pd.DataFrame
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        check_cadence(self.table, name=self.release_id)
        for col in self.table.columns:
            if col.endswith("_QC"):
                continue
            var = _known(col)
            if var is not None and var.qc and var.qc not in self.table.columns:
                raise InputError(f"release {self.release_id}: column {col} has no {var.qc} column")

    @property
    def cadence(self) -> int:
        return cadence_minutes(self.table)


def _known(code: str) -> Variable | None:
    try:
        return catalog.lookup(code)
    except catalog.CatalogError:
        return None


def cadence_minutes(table: pd.DataFrame) -> int:
    if len(table.index) < 2:
        return 60
    return int((table.index[1] - table.index[0]).total_seconds() // 60)


def check_cadence(table: pd.DataFrame, name: str = "table") -> int:
    """Validate a strictly increasing 30- or 60-minute grid; return the cadence."""
    idx = table.index
    if not isinstance(idx, pd.DatetimeIndex):
        raise CadenceError(f"{name}: index must be a DatetimeIndex")
    if len(idx) < 2:
        return 60
    steps = np.diff(idx.asi8) // 60_000_000_000
    if (steps <= 0).any():
        raise CadenceError(f"{name}: timestamps are not strictly increasing")
    step = int(steps[0])
    if step not in (30, 60) or (steps != step).any():
        raise CadenceError(f"{name}: cadence must be a fixed 30 or 60 minutes")
    return step


def _parse_float(text: str, path, line: int, column: str) -> float:
    text = text.strip()
    if text in MISSING_TOKENS:
        return np.nan
    try:
        value = float(text)
    except ValueError:
        raise CSVFormatError(path, line, f"column {column}: cannot parse {text!r} as a number") from None
    if value == -9999:
        return np.nan
    if not math.isfinite(value):
        raise CSVFormatError(path, line, f"column {column}: non-finite value {text!r}")
    return value


def read_release_csv(path) -> RawRelease:
    """Parse one release file.

    Leading ``# key=value`` lines carry metadata: ``release_id``,
    ``release_date`` (YYYY-MM-DD) and ``units.<CODE>``. Columns outside the
    catalog are dropped.
    """
    path = Path(path)
    meta = {}
    with path.open(newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lineno = 0
    while lineno < len(lines) and lines[lineno].startswith("#"):
        key, sep, value = lines[lineno][1:].strip().partition("=")
        if not sep:
            raise CSVFormatError(path, lineno + 1, "comment lines must be '# key=value'")
        meta[key.strip()] = value.strip()
        lineno += 1
    reader = csv.reader(lines[lineno:])
    try:
        header = next(reader)
    except StopIteration:
        raise CSVFormatError(path, lineno + 1, "missing header row") from None
    if not header or header[0] != TIME_COLUMN:
        raise CSVFormatError(path, lineno + 1, f"first column must be {TIME_COLUMN}")
    if len(set(header)) != len(header):
        raise CSVFormatError(path, lineno + 1, "duplicate column names")
    keep = [i for i, c in enumerate(header[1:], 1)
            if _known(c) is not None or (c.endswith("_QC") and c in catalog.qc_columns())]
    stamps, rows = [], []
    for offset, row in enumerate(reader):
        line = lineno + 2 + offset
        if not row:
            continue
        if len(row) != len(header):
            raise CSVFormatError(path, line, f"expected {len(header)} fields, found {len(row)}")
        stamp = row[0].strip()
        try:
            if len(stamp) != 12 or not stamp.isdigit():
                raise ValueError(stamp)
            stamps.append(datetime.strptime(stamp, TIME_FORMAT))
        except ValueError:
            raise CSVFormatError(path, line, f"bad timestamp {row[0]!r}, expected YYYYMMDDHHMM") from None
        values = []
        for i in keep:
            v = _parse_float(row[i], path, line, header[i])
            if header[i].endswith("_QC") and not np.isnan(v) and v not in (0, 1, 2, 3):
                raise CSVFormatError(path, line, f"column {header[i]}: QC flag {row[i]!r} not in 0..3")
            values.append(v)
        rows.append(values)
    columns = [header[i] for i in keep]
    table = pd.DataFrame(np.array(rows, dtype=np.float64).reshape(len(rows), len(columns)),
                         index=pd.DatetimeIndex(stamps, name=TIME_COLUMN), columns=columns)
    dropped = [c for c in header[1:] if c not in columns]
    if dropped:
        logger.info("%s: pruned columns outside the catalog: %s", path.name, ", ".join(dropped))
    units = {k[len("units."):]: v for k, v in meta.items() if k.startswith("units.")}
    try:
        release_date = date.fromisoformat(meta.get("release_date", "1970-01-01"))
    except ValueError:
        raise CSVFormatError(path, 1, f"bad release_date {meta['release_date']!r}") from None
    try:
        return RawRelease(meta.get("release_id", path.stem), release_date, table, units)
    except InputError as exc:
        raise CSVFormatError(path, lineno + 1, str(exc)) from None


def _format_value(x: float, qc: bool = False) -> str:
    if np.isnan(x):
        return "NA"
    if qc:
        return str(int(x))
    return repr(float(x))


def write_table_csv(table: pd.DataFrame, path, meta: dict | None = None) -> Path:
    """Write a table in the release layout; output bytes depend only on the data."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([TIME_COLUMN, *table.columns])
        stamps = table.index.strftime(TIME_FORMAT)
        qc_cols = [c.endswith("_QC") for c in table.columns]
        data = table.to_numpy(dtype=np.float64)
        for stamp, row in zip(stamps, data):
            writer.writerow([stamp, *(_format_value(x, q) for x, q in zip(row, qc_cols))])
    return path


def release_to_csv(release: RawRelease, path) -> Path:
    meta = {"release_id": release.release_id, "release_date": release.release_date.isoformat()}
    meta.update({f"units.{k}": v for k, v in sorted(release.units.items())})
    return write_table_csv(release.table, path, meta)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------
def _qc_owner(qc_col: str) -> str:
    return qc_col[: -len("_QC")]


def _check_units(releases: list) -> None:
    seen: dict = {}
    for rel in releases:
        for code, unit in rel.units.items():
            var = _known(code)
            if var is not None and unit != var.units:
                raise FusionError(f"release {rel.release_id}: {code} in {unit!r}, catalog expects {var.units!r}")
            if code in seen and seen[code][1] != unit:
                raise FusionError(f"{code} is in {seen[code][1]!r} in release {seen[code][0]} "
                                  f"but {unit!r} in release {rel.release_id}")
            seen.setdefault(code, (rel.release_id, unit))


def fuse_releases(releases: list) -> pd.DataFrame:
    """Merge overlapping releases of one site.

    Where several releases cover a timestamp, the newest release with a
    non-missing value wins, and the QC flag is taken from the same release.
    Half-hourly releases are downsampled first when any release is hourly.
    """
    if not releases:
        raise FusionError("no releases to fuse")
    _check_units(releases)
    ordered = sorted(releases, key=lambda r: (r.release_date, r.release_id), reverse=True)
    tables = [r.table for r in ordered]
    if len({cadence_minutes(t) for t in tables if len(t) > 1}) > 1:
        tables = [downsample_hourly(t) if cadence_minutes(t) == 30 and len(t) > 1 else t for t in tables]
    if len(tables) == 1:
        return tables[0].copy()
    index = tables[0].index
    for t in tables[1:]:
        index = index.union(t.index)
    columns = []
    for t in tables:
        columns += [c for c in t.columns if c not in columns]
    value_cols = [c for c in columns if not c.endswith("_QC")]
    out = pd.DataFrame(np.nan, index=index, columns=columns)
    for col in value_cols:
        stack = np.stack([t[col].reindex(index).to_numpy() if col in t else np.full(len(index), np.nan)
                          for t in tables])
        present = ~np.isnan(stack)
        source = np.argmax(present, axis=0)
        rows = np.arange(len(index))
        out[col] = stack[source, rows]
        qc = f"{col}_QC"
        if qc in columns:
            qstack = np.stack([t[qc].reindex(index).to_numpy() if qc in t else np.full(len(index), np.nan)
                               for t in tables])
            out[qc] = np.where(present.any(axis=0), qstack[source, rows], np.nan)
    # QC columns without a same-named value column (none in the catalog) fall back to newest
    for qc in columns:
        if qc.endswith("_QC") and _qc_owner(qc) not in value_cols:
            out[qc] = _newest(tables, qc, index)
    check_cadence(out, "fused table")
    return out


def _newest(tables, col, index):
    stack = np.stack([t[col].reindex(index).to_numpy() if col in t else np.full(len(index), np.nan)
                      for t in tables])
    present = ~np.isnan(stack)
    return stack[np.argmax(present, axis=0), np.arange(len(index))]


# ---------------------------------------------------------------------------
# downsampling
# ---------------------------------------------------------------------------
def _circular_mean_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ra, rb = np.radians(a), np.radians(b)
    deg = np.degrees(np.arctan2(np.sin(ra) + np.sin(rb), np.cos(ra) + np.cos(rb)))
    # round away float noise so e.g. (350, 10) lands on 0 rather than 359.999...
    return np.round(deg, 9) % 360.0


def downsample_hourly(table: pd.DataFrame) -> pd.DataFrame:
    """Combine half-hour pairs ``(HH:00, HH:30)`` into hourly rows.

    Means for state variables, sum for precipitation, circular mean for wind
    direction. QC becomes the worse flag of the pair; with one half missing
    the other is used and its flag worsened by one (capped at 3).
    """
    idx = table.index
    if len(idx) == 0:
        return table.copy()
    if check_cadence(table, "downsample input") != 30 and len(idx) > 1:
        raise CadenceError("downsampling needs a 30-minute table")
    if idx[0].minute != 0 or len(idx) % 2:
        raise CadenceError("half-hour pairs must start on the hour and come in complete pairs")
    first = table.iloc[0::2]
    second = table.iloc[1::2]
    if ((second.index - first.index) != pd.Timedelta(minutes=30)).any():
        raise CadenceError("half-hour pairs are misaligned")
    out = pd.DataFrame(index=first.index.copy(), columns=table.columns, dtype=np.float64)
    out.index.name = TIME_COLUMN
    presence = {}
    for col in table.columns:
        if col.endswith("_QC"):
            continue
        a, b = first[col].to_numpy(), second[col].to_numpy()
        var = _known(col)
        rule = var.aggregation if var is not None else "mean"
        if rule == CIRCULAR:
            both = _circular_mean_deg(a, b)
        elif rule == SUM:
            both = a + b
        else:
            both = (a + b) / 2.0
        va, vb = ~np.isnan(a), ~np.isnan(b)
        out[col] = np.where(va & vb, both, np.where(va, a, b))
        presence[col] = (va, vb)
    for col in table.columns:
        if not col.endswith("_QC"):
            continue
        owner = _qc_owner(col)
        qa, qb = first[col].to_numpy(), second[col].to_numpy()
        if owner not in presence:
            out[col] = np.fmax(qa, qb)
            continue
        va, vb = presence[owner]
        one = np.minimum(np.where(va, qa, qb) + 1, 3)
        out[col] = np.where(va & vb, np.fmax(qa, qb), np.where(va | vb, one, np.nan))
    return out


# ---------------------------------------------------------------------------
# QC leniency
# ---------------------------------------------------------------------------
@dataclass
class QCReport:
    max_qc: int
    rows: list  # (variable, present_before, retained, dropped)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "present", "retained", "dropped", "max_qc"])
            for r in self.rows:
                w.writerow([*r, self.max_qc])
        return path


def apply_qc_leniency(table: pd.DataFrame, max_qc: int) -> tuple[pd.DataFrame, QCReport]:
    """Blank every value whose QC flag exceeds ``max_qc``.

    A value without a QC flag, in a column that should have one, counts as
    flag 3. QC-exempt variables are untouched.
    """
    if not isinstance(max_qc, (int, np.integer)) or not 0 <= max_qc <= 3:
        raise ConfigError(f"max_qc must be an integer in 0..3, got {max_qc!r}")
    out = table.copy()
    rows = []
    for col in table.columns:
        if col.endswith("_QC"):
            continue
        var = _known(col)
        values = table[col].to_numpy()
        present = ~np.isnan(values)
        if var is None or var.qc is None or var.qc not in table.columns:
            rows.append((col, int(present.sum()), int(present.sum()), 0))
            continue
        flags = np.nan_to_num(table[var.qc].to_numpy(), nan=3.0)
        keep = present & (flags <= max_qc)
        out[col] = np.where(keep, values, np.nan)
        rows.append((col, int(present.sum()), int(keep.sum()), int(present.sum() - keep.sum())))
    return out, QCReport(int(max_qc), rows)


# ---------------------------------------------------------------------------
# normalisation manifest
# ---------------------------------------------------------------------------
@dataclass
class VariableRange:
    kind: str
    min: float
    max: float
    degenerate: bool = False


@dataclass
class NormalizationManifest:
    ranges: dict                       # code -> VariableRange (predictors and bands)
    target_code: str = catalog.TARGET_CODES[0]
    target_mean: float = 0.0
    target_variance: float = 1.0
    site_stats: dict = field(default_factory=dict)   # site -> (mean, variance, n)
    igbp_stats: dict = field(default_factory=dict)   # igbp -> (mean, variance, n)
    training_sites: tuple = ()
    version: int = MANIFEST_VERSION

    def __getitem__(self, code: str) -> VariableRange:
        try:
            return self.ranges[code]
        except KeyError:
            raise ManifestError(f"manifest has no entry for {code}") from None

    @property
    def target_std(self) -> float:
        return math.sqrt(self.target_variance) if self.target_variance > 0 else 1.0

    def to_text(self) -> str:
        lines = [f"manifest_version={self.version}",
                 f"target_code={self.target_code}",
                 f"training_sites={','.join(self.training_sites)}",
                 f"target.mean={self.target_mean!r}",
                 f"target.variance={self.target_variance!r}"]
        for code, r in self.ranges.items():
            lines += [f"var.{code}.kind={r.kind}", f"var.{code}.min={r.min!r}",
                      f"var.{code}.max={r.max!r}", f"var.{code}.degenerate={int(r.degenerate)}"]
        for label, stats in (("site", self.site_stats), ("igbp", self.igbp_stats)):
            for key in sorted(stats):
                m, v, n = stats[key]
                lines += [f"{label}.{key}.mean={m!r}", f"{label}.{key}.variance={v!r}", f"{label}.{key}.n={n}"]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def from_text(cls, text: str) -> "NormalizationManifest":
        kv = {}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ManifestError(f"manifest line {n}: expected key=value")
            kv[key] = value
        if int(kv.get("manifest_version", -1)) != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {kv.get('manifest_version')!r}")
        ranges, site_stats, igbp_stats = {}, {}, {}
        for key in kv:
            parts = key.split(".")
            if parts[0] == "var" and parts[-1] == "kind":
                code = ".".join(parts[1:-1])
                ranges[code] = VariableRange(kv[key], float(kv[f"var.{code}.min"]),
                                             float(kv[f"var.{code}.max"]),
                                             kv[f"var.{code}.degenerate"] == "1")
            elif parts[0] in ("site", "igbp") and parts[-1] == "mean":
                name = ".".join(parts[1:-1])
                stats = (float(kv[key]), float(kv[f"{parts[0]}.{name}.variance"]), int(kv[f"{parts[0]}.{name}.n"]))
                (site_stats if parts[0] == "site" else igbp_stats)[name] = stats
        sites = tuple(s for s in kv.get("training_sites", "").split(",") if s)
        return cls(ranges, kv["target_code"], float(kv["target.mean"]), float(kv["target.variance"]),
                   site_stats, igbp_stats, sites)

    @classmethod
    def load(cls, path) -> "NormalizationManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))


def _moments(x: np.ndarray) -> tuple:
    x = x[~np.isnan(x)]
    if len(x) == 0:
        return (float("nan"), float("nan"), 0)
    return (float(x.mean()), float(x.var()), int(len(x)))


def compute_manifest(tables: dict, variables=catalog.PREDICTORS, target_code: str = "NEE_VUT_REF",
                     igbp: dict | None = None, band_pixels: dict | None = None) -> NormalizationManifest:
    """Min/max per variable over the given (training) site tables.

    ``tables`` maps site id to table. ``band_pixels`` optionally maps site id
    to a ``(days, 9, 64)`` pixel array so imagery bands get ranges too.
    Cyclic variables take their range from the catalog, not the data.
    """
    if not tables:
        raise ManifestError("no training tables supplied")
    ranges = {}
    for var in variables:
        if var.is_band:
            continue
        if var.kind == CYCLIC:
            lo, hi = var.period
            ranges[var.code] = VariableRange(CYCLIC, float(lo), float(hi))
            continue
        cols = [t[var.code].to_numpy() for t in tables.values() if var.code in t]
        vals = np.concatenate(cols) if cols else np.array([])
        vals = vals[~np.isnan(vals)]
        if len(vals) == 0:
            raise ManifestError(f"variable {var.code} has no observations in the training sites")
        lo, hi = float(vals.min()), float(vals.max())
        ranges[var.code] = VariableRange(var.kind, lo, hi, degenerate=lo == hi)
    if band_pixels:
        stacked = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, len(catalog.BANDS), catalog.PIXELS_PER_BAND)
                                  for p in band_pixels.values()])
        for j, band in enumerate(catalog.BANDS):
            vals = stacked[:, j, :]
            vals = vals[~np.isnan(vals)]
            if len(vals) == 0:
                raise ManifestError(f"band {band.code} has no observations in the training sites")
            lo, hi = float(vals.min()), float(vals.max())
            ranges[band.code] = VariableRange(band.kind, lo, hi, degenerate=lo == hi)
    catalog.check_target(target_code)
    targets = {s: t[target_code].to_numpy() for s, t in tables.items() if target_code in t}
    pooled = np.concatenate(list(targets.values())) if targets else np.array([])
    mean, var, n = _moments(pooled)
    if n == 0:
        raise ManifestError(f"target {target_code} has no observations in the training sites")
    site_stats = {s: _moments(v) for s, v in targets.items()}
    igbp_stats = {}
    if igbp:
        for label in sorted(set(igbp[s] for s in targets)):
            igbp_stats[label] = _moments(np.concatenate([v for s, v in targets.items() if igbp[s] == label]))
    return NormalizationManifest(ranges, target_code, mean, var, site_stats, igbp_stats,
                                 tuple(sorted(tables)))


def normalize(value, code: str, manifest: NormalizationManifest):
    """Map physical values to the model's input range.

    Cyclic: ``[min, max)`` to ``[-1, 1)`` after wrapping into the period.
    Acyclic: ``[min, max]`` to ``[-0.5, 0.5]``, clamping (and logging) values
    outside the manifest range. Degenerate variables map to 0. NaN stays NaN.
    """
    r = manifest[code]
    x = np.asarray(value, dtype=np.float64)
    span = r.max - r.min
    if r.degenerate or span == 0:
        return np.where(np.isnan(x), np.nan, 0.0)
    if r.kind == CYCLIC:
        wrapped = r.min + np.mod(x - r.min, span)
        return 2.0 * (wrapped - r.min) / span - 1.0
    y = (x - r.min) / span - 0.5
    out = np.clip(y, -0.5, 0.5)
    n_clamped = int(np.count_nonzero(out != y) - np.count_nonzero(np.isnan(y)))
    if n_clamped:
        logger.info("clamped %d value(s) of %s outside manifest range [%r, %r]", n_clamped, code, r.min, r.max)
    return out


def denormalize(value, code: str, manifest: NormalizationManifest):
    r = manifest[code]
    y = np.asarray(value, dtype=np.float64)
    span = r.max - r.min
    if r.degenerate or span == 0:
        return np.where(np.isnan(y), np.nan, r.min)
    if r.kind == CYCLIC:
        return (y + 1.0) / 2.0 * span + r.min
    return (y + 0.5) * span + r.min


def normalize_table(table: pd.DataFrame, manifest: NormalizationManifest) -> pd.DataFrame:
    """Normalise every predictor column present in the manifest; other columns pass through."""
    out = table.copy()
    for col in table.columns:
        if col in manifest.ranges:
            out[col] = normalize(table[col].to_numpy(), col, manifest)
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------
def n_test_sites(n_sites: int) -> int:
    """Test sites per IGBP class: ``min(5, ceil(n / 5))``, in integer arithmetic."""
    if n_sites < 1:
        raise SplitError("an IGBP class needs at least one site")
    return min(MAX_TEST_SITES, (n_sites + 4) // 5)


@dataclass
class SplitPlan:
    seed: int
    groups: dict  # igbp -> {"train": [...], "test": [...]}

    @property
    def train_sites(self) -> list:
        return sorted(s for g in self.groups.values() for s in g["train"])

    @property
    def test_sites(self) -> list:
        return sorted(s for g in self.groups.values() for s in g["test"])

    def igbp_of(self) -> dict:
        return {s: label for label, g in self.groups.items() for s in g["train"] + g["test"]}

    def distribution(self) -> str:
        """Plain-text table of train/test counts per IGBP."""
        lines = [f"{'IGBP':<6}{'Train':>7}{'Test':>6}"]
        for label in sorted(self.groups):
            g = self.groups[label]
            lines.append(f"{label:<6}{len(g['train']):>7}{len(g['test']):>6}")
        return "\n".join(lines)

    def to_text(self) -> str:
        lines = [f"seed={self.seed}"]
        for label in sorted(self.groups):
            g = self.groups[label]
            lines.append(f"{label}.train={','.join(g['train'])}")
            lines.append(f"{label}.test={','.join(g['test'])}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def from_text(cls, text: str) -> "SplitPlan":
        seed, groups = None, {}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise SplitError(f"split plan line {n}: expected key=value")
            if key == "seed":
                seed = int(value)
                continue
            label, _, part = key.rpartition(".")
            if part not in ("train", "test"):
                raise SplitError(f"split plan line {n}: unknown key {key!r}")
            groups.setdefault(label, {"train": [], "test": []})[part] = [s for s in value.split(",") if s]
        if seed is None:
            raise SplitError("split plan has no seed line")
        return cls(seed, groups)

    @classmethod
    def load(cls, path) -> "SplitPlan":
        path = Path(path)
        if not path.exists():
            raise SplitError(f"split plan not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))


def stratified_split(sites: dict, seed: int) -> SplitPlan:
    """Per IGBP class, draw ``n_test_sites(n)`` test sites uniformly without replacement.

    ``sites`` maps site id to IGBP label. Each class uses its own generator
    keyed by ``(seed, crc32(label))``, so adding a class leaves the others'
    draws unchanged.
    """
    by_label: dict = {}
    for site, label in sites.items():
        by_label.setdefault(label, []).append(site)
    groups = {}
    for label in sorted(by_label):
        members = sorted(by_label[label])
        rng = np.random.default_rng([seed, zlib.crc32(label.encode())])
        chosen = set(rng.choice(len(members), size=n_test_sites(len(members)), replace=False).tolist())
        groups[label] = {"train": [s for i, s in enumerate(members) if i not in chosen],
                         "test": [s for i, s in enumerate(members) if i in chosen]}
    return SplitPlan(seed, groups)


def train_val_split(train_sites, fraction: float = 0.2, seed: int = 0) -> tuple[list, list]:
    """Site-level split; the validation share is rounded up so it is never empty."""
    sites = sorted(train_sites)
    if len(sites) < 2:
        raise SplitError(f"need at least 2 training sites for a validation split, got {len(sites)}")
    if not 0 < fraction < 1:
        raise SplitError(f"validation fraction must be in (0, 1), got {fraction}")
    n_val = math.ceil(Fraction(str(fraction)) * len(sites))
    n_val = min(n_val, len(sites) - 1)
    order = np.random.default_rng([seed, 1]).permutation(len(sites))
    val = sorted(sites[i] for i in order[:n_val])
    return [s for s in sites if s not in val], val


# ---------------------------------------------------------------------------
# site metadata
# ---------------------------------------------------------------------------
def read_metadata(path) -> dict:
    """``key=value`` site metadata with at least site_id, latitude, longitude, igbp."""
    path = Path(path)
    meta = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CSVFormatError(path, n, "expected key=value")
        meta[key.strip()] = value.strip()
    missing = [k for k in ("site_id", "latitude", "longitude", "igbp") if k not in meta]
    if missing:
        raise InputError(f"{path}: missing metadata keys {', '.join(missing)}")
    meta["latitude"] = float(meta["latitude"])
    meta["longitude"] = float(meta["longitude"])
    return meta


def write_metadata(meta: dict, path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    return path
