"""Benchmark result-table ingestion, feature engineering, and design matrices.

Source data is a delimiter-separated export of a server power/performance
benchmark: one line per server with configuration text fields plus measured
power and throughput at the 11 graduated workload levels (0%..100%).
This module parses those lines into typed ``ServerRecord`` values, normalizes
units (cache sizes per core/chip, memory and storage per module/drive),
and lays the records out as numeric design matrices for the three modeling
targets.  A seeded synthetic generator with known ground truth supports
end-to-end testing.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field, replace
from datetime import date
from enum import Enum
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

LEVELS: tuple[float, ...] = tuple(i / 10 for i in range(11))


class TargetKind(Enum):
    POWER = "power"
    PERF_TO_POWER = "perf_to_power"
    MAX_THROUGHPUT = "max_throughput"


class SchemaError(ValueError):
    """A mandatory source column is absent from the header."""


class EmptyInputError(ValueError):
    """The input stream contains no header row."""


@dataclass(frozen=True)
class Diagnostic:
    """One non-fatal ingestion problem, tied to a source row when known."""

    row: int | None
    field: str | None
    message: str

    def __str__(self) -> str:
        where = f"row {self.row}: " if self.row is not None else ""
        what = f"{self.field}: " if self.field else ""
        return f"{where}{what}{self.message}"


def format_diagnostics(diags: Sequence[Diagnostic]) -> str:
    return "\n".join(str(d) for d in diags)


# ---------------------------------------------------------------------------
# Column mapping
# ---------------------------------------------------------------------------

_PCT = (0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)

POWER_FIELDS = tuple(f"power_{p}" for p in _PCT)
TPUT_FIELDS = tuple(f"tput_{p}" for p in _PCT[1:])  # throughput at 0% is 0 by definition

#: Canonical fields that must be present in any mapped export.
MANDATORY_FIELDS = POWER_FIELDS + TPUT_FIELDS

OPTIONAL_FIELDS = (
    "server_id",
    "nodes",
    "cc",
    "cpc",
    "tpc",
    "cf_mhz",
    "l1_cache",
    "l2_cache",
    "l3_cache",
    "memory",
    "storage",
    "availability_date",
    "tput_0",
)

CANONICAL_FIELDS = OPTIONAL_FIELDS + MANDATORY_FIELDS


def _default_field_map() -> dict[str, str]:
    m = {
        "server_id": "System",
        "nodes": "Nodes",
        "cc": "Chips",
        "cpc": "Cores Per Chip",
        "tpc": "Threads Per Core",
        "cf_mhz": "CPU Speed (MHz)",
        "l1_cache": "Primary Cache",
        "l2_cache": "Secondary Cache",
        "l3_cache": "Tertiary Cache",
        "memory": "Memory",
        "storage": "Disk Drive",
        "availability_date": "Hardware Availability",
        "power_0": "Active Idle Watts",
    }
    for p in _PCT[1:]:
        m[f"power_{p}"] = f"{p}% Watts"
        m[f"tput_{p}"] = f"{p}% ssj_ops"
    return m


@dataclass(frozen=True)
class ColumnMapping:
    """Canonical field -> source column name, plus the CSV delimiter.

    Source columns not named here are dropped (vendor names, URLs, and the
    like carry no modeling signal).
    """

    fields: Mapping[str, str] = field(default_factory=_default_field_map)
    delimiter: str = ","

    def __post_init__(self) -> None:
        unknown = set(self.fields) - set(CANONICAL_FIELDS)
        if unknown:
            raise ValueError(f"unknown canonical fields in mapping: {sorted(unknown)}")


DEFAULT_MAPPING = ColumnMapping()


def load_column_mapping(path: str) -> ColumnMapping:
    """Read a ``key = Source Column`` mapping file ('#' starts a comment)."""
    fields = dict(_default_field_map())
    delimiter = ","
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "delimiter":
                delimiter = value or ","
            else:
                fields[key] = value
    return ColumnMapping(fields=fields, delimiter=delimiter)


# ---------------------------------------------------------------------------
# Raw rows and typed records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawRecordRow:
    """One source line, re-keyed to canonical field names, values verbatim."""

    line_no: int
    values: Mapping[str, str]

    def get(self, key: str) -> str:
        return str(self.values.get(key, "")).strip()


class LevelObservation(NamedTuple):
    level: float
    power_w: float
    throughput: float


@dataclass(frozen=True)
class ServerRecord:
    """One benchmarked server: parsed configuration plus 11 level readings.

    ``None`` marks a missing configuration value; ``server_id`` and the level
    readings are always present.
    """

    server_id: str
    nodes: int | None
    cc: int | None
    cpc: int | None
    tpc: int | None
    cf_mhz: float | None
    cs_l1d_kb: float | None
    cs_l1i_kb: float | None
    cs_l2_mb: float | None
    cs_l3_mb: float | None
    mmc: int | None
    mms_gb: float | None
    ddc: int | None
    dds_gb: float | None
    ddt: str | None  # "HDD" | "SSD"
    had: int | None  # proleptic Gregorian ordinal day
    levels: tuple[LevelObservation, ...]

    def __post_init__(self) -> None:
        if len(self.levels) != len(LEVELS):
            raise ValueError(f"{self.server_id}: expected {len(LEVELS)} levels, got {len(self.levels)}")
        got = tuple(obs.level for obs in self.levels)
        if got != LEVELS:
            raise ValueError(f"{self.server_id}: level grid must be 0.0..1.0 in 0.1 steps, got {got}")
        if self.levels[0].throughput != 0.0:
            raise ValueError(f"{self.server_id}: throughput at level 0.0 must be 0")
        for obs in self.levels:
            if not obs.power_w > 0:
                raise ValueError(f"{self.server_id}: power must be positive at every level")
        if self.ddt is not None and self.ddt not in ("HDD", "SSD"):
            raise ValueError(f"{self.server_id}: drive type must be HDD or SSD, got {self.ddt!r}")

    @property
    def had_year(self) -> int | None:
        return None if self.had is None else date.fromordinal(self.had).year

    def throughput_violations(self) -> list[Diagnostic]:
        """Levels where throughput decreases; flagged, never rejected."""
        out = []
        for prev, cur in zip(self.levels, self.levels[1:]):
            if cur.throughput < prev.throughput:
                out.append(
                    Diagnostic(
                        None,
                        "throughput",
                        f"{self.server_id}: throughput decreases from level "
                        f"{prev.level:.1f} to {cur.level:.1f}",
                    )
                )
        return out


# ---------------------------------------------------------------------------
# Field parsers
# ---------------------------------------------------------------------------

_NUM_RE = re.compile(r"[-+]?\d[\d,]*\.?\d*(?:[eE][-+]?\d+)?")


def _parse_number(text: str) -> float | None:
    """First numeric token in ``text`` (thousands separators tolerated)."""
    m = _NUM_RE.search(text or "")
    if not m:
        return None
    try:
        return float(m.group(0).replace(",", ""))
    except ValueError:
        return None


def _parse_count(text: str) -> int | None:
    v = _parse_number(text)
    if v is None or v < 0 or v != int(v):
        return None
    return int(v)


def date_to_ordinal(value: str | date) -> int:
    """Proleptic Gregorian ordinal day count, with 0001-01-01 mapping to 1.

    Accepts a ``datetime.date`` or an ISO ``YYYY-MM-DD`` string.  Raises
    ``ValueError`` on impossible dates (e.g. February 30).
    """
    if isinstance(value, date):
        return value.toordinal()
    parts = str(value).strip().split("-")
    if len(parts) != 3:
        raise ValueError(f"expected YYYY-MM-DD, got {value!r}")
    y, m, d = (int(p) for p in parts)
    return date(y, m, d).toordinal()


_MONTHS = {
    name: i + 1
    for i, name in enumerate(
        ["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"]
    )
}

_DATE_PATTERNS: tuple[tuple[re.Pattern[str], Callable[[re.Match[str]], tuple[int, int, int]]], ...] = (
    # 2012-07-15
    (re.compile(r"^(\d{4})-(\d{1,2})-(\d{1,2})$"), lambda m: (int(m[1]), int(m[2]), int(m[3]))),
    # Jul-2012 / July 2012 (day defaults to the 1st)
    (
        re.compile(r"^([A-Za-z]{3,9})[\s-]+(\d{4})$"),
        lambda m: (int(m[2]), _MONTHS[m[1].lower()[:3]], 1),
    ),
    # July 15, 2012
    (
        re.compile(r"^([A-Za-z]{3,9})\s+(\d{1,2}),?\s+(\d{4})$"),
        lambda m: (int(m[3]), _MONTHS[m[1].lower()[:3]], int(m[2])),
    ),
    # 07/15/2012
    (re.compile(r"^(\d{1,2})/(\d{1,2})/(\d{4})$"), lambda m: (int(m[3]), int(m[1]), int(m[2]))),
)


def parse_availability_date(text: str) -> int | None:
    """Availability-date text in any supported layout -> ordinal, else None."""
    text = (text or "").strip()
    for pattern, extract in _DATE_PATTERNS:
        m = pattern.match(text)
        if not m:
            continue
        try:
            y, mo, d = extract(m)
            return date(y, mo, d).toordinal()
        except (KeyError, ValueError):
            return None
    return None


_CACHE_COMPONENT_RE = re.compile(
    r"(\d+(?:\.\d+)?)\s*(KB|MB|GB)\s*(I&D|I|D)?", re.IGNORECASE
)


def _split_cache_text(text: str) -> tuple[list[tuple[float, str, str | None]], str]:
    """-> ([(value, unit, designator)], scope) with scope in core/chip/total."""
    lowered = text.lower()
    scope = "total"
    if "per core" in lowered:
        scope = "core"
    elif "per chip" in lowered:
        scope = "chip"
    # protect the combined instruction+data designator before splitting on '+'
    guarded = re.sub(r"\bI\s*\+\s*D\b", "I&D", text, flags=re.IGNORECASE)
    components = []
    for part in guarded.split("+"):
        m = _CACHE_COMPONENT_RE.search(part)
        if m:
            designator = m.group(3).upper() if m.group(3) else None
            components.append((float(m.group(1)), m.group(2).upper(), designator))
    return components, scope


_UNIT_TO_KB = {"KB": 1.0, "MB": 1024.0, "GB": 1024.0 * 1024.0}


def parse_cache_fields(
    l1_text: str,
    l2_text: str,
    l3_text: str,
    cc: int | None,
    cpc: int | None,
) -> tuple[float | None, float | None, float | None, float | None, list[Diagnostic]]:
    """Cache descriptors -> (CS_L1D KB/core, CS_L1I KB/core, CS_L2 MB/core, CS_L3 MB/chip).

    Descriptors written per chip are divided by cores-per-chip for L1/L2;
    whole-system totals are divided by total cores (L1/L2) or by chip count
    (L3).  Kilo/mega conversion inside cache fields is binary (1 MB = 1024 KB).
    Unrecognized grammar yields missing values plus a diagnostic, never an
    exception.
    """
    diags: list[Diagnostic] = []

    def per_core_scale(scope: str, fld: str) -> float | None:
        if scope == "core":
            return 1.0
        if scope == "chip":
            if cpc is None:
                diags.append(Diagnostic(None, fld, "per-chip descriptor but cores-per-chip unknown"))
                return None
            return 1.0 / cpc
        if cc is None or cpc is None:
            diags.append(Diagnostic(None, fld, "system-total descriptor but core count unknown"))
            return None
        return 1.0 / (cc * cpc)

    l1d = l1i = None
    if (l1_text or "").strip():
        components, scope = _split_cache_text(l1_text)
        scale = per_core_scale(scope, "l1_cache") if components else None
        if not components:
            diags.append(Diagnostic(None, "l1_cache", f"unrecognized cache descriptor {l1_text!r}"))
        elif scale is not None:
            for value, unit, designator in components:
                kb = value * _UNIT_TO_KB[unit] * scale
                if designator == "D":
                    l1d = kb
                elif designator == "I":
                    l1i = kb
                else:
                    # combined I+D amount: split evenly between the two caches
                    diags.append(Diagnostic(None, "l1_cache", "combined I+D size split evenly"))
                    l1d = kb / 2
                    l1i = kb / 2

    def combined_mb(text: str, fld: str, scale_fn: Callable[[str], float | None]) -> float | None:
        if not (text or "").strip():
            return None
        components, scope = _split_cache_text(text)
        if not components:
            diags.append(Diagnostic(None, fld, f"unrecognized cache descriptor {text!r}"))
            return None
        scale = scale_fn(scope)
        if scale is None:
            return None
        total_kb = sum(value * _UNIT_TO_KB[unit] for value, unit, _ in components)
        return total_kb / 1024.0 * scale

    l2 = combined_mb(l2_text, "l2_cache", lambda scope: per_core_scale(scope, "l2_cache"))

    def l3_scale(scope: str) -> float | None:
        if scope == "chip":
            return 1.0
        if scope == "core":
            if cpc is None:
                diags.append(Diagnostic(None, "l3_cache", "per-core descriptor but cores-per-chip unknown"))
                return None
            return float(cpc)
        if cc is None:
            diags.append(Diagnostic(None, "l3_cache", "system-total descriptor but chip count unknown"))
            return None
        return 1.0 / cc

    l3 = combined_mb(l3_text, "l3_cache", l3_scale)
    return l1d, l1i, l2, l3, diags


_MODULE_RE = re.compile(r"(\d+)\s*x\s*(\d+(?:\.\d+)?)\s*(GB|TB)", re.IGNORECASE)


def parse_memory_field(text: str) -> tuple[int | None, float | None, list[Diagnostic]]:
    """Memory descriptor -> (module count, GB per module).

    Matches the ``<count> x <size> <unit>`` pattern anywhere in the text;
    terabytes convert decimally (x1000).
    """
    m = _MODULE_RE.search(text or "")
    if not m:
        diags = []
        if (text or "").strip():
            diags.append(Diagnostic(None, "memory", f"unrecognized memory descriptor {text!r}"))
        return None, None, diags
    count = int(m.group(1))
    size = float(m.group(2)) * (1000.0 if m.group(3).upper() == "TB" else 1.0)
    return count, size, []


_SSD_TOKENS = re.compile(r"\bSSD\b|\bFLASH\b", re.IGNORECASE)
_HDD_TOKENS = re.compile(r"\bHDD\b|\bRPM\b|\bSAS\b|\bSATA\s+DISK\b", re.IGNORECASE)


def parse_storage_field(text: str) -> tuple[int | None, float | None, str | None, list[Diagnostic]]:
    """Storage descriptor -> (drive count, GB per drive, drive type)."""
    diags: list[Diagnostic] = []
    count: int | None = None
    size: float | None = None
    m = _MODULE_RE.search(text or "")
    if m:
        count = int(m.group(1))
        size = float(m.group(2)) * (1000.0 if m.group(3).upper() == "TB" else 1.0)
    elif (text or "").strip():
        diags.append(Diagnostic(None, "storage", f"no '<count> x <size>' pattern in {text!r}"))

    ddt: str | None = None
    if _SSD_TOKENS.search(text or ""):
        ddt = "SSD"
    elif _HDD_TOKENS.search(text or ""):
        ddt = "HDD"
    elif (text or "").strip():
        diags.append(Diagnostic(None, "storage", f"drive type not recognized in {text!r}"))
    return count, size, ddt, diags


# ---------------------------------------------------------------------------
# CSV parsing
# ---------------------------------------------------------------------------


def parse_results_csv(
    text: str, mapping: ColumnMapping = DEFAULT_MAPPING
) -> tuple[list[RawRecordRow], list[Diagnostic]]:
    """Split a delimiter-separated export into canonical raw rows.

    Malformed lines (wrong column count) are reported as diagnostics rather
    than silently dropped.  Raises ``EmptyInputError`` for an empty stream and
    ``SchemaError`` when a mandatory mapped column is absent from the header.
    """
    reader = csv.reader(io.StringIO(text), delimiter=mapping.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyInputError("input contains no header row") from None

    index_of = {name: i for i, name in enumerate(header)}
    for canonical in MANDATORY_FIELDS:
        source = mapping.fields.get(canonical)
        if source is None:
            raise SchemaError(f"mapping does not name a source column for {canonical!r}")
        if source not in index_of:
            raise SchemaError(f"mandatory column {source!r} (field {canonical!r}) missing from header")

    mapped = [
        (canonical, index_of[source])
        for canonical, source in mapping.fields.items()
        if source in index_of
    ]

    rows: list[RawRecordRow] = []
    diags: list[Diagnostic] = []
    for line_no, cells in enumerate(reader, start=2):
        if not cells:
            continue  # blank line
        if len(cells) != len(header):
            diags.append(
                Diagnostic(line_no, None, f"expected {len(header)} columns, got {len(cells)}")
            )
            continue
        rows.append(RawRecordRow(line_no, {canon: cells[i] for canon, i in mapped}))
    return rows, diags


def record_from_raw(raw: RawRecordRow) -> tuple[ServerRecord | None, list[Diagnostic]]:
    """Type one raw row; unparseable configuration cells become missing values.

    Only a broken level reading (power absent or non-positive) rejects the
    record, since the targets cannot be formed without it.
    """
    diags: list[Diagnostic] = []

    def note(fld: str, message: str) -> None:
        diags.append(Diagnostic(raw.line_no, fld, message))

    cc = _parse_count(raw.get("cc"))
    cpc = _parse_count(raw.get("cpc"))
    tpc = _parse_count(raw.get("tpc"))
    for fld, val in (("cc", cc), ("cpc", cpc), ("tpc", tpc)):
        if val is None and raw.get(fld):
            note(fld, f"not a count: {raw.get(fld)!r}")
    cf = _parse_number(raw.get("cf_mhz"))
    if cf is None and raw.get("cf_mhz"):
        note("cf_mhz", f"not a frequency: {raw.get('cf_mhz')!r}")

    l1d, l1i, l2, l3, cache_diags = parse_cache_fields(
        raw.get("l1_cache"), raw.get("l2_cache"), raw.get("l3_cache"), cc, cpc
    )
    diags.extend(replace(d, row=raw.line_no) for d in cache_diags)

    mmc, mms, mem_diags = parse_memory_field(raw.get("memory"))
    diags.extend(replace(d, row=raw.line_no) for d in mem_diags)

    ddc, dds, ddt, sto_diags = parse_storage_field(raw.get("storage"))
    diags.extend(replace(d, row=raw.line_no) for d in sto_diags)

    had = parse_availability_date(raw.get("availability_date"))
    if had is None and raw.get("availability_date"):
        note("availability_date", f"unparseable date {raw.get('availability_date')!r}")

    nodes = _parse_count(raw.get("nodes"))
    if nodes is None:
        note("nodes", "node count absent; treated as single-node")
        nodes = 1

    levels: list[LevelObservation] = []
    for pct, level in zip(_PCT, LEVELS):
        power = _parse_number(raw.get(f"power_{pct}"))
        if power is None or power <= 0:
            note(f"power_{pct}", f"power missing or non-positive: {raw.get(f'power_{pct}')!r}")
            return None, diags
        if pct == 0:
            tput = _parse_number(raw.get("tput_0")) if raw.get("tput_0") else 0.0
            tput = 0.0 if tput is None else tput
        else:
            tput = _parse_number(raw.get(f"tput_{pct}"))
            if tput is None:
                note(f"tput_{pct}", f"throughput missing: {raw.get(f'tput_{pct}')!r}")
                return None, diags
        levels.append(LevelObservation(level, power, tput))
    if levels[0].throughput != 0.0:
        note("tput_0", f"throughput at idle forced to 0 (was {levels[0].throughput})")
        levels[0] = LevelObservation(0.0, levels[0].power_w, 0.0)

    server_id = raw.get("server_id") or f"row{raw.line_no}"
    record = ServerRecord(
        server_id=server_id,
        nodes=nodes,
        cc=cc,
        cpc=cpc,
        tpc=tpc,
        cf_mhz=cf,
        cs_l1d_kb=l1d,
        cs_l1i_kb=l1i,
        cs_l2_mb=l2,
        cs_l3_mb=l3,
        mmc=mmc,
        mms_gb=mms,
        ddc=ddc,
        dds_gb=dds,
        ddt=ddt,
        had=had,
        levels=tuple(levels),
    )
    diags.extend(replace(d, row=raw.line_no) for d in record.throughput_violations())
    return record, diags


def ingest_results_csv(
    text: str, mapping: ColumnMapping = DEFAULT_MAPPING
) -> tuple[list[ServerRecord], list[Diagnostic]]:
    """Full ingestion path: CSV text -> typed records + diagnostics."""
    rows, diags = parse_results_csv(text, mapping)
    records: list[ServerRecord] = []
    seen: dict[str, int] = {}
    for raw in rows:
        record, row_diags = record_from_raw(raw)
        diags.extend(row_diags)
        if record is None:
            continue
        if record.server_id in seen:
            seen[record.server_id] += 1
            new_id = f"{record.server_id}#{seen[record.server_id]}"
            diags.append(
                Diagnostic(raw.line_no, "server_id", f"duplicate id; renamed to {new_id!r}")
            )
            record = replace(record, server_id=new_id)
        else:
            seen[record.server_id] = 1
        records.append(record)
    return records, diags


# ---------------------------------------------------------------------------
# Feature schema and design matrices
# ---------------------------------------------------------------------------

BASE_FEATURES: tuple[str, ...] = (
    "CC",
    "CPC",
    "TPC",
    "CF",
    "CS_L1D",
    "CS_L1I",
    "CS_L2",
    "CS_L3",
    "MMC",
    "MMS",
    "DDC",
    "DDS",
    "DDT_HDD",
    "DDT_SSD",
    "HAD",
)


@dataclass(frozen=True)
class FeatureSchema:
    """Fixed feature ordering for one target.

    The workload-level column ``L`` trails the configuration features and is
    present only for the per-level targets (power, performance-to-power).
    """

    target_kind: TargetKind
    names: tuple[str, ...]

    @classmethod
    def for_target(cls, target_kind: TargetKind) -> "FeatureSchema":
        names = BASE_FEATURES
        if target_kind is not TargetKind.MAX_THROUGHPUT:
            names = names + ("L",)
        return cls(target_kind=target_kind, names=names)

    @property
    def has_level(self) -> bool:
        return self.names[-1] == "L"

    @property
    def n_features(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class DesignMatrix:
    """Numeric rows (NaN marks missing), target vector, and server grouping.

    Rows belonging to one server are contiguous and never mix features from
    two servers.  Treated as immutable after construction.
    """

    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    group_ids: tuple[str, ...]
    target_kind: TargetKind

    def __post_init__(self) -> None:
        if self.X.shape != (len(self.y), self.schema.n_features):
            raise ValueError("feature matrix shape disagrees with schema/targets")
        if len(self.group_ids) != len(self.y):
            raise ValueError("one group id per row required")

    @property
    def n_rows(self) -> int:
        return int(self.X.shape[0])

    def server_ids(self) -> tuple[str, ...]:
        """Distinct servers in order of first appearance."""
        seen: dict[str, None] = {}
        for g in self.group_ids:
            seen.setdefault(g)
        return tuple(seen)


def record_features(record: ServerRecord) -> np.ndarray:
    """Configuration features in ``BASE_FEATURES`` order; NaN where missing."""

    def as_float(v: float | int | None) -> float:
        return math.nan if v is None else float(v)

    if record.ddt is None:
        ddt_hdd = ddt_ssd = math.nan
    else:
        ddt_hdd = 1.0 if record.ddt == "HDD" else 0.0
        ddt_ssd = 1.0 - ddt_hdd
    return np.array(
        [
            as_float(record.cc),
            as_float(record.cpc),
            as_float(record.tpc),
            as_float(record.cf_mhz),
            as_float(record.cs_l1d_kb),
            as_float(record.cs_l1i_kb),
            as_float(record.cs_l2_mb),
            as_float(record.cs_l3_mb),
            as_float(record.mmc),
            as_float(record.mms_gb),
            as_float(record.ddc),
            as_float(record.dds_gb),
            ddt_hdd,
            ddt_ssd,
            as_float(record.had),
        ],
        dtype=np.float64,
    )


def build_design_matrix(
    records: Sequence[ServerRecord], target_kind: TargetKind
) -> tuple[DesignMatrix, list[Diagnostic]]:
    """Lay records out as (X, y) for one target.

    Multi-node servers are dropped (reported).  Per-level targets produce 11
    rows per server with a trailing L feature; max throughput produces one row
    per server from the 100% level.
    """
    schema = FeatureSchema.for_target(target_kind)
    diags: list[Diagnostic] = []
    x_rows: list[np.ndarray] = []
    y_vals: list[float] = []
    groups: list[str] = []
    dropped_multinode = 0

    for record in records:
        if record.nodes is not None and record.nodes > 1:
            dropped_multinode += 1
            continue
        base = record_features(record)
        if target_kind is TargetKind.MAX_THROUGHPUT:
            full = next((obs for obs in record.levels if obs.level == 1.0), None)
            if full is None:  # unreachable for validated records; kept defensive
                diags.append(Diagnostic(None, None, f"{record.server_id}: no 100% level; excluded"))
                continue
            x_rows.append(base)
            y_vals.append(full.throughput)
            groups.append(record.server_id)
        else:
            for obs in record.levels:
                x_rows.append(np.concatenate([base, [obs.level]]))
                if target_kind is TargetKind.POWER:
                    y_vals.append(obs.power_w)
                else:
                    y_vals.append(obs.throughput / obs.power_w)
                groups.append(record.server_id)

    if dropped_multinode:
        diags.append(Diagnostic(None, None, f"dropped {dropped_multinode} multi-node server(s)"))
    X = np.array(x_rows, dtype=np.float64) if x_rows else np.empty((0, schema.n_features))
    matrix = DesignMatrix(
        schema=schema,
        X=X,
        y=np.array(y_vals, dtype=np.float64),
        group_ids=tuple(groups),
        target_kind=target_kind,
    )
    return matrix, diags


# ---------------------------------------------------------------------------
# Canonical CSV (audit format, round-trip safe)
# ---------------------------------------------------------------------------

CANONICAL_HEADER = (
    "server_id",
    "nodes",
    "cc",
    "cpc",
    "tpc",
    "cf_mhz",
    "cs_l1d_kb",
    "cs_l1i_kb",
    "cs_l2_mb",
    "cs_l3_mb",
    "mmc",
    "mms_gb",
    "ddc",
    "dds_gb",
    "ddt",
    "had",
    "level",
    "power_w",
    "throughput_ssj_ops",
)


def _cell(v: float | int | str | None) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)  # shortest round-trip representation
    return str(v)


def write_canonical_csv(records: Sequence[ServerRecord]) -> str:
    """One row per (server, level); empty cells mark missing values."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CANONICAL_HEADER)
    for r in records:
        config = [
            r.server_id,
            _cell(r.nodes),
            _cell(r.cc),
            _cell(r.cpc),
            _cell(r.tpc),
            _cell(r.cf_mhz),
            _cell(r.cs_l1d_kb),
            _cell(r.cs_l1i_kb),
            _cell(r.cs_l2_mb),
            _cell(r.cs_l3_mb),
            _cell(r.mmc),
            _cell(r.mms_gb),
            _cell(r.ddc),
            _cell(r.dds_gb),
            _cell(r.ddt),
            _cell(r.had),
        ]
        for obs in r.levels:
            writer.writerow(config + [_cell(obs.level), _cell(obs.power_w), _cell(obs.throughput)])
    return out.getvalue()


def read_canonical_csv(text: str) -> tuple[list[ServerRecord], list[Diagnostic]]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = tuple(next(reader))
    except StopIteration:
        raise EmptyInputError("canonical CSV has no header") from None
    if header != CANONICAL_HEADER:
        raise SchemaError(f"unexpected canonical header: {header}")

    def opt_float(s: str) -> float | None:
        return None if s == "" else float(s)

    def opt_int(s: str) -> int | None:
        return None if s == "" else int(float(s))

    diags: list[Diagnostic] = []
    grouped: dict[str, dict] = {}
    order: list[str] = []
    for line_no, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != len(header):
            diags.append(Diagnostic(line_no, None, f"expected {len(header)} columns, got {len(cells)}"))
            continue
        row = dict(zip(header, cells))
        sid = row["server_id"]
        if sid not in grouped:
            order.append(sid)
            grouped[sid] = {
                "config": row,
                "levels": [],
            }
        grouped[sid]["levels"].append(
            LevelObservation(float(row["level"]), float(row["power_w"]), float(row["throughput_ssj_ops"]))
        )

    records: list[ServerRecord] = []
    for sid in order:
        row = grouped[sid]["config"]
        levels = tuple(sorted(grouped[sid]["levels"], key=lambda obs: obs.level))
        try:
            records.append(
                ServerRecord(
                    server_id=sid,
                    nodes=opt_int(row["nodes"]),
                    cc=opt_int(row["cc"]),
                    cpc=opt_int(row["cpc"]),
                    tpc=opt_int(row["tpc"]),
                    cf_mhz=opt_float(row["cf_mhz"]),
                    cs_l1d_kb=opt_float(row["cs_l1d_kb"]),
                    cs_l1i_kb=opt_float(row["cs_l1i_kb"]),
                    cs_l2_mb=opt_float(row["cs_l2_mb"]),
                    cs_l3_mb=opt_float(row["cs_l3_mb"]),
                    mmc=opt_int(row["mmc"]),
                    mms_gb=opt_float(row["mms_gb"]),
                    ddc=opt_int(row["ddc"]),
                    dds_gb=opt_float(row["dds_gb"]),
                    ddt=row["ddt"] or None,
                    had=opt_int(row["had"]),
                    levels=levels,
                )
            )
        except ValueError as exc:
            diags.append(Diagnostic(None, None, f"{sid}: {exc}"))
    return records, diags


# ---------------------------------------------------------------------------
# Synthetic corpus with known ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTruth:
    """Documented ground-truth constants behind the synthetic generator.

    Max throughput:  th_scale * CC * CPC * CF * (1 + th_cache_gain * ln(1 + CS_L3))
    Power curve:     p_idle(year) + (p_max(CC, MMC) - p_idle(year)) * L ** gamma
    Efficiency:      L * Th_max / P_L  (exact in the noiseless corpus)

    Setting ``shift_year`` makes servers available from that year onward obey
    shifted constants, so models trained on earlier servers degrade once the
    test horizon crosses the shift.
    """

    th_scale: float = 280.0
    th_cache_gain: float = 0.18
    p_idle_base: float = 60.0
    p_idle_span: float = 140.0
    p_idle_decay: float = 0.88
    p_max_base: float = 160.0
    p_max_per_chip: float = 68.0
    p_max_per_dimm: float = 5.5
    gamma: float = 1.6
    base_year: int = 2004
    generation_years: int = 4  # idle power improves in hardware generations
    shift_year: int | None = None
    shift_th_factor: float = 1.9
    shift_idle_factor: float = 0.5

    def _shifted(self, year: int) -> bool:
        return self.shift_year is not None and year >= self.shift_year

    def th_max(self, cc: float, cpc: float, cf: float, cs_l3: float, year: int) -> float:
        th = self.th_scale * cc * cpc * cf * (1.0 + self.th_cache_gain * math.log1p(cs_l3))
        return th * self.shift_th_factor if self._shifted(year) else th

    def p_idle(self, year: int) -> float:
        gen_year = self.base_year + self.generation_years * (
            (year - self.base_year) // self.generation_years
        )
        idle = self.p_idle_base + self.p_idle_span * self.p_idle_decay ** (gen_year - self.base_year)
        return idle * self.shift_idle_factor if self._shifted(year) else idle

    def p_max(self, cc: float, mmc: float) -> float:
        return self.p_max_base + self.p_max_per_chip * cc + self.p_max_per_dimm * mmc

    def power(self, cc: float, mmc: float, year: int, level: float) -> float:
        idle = self.p_idle(year)
        return idle + (self.p_max(cc, mmc) - idle) * level**self.gamma

    def perf(self, cc: float, cpc: float, cf: float, cs_l3: float, mmc: float, year: int, level: float) -> float:
        return level * self.th_max(cc, cpc, cf, cs_l3, year) / self.power(cc, mmc, year, level)


@dataclass(frozen=True)
class LinearTruth:
    """Alternative generator rule whose power target is exactly linear in the
    schema features; lets linear learners reach R^2 ~ 1 on noiseless data."""

    p_base: float = 120.0
    p_per_chip: float = 30.0
    p_per_dimm: float = 4.0
    p_per_level: float = 110.0
    p_per_year: float = -6.0
    th_base: float = 2.0e5
    th_per_chip: float = 5.0e4
    th_per_core: float = 3.0e4
    th_per_mhz: float = 400.0
    base_year: int = 2004

    def power(self, cc: float, mmc: float, had: int, level: float) -> float:
        years = (had - date(self.base_year, 1, 1).toordinal()) / 365.2425
        return self.p_base + self.p_per_chip * cc + self.p_per_dimm * mmc + self.p_per_level * level + self.p_per_year * years

    def th_max(self, cc: float, cpc: float, cf: float) -> float:
        return self.th_base + self.th_per_chip * cc + self.th_per_core * cpc + self.th_per_mhz * cf


@dataclass(frozen=True)
class SyntheticSpec:
    n_servers: int
    noise_sd: float = 0.03
    seed: int = 0
    year_range: tuple[int, int] = (2004, 2023)
    missing_rate: float = 0.0
    linear_mode: bool = False
    truth: SyntheticTruth = field(default_factory=SyntheticTruth)
    linear_truth: LinearTruth = field(default_factory=LinearTruth)


## Feature grids are deliberately coarse and correlated the way real fleets
## are (cores per chip and cache sizes grow across hardware generations,
## module counts scale with sockets): a moderate number of distinct
## configuration cells keeps per-cell sample counts high enough that tree
## ensembles can average measurement noise away.
_CC_CHOICES = np.array([1, 2, 4])
_CC_WEIGHTS = np.array([0.3, 0.55, 0.15])
_CPC_BY_ERA = (np.array([4, 8]), np.array([8, 16]), np.array([16, 32]))
_CF_CHOICES = np.array([2200, 2600, 3000], dtype=float)
_L1_CHOICES = np.array([16.0, 32.0, 48.0, 64.0])
_L2_CHOICES = np.array([0.25, 0.5, 1.0, 2.0])
_L3_BY_CPC = {4: 8.0, 8: 16.0, 16: 16.0, 32: 32.0}
_MMC_PER_CHIP = np.array([4, 8])
_MMS_CHOICES = np.array([4.0, 8.0, 16.0, 32.0, 64.0])
_DDS_CHOICES = np.array([120.0, 240.0, 480.0, 960.0, 1920.0])


def _era(year: int, lo_year: int, hi_year: int) -> int:
    """0, 1, or 2: thirds of the generated year range."""
    span = max(hi_year - lo_year, 1)
    return min(2, 3 * (year - lo_year) // span)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[ServerRecord], SyntheticTruth | LinearTruth]:
    """Seeded corpus with known ground truth; bit-identical per seed.

    Measurement noise is multiplicative Gaussian on the power readings (the
    metered analog quantity); throughput is an exact operation count, so it
    carries no noise and stays exactly 0 at idle.  ``missing_rate`` knocks
    out a fraction of the optional configuration cells to exercise
    imputation.
    """
    if spec.n_servers < 1:
        raise ValueError("n_servers must be >= 1")
    if spec.noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    if not 0.0 <= spec.missing_rate < 1.0:
        raise ValueError("missing_rate must be in [0, 1)")

    rng = np.random.default_rng(spec.seed)
    lo_year, hi_year = spec.year_range
    truth = spec.linear_truth if spec.linear_mode else spec.truth
    records: list[ServerRecord] = []
    for i in range(spec.n_servers):
        year = int(rng.integers(lo_year, hi_year + 1))
        era = _era(year, lo_year, hi_year)
        cc = int(rng.choice(_CC_CHOICES, p=_CC_WEIGHTS))
        cpc = int(rng.choice(_CPC_BY_ERA[era]))
        tpc = int(rng.choice([1, 2]))
        cf = float(rng.choice(_CF_CHOICES))
        l1d = float(rng.choice(_L1_CHOICES))
        l1i = float(rng.choice(_L1_CHOICES))
        l2 = float(rng.choice(_L2_CHOICES))
        l3 = _L3_BY_CPC[cpc]
        mmc = int(rng.choice(_MMC_PER_CHIP)) * cc
        mms = float(rng.choice(_MMS_CHOICES))
        ddc = int(rng.integers(1, 5))
        dds = float(rng.choice(_DDS_CHOICES))
        p_ssd = min(0.9, max(0.05, 0.05 + 0.07 * (year - 2004)))
        ddt = "SSD" if rng.random() < p_ssd else "HDD"
        had = date(year, int(rng.integers(1, 13)), int(rng.integers(1, 29))).toordinal()

        if spec.linear_mode:
            th_true = spec.linear_truth.th_max(cc, cpc, cf)
        else:
            th_true = spec.truth.th_max(cc, cpc, cf, l3, year)

        levels: list[LevelObservation] = []
        for level in LEVELS:
            if spec.linear_mode:
                p_true = spec.linear_truth.power(cc, mmc, had, level)
            else:
                p_true = spec.truth.power(cc, mmc, year, level)
            p_noise = 1.0 + rng.normal(0.0, spec.noise_sd) if spec.noise_sd else 1.0
            power = p_true * max(0.05, p_noise)
            tput = level * th_true
            levels.append(LevelObservation(level, power, tput))

        record = ServerRecord(
            server_id=f"synth{i:05d}",
            nodes=1,
            cc=cc,
            cpc=cpc,
            tpc=tpc,
            cf_mhz=cf,
            cs_l1d_kb=l1d,
            cs_l1i_kb=l1i,
            cs_l2_mb=l2,
            cs_l3_mb=l3,
            mmc=mmc,
            mms_gb=mms,
            ddc=ddc,
            dds_gb=dds,
            ddt=ddt,
            had=had,
            levels=tuple(levels),
        )
        if spec.missing_rate > 0.0:
            # only optional configuration fields may go missing
            for fld in ("tpc", "mms_gb", "dds_gb", "cs_l1d_kb", "cs_l1i_kb", "ddt"):
                if rng.random() < spec.missing_rate:
                    record = replace(record, **{fld: None})
        records.append(record)
    return records, truth
