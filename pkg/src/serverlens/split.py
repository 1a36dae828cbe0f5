"""Server-atomic data splitting: random 80/10/10 and chronological backtests."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Mapping

import numpy as np

from .dataset import DesignMatrix


class SplitScheme(Enum):
    RANDOM_BY_SERVER = "random_by_server"
    TIME_SERIES = "time_series"


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitIndices:
    """Disjoint row-index sets; every server's rows land in exactly one set."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    scheme: SplitScheme
    metadata: Mapping[str, int | str] = field(default_factory=dict)
    empty_test: bool = False

    def partition_of(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


def _rows_by_server(matrix: DesignMatrix) -> dict[str, np.ndarray]:
    rows: dict[str, list[int]] = {}
    for i, g in enumerate(matrix.group_ids):
        rows.setdefault(g, []).append(i)
    return {g: np.array(ix, dtype=np.int64) for g, ix in rows.items()}


def _expand(server_rows: dict[str, np.ndarray], servers: list[str]) -> np.ndarray:
    if not servers:
        return np.empty(0, dtype=np.int64)
    return np.concatenate([server_rows[s] for s in servers])


def random_server_split(matrix: DesignMatrix, seed: int) -> SplitIndices:
    """Shuffle servers by seed; floor(0.8 S) train, floor(0.1 S) validation,
    remainder test.  All rows of a server move together."""
    server_rows = _rows_by_server(matrix)
    servers = list(matrix.server_ids())
    if len(servers) < 3:
        raise SplitError(f"need at least 3 servers to split, got {len(servers)}")
    rng = np.random.default_rng(seed)
    order = [servers[i] for i in rng.permutation(len(servers))]
    n = len(order)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    return SplitIndices(
        train=_expand(server_rows, order[:n_train]),
        validation=_expand(server_rows, order[n_train : n_train + n_val]),
        test=_expand(server_rows, order[n_train + n_val :]),
        scheme=SplitScheme.RANDOM_BY_SERVER,
        metadata={"seed": int(seed)},
    )


def time_series_split(matrix: DesignMatrix, baseline_year: int, horizon: int) -> SplitIndices:
    """Chronological split for prospective experiments.

    Servers available before Jan 1 of the baseline year are ordered by
    availability date (ties by server id); the first 80% by server count
    train, the rest validate.  The test set is every server whose
    availability year equals baseline_year + horizon; when none exists the
    result carries an empty-test marker rather than failing.
    """
    if not 1 <= horizon <= 5:
        raise SplitError(f"horizon must be in 1..5, got {horizon}")
    had_col = matrix.schema.index("HAD")
    server_rows = _rows_by_server(matrix)
    had_of: dict[str, float] = {}
    for sid, rows in server_rows.items():
        had_of[sid] = float(matrix.X[rows[0], had_col])

    cutoff = date(baseline_year, 1, 1).toordinal()
    target_year = baseline_year + horizon
    past = sorted(
        (s for s, h in had_of.items() if not np.isnan(h) and h < cutoff),
        key=lambda s: (had_of[s], s),
    )
    if not past:
        raise SplitError(f"no servers available before {baseline_year}")
    test_servers = sorted(
        s
        for s, h in had_of.items()
        if not np.isnan(h) and date.fromordinal(int(h)).year == target_year
    )
    n_train = int(0.8 * len(past))
    return SplitIndices(
        train=_expand(server_rows, past[:n_train]),
        validation=_expand(server_rows, past[n_train:]),
        test=_expand(server_rows, test_servers),
        scheme=SplitScheme.TIME_SERIES,
        metadata={"baseline_year": int(baseline_year), "horizon": int(horizon)},
        empty_test=not test_servers,
    )


def write_split(split: SplitIndices, matrix: DesignMatrix) -> str:
    """Line-oriented audit format: one partition per line, server ids after."""
    out = io.StringIO()
    out.write(f"# scheme={split.scheme.value}")
    for key, value in sorted(split.metadata.items()):
        out.write(f" {key}={value}")
    out.write("\n")
    for name, rows in split.partition_of().items():
        seen: dict[str, None] = {}
        for i in rows:
            seen.setdefault(matrix.group_ids[int(i)])
        out.write(f"{name}: {' '.join(seen)}\n")
    return out.getvalue()


def read_split_servers(text: str) -> dict[str, list[str]]:
    parts: dict[str, list[str]] = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        name, _, ids = line.partition(":")
        parts[name.strip()] = ids.split()
    return parts
