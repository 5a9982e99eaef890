"""Panel data: grouping structure, validation, CSV I/O and covariate builders."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

OVERALL = "overall"
CORE_COLUMNS = ("series_id", "time", "y")
SIZE_COLUMNS = ("exposure", "trials")


class PanelError(ValueError):
    """Raised for malformed or invalid panel input."""


@dataclass(frozen=True)
class GroupingSpec:
    """Ordered subgrouping factors and their ordered level labels.

    The overall pseudo-factor (index 0, one level) is implicit and is
    never part of ``factors``.
    """

    factors: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        names = [name for name, _ in self.factors]
        if len(set(names)) != len(names):
            raise PanelError(f"duplicate factor names in {names}")
        for name, levels in self.factors:
            if name == OVERALL:
                raise PanelError(f"factor name {OVERALL!r} is reserved")
            if len(levels) < 1:
                raise PanelError(f"factor {name!r} has no levels")
            if len(set(levels)) != len(levels):
                raise PanelError(f"duplicate level labels in factor {name!r}")

    @classmethod
    def from_dict(cls, factors: Mapping[str, Sequence[str]]) -> "GroupingSpec":
        return cls(tuple((str(k), tuple(str(v) for v in vals)) for k, vals in factors.items()))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.factors)

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    def levels(self, factor: str) -> tuple[str, ...]:
        for name, levels in self.factors:
            if name == factor:
                return levels
        raise PanelError(f"unknown factor {factor!r}")

    def level_index(self, factor: str, level: str) -> int:
        levels = self.levels(factor)
        try:
            return levels.index(level)
        except ValueError:
            raise PanelError(f"unknown level {level!r} for factor {factor!r}") from None

    @property
    def units(self) -> list[tuple[str, str]]:
        """Flattened (factor, level) list, overall first."""
        out = [(OVERALL, OVERALL)]
        for name, levels in self.factors:
            out.extend((name, lev) for lev in levels)
        return out

    @property
    def unit_factor(self) -> np.ndarray:
        """Factor index (0 = overall) of every unit."""
        out = [0]
        for j, (_, levels) in enumerate(self.factors, start=1):
            out.extend([j] * len(levels))
        return np.asarray(out, dtype=int)

    @property
    def unit_offsets(self) -> np.ndarray:
        """Index of the first unit of each factor, overall included."""
        offs = [0, 1]
        for _, levels in self.factors:
            offs.append(offs[-1] + len(levels))
        return np.asarray(offs[:-1], dtype=int)

    @property
    def n_units(self) -> int:
        return 1 + sum(len(levels) for _, levels in self.factors)

    def to_dict(self) -> dict[str, list[str]]:
        return {name: list(levels) for name, levels in self.factors}


@dataclass
class Panel:
    """Observed panel of series over integer time ``0..n_times-1``.

    Only observed cells are stored; any (series, t) combination absent
    from ``obs_series``/``obs_time`` is missing and contributes nothing
    to the likelihood.
    """

    grouping: GroupingSpec
    series_ids: tuple[str, ...]
    series_levels: np.ndarray  # (n_series, J) level indices
    obs_series: np.ndarray
    obs_time: np.ndarray
    y: np.ndarray
    size: np.ndarray
    size_kind: str = "exposure"
    covariates: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    covariate_names: tuple[str, ...] = ()
    n_times: int | None = None

    def __post_init__(self):
        self.series_ids = tuple(str(s) for s in self.series_ids)
        self.series_levels = np.asarray(self.series_levels, dtype=int).reshape(
            len(self.series_ids), self.grouping.n_factors
        )
        self.obs_series = np.asarray(self.obs_series, dtype=int)
        self.obs_time = np.asarray(self.obs_time, dtype=int)
        self.y = np.asarray(self.y, dtype=np.int64)
        n = self.obs_series.shape[0]
        if self.size_kind == "trials":
            self.size = np.asarray(self.size, dtype=np.int64)
        else:
            self.size = np.asarray(self.size, dtype=float)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.size == 0:
            cov = np.zeros((n, len(self.covariate_names)))
        self.covariates = cov.reshape(n, len(self.covariate_names))
        self.covariate_names = tuple(self.covariate_names)
        if self.n_times is None:
            self.n_times = int(self.obs_time.max()) + 1 if n else 0
        self.validate()

    @property
    def n_obs(self) -> int:
        return int(self.obs_series.shape[0])

    @property
    def n_series(self) -> int:
        return len(self.series_ids)

    @property
    def missing(self) -> list[tuple[str, int]]:
        present = set(zip(self.obs_series.tolist(), self.obs_time.tolist()))
        return [
            (sid, t)
            for i, sid in enumerate(self.series_ids)
            for t in range(self.n_times)
            if (i, t) not in present
        ]

    def validate(self) -> None:
        n = self.n_obs
        for name, arr in (("obs_time", self.obs_time), ("y", self.y), ("size", self.size)):
            if arr.shape != (n,):
                raise PanelError(f"{name} has shape {arr.shape}, expected ({n},)")
        if self.size_kind not in SIZE_COLUMNS:
            raise PanelError(f"size_kind must be one of {SIZE_COLUMNS}")
        if len(set(self.series_ids)) != len(self.series_ids):
            raise PanelError("duplicate series ids")
        if n and (self.obs_series.min() < 0 or self.obs_series.max() >= self.n_series):
            raise PanelError("observation references an unknown series")
        for j, (name, levels) in enumerate(self.grouping.factors):
            col = self.series_levels[:, j]
            if col.size and (col.min() < 0 or col.max() >= len(levels)):
                raise PanelError(f"level index out of range for factor {name!r}")
        if np.any(self.y < 0):
            raise PanelError("negative response")
        if self.size_kind == "exposure":
            if not np.all(np.isfinite(self.size)) or np.any(self.size <= 0):
                raise PanelError("exposure must be positive")
        else:
            if np.any(self.size <= 0):
                raise PanelError("trials must be positive")
            if np.any(self.y > self.size):
                bad = int(np.argmax(self.y > self.size))
                raise PanelError(
                    f"binomial row has y={self.y[bad]} > trials={self.size[bad]}"
                )
        if n:
            if self.obs_time.min() < 0:
                raise PanelError("negative time index")
            if self.obs_time.max() >= self.n_times:
                raise PanelError(f"time index {int(self.obs_time.max())} outside 0..{self.n_times - 1}")
            key = self.obs_series * (self.n_times + 1) + self.obs_time
            if np.unique(key).size != n:
                raise PanelError("duplicate (series, time) observation")
        if not np.all(np.isfinite(self.covariates)):
            raise PanelError("non-finite covariate value")

    def with_covariates(self, columns: Mapping[str, np.ndarray]) -> "Panel":
        """Return a copy with extra covariate columns indexed by time.

        Each value is a length-``n_times`` array (as built by
        :func:`seasonal_harmonics` or :func:`piecewise_ramp`) or a 2-D
        ``(n_times, k)`` block whose columns are suffixed ``_1.._k``.
        """
        names = list(self.covariate_names)
        blocks = [self.covariates]
        for name, col in columns.items():
            col = np.asarray(col, dtype=float)
            if col.ndim == 1:
                col = col[:, None]
                new = [name]
            else:
                new = [f"{name}_{h + 1}" for h in range(col.shape[1])]
            if col.shape[0] != self.n_times:
                raise PanelError(f"covariate {name!r} has {col.shape[0]} rows, expected T={self.n_times}")
            dup = set(new) & set(names)
            if dup:
                raise PanelError(f"duplicate covariate names {sorted(dup)}")
            names.extend(new)
            blocks.append(col[self.obs_time])
        return Panel(
            grouping=self.grouping,
            series_ids=self.series_ids,
            series_levels=self.series_levels,
            obs_series=self.obs_series,
            obs_time=self.obs_time,
            y=self.y,
            size=self.size,
            size_kind=self.size_kind,
            covariates=np.hstack(blocks),
            covariate_names=tuple(names),
            n_times=self.n_times,
        )

    def same_as(self, other: "Panel") -> bool:
        return (
            self.grouping == other.grouping
            and self.series_ids == other.series_ids
            and np.array_equal(self.series_levels, other.series_levels)
            and np.array_equal(self.obs_series, other.obs_series)
            and np.array_equal(self.obs_time, other.obs_time)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.size, other.size)
            and self.size_kind == other.size_kind
            and np.array_equal(self.covariates, other.covariates)
            and self.covariate_names == other.covariate_names
            and self.n_times == other.n_times
        )


def _fmt_real(x: float) -> str:
    return format(float(x), ".17g")


def write_panel(panel: Panel, path: str | os.PathLike) -> None:
    """Write ``panel`` in the documented CSV schema.

    Rows run over every (series, time) cell in order; missing cells are
    written with an empty ``y`` so that series and times without any
    observation survive a reload.
    """
    header = ["series_id", "time", "y", panel.size_kind, *panel.grouping.names, *panel.covariate_names]
    cell = {(int(i), int(t)): o for o, (i, t) in enumerate(zip(panel.obs_series, panel.obs_time))}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, sid in enumerate(panel.series_ids):
            levels = [panel.grouping.factors[j][1][panel.series_levels[i, j]] for j in range(panel.grouping.n_factors)]
            for t in range(panel.n_times):
                o = cell.get((i, t))
                if o is None:
                    writer.writerow([sid, t, "", "", *levels, *[""] * len(panel.covariate_names)])
                    continue
                size = panel.size[o]
                writer.writerow([
                    sid, t, int(panel.y[o]), int(size) if panel.size_kind == "trials" else _fmt_real(size),
                    *levels, *(_fmt_real(v) for v in panel.covariates[o]),
                ])


def _parse_int(text: str, what: str, line: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise PanelError(f"line {line}: cannot parse {what} {text!r}") from None
    if not value.is_integer():
        raise PanelError(f"line {line}: {what} must be an integer, got {text!r}")
    return int(value)


def _parse_real(text: str, what: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise PanelError(f"line {line}: cannot parse {what} {text!r}") from None
    if not math.isfinite(value):
        raise PanelError(f"line {line}: {what} is not finite")
    return value


def load_panel(path: str | os.PathLike, spec: GroupingSpec) -> Panel:
    """Read and validate a panel CSV.

    Rows with an empty ``y`` field are recorded as missing cells, exactly
    like absent rows.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelError("empty panel file") from None
        if tuple(header[:3]) != CORE_COLUMNS or len(header) < 4 or header[3] not in SIZE_COLUMNS:
            raise PanelError(
                "header must start with series_id,time,y,exposure (or trials); "
                f"got {','.join(header[:4])}"
            )
        size_kind = header[3]
        missing_factors = [f for f in spec.names if f not in header[4:]]
        if missing_factors:
            raise PanelError(f"header lacks grouping factor columns {missing_factors}")
        if len(set(header)) != len(header):
            raise PanelError("duplicate column names in header")
        factor_cols = [header.index(f) for f in spec.names]
        cov_cols = [c for c in range(4, len(header)) if header[c] not in spec.names]
        cov_names = tuple(header[c] for c in cov_cols)

        series_index: dict[str, int] = {}
        series_levels: list[list[int]] = []
        rows_s, rows_t, rows_y, rows_n, rows_x = [], [], [], [], []
        seen: set[tuple[int, int]] = set()
        all_times: set[int] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            row = [cell.strip() for cell in row]
            sid = row[0]
            if not sid:
                raise PanelError(f"line {lineno}: empty series_id")
            t = _parse_int(row[1], "time", lineno)
            if t < 0:
                raise PanelError(f"line {lineno}: negative time index {t}")
            levels = []
            for j, c in enumerate(factor_cols):
                name = spec.names[j]
                try:
                    levels.append(spec.level_index(name, row[c]))
                except PanelError as err:
                    raise PanelError(f"line {lineno}: {err}") from None
            if sid not in series_index:
                series_index[sid] = len(series_index)
                series_levels.append(levels)
            elif series_levels[series_index[sid]] != levels:
                raise PanelError(f"line {lineno}: series {sid!r} changes grouping levels")
            i = series_index[sid]
            if (i, t) in seen:
                raise PanelError(f"line {lineno}: duplicate observation for series {sid!r} at time {t}")
            seen.add((i, t))
            all_times.add(t)
            if row[2] == "":
                continue
            y = _parse_int(row[2], "y", lineno)
            if size_kind == "trials":
                n = _parse_int(row[3], "trials", lineno)
                if n <= 0:
                    raise PanelError(f"line {lineno}: trials must be positive")
                if not 0 <= y <= n:
                    raise PanelError(f"line {lineno}: binomial row needs 0 <= y <= trials, got y={y}, trials={n}")
            else:
                n = _parse_real(row[3], "exposure", lineno)
                if n <= 0:
                    raise PanelError(f"line {lineno}: exposure must be positive, got {row[3]}")
            if y < 0:
                raise PanelError(f"line {lineno}: negative response")
            rows_s.append(i)
            rows_t.append(t)
            rows_y.append(y)
            rows_n.append(n)
            rows_x.append([_parse_real(row[c], header[c], lineno) for c in cov_cols])
    if not rows_s:
        raise PanelError("panel has no observed rows")
    n_times = max(all_times) + 1
    if len(all_times) != n_times:
        raise PanelError("time indices must cover a contiguous 0..T-1 range")
    return Panel(
        grouping=spec,
        series_ids=tuple(series_index),
        series_levels=np.asarray(series_levels, dtype=int).reshape(len(series_index), spec.n_factors),
        obs_series=np.asarray(rows_s),
        obs_time=np.asarray(rows_t),
        y=np.asarray(rows_y),
        size=np.asarray(rows_n),
        size_kind=size_kind,
        covariates=np.asarray(rows_x, dtype=float).reshape(len(rows_s), len(cov_names)),
        covariate_names=cov_names,
        n_times=n_times,
    )


def seasonal_harmonics(n_times: int, period: float, n_harmonics: int) -> np.ndarray:
    """Fourier seasonal covariates.

    Returns an ``(n_times, 2 * n_harmonics)`` array whose column pair
    ``h`` is ``sin(2 pi h t / period), cos(2 pi h t / period)``.
    """
    if period <= 1:
        raise ValueError("period must exceed 1")
    if n_harmonics < 1:
        raise ValueError("n_harmonics must be at least 1")
    if 2 * n_harmonics >= period:
        raise ValueError(f"{n_harmonics} harmonics alias at period {period}")
    t = np.arange(n_times, dtype=float)
    cols = []
    for h in range(1, n_harmonics + 1):
        angle = 2.0 * np.pi * h * t / period
        cols += [np.sin(angle), np.cos(angle)]
    return np.column_stack(cols)


def piecewise_ramp(n_times: int, start: int, stop: int | None = None) -> np.ndarray:
    """Linear ramp that is 0 before ``start`` and held flat from ``stop``."""
    if not 0 <= start < n_times:
        raise ValueError(f"start must lie in [0, {n_times})")
    if stop is None:
        stop = n_times
    if stop <= start:
        raise ValueError("stop must exceed start")
    t = np.arange(n_times, dtype=float)
    return np.clip(t - start, 0.0, stop - start)


@dataclass(frozen=True)
class PoststratTable:
    """Population strata, one level per factor, with nonnegative weights."""

    grouping: GroupingSpec
    strata: np.ndarray  # (n_strata, J) level indices
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "strata", np.asarray(self.strata, dtype=int).reshape(w.size, self.grouping.n_factors))
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise PanelError("poststratification weights must be finite and nonnegative")
        if w.sum() <= 0:
            raise PanelError("poststratification weights must have a positive total")

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    @classmethod
    def from_records(cls, grouping: GroupingSpec, records: Iterable[Mapping[str, object]]) -> "PoststratTable":
        strata, weights, unknown = [], [], []
        for rec in records:
            row = []
            for name in grouping.names:
                label = str(rec[name])
                levels = grouping.levels(name)
                if label not in levels:
                    unknown.append(f"{name}={label}")
                    row.append(-1)
                else:
                    row.append(levels.index(label))
            strata.append(row)
            weights.append(float(rec["weight"]))
        if unknown:
            raise PanelError(f"poststratification table references unmodeled levels: {', '.join(sorted(set(unknown)))}")
        return cls(grouping, np.asarray(strata, dtype=int), np.asarray(weights))


def load_poststrat(path: str | os.PathLike, grouping: GroupingSpec) -> PoststratTable:
    """Read a weights CSV with one column per factor plus ``weight``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        needed = [*grouping.names, "weight"]
        absent = [f for f in needed if f not in fields]
        if absent:
            raise PanelError(f"poststratification file lacks columns {absent}")
        records = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                float(rec["weight"])
            except (TypeError, ValueError):
                raise PanelError(f"line {lineno}: bad weight {rec['weight']!r}") from None
            records.append(rec)
    return PoststratTable.from_records(grouping, records)
