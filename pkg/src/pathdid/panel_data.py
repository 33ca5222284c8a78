"""Three-period panel samples with a partially observed middle-period treatment."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError

MISSING_TOKENS = frozenset({"", "NA", "NaN"})
CONSTANT_NAME = "const"


@dataclass(frozen=True)
class TreatmentPath:
    d1: int
    d2: int

    def __post_init__(self):
        if self.d1 not in (0, 1) or self.d2 not in (0, 1):
            raise ValidationError(f"treatment path entries must be 0/1, got {self}")

    @classmethod
    def parse(cls, token) -> "TreatmentPath":
        if isinstance(token, TreatmentPath):
            return token
        if isinstance(token, (tuple, list)):
            return cls(int(token[0]), int(token[1]))
        text = str(token).strip().strip("()").replace(",", "").replace(" ", "")
        if len(text) != 2 or any(ch not in "01" for ch in text):
            raise ValidationError(f"cannot parse treatment path {token!r}")
        return cls(int(text[0]), int(text[1]))

    @property
    def label(self) -> str:
        return f"{self.d1}{self.d2}"

    def __str__(self):
        return self.label


NEVER_TREATED = TreatmentPath(0, 0)
TARGET_PATHS = (TreatmentPath(1, 1), TreatmentPath(1, 0), TreatmentPath(0, 1))


@dataclass(frozen=True)
class EstimandSpec:
    """Which PDATT to estimate: path ``d`` against the never-treated path."""

    d: TreatmentPath
    level: float = 0.95
    d_prime: TreatmentPath = NEVER_TREATED

    def __post_init__(self):
        object.__setattr__(self, "d", TreatmentPath.parse(self.d))
        if self.d == NEVER_TREATED:
            raise ValidationError("the target path must differ from (0,0)")
        if self.d_prime != NEVER_TREATED:
            raise ValidationError("only the never-treated comparison path (0,0) is supported")
        if not 0.0 < self.level < 1.0:
            raise ValidationError(f"confidence level must lie in (0,1), got {self.level}")

    @property
    def label(self) -> str:
        return f"{self.d.label}-{self.d_prime.label}"


@dataclass(frozen=True)
class ObservationRecord:
    delta_y: float
    s: int
    d1: int | None
    d2: int
    x: tuple

    def __post_init__(self):
        if (self.d1 is None) != (self.s == 0):
            raise ValidationError("d1 must be present exactly when s = 1")


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelSample:
    """Columnar, immutable store of observation records.

    ``d1`` holds NaN wherever ``s == 0``; estimators only touch it through
    :meth:`path_indicator` and :meth:`d1_indicator`, which multiply by ``s``.
    """

    delta_y: np.ndarray
    s: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    x: np.ndarray
    column_names: tuple = ()
    y2: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = x.shape[0]
        names = tuple(self.column_names) or tuple(f"x{j}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValidationError("column_names must match the covariate count")
        ones = np.all(x == 1.0, axis=0) if n else np.zeros(x.shape[1], bool)
        if n and not ones.any():
            x = np.column_stack([np.ones(n), x])
            names = (CONSTANT_NAME,) + names
        elif n and not ones[0]:
            j = int(np.flatnonzero(ones)[0])
            order = [j] + [i for i in range(x.shape[1]) if i != j]
            x = x[:, order]
            names = tuple(names[i] for i in order)
        s = np.asarray(self.s, dtype=float)
        d2 = np.asarray(self.d2, dtype=float)
        d1 = np.asarray(self.d1, dtype=float)
        dy = np.asarray(self.delta_y, dtype=float)
        if n < 1:
            raise ValidationError("a sample needs at least one record")
        for name, arr in (("delta_y", dy), ("s", s), ("d1", d1), ("d2", d2)):
            if arr.shape != (n,):
                raise ValidationError(f"{name} has shape {arr.shape}, expected ({n},)")
        if not np.all(np.isfinite(dy)):
            raise ValidationError("delta_y must be finite")
        if not np.all(np.isfinite(x)):
            raise ValidationError("covariates must be finite")
        if not np.all((s == 0) | (s == 1)):
            raise ValidationError("s must be binary")
        if not np.all((d2 == 0) | (d2 == 1)):
            raise ValidationError("d2 must be binary")
        obs = s == 1
        if np.any(np.isnan(d1[obs])):
            raise ValidationError("d1 missing on a record with s = 1")
        if not np.all((d1[obs] == 0) | (d1[obs] == 1)):
            raise ValidationError("d1 must be binary where observed")
        if np.any(~np.isnan(d1[~obs])):
            raise ValidationError("d1 present on a record with s = 0")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "s", _readonly(s))
        object.__setattr__(self, "d2", _readonly(d2))
        object.__setattr__(self, "d1", _readonly(d1))
        object.__setattr__(self, "delta_y", _readonly(dy))
        object.__setattr__(self, "column_names", names)
        if self.y2 is not None:
            y2 = np.asarray(self.y2, dtype=float)
            if y2.shape != (n,):
                raise ValidationError("y2 has the wrong length")
            object.__setattr__(self, "y2", _readonly(y2))

    @classmethod
    def from_arrays(cls, delta_y, s, d1, d2, x, column_names=(), y2=None) -> "PanelSample":
        """Build a sample; ``d1`` entries where ``s == 0`` are discarded."""
        s = np.asarray(s, dtype=float)
        d1 = np.where(s == 1, np.asarray(d1, dtype=float), np.nan)
        return cls(delta_y, s, d1, d2, x, tuple(column_names), y2)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def records(self) -> list[ObservationRecord]:
        out = []
        for i in range(self.n):
            s = int(self.s[i])
            out.append(ObservationRecord(
                float(self.delta_y[i]), s, int(self.d1[i]) if s else None,
                int(self.d2[i]), tuple(self.x[i])))
        return out

    def d2_indicator(self, d2: int) -> np.ndarray:
        return (self.d2 == d2).astype(float)

    def d1_indicator(self, d1: int) -> np.ndarray:
        """S * 1[D1 = d1]; zero wherever D1 is unobserved."""
        hit = np.zeros(self.n)
        obs = self.s == 1
        hit[obs] = self.d1[obs] == d1
        return hit

    def path_indicator(self, d: TreatmentPath) -> np.ndarray:
        """S * 1[D = d]."""
        return self.d1_indicator(d.d1) * self.d2_indicator(d.d2)

    def subset(self, mask) -> "PanelSample":
        """Rows selected by a boolean mask or an integer index array."""
        mask = np.asarray(mask)
        if mask.dtype != bool:
            mask = mask.astype(np.intp)
        return PanelSample(self.delta_y[mask], self.s[mask], self.d1[mask], self.d2[mask],
                           self.x[mask], self.column_names,
                           None if self.y2 is None else self.y2[mask])

    def replace(self, **changes) -> "PanelSample":
        fields_ = dict(delta_y=self.delta_y, s=self.s, d1=self.d1, d2=self.d2, x=self.x,
                       column_names=self.column_names, y2=self.y2)
        fields_.update(changes)
        if "s" in changes and "d1" not in changes:
            fields_["d1"] = np.where(np.asarray(changes["s"]) == 1, self.d1, np.nan)
        return PanelSample(**fields_)


# ---------------------------------------------------------------------------
# CSV ingestion

@dataclass
class Schema:
    """Maps sample fields to CSV column names.

    Either ``delta_y`` or both ``y0`` and ``y2`` must be given. ``x`` lists the
    covariate columns; when empty every unmapped column is used.
    """

    d1: str = "d1"
    d2: str = "d2"
    delta_y: str | None = "delta_y"
    y0: str | None = None
    y2: str | None = None
    s: str | None = None
    x: Sequence[str] = field(default_factory=tuple)

    @classmethod
    def from_mapping(cls, mapping: Mapping | None) -> "Schema":
        if mapping is None:
            return cls()
        if isinstance(mapping, Schema):
            return mapping
        kw = dict(mapping)
        if "x" in kw and isinstance(kw["x"], str):
            kw["x"] = [c for c in kw["x"].split(",") if c]
        if ("y0" in kw or "y2" in kw) and "delta_y" not in kw:
            kw["delta_y"] = None
        unknown = set(kw) - {"d1", "d2", "delta_y", "y0", "y2", "s", "x"}
        if unknown:
            raise ValidationError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**kw)


def _parse_float(token, row, col):
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"non-numeric value {token!r} in column {col!r}", row) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {token!r} in column {col!r}", row)
    return v


def _parse_binary(token, row, col):
    v = _parse_float(token, row, col)
    if v not in (0.0, 1.0):
        raise ValidationError(f"row {row}: column {col!r} must be 0/1, got {token!r}")
    return v


def load_csv(path, schema: Mapping | Schema | None = None) -> PanelSample:
    """Read a headered CSV into a validated :class:`PanelSample`.

    Row indices in error messages count data rows from 1.
    """
    schema = Schema.from_mapping(schema)
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file") from None
        rows = list(reader)

    # Conventional column names are recognised even when not mapped, and are
    # never swept into the default covariate set.
    if not schema.x:
        auto = {k: k for k in ("s", "y2") if getattr(schema, k) is None and k in header}
        if auto:
            schema = replace(schema, **auto)
    use_levels = schema.delta_y is None
    if use_levels and not (schema.y0 and schema.y2):
        raise ValidationError("map either delta_y or both y0 and y2")
    required = [schema.d1, schema.d2] + ([schema.y0, schema.y2] if use_levels else [schema.delta_y])
    if schema.s:
        required.append(schema.s)
    if schema.y2 and not use_levels:
        required.append(schema.y2)
    missing = [c for c in required + list(schema.x) if c not in header]
    if missing:
        raise ValidationError(f"mapped columns not in header: {missing}")
    idx = {h: j for j, h in enumerate(header)}
    reserved = set(required) | {schema.y0, schema.y2, schema.s, "s", "y0", "y2", "delta_y", "d1", "d2"}
    xcols = list(schema.x) or [h for h in header if h not in reserved]

    n = len(rows)
    dy, s, d1, d2, y2 = (np.empty(n) for _ in range(5))
    x = np.empty((n, len(xcols)))
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", i)
        r = i - 1
        tok = row[idx[schema.d1]].strip()
        if tok in MISSING_TOKENS:
            s_i, d1[r] = 0.0, np.nan
        else:
            s_i, d1[r] = 1.0, _parse_binary(tok, i, schema.d1)
        if schema.s:
            s_given = _parse_binary(row[idx[schema.s]].strip(), i, schema.s)
            if s_given != s_i:
                raise ValidationError(f"row {i}: s = {s_given:g} disagrees with d1 token {tok!r}")
        s[r] = s_i
        d2[r] = _parse_binary(row[idx[schema.d2]].strip(), i, schema.d2)
        if use_levels:
            y0v = _parse_float(row[idx[schema.y0]].strip(), i, schema.y0)
            y2[r] = _parse_float(row[idx[schema.y2]].strip(), i, schema.y2)
            dy[r] = y2[r] - y0v
        else:
            dy[r] = _parse_float(row[idx[schema.delta_y]].strip(), i, schema.delta_y)
            if schema.y2:
                y2[r] = _parse_float(row[idx[schema.y2]].strip(), i, schema.y2)
        for j, c in enumerate(xcols):
            x[r, j] = _parse_float(row[idx[c]].strip(), i, c)
    if n == 0:
        raise ValidationError("file has a header but no data rows")
    return PanelSample(dy, s, d1, d2, x, tuple(xcols), y2 if schema.y2 else None)


def write_csv(sample: PanelSample, path) -> None:
    """Write a sample so that :func:`load_csv` reproduces it bit-exactly."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        extra = ["y2"] if sample.y2 is not None else []
        w.writerow(["delta_y", "s", "d1", "d2"] + extra + list(sample.column_names))
        for i in range(sample.n):
            d1 = "NA" if sample.s[i] == 0 else repr(int(sample.d1[i]))
            row = [repr(float(sample.delta_y[i])), int(sample.s[i]), d1, int(sample.d2[i])]
            if extra:
                row.append(repr(float(sample.y2[i])))
            w.writerow(row + [repr(float(v)) for v in sample.x[i]])


# ---------------------------------------------------------------------------
# Summary

@dataclass
class SampleSummary:
    n: int
    k: int
    missing_rate: float
    cell_counts: dict
    covariate_means: dict
    covariate_variances: dict
    flags: list

    def rows(self):
        yield ("n", self.n)
        yield ("k", self.k)
        yield ("missing_rate", self.missing_rate)
        for (s, d1, d2), c in self.cell_counts.items():
            yield (f"count[s={s},d1={'NA' if d1 is None else d1},d2={d2}]", c)
        for name in self.covariate_means:
            yield (f"mean[{name}]", self.covariate_means[name])
            yield (f"var[{name}]", self.covariate_variances[name])
        for f in self.flags:
            yield ("flag", f)


def summarize(sample: PanelSample) -> SampleSummary:
    counts = {}
    for d2 in (0, 1):
        for d1 in (0, 1):
            counts[(1, d1, d2)] = int(sample.path_indicator(TreatmentPath(d1, d2)).sum())
        counts[(0, None, d2)] = int(((sample.s == 0) & (sample.d2 == d2)).sum())
    flags = [f"empty cell S=1, D=({d1},{d2})"
             for (s, d1, d2), c in counts.items() if s == 1 and c == 0]
    flags += [f"empty group D2={d2}" for d2 in (0, 1) if not np.any(sample.d2 == d2)]
    means = dict(zip(sample.column_names, sample.x.mean(axis=0).tolist()))
    varis = dict(zip(sample.column_names, sample.x.var(axis=0).tolist()))
    return SampleSummary(sample.n, sample.k, float(1.0 - sample.s.mean()), counts, means, varis, flags)
