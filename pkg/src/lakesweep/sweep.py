"""Scenario generation: derive N simulation variants from one baseline.

A baseline is a mapping of file name to bytes. One driver file (a CSV
time series) is parsed into a :class:`DriverTable`; a single column is
offset per variant, either along a linear ramp or by values drawn from a
distribution. Every other byte of every other file is copied verbatim.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterator, Mapping, Sequence

import numpy as np

from .domain import SimulationSpec
from .errors import InputError, InvalidSpec, ParseError


class Mode(str, enum.Enum):
    LINEAR = "LINEAR"
    SAMPLED = "SAMPLED"


class Distribution(str, enum.Enum):
    UNIFORM = "UNIFORM"
    NORMAL = "NORMAL"
    BINOMIAL = "BINOMIAL"
    POISSON = "POISSON"

    @classmethod
    def parse(cls, name: str) -> "Distribution":
        key = name.strip().upper()
        if key == "RANDOM":  # alias, see DISTRIBUTION_ALIASES
            return cls.NORMAL
        try:
            return cls(key)
        except ValueError:
            raise InvalidSpec(f"unknown distribution {name!r}", field="distribution") from None


DISTRIBUTION_ALIASES = {"random": Distribution.NORMAL}


class Operation(str, enum.Enum):
    ADD = "ADD"
    SUBTRACT = "SUBTRACT"
    MULTIPLY = "MULTIPLY"
    DIVIDE = "DIVIDE"

    @classmethod
    def parse(cls, name: str) -> "Operation":
        try:
            return cls(name.strip().upper())
        except ValueError:
            raise InvalidSpec(f"unknown operation {name!r}", field="operation") from None

    def apply(self, values: np.ndarray, offset: float) -> np.ndarray:
        if self is Operation.ADD:
            return values + offset
        if self is Operation.SUBTRACT:
            return values - offset
        if self is Operation.MULTIPLY:
            return values * offset
        if offset == 0:
            raise InvalidSpec("division by a zero offset", field="operation")
        return values / offset


# -- driver tables ----------------------------------------------------------


def _time_key(text: str):
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text).timestamp()
    except ValueError:
        raise ValueError(f"unrecognised timestamp {text!r}") from None


@dataclass(frozen=True)
class DriverTable:
    """A comma-separated time series: timestamp column first, then reals.

    Cells are kept as the original text so that untouched values survive a
    rewrite byte-for-byte.
    """

    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    @classmethod
    def parse(cls, data: bytes | str, filename: str = "driver") -> "DriverTable":
        text = data.decode("utf-8") if isinstance(data, bytes) else data
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise ParseError("empty driver file", filename)
        header = tuple(h.strip() for h in lines[0].split(","))
        if len(header) < 2:
            raise ParseError("driver needs a timestamp column and at least one value column", filename)
        if len(set(header)) != len(header):
            raise ParseError("duplicate column names in header", filename)
        rows = []
        prev = None
        for lineno, line in enumerate(lines[1:], start=2):
            cells = tuple(line.rstrip("\r").split(","))
            if len(cells) != len(header):
                raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(cells)}", filename)
            try:
                key = _time_key(cells[0])
                for c in cells[1:]:
                    float(c)
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}", filename) from None
            if prev is not None and key <= prev:
                raise ParseError(f"line {lineno}: timestamps not strictly increasing", filename)
            prev = key
            rows.append(cells)
        return cls(header, tuple(rows))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def times(self) -> list[str]:
        return [r[0] for r in self.rows]

    def index(self, column: str) -> int:
        try:
            i = self.header.index(column)
        except ValueError:
            raise InvalidSpec(
                f"column {column!r} not in driver header {list(self.header)}", field="variable"
            ) from None
        if i == 0:
            raise InvalidSpec(f"column {column!r} is the timestamp column", field="variable")
        return i

    def column(self, name: str) -> np.ndarray:
        i = self.index(name)
        return np.array([float(r[i]) for r in self.rows], dtype=float)

    def with_column(self, name: str, values: Sequence[float]) -> "DriverTable":
        i = self.index(name)
        if len(values) != len(self.rows):
            raise ValueError("value count does not match row count")
        rows = []
        for row, v in zip(self.rows, np.asarray(values, dtype=float).tolist()):
            old = row[i]
            cell = old if float(old) == v and not math.isnan(v) else format_value(v)
            rows.append(row[:i] + (cell,) + row[i + 1:])
        return DriverTable(self.header, tuple(rows))

    def to_text(self) -> str:
        out = [",".join(self.header)]
        out.extend(",".join(r) for r in self.rows)
        return "\n".join(out) + "\n"

    def to_bytes(self) -> bytes:
        return self.to_text().encode("utf-8")


def format_value(v: float) -> str:
    # repr is the shortest string that round-trips
    return repr(float(v))


# -- sweep description ------------------------------------------------------

_DIST_PARAMS = {
    Distribution.UNIFORM: ("a", "b"),
    Distribution.NORMAL: ("mean", "sd"),
    Distribution.BINOMIAL: ("n", "p"),
    Distribution.POISSON: ("lambda",),
}


@dataclass(frozen=True)
class SweepSpec:
    driver_file: str
    variable: str
    mode: Mode = Mode.LINEAR
    count: int = 1
    start_value: float | None = None
    end_value: float | None = None
    distribution: Distribution | None = None
    params: Mapping[str, float] = field(default_factory=dict)
    operation: Operation = Operation.ADD
    seed: int = 0

    def validate(self) -> None:
        if not self.driver_file:
            raise InvalidSpec("driver_file is required", field="driver_file")
        if not self.variable:
            raise InvalidSpec("variable is required", field="variable")
        if not isinstance(self.count, int) or self.count < 1:
            raise InvalidSpec(f"count must be >= 1, got {self.count}", field="count")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must fit in 64 unsigned bits", field="seed")
        if self.mode is Mode.LINEAR:
            for name in ("start_value", "end_value"):
                v = getattr(self, name)
                if v is None or not math.isfinite(v):
                    raise InvalidSpec(f"{name} must be a finite number", field=name)
            if self.operation is Operation.DIVIDE and 0.0 in linear_offsets(
                self.start_value, self.end_value, self.count
            ):
                raise InvalidSpec("linear sweep reaches a zero divisor", field="operation")
        else:
            if self.distribution is None:
                raise InvalidSpec("sampled sweep needs a distribution", field="distribution")
            _check_dist_params(self.distribution, self.params)
            if self.operation is Operation.DIVIDE and _support_has_zero(self.distribution, self.params):
                raise InvalidSpec(
                    f"{self.distribution.value.lower()} draws can be 0; refusing DIVIDE",
                    field="operation",
                )

    def offsets(self) -> list[float]:
        self.validate()
        if self.mode is Mode.LINEAR:
            return linear_offsets(self.start_value, self.end_value, self.count)
        return sample_offsets(self)

    # -- wire form: flat key=value text --------------------------------
    def to_text(self) -> str:
        items: list[tuple[str, object]] = [
            ("driver_file", self.driver_file),
            ("variable", self.variable),
            ("mode", self.mode.value),
            ("count", self.count),
        ]
        if self.mode is Mode.LINEAR:
            items += [("start_value", repr(self.start_value)), ("end_value", repr(self.end_value))]
        else:
            items.append(("distribution", self.distribution.value))
            items += [(k, repr(float(v))) for k, v in sorted(self.params.items())]
        items += [("operation", self.operation.value), ("seed", self.seed)]
        return "".join(f"{k}={v}\n" for k, v in items)

    @classmethod
    def from_text(cls, text: str) -> "SweepSpec":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "SweepSpec":
        kv = {k.strip(): str(v).strip() for k, v in kv.items()}

        def number(name: str, cast=float):
            if name not in kv:
                return None
            try:
                return cast(kv[name])
            except ValueError:
                raise InvalidSpec(f"{name} is not a number: {kv[name]!r}", field=name) from None

        try:
            mode = Mode(kv.get("mode", "LINEAR").upper())
        except ValueError:
            raise InvalidSpec(f"unknown mode {kv.get('mode')!r}", field="mode") from None
        dist = Distribution.parse(kv["distribution"]) if "distribution" in kv else None
        if dist is None and mode is Mode.SAMPLED:
            raise InvalidSpec("sampled sweep needs a distribution", field="distribution")
        params = {}
        if dist is not None:
            aliases = {"lam": "lambda", "lambda": "lambda", "size": "n"}
            for key in list(kv):
                canon = aliases.get(key, key)
                if canon in _DIST_PARAMS[dist]:
                    params[canon] = number(key)
        count = number("count", int)
        spec = cls(
            driver_file=kv.get("driver_file", ""),
            variable=kv.get("variable", ""),
            mode=mode,
            count=1 if count is None else count,
            start_value=number("start_value"),
            end_value=number("end_value"),
            distribution=dist,
            params=params,
            operation=Operation.parse(kv.get("operation", "ADD")),
            seed=number("seed", int) or 0,
        )
        spec.validate()
        return spec


def parse_key_values(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#!&/":
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidSpec(f"line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.split("!")[0].strip().strip(",").strip("'\"")
    return out


def _check_dist_params(dist: Distribution, params: Mapping[str, float]) -> None:
    for name in _DIST_PARAMS[dist]:
        if name not in params or params[name] is None:
            raise InvalidSpec(f"{dist.value.lower()} needs parameter {name!r}", field=name)
        if not math.isfinite(params[name]):
            raise InvalidSpec(f"parameter {name!r} must be finite", field=name)
    if dist is Distribution.UNIFORM and params["a"] > params["b"]:
        raise InvalidSpec("uniform needs a <= b", field="a")
    if dist is Distribution.NORMAL and params["sd"] < 0:
        raise InvalidSpec("normal needs sd >= 0", field="sd")
    if dist is Distribution.BINOMIAL:
        if params["n"] < 0 or params["n"] != int(params["n"]):
            raise InvalidSpec("binomial needs a non-negative integer n", field="n")
        if not 0 <= params["p"] <= 1:
            raise InvalidSpec("binomial needs 0 <= p <= 1", field="p")
    if dist is Distribution.POISSON and params["lambda"] <= 0:
        raise InvalidSpec("poisson needs lambda > 0", field="lambda")


def _support_has_zero(dist: Distribution, params: Mapping[str, float]) -> bool:
    if dist is Distribution.UNIFORM:
        return params["a"] <= 0 <= params["b"]
    if dist is Distribution.NORMAL:
        return params["sd"] > 0 or params["mean"] == 0
    if dist is Distribution.BINOMIAL:
        return params["p"] < 1 or params["n"] == 0
    return True  # poisson always has P(0) > 0


# -- offsets ------------------------------------------------------------------


def linear_offsets(start: float, end: float, count: int) -> list[float]:
    """``count`` evenly spaced offsets from ``start`` to ``end`` inclusive.

    Computed in closed form per index, so there is no accumulated drift and
    both endpoints are exact.
    """
    if count < 1:
        raise InvalidSpec(f"count must be >= 1, got {count}", field="count")
    if count == 1:
        return [float(start)]
    span = end - start
    div = count - 1
    out = [start + span * i / div for i in range(count)]
    out[0] = float(start)
    out[-1] = float(end)
    return out


def _draw(gen: np.random.Generator, dist: Distribution, p: Mapping[str, float]) -> float:
    if dist is Distribution.UNIFORM:
        return float(gen.uniform(p["a"], p["b"]))
    if dist is Distribution.NORMAL:
        return float(gen.normal(p["mean"], p["sd"]))
    if dist is Distribution.BINOMIAL:
        return float(gen.binomial(int(p["n"]), p["p"]))
    return float(gen.poisson(p["lambda"]))


def sample_offsets(spec: SweepSpec) -> list[float]:
    """Draw ``spec.count`` offsets; draw ``i`` depends only on ``(seed, i)``."""
    if spec.mode is not Mode.SAMPLED:
        raise InvalidSpec("sample_offsets needs a SAMPLED spec", field="mode")
    if spec.distribution is None:
        raise InvalidSpec("sampled sweep needs a distribution", field="distribution")
    _check_dist_params(spec.distribution, spec.params)
    if spec.count < 1:
        raise InvalidSpec(f"count must be >= 1, got {spec.count}", field="count")
    return [draw_at(spec, i) for i in range(spec.count)]


def draw_at(spec: SweepSpec, index: int) -> float:
    # Philox is counter based: keying on (seed, index) gives an independent,
    # order-free stream per draw
    key = np.array([spec.seed, index], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return _draw(gen, spec.distribution, spec.params)


# -- applying offsets -----------------------------------------------------


def apply_offset(table: DriverTable, variable: str, op: Operation, offset: float) -> DriverTable:
    if op is Operation.DIVIDE and offset == 0:
        raise InvalidSpec("division by a zero offset", field="operation")
    values = table.column(variable)
    return table.with_column(variable, op.apply(values, offset))


class _ColumnRewriter:
    """Fast repeated rewrites of one column of a fixed table.

    Pre-splits each row around the target cell so a variant costs one
    format per row instead of a full re-serialisation.
    """

    def __init__(self, table: DriverTable, variable: str):
        i = table.index(variable)
        self.table = table
        self.values = table.column(variable)
        self.cells = [r[i] for r in table.rows]
        self.prefix = [",".join(r[:i]) + "," for r in table.rows]
        self.suffix = ["".join("," + c for c in r[i + 1:]) + "\n" for r in table.rows]
        self.head = ",".join(table.header) + "\n"

    def render(self, op: Operation, offset: float) -> bytes:
        new = op.apply(self.values, offset).tolist()
        parts = [self.head]
        for pre, old_v, old, v, suf in zip(self.prefix, self.values.tolist(), self.cells, new, self.suffix):
            cell = old if v == old_v else format_value(v)
            parts.append(pre + cell + suf)
        return "".join(parts).encode("utf-8")


def iter_expand(baseline: Mapping[str, bytes], spec: SweepSpec) -> Iterator[SimulationSpec]:
    """Lazily yield the ``spec.count`` variants in sim_id order."""
    spec.validate()
    if spec.driver_file not in baseline:
        raise ParseError("driver file missing from baseline", spec.driver_file)
    table = DriverTable.parse(baseline[spec.driver_file], spec.driver_file)
    try:
        rewriter = _ColumnRewriter(table, spec.variable)
    except InvalidSpec as exc:
        raise InvalidSpec(f"{spec.driver_file}: {exc}", field=exc.field) from None
    if not np.all(np.isfinite(rewriter.values)):
        raise InputError(f"{spec.driver_file}: non-finite value in column {spec.variable!r}")
    offsets = spec.offsets()
    others = {k: v for k, v in baseline.items() if k != spec.driver_file}
    for sim_id, off in enumerate(offsets):
        files = dict(others)
        files[spec.driver_file] = rewriter.render(spec.operation, off)
        yield SimulationSpec(
            sim_id=sim_id,
            input_files=files,
            provenance={
                "driver_file": spec.driver_file,
                "variable": spec.variable,
                "operation": spec.operation.value,
                "offset": off,
            },
        )


def expand(baseline: Mapping[str, bytes], spec: SweepSpec) -> list[SimulationSpec]:
    return list(iter_expand(baseline, spec))
