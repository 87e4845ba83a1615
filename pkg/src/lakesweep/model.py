"""Synthetic lake model.

Each depth layer relaxes toward the air temperature with a rate that
decays exponentially with depth::

    T[t+1][z] = T[t][z] + k(z) * (air[t] - T[t][z]),   k(z) = k0 * exp(-z*dz/d)

It is a stand-in that produces smooth, checkable responses to driver
sweeps; it makes no attempt at physical fidelity.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .domain import DRIVER_SUFFIX, PARAMETER_SUFFIX
from .errors import InputError, InvalidSpec
from .sweep import DriverTable, format_value, parse_key_values

AIR_COLUMN = "AirTemp"
OUTPUT_FILE = "lake_output.csv"
DERIVED = ("temp_surface", "temp_bottom", "temp_mean")


@dataclass(frozen=True)
class LakeParams:
    depth_layers: int = 3
    layer_thickness_m: float = 1.0
    k0: float = 0.2
    d: float = 2.0
    initial_temp_c: float = 4.0
    emulate_ms: int | None = None
    driver_file: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.depth_layers, int) or self.depth_layers < 1:
            raise InputError(f"depth_layers must be an integer >= 1, got {self.depth_layers}")
        if not self.layer_thickness_m > 0:
            raise InputError("layer_thickness_m must be > 0")
        if not 0 < self.k0 <= 1:
            raise InputError("k0 must lie in (0, 1]")
        if not self.d > 0:
            raise InputError("d must be > 0")
        if not math.isfinite(self.initial_temp_c):
            raise InputError("initial_temp_c must be finite")
        if self.emulate_ms is not None and self.emulate_ms < 0:
            raise InputError("emulate_ms must be >= 0")

    def rates(self) -> np.ndarray:
        z = np.arange(self.depth_layers, dtype=float)
        return self.k0 * np.exp(-z * self.layer_thickness_m / self.d)

    @classmethod
    def parse(cls, data: bytes | str) -> "LakeParams":
        text = data.decode("utf-8") if isinstance(data, bytes) else data
        try:
            kv = parse_key_values(text)
        except InvalidSpec as exc:
            raise InputError(f"parameter file: {exc}") from None
        conv = {
            "depth_layers": int,
            "layer_thickness_m": float,
            "k0": float,
            "d": float,
            "initial_temp_c": float,
            "emulate_ms": int,
            "driver_file": str,
        }
        args = {}
        for key, cast in conv.items():
            if key in kv:
                try:
                    args[key] = cast(kv[key])
                except ValueError:
                    raise InputError(f"parameter {key}: cannot read {kv[key]!r}") from None
        return cls(**args)

    def to_text(self) -> str:
        lines = [
            f"depth_layers={self.depth_layers}",
            f"layer_thickness_m={self.layer_thickness_m!r}",
            f"k0={self.k0!r}",
            f"d={self.d!r}",
            f"initial_temp_c={self.initial_temp_c!r}",
        ]
        if self.emulate_ms is not None:
            lines.append(f"emulate_ms={self.emulate_ms}")
        if self.driver_file:
            lines.append(f"driver_file={self.driver_file}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class OutputTable:
    """Time-indexed numeric table (``time`` first, then named columns)."""

    header: tuple[str, ...]
    times: tuple[str, ...]
    values: np.ndarray  # shape (rows, len(header) - 1)

    @property
    def columns(self) -> tuple[str, ...]:
        return self.header[1:]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def to_csv(self) -> bytes:
        lines = [",".join(self.header)]
        for t, row in zip(self.times, self.values.tolist()):
            lines.append(t + "," + ",".join(format_value(v) for v in row))
        return ("\n".join(lines) + "\n").encode("utf-8")

    @classmethod
    def from_csv(cls, data: bytes) -> "OutputTable":
        lines = data.decode("utf-8").splitlines()
        header = tuple(lines[0].split(","))
        times, rows = [], []
        for line in lines[1:]:
            cells = line.split(",")
            times.append(cells[0])
            rows.append([float(c) for c in cells[1:]])
        values = np.array(rows, dtype=float).reshape(len(rows), len(header) - 1)
        return cls(header, tuple(times), values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OutputTable):
            return NotImplemented
        return (
            self.header == other.header
            and self.times == other.times
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class LakeOutput(OutputTable):
    @property
    def surface(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def bottom(self) -> np.ndarray:
        return self.values[:, -1]

    @property
    def column_mean(self) -> np.ndarray:
        return self.values.mean(axis=1)


def run_model(params: LakeParams, driver: DriverTable, emulate_ms: int | None = None) -> LakeOutput:
    started = time.perf_counter()
    if AIR_COLUMN not in driver.header:
        raise InputError(f"driver has no {AIR_COLUMN} column")
    air = driver.column(AIR_COLUMN)
    bad = np.flatnonzero(~np.isfinite(air))
    if bad.size:
        raise InputError(f"non-finite {AIR_COLUMN} in driver row {int(bad[0]) + 1}")
    k = params.rates().tolist()
    temps = [params.initial_temp_c] * params.depth_layers
    out = np.empty((len(air), params.depth_layers), dtype=float)
    # plain floats: far cheaper than numpy ops for a handful of layers
    for t, a in enumerate(air.tolist()):
        out[t] = temps
        temps = [T + kz * (a - T) for T, kz in zip(temps, k)]
    header = ("time",) + tuple(f"temp_{z}" for z in range(params.depth_layers))
    result = LakeOutput(header, tuple(driver.times), out)

    budget = params.emulate_ms if emulate_ms is None else emulate_ms
    if budget:
        remaining = budget / 1000.0 - (time.perf_counter() - started)
        if remaining > 0:
            time.sleep(remaining)
    return result


def extract_features(table: OutputTable, columns: Sequence[str]) -> OutputTable:
    """Restrict ``table`` to ``time`` plus ``columns``.

    ``temp_surface``, ``temp_bottom`` and ``temp_mean`` are computed from
    the layer columns when the table does not carry them directly.
    """
    cols = []
    layer_idx = [i for i, c in enumerate(table.columns) if c.startswith("temp_") and c[5:].isdigit()]
    for name in columns:
        if name in table.columns:
            cols.append(table.column(name))
        elif name in DERIVED and layer_idx:
            layers = table.values[:, layer_idx]
            if name == "temp_surface":
                cols.append(layers[:, 0])
            elif name == "temp_bottom":
                cols.append(layers[:, -1])
            else:
                cols.append(layers.mean(axis=1))
        else:
            raise InputError(f"unknown output column {name!r}")
    values = np.column_stack(cols) if cols else np.empty((len(table.times), 0))
    return OutputTable(("time",) + tuple(columns), table.times, values)


def find_inputs(files: Mapping[str, object]) -> tuple[str, list[str]]:
    params = sorted(n for n in files if n.endswith(PARAMETER_SUFFIX))
    drivers = sorted(n for n in files if n.endswith(DRIVER_SUFFIX))
    if len(params) != 1:
        raise InputError(f"expected one {PARAMETER_SUFFIX} parameter file, found {len(params)}")
    if not drivers:
        raise InputError("no driver file")
    return params[0], drivers


def simulate_files(files: Mapping[str, bytes], emulate_ms: int | None = None) -> dict[str, bytes]:
    """Run the model on an in-memory input set; returns output files."""
    pname, drivers = find_inputs(files)
    params = LakeParams.parse(files[pname])
    if params.driver_file:
        if params.driver_file not in files:
            raise InputError(f"driver {params.driver_file} named in {pname} is missing")
        chosen = params.driver_file
    else:
        tables = {n: DriverTable.parse(files[n], n) for n in drivers}
        withair = [n for n, t in tables.items() if AIR_COLUMN in t.header]
        if not withair:
            raise InputError(f"no driver file has an {AIR_COLUMN} column")
        chosen = withair[0]
    driver = DriverTable.parse(files[chosen], chosen)
    out = run_model(params, driver, emulate_ms=emulate_ms)
    return {OUTPUT_FILE: out.to_csv()}


def run_directory(sim_dir: str | Path, emulate_ms: int | None = None) -> Path:
    """Run the model on the inputs found in ``sim_dir``; writes ``lake_output.csv``."""
    sim_dir = Path(sim_dir)
    files = {p.name: p.read_bytes() for p in sim_dir.iterdir() if p.is_file() and p.name != OUTPUT_FILE}
    outputs = simulate_files(files, emulate_ms=emulate_ms)
    for name, data in outputs.items():
        (sim_dir / name).write_bytes(data)
    return sim_dir / OUTPUT_FILE
