"""Synthetic baseline inputs: a parameter file and an hourly met driver."""

from __future__ import annotations

import math
from datetime import datetime, timedelta

from ..model import LakeParams

DRIVER_NAME = "met_hourly.csv"
PARAMS_NAME = "glm3.nml"


def met_driver(rows: int = 24, start: str = "2015-04-01 00:00", seed: int = 0) -> bytes:
    """Hourly driver with a diurnal AirTemp cycle plus two passive columns."""
    t0 = datetime.fromisoformat(start)
    lines = ["time,AirTemp,ShortWave,RelHum"]
    for h in range(rows):
        ts = (t0 + timedelta(hours=h)).strftime("%Y-%m-%d %H:%M")
        phase = 2 * math.pi * ((h + seed) % 24) / 24
        air = round(12.0 + 6.0 * math.sin(phase - math.pi / 2), 2)
        sw = round(max(0.0, 800.0 * math.sin(phase - math.pi / 2)), 1)
        rh = round(70.0 - 15.0 * math.sin(phase - math.pi / 2), 1)
        lines.append(f"{ts},{air},{sw},{rh}")
    return ("\n".join(lines) + "\n").encode()


def baseline(rows: int = 24, layers: int = 3, emulate_ms: int | None = None) -> dict[str, bytes]:
    params = LakeParams(depth_layers=layers, emulate_ms=emulate_ms)
    return {PARAMS_NAME: params.to_text().encode(), DRIVER_NAME: met_driver(rows)}


def experiment_files(n_sims: int, rows: int = 24) -> dict[str, bytes]:
    """Archive-style ``sim_NNN/<file>`` mapping for a verbatim upload."""
    files = {}
    for i in range(n_sims):
        base = baseline(rows)
        base[DRIVER_NAME] = met_driver(rows, seed=i)
        for name, data in base.items():
            files[f"sim_{i:03d}/{name}"] = data
    return files
