import csv
import io
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lakesweep.errors import InvalidSpec, ParseError
from lakesweep.harness import inputs
from lakesweep.harness.inputs import DRIVER_NAME, PARAMS_NAME
from lakesweep.sweep import (
    Distribution,
    DriverTable,
    Mode,
    Operation,
    SweepSpec,
    apply_offset,
    draw_at,
    expand,
    linear_offsets,
    sample_offsets,
)


def closed_form_oracle(start, end, count):
    """Exact rational arithmetic, rounded once at the end."""
    if count == 1:
        return [float(start)]
    s, e = Fraction(start), Fraction(end)
    return [float(s + (e - s) * i / (count - 1)) for i in range(count)]


def read_columns(data: bytes):
    rows = list(csv.reader(io.StringIO(data.decode())))
    header, body = rows[0], rows[1:]
    return {h: [r[i] for r in body] for i, h in enumerate(header)}


def sampled(dist, count=5, op=Operation.ADD, seed=7, **params):
    return SweepSpec(DRIVER_NAME, "AirTemp", Mode.SAMPLED, count=count,
                     distribution=dist, params=params, operation=op, seed=seed)


# -- linear offsets ----------------------------------------------------------

def test_linear_small():
    assert linear_offsets(-10, 30, 5) == [-10, 0, 10, 20, 30]


def test_linear_reference_range():
    t0 = time.perf_counter()
    offs = linear_offsets(-10, 30, 10000)
    assert time.perf_counter() - t0 < 1.0
    assert len(offs) == 10000
    assert offs[0] == -10 and offs[-1] == 30
    assert all(a <= b for a, b in zip(offs, offs[1:]))
    oracle = closed_form_oracle(-10, 30, 10000)
    for got, want in zip(offs, oracle):
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_linear_degenerate_and_single():
    assert linear_offsets(7, 7, 3) == [7, 7, 7]
    assert linear_offsets(3.5, 9, 1) == [3.5]
    with pytest.raises(InvalidSpec):
        linear_offsets(0, 1, 0)


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.integers(1, 400))
def test_linear_endpoints_exact(start, end, count):
    offs = linear_offsets(start, end, count)
    assert len(offs) == count
    assert offs[0] == start
    if count > 1:
        assert offs[-1] == end
    for got, want in zip(offs, closed_form_oracle(start, end, count)):
        assert abs(got - want) <= 1e-12 * max(1.0, abs(start), abs(end))


# -- sampled offsets ----------------------------------------------------------

def test_uniform_degenerate():
    assert sample_offsets(sampled(Distribution.UNIFORM, count=4, a=0, b=0)) == [0, 0, 0, 0]


def test_normal_mean_within_statistical_bound():
    n = 10_000
    draws = sample_offsets(sampled(Distribution.NORMAL, count=n, mean=0, sd=1))
    assert abs(np.mean(draws)) <= 4 / math.sqrt(n)


def test_poisson_support():
    draws = sample_offsets(sampled(Distribution.POISSON, count=10_000, **{"lambda": 3}))
    assert all(d >= 0 and d == int(d) for d in draws)
    assert abs(np.mean(draws) - 3) < 4 * math.sqrt(3 / 10_000)


def test_binomial_support():
    draws = sample_offsets(sampled(Distribution.BINOMIAL, count=2000, n=10, p=0.3))
    assert set(draws) <= set(range(11))


def test_draws_reproducible_and_order_free():
    spec = sampled(Distribution.NORMAL, count=50, mean=1, sd=2, seed=99)
    first = sample_offsets(spec)
    assert sample_offsets(spec) == first
    assert [draw_at(spec, i) for i in reversed(range(50))] == first[::-1]
    other = sample_offsets(sampled(Distribution.NORMAL, count=50, mean=1, sd=2, seed=100))
    assert other != first


@pytest.mark.parametrize("dist,params,field", [
    (Distribution.UNIFORM, {"a": 2, "b": 1}, "a"),
    (Distribution.BINOMIAL, {"n": 5, "p": 1.5}, "p"),
    (Distribution.POISSON, {"lambda": 0}, "lambda"),
    (Distribution.NORMAL, {"mean": 0}, "sd"),
])
def test_bad_distribution_parameters_are_named(dist, params, field):
    with pytest.raises(InvalidSpec) as err:
        sample_offsets(sampled(dist, **params))
    assert err.value.field == field


def test_random_is_an_alias_for_normal():
    assert Distribution.parse("random") is Distribution.NORMAL


def test_divide_by_possible_zero_rejected():
    with pytest.raises(InvalidSpec, match="DIVIDE"):
        sampled(Distribution.POISSON, op=Operation.DIVIDE, **{"lambda": 3}).validate()
    with pytest.raises(InvalidSpec):
        SweepSpec(DRIVER_NAME, "AirTemp", start_value=-1, end_value=1, count=3,
                  operation=Operation.DIVIDE).validate()
    # zero outside the support is fine
    sampled(Distribution.UNIFORM, op=Operation.DIVIDE, a=1, b=2).validate()


# -- driver tables -------------------------------------------------------------

def test_driver_parse_validation():
    with pytest.raises(ParseError, match="fields"):
        DriverTable.parse(b"time,AirTemp\n1,2,3\n")
    with pytest.raises(ParseError, match="increasing"):
        DriverTable.parse(b"time,AirTemp\n2,1\n1,1\n")
    with pytest.raises(ParseError):
        DriverTable.parse(b"time,AirTemp\n1,warm\n")
    t = DriverTable.parse(b"time,AirTemp\n1,2\n")
    assert t.to_bytes() == b"time,AirTemp\n1,2\n"


def test_apply_offset_add_zero_is_identity(driver_bytes):
    t = DriverTable.parse(driver_bytes)
    assert apply_offset(t, "AirTemp", Operation.ADD, 0.0).to_bytes() == driver_bytes


def test_apply_offset_rowwise():
    t = DriverTable.parse(b"time,AirTemp,RelHum\n1,5.0,70\n2,6.5,71\n")
    out = apply_offset(t, "AirTemp", Operation.ADD, 2.5)
    expected = [float(v) + 2.5 for v in ("5.0", "6.5")]  # independent row pass
    assert out.column("AirTemp").tolist() == expected == [7.5, 9.0]
    assert out.column("RelHum").tolist() == [70, 71]


def test_multiply_then_divide_restores(driver_bytes):
    t = DriverTable.parse(driver_bytes)
    back = apply_offset(apply_offset(t, "AirTemp", Operation.MULTIPLY, 3.7), "AirTemp", Operation.DIVIDE, 3.7)
    np.testing.assert_allclose(back.column("AirTemp"), t.column("AirTemp"), rtol=1e-9)


def test_apply_offset_errors(driver_bytes):
    t = DriverTable.parse(driver_bytes)
    with pytest.raises(InvalidSpec):
        apply_offset(t, "Nope", Operation.ADD, 1)
    with pytest.raises(InvalidSpec):
        apply_offset(t, "AirTemp", Operation.DIVIDE, 0)


# -- expansion --------------------------------------------------------------

def test_expand_single_zero_offset_is_baseline(baseline):
    spec = SweepSpec(DRIVER_NAME, "AirTemp", start_value=0, end_value=5, count=1)
    [sim] = expand(baseline, spec)
    assert sim.sim_id == 0
    assert dict(sim.input_files) == baseline


def test_expand_column_diff_oracle(baseline):
    spec = SweepSpec(DRIVER_NAME, "AirTemp", start_value=-1, end_value=1, count=3)
    sims = expand(baseline, spec)
    base_cols = read_columns(baseline[DRIVER_NAME])
    assert sims[1].input_files[DRIVER_NAME] == baseline[DRIVER_NAME]
    for sim, off in ((sims[0], -1), (sims[2], 1)):
        cols = read_columns(sim.input_files[DRIVER_NAME])
        changed = [h for h in cols if cols[h] != base_cols[h]]
        assert changed == ["AirTemp"]
        for got, base in zip(cols["AirTemp"], base_cols["AirTemp"]):
            assert float(got) == float(base) + off
        assert sim.input_files[PARAMS_NAME] is baseline[PARAMS_NAME]
        assert sim.provenance["offset"] == off


def test_expand_reference_sweep(baseline):
    spec = SweepSpec(DRIVER_NAME, "AirTemp", start_value=-10, end_value=30, count=10000)
    sims = expand(baseline, spec)
    assert [s.sim_id for s in sims] == list(range(10000))


def test_expand_errors_name_the_file(baseline):
    spec = SweepSpec(DRIVER_NAME, "WaterTemp", start_value=0, end_value=1, count=2)
    with pytest.raises(InvalidSpec, match=DRIVER_NAME):
        expand(baseline, spec)
    bad = dict(baseline, **{DRIVER_NAME: b"time,AirTemp\n1,x\n"})
    with pytest.raises(ParseError, match=DRIVER_NAME):
        expand(bad, SweepSpec(DRIVER_NAME, "AirTemp", start_value=0, end_value=1, count=2))


@settings(max_examples=25, deadline=None)
@given(
    count=st.integers(1, 30),
    mode=st.sampled_from(list(Mode)),
    op=st.sampled_from([Operation.ADD, Operation.SUBTRACT, Operation.MULTIPLY]),
    seed=st.integers(0, 2**64 - 1),
)
def test_expand_properties(count, mode, op, seed):
    baseline = inputs.baseline(rows=24)
    if mode is Mode.LINEAR:
        spec = SweepSpec(DRIVER_NAME, "AirTemp", mode, count, -3.0, 4.0, operation=op, seed=seed)
    else:
        spec = SweepSpec(DRIVER_NAME, "AirTemp", mode, count, distribution=Distribution.UNIFORM,
                         params={"a": -2, "b": 2}, operation=op, seed=seed)
    sims = expand(baseline, spec)
    assert len(sims) == count
    again = expand(baseline, spec)
    assert [s.input_files for s in sims] == [s.input_files for s in again]
    base_cols = read_columns(baseline[DRIVER_NAME])
    for s in sims:
        cols = read_columns(s.input_files[DRIVER_NAME])
        assert {h: v for h, v in cols.items() if h != "AirTemp"} == \
               {h: v for h, v in base_cols.items() if h != "AirTemp"}


def test_wire_round_trip():
    lin = SweepSpec(DRIVER_NAME, "AirTemp", start_value=-10.0, end_value=30.0, count=10000)
    assert SweepSpec.from_text(lin.to_text()) == lin
    smp = sampled(Distribution.POISSON, count=100, op=Operation.SUBTRACT, seed=5, **{"lambda": 3.0})
    assert SweepSpec.from_text(smp.to_text()) == smp
    text = smp.to_text()
    for name in ("driver_file", "variable", "mode", "count", "distribution", "operation", "seed"):
        assert f"{name}=" in text


def test_wire_errors_name_field():
    with pytest.raises(InvalidSpec) as err:
        SweepSpec.from_text("driver_file=a.csv\nvariable=AirTemp\nmode=SAMPLED\ncount=3\n")
    assert err.value.field == "distribution"
    with pytest.raises(InvalidSpec) as err:
        SweepSpec.from_text("driver_file=a.csv\nvariable=AirTemp\ncount=zero\n")
    assert err.value.field == "count"
