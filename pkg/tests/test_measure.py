import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flagdoe.measure import (
    DeviceModel,
    DeviceUnavailable,
    ExternalCommandBackend,
    Measurement,
    MeasureError,
    PowerTrace,
    SimulatedBackend,
    TraceFileBackend,
    WallClockBackend,
    integrate_trace,
    measure_via_backend,
    parse_energy_output,
    read_trace,
    simulate_execution,
    window_trace,
    write_trace,
)

from oracles import trapezoid


def const_trace(power, seconds, period=1e-3):
    n = int(round(seconds / period))
    t = np.linspace(0.0, seconds, n + 1)
    return PowerTrace(t, np.full(t.size, power))


def ramp_trace(seconds=1.0, period=1e-3):
    n = int(round(seconds / period))
    t = np.linspace(0.0, seconds, n + 1)
    return PowerTrace(t, t / seconds)


def test_constant_one_watt_two_seconds():
    m = integrate_trace(const_trace(1.0, 2.0))
    assert m.energy == pytest.approx(2.0, rel=1e-12)
    assert m.time == pytest.approx(2.0)
    assert m.avg_power == pytest.approx(1.0)
    assert m.is_ok


def test_constant_168_milliwatts():
    m = integrate_trace(const_trace(0.168, 1.0))
    assert m.energy == pytest.approx(0.168, rel=1e-12)
    assert m.avg_power == pytest.approx(0.168, rel=1e-12)


def test_linear_ramp_within_tenth_percent():
    assert integrate_trace(ramp_trace()).energy == pytest.approx(0.5, rel=1e-3)


def test_integrate_matches_loop_oracle():
    rng = np.random.default_rng(0)
    t = np.cumsum(rng.uniform(0.5e-3, 1.5e-3, 500))
    p = rng.uniform(0, 3, 500)
    assert integrate_trace(PowerTrace(t, p)).energy == pytest.approx(trapezoid(t, p), rel=1e-12)


def test_trace_validation():
    with pytest.raises(MeasureError):
        PowerTrace(np.array([0.0, 0.0, 1.0]), np.array([1.0, 1.0, 1.0]))
    with pytest.raises(MeasureError):
        PowerTrace(np.array([0.0, 1.0]), np.array([1.0, np.nan]))
    with pytest.raises(MeasureError):
        integrate_trace(PowerTrace(np.array([0.0]), np.array([1.0])))


def test_window_full_span_identical():
    t = ramp_trace()
    assert integrate_trace(window_trace(t, 0.0, 1.0)).energy == integrate_trace(t).energy


def test_window_constant_quarter_second():
    w = window_trace(const_trace(1.0, 1.0), 0.1, 0.35)
    assert integrate_trace(w).energy == pytest.approx(0.25, rel=1e-12)


def test_window_ramp_middle_half():
    w = window_trace(ramp_trace(), 0.25, 0.75)
    assert integrate_trace(w).energy == pytest.approx(0.25, rel=1e-12)


def test_window_outside_span_rejected():
    with pytest.raises(MeasureError):
        window_trace(ramp_trace(), 0.5, 1.5)
    with pytest.raises(MeasureError):
        window_trace(ramp_trace(), 0.5, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0005, 0.4995), st.floats(0.5005, 0.9995), st.integers(0, 2**32 - 1))
def test_window_additivity(b, c, seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 1, 60))
    t = np.unique(np.concatenate([[0.0], t, [1.0]]))
    tr = PowerTrace(t, rng.uniform(0, 5, t.size))
    left = integrate_trace(window_trace(tr, 0.0, b)).energy
    right = integrate_trace(window_trace(tr, b, c)).energy
    whole = integrate_trace(window_trace(tr, 0.0, c)).energy
    assert left + right == pytest.approx(whole, rel=1e-12, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=50))
def test_nonnegative_power_gives_nonnegative_energy(p):
    t = np.arange(len(p), dtype=float)
    assert integrate_trace(PowerTrace(t, np.array(p))).energy >= 0


def quadratic_error(period):
    n = int(round(1.0 / period))
    t = np.linspace(0.0, 1.0, n + 1)
    return abs(integrate_trace(PowerTrace(t, 3 * t**2 + 1)).energy - 2.0)


def test_quadratic_error_second_order():
    errors = [quadratic_error(1e-2 / 2**i) for i in range(4)]
    for coarse, fine in zip(errors, errors[1:]):
        assert coarse / fine == pytest.approx(4.0, rel=0.01)


def test_trace_file_round_trip(tmp_path):
    t = ramp_trace(0.05)
    write_trace(t, tmp_path / "t.txt")
    back = read_trace(tmp_path / "t.txt")
    assert np.array_equal(back.timestamps, t.timestamps)
    assert np.array_equal(back.power, t.power)


def test_read_trace_reports_bad_line(tmp_path):
    (tmp_path / "bad.txt").write_text("# header\n0 1\n0.1 x\n")
    with pytest.raises(MeasureError, match=":3:"):
        read_trace(tmp_path / "bad.txt")


# -- simulated device -------------------------------------------------------


def test_simulate_constant_168_mw():
    m = DeviceModel(base_power=0.168, base_time=1.0)
    e = integrate_trace(simulate_execution(m, {}, 1.0)).energy
    assert e == pytest.approx(0.168, rel=5e-4)


def test_simulate_bit_reproducible():
    m = DeviceModel(base_power=1.0, base_time=0.5, noise=0.01, jitter=0.1, run_noise=0.01, seed=9)
    a = simulate_execution(m, {"x": 1}, seed=3)
    b = simulate_execution(m, {"x": 1}, seed=3)
    assert np.array_equal(a.timestamps, b.timestamps)
    assert np.array_equal(a.power, b.power)
    assert a.timestamps[0] == 0.0 and a.timestamps[-1] == pytest.approx(0.5)


def test_simulate_zero_effects_independent_of_levels():
    m = DeviceModel(power_effects={"a": 0.0}, noise=0.01, seed=1)
    a = simulate_execution(m, {"a": 1}, 0.2)
    b = simulate_execution(m, {"a": -1}, 0.2)
    assert np.array_equal(a.power, b.power)


def test_simulate_single_factor_four_percent():
    m = DeviceModel(base_power=2.0, power_effects={"a": 0.02}, noise=0.005, jitter=0.05, seed=5)
    means = {}
    for x in (1, -1):
        reps = [integrate_trace(simulate_execution(m, {"a": x}, 0.1, seed=200 + 100 * x + i)).avg_power for i in range(32)]
        means[x] = np.mean(reps)
    assert (means[1] - means[-1]) / 2.0 == pytest.approx(0.04, abs=0.002)
    assert means[1] / means[-1] == pytest.approx(1.02 / 0.98, rel=2e-3)


def test_simulate_duration_too_short():
    with pytest.raises(MeasureError, match="ten sample periods"):
        simulate_execution(DeviceModel(), {}, 0.005)


def test_device_model_validation():
    with pytest.raises(MeasureError):
        DeviceModel(sample_period=0)
    with pytest.raises(MeasureError):
        DeviceModel(power_effects={"a": 1.5})


def test_simulated_backend_levels_from_spellings():
    b = SimulatedBackend(DeviceModel(power_effects={"x": 0.1, "y": 0.1}), {"y": ("-fy-on", "-fy-off")})
    assert b.levels_for("-O2 -fx -fy-off") == ("-O2", {"x": 1, "y": -1})
    assert b.levels_for("-O1 -fno-x") == ("-O1", {"x": -1})


# -- backends ---------------------------------------------------------------


def test_external_backend_parses_output():
    b = ExternalCommandBackend("printf 'energy_j=5.78\\ntime_s=3.2\\n'")
    m = measure_via_backend(b, "true")
    assert (m.energy, m.time) == (5.78, 3.2)
    assert m.avg_power == pytest.approx(1.80625)


def test_external_backend_unparseable_is_unavailable():
    m = measure_via_backend(ExternalCommandBackend("echo energy_j=1"), "true")
    assert m.status == "unavailable"
    assert "time_s" in m.reason


def test_nonzero_exit_is_unavailable():
    for b in (ExternalCommandBackend(), WallClockBackend()):
        m = measure_via_backend(b, "echo boom >&2; exit 3")
        assert m.status == "unavailable"
        assert "exit status 3" in m.reason and "boom" in m.reason


def test_trace_file_backend(tmp_path):
    write_trace(const_trace(1.0, 2.0), tmp_path / "prog.trace")
    b = TraceFileBackend("{bin}.trace", run=False)
    m = measure_via_backend(b, "", binary=str(tmp_path / "prog"))
    assert m.energy == pytest.approx(2.0)


def test_trace_file_backend_missing_file(tmp_path):
    m = measure_via_backend(TraceFileBackend("{bin}.trace"), "true", binary=str(tmp_path / "nope"))
    assert m.status == "unavailable"


def test_wall_clock_without_nominal_power_is_time_only():
    b = WallClockBackend()
    assert b.metrics == ("time",)
    m = measure_via_backend(b, f"{sys.executable} -c pass")
    assert m.is_ok and m.energy is None and m.time > 0


def test_wall_clock_with_nominal_power():
    m = measure_via_backend(WallClockBackend(nominal_power=2.0), "true")
    assert m.energy == pytest.approx(2.0 * m.time)


def test_device_unavailable_propagates():
    class Gone(SimulatedBackend):
        def measure(self, ctx):
            raise DeviceUnavailable("unplugged")

    with pytest.raises(DeviceUnavailable):
        measure_via_backend(Gone(DeviceModel()), "x")


def test_parse_energy_output_rejects_garbage():
    with pytest.raises(MeasureError):
        parse_energy_output("energy_j=abc\ntime_s=1")
    assert parse_energy_output("noise\n energy_j = 1.5\ntime_s=2\n") == (1.5, 2.0)


def test_measurement_value_by_metric():
    m = Measurement.ok(4.0, 2.0)
    assert (m.value("energy"), m.value("time"), m.value("power")) == (4.0, 2.0, 2.0)


def test_external_tempfail_means_device_gone():
    with pytest.raises(DeviceUnavailable, match="logger offline"):
        measure_via_backend(ExternalCommandBackend("echo logger offline >&2; exit 75"), "true")
