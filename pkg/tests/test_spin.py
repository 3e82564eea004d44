import math

import numpy as np
import pytest

from scaledrop.spin import (
    VARIATION_SIGMA,
    MtjDevice,
    VariationModel,
    barrier_factor,
    calibrate_current,
    generate_bitstream,
    lag1_autocorrelation,
    sample_varied_p,
    switching_probability,
    switching_time,
    varied_rates,
)

DEV = MtjDevice()


def test_no_pulse_no_switch():
    assert switching_probability(DEV, 50e-6, 0.0) == 0.0


def test_long_pulse_switches():
    assert switching_probability(DEV, 30e-6, 1e3) == pytest.approx(1.0, abs=1e-12)


def test_critical_current_example():
    assert barrier_factor(1.0) == pytest.approx(-0.14159, abs=1e-5)
    assert switching_time(DEV, 100e-6) == pytest.approx(3.47e-12, rel=1e-3)
    assert switching_probability(DEV, 100e-6, 10e-9) == pytest.approx(1.0, abs=1e-12)


def test_scalar_oracle_at_40uA():
    i = 0.4
    tau = 1e-9 * math.exp(40 * (1 - 2 * i * (math.pi / 2 - i)))
    assert switching_probability(DEV, 40e-6) == pytest.approx(1 - math.exp(-10e-9 / tau), rel=1e-12)
    assert switching_probability(DEV, 40e-6) == pytest.approx(0.547514558105271, rel=1e-12)


def test_negative_inputs_rejected():
    with pytest.raises(ValueError):
        switching_probability(DEV, -1e-6)
    with pytest.raises(ValueError):
        switching_probability(DEV, 1e-6, -1e-9)


@pytest.mark.parametrize("field", ["delta_e_over_kT", "tau0", "ic0", "pulse_t"])
def test_device_parameters_positive(field):
    with pytest.raises(ValueError):
        MtjDevice(**{field: 0.0})


def test_monotone_in_time():
    t = np.linspace(0, 100e-9, 200)
    for i in (20e-6, 39e-6, 60e-6):
        p = switching_probability(DEV, i, t)
        assert np.all(np.diff(p) >= 0)


def test_monotone_in_current_up_to_turning_point():
    i = np.linspace(1e-9, DEV.turning_current, 2000)
    assert np.all(np.diff(switching_probability(DEV, i, 1e-12)) >= 0)


def test_probability_turns_beyond_turning_point():
    # the barrier quadratic has its minimum at I = pi/4 * Ic0
    a, b = DEV.turning_current, 1.5 * DEV.ic0
    assert switching_time(DEV, b) > switching_time(DEV, a)


def test_calibration_round_trip():
    i = calibrate_current(DEV, 0.5, 10e-9)
    assert abs(switching_probability(DEV, i, 10e-9) - 0.5) <= 1e-6
    assert i == pytest.approx(39.78e-6, rel=1e-3)


def test_calibration_is_ordered():
    assert calibrate_current(DEV, 0.3) < calibrate_current(DEV, 0.5) < calibrate_current(DEV, 0.7)


@pytest.mark.parametrize("p", [0.0, 1.0, 1.5])
def test_calibration_target_range(p):
    with pytest.raises(ValueError):
        calibrate_current(DEV, p)


def test_unreachable_target():
    # almost no barrier: a 1 ps pulse never reaches 0.5, a 1 us pulse always exceeds it
    soft = MtjDevice(delta_e_over_kT=0.1)
    for t in (1e-12, 1e-6):
        with pytest.raises(ValueError, match="not reachable"):
            calibrate_current(soft, 0.5, t)


def test_no_variation(rng):
    assert sample_varied_p(VariationModel(0.0, 0.0), 0.37, rng) == 0.37


def test_level_one_spread():
    rng = np.random.default_rng(0)
    vm = VariationModel.level(1)
    draws = np.array([sample_varied_p(vm, 0.5, rng) for _ in range(20000)])
    assert np.mean(np.abs(draws - 0.5) <= 0.1) >= 0.996


def test_levels():
    assert [VariationModel.level(k).sigma for k in (1, 2, 3)] == [0.1 / 3, 0.2 / 3, 0.1]
    assert VARIATION_SIGMA[3] == 0.1


def test_clamped_at_one():
    rng = np.random.default_rng(0)
    draws = [sample_varied_p(VariationModel(0.5, 0.01), 0.99, rng) for _ in range(100)]
    assert max(draws) == 1.0


def test_varied_rates_frozen_per_seed():
    vm = VariationModel.level(3)
    assert varied_rates(vm, [0.2, 0.5], 4) == varied_rates(vm, [0.2, 0.5], 4)
    assert varied_rates(vm, [0.2, 0.5], 4) != varied_rates(vm, [0.2, 0.5], 5)


def test_bitstream_certain(rng):
    assert np.all(generate_bitstream(1.0, 1000, rng).bits == 1)


def test_bitstream_statistics():
    i = calibrate_current(DEV, 0.5)
    bs = generate_bitstream(DEV, 1_000_000, np.random.default_rng(2), current=i)
    assert abs(bs.ones_fraction - 0.5) <= 0.002
    assert abs(lag1_autocorrelation(bs.bits)) <= 0.005


def test_time_ledger(rng):
    bs = generate_bitstream(0.5, 1000, rng)
    assert bs.cycles == 1000
    assert bs.time_s == pytest.approx(1000 * 15e-9, rel=1e-12)


def test_device_source_needs_current(rng):
    with pytest.raises(ValueError):
        generate_bitstream(DEV, 10, rng)
