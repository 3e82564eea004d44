"""SOT-MTJ stochastic bit: switching probability, current calibration,
process variation and bitstream generation.

The switching model is thermally activated:

    tau  = tau0 * exp(Delta * (1 - 2 i (pi/2 - i))),   i = I / Ic0
    p_sw = 1 - exp(-t / tau)

The barrier factor ``1 - 2 i (pi/2 - i)`` is a quadratic in ``i`` with its
minimum at ``i = pi/4``. ``p_sw`` therefore rises with current only up to
``pi/4 * Ic0`` and falls again beyond it, so calibration searches
``(0, min(1, pi/4) * Ic0]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect

SET_TIME = 10e-9
RESET_TIME = 5e-9
# sigma per variation level; 3 sigma at level 3 is the +-10 % fluctuation band
VARIATION_SIGMA = {0: 0.0, 1: 0.1 / 3, 2: 0.2 / 3, 3: 0.1}


@dataclass(frozen=True)
class MtjDevice:
    delta_e_over_kT: float = 40.0
    tau0: float = 1e-9
    ic0: float = 100e-6
    pulse_t: float = 10e-9

    def __post_init__(self):
        for name in ("delta_e_over_kT", "tau0", "ic0", "pulse_t"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def turning_current(self) -> float:
        """Current above which ``p_sw`` stops increasing."""
        return math.pi / 4 * self.ic0


@dataclass(frozen=True)
class VariationModel:
    mu: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @classmethod
    def level(cls, k: int) -> "VariationModel":
        return cls(0.0, VARIATION_SIGMA[k])


def barrier_factor(ratio):
    """``1 - 2 i (pi/2 - i)``; kept separate so alternative forms can be swapped in."""
    return 1.0 - 2.0 * ratio * (math.pi / 2 - ratio)


def switching_time(dev: MtjDevice, current):
    ratio = np.asarray(current, dtype=np.float64) / dev.ic0
    with np.errstate(over="ignore"):
        return dev.tau0 * np.exp(dev.delta_e_over_kT * barrier_factor(ratio))


def switching_probability(dev: MtjDevice, current, t=None):
    """Probability that a pulse of ``current`` amperes lasting ``t`` seconds switches the MTJ."""
    t = dev.pulse_t if t is None else t
    current_arr, t_arr = np.asarray(current, dtype=np.float64), np.asarray(t, dtype=np.float64)
    if np.any(current_arr < 0) or np.any(t_arr < 0):
        raise ValueError("current and pulse duration must be non-negative")
    tau = switching_time(dev, current_arr)
    p = np.clip(-np.expm1(-t_arr / tau), 0.0, 1.0)
    return float(p) if p.ndim == 0 else p


def calibrate_current(dev: MtjDevice, p_target: float, t=None, tol: float = 1e-6) -> float:
    """Current giving switching probability ``p_target`` for pulse length ``t``."""
    if not 0 < p_target < 1:
        raise ValueError("p_target must lie in (0, 1)")
    hi = min(1.0, math.pi / 4) * dev.ic0
    f = lambda i: switching_probability(dev, i, t) - p_target
    if f(0.0) >= 0 or f(hi) <= 0:
        raise ValueError(f"switching probability {p_target} is not reachable on (0, {hi:.3e}] A")
    current = bisect(f, 0.0, hi, xtol=1e-30, rtol=4 * np.finfo(float).eps, maxiter=400)
    if abs(f(current)) > tol:
        raise ValueError(f"calibration residual {abs(f(current)):.2e} exceeds {tol}")
    return float(current)


def sample_varied_p(vm: VariationModel, p_nominal: float, rng: np.random.Generator) -> float:
    """Nominal probability plus a Gaussian device offset, clamped to [0, 1]."""
    if not 0 <= p_nominal <= 1:
        raise ValueError("p_nominal must lie in [0, 1]")
    return float(np.clip(p_nominal + rng.normal(vm.mu, vm.sigma), 0.0, 1.0))


def varied_rates(vm: VariationModel, rates, seed: int) -> list[float]:
    """One frozen draw per layer: the manufactured device for this run."""
    rng = np.random.default_rng([seed, 0x5EED])
    return [sample_varied_p(vm, p, rng) for p in rates]


@dataclass
class Bitstream:
    bits: np.ndarray
    p: float
    cycles: int
    time_s: float

    @property
    def ones_fraction(self) -> float:
        return float(self.bits.mean()) if self.bits.size else float("nan")


def generate_bitstream(source, n: int, rng: np.random.Generator, current: float | None = None) -> Bitstream:
    """``n`` independent SET/RESET cycles.

    ``source`` is either a probability or an :class:`MtjDevice`, in which case
    ``current`` selects the operating point. Each bit costs one SET (10 ns)
    and one RESET (5 ns).
    """
    if isinstance(source, MtjDevice):
        if current is None:
            raise ValueError("a device source needs a current")
        p = switching_probability(source, current)
    else:
        p = float(source)
    if not 0 <= p <= 1:
        raise ValueError("probability must lie in [0, 1]")
    bits = (rng.random(n) < p).astype(np.uint8)
    return Bitstream(bits, p, n, n * (SET_TIME + RESET_TIME))


def lag1_autocorrelation(bits: np.ndarray) -> float:
    x = np.asarray(bits, dtype=np.float64)
    x = x - x.mean()
    denom = float(np.dot(x, x))
    return float(np.dot(x[:-1], x[1:]) / denom) if denom else 0.0
