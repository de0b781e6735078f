"""Gaussian mechanism: noise calibration, sampling, KL divergence, budget."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class CalibrationError(ValueError):
    pass


def calibrate_sigma(epsilon: float, delta: float, sensitivity: float = 1.0) -> float:
    """Noise standard deviation sqrt(2 ln(1.25/delta)) * sensitivity / epsilon."""
    if not epsilon > 0:
        raise CalibrationError(f"epsilon must be positive, got {epsilon}")
    if not sensitivity > 0:
        raise CalibrationError(f"sensitivity must be positive, got {sensitivity}")
    if not 0 < delta < 1.25:
        raise CalibrationError(f"delta must lie in (0, 1.25) for a positive log, got {delta}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * sensitivity / epsilon


def laplace_scale(epsilon: float, sensitivity: float = 1.0) -> float:
    """Scale b = sensitivity / epsilon of the Laplace mechanism.

    Calibration only; the training loop always uses the Gaussian mechanism.
    """
    if not (epsilon > 0 and sensitivity > 0):
        raise CalibrationError("epsilon and sensitivity must be positive")
    return sensitivity / epsilon


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta_round: float = 1e-5
    sensitivity: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta_round < 1:
            raise ValueError(f"delta_round must lie in (0, 1), got {self.delta_round}")
        if not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be positive, got {self.sensitivity}")

    @property
    def is_private(self) -> bool:
        """False for the infinite-epsilon sentinel (no noise, no accounting)."""
        return math.isfinite(self.epsilon)

    def sigma(self) -> float:
        return calibrate_sigma(self.epsilon, self.delta_round, self.sensitivity)


@dataclass(frozen=True)
class GaussianSpec:
    mean: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def sample_noise(spec: GaussianSpec, dim: int, rng: np.random.Generator) -> np.ndarray:
    # mean + scale * z: two specs fed identically-seeded streams differ only by the shift
    if dim < 1:
        raise ValueError(f"dim must be at least 1, got {dim}")
    return spec.mean + spec.scale * rng.standard_normal(dim)


def gaussian_kl(fa: GaussianSpec, f0: GaussianSpec) -> float:
    """KL(fa || f0) between two univariate normals."""
    var_a, var_0 = fa.scale ** 2, f0.scale ** 2
    if fa.scale == f0.scale:
        return (fa.mean - f0.mean) ** 2 / (2.0 * var_0)
    return (
        math.log(f0.scale / fa.scale)
        + (var_a + (fa.mean - f0.mean) ** 2) / (2.0 * var_0)
        - 0.5
    )


class ChargeStatus(enum.Enum):
    OK = "ok"
    BUDGET_EXHAUSTED = "budget_exhausted"


def _exact(x: float) -> Fraction:
    # decimal value as written (shortest repr), so 100 x 1e-5 == 1e-3 exactly
    return Fraction(repr(float(x)))


@dataclass
class PrivacyAccountant:
    """Linear composition of a fixed per-round spend against a budget."""

    budget: float
    spent: float = 0.0
    rounds_charged: int = 0

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError(f"budget must be non-negative, got {self.budget}")
        self._total = _exact(self.spent)

    def charge(self, delta_round: float) -> ChargeStatus:
        proposed = self._total + _exact(delta_round)
        if math.isfinite(self.budget) and proposed > _exact(self.budget):
            return ChargeStatus.BUDGET_EXHAUSTED
        self.rounds_charged += 1
        self._total = proposed
        self.spent = float(proposed)
        return ChargeStatus.OK

    def rounds_permitted(self, delta_round: float) -> int:
        return int(_exact(self.budget) // _exact(delta_round))


def charge(acct: PrivacyAccountant, p: PrivacyParams) -> ChargeStatus:
    return acct.charge(p.delta_round)
