"""Stealthy poisoning through the aggregation noise.

The attacker swaps the benign zero-mean Gaussian noise for a mean-shifted
Gaussian with the same scale.  The shift sqrt(2*gamma)*scale is exactly
the largest one whose KL divergence from the benign noise stays within
the tolerance gamma, so the attack spends its whole stealth budget.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .nn import ModelSpec, ParamVector, forward
from .privacy import GaussianSpec, gaussian_kl

KL_SLACK = 1e-12


@dataclass(frozen=True)
class AttackProfile:
    gamma: float = 0.0
    enabled: bool = False
    target: str = "aggregation_noise"

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.target != "aggregation_noise":
            raise ValueError(f"unsupported attack point {self.target!r}")

    @property
    def active(self) -> bool:
        return self.enabled and self.gamma > 0


@dataclass(frozen=True)
class AttackReport:
    mu_a: float
    kl: float
    misclassified: int
    objective_value: float
    sigma_used: float


def attack_mean_shift(theta: float, sigma: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return theta + math.sqrt(2.0 * gamma) * sigma


def malicious_spec(benign: GaussianSpec, profile: AttackProfile) -> GaussianSpec:
    """Mean-shifted copy of ``benign``; the shift uses the deployed noise scale."""
    return GaussianSpec(
        attack_mean_shift(benign.mean, benign.scale, profile.gamma), benign.scale
    )


def deployed_spec(benign: GaussianSpec, profile: AttackProfile) -> GaussianSpec:
    return malicious_spec(benign, profile) if profile.enabled else benign


class Stealth(enum.Enum):
    STEALTHY = "stealthy"
    VIOLATED = "violated"


def stealthiness_check(profile: AttackProfile, fa: GaussianSpec, f0: GaussianSpec) -> Stealth:
    if gaussian_kl(fa, f0) <= profile.gamma + KL_SLACK:
        return Stealth.STEALTHY
    return Stealth.VIOLATED


def adversarial_objective(
    spec: ModelSpec, params: ParamVector, inputs: np.ndarray, labels: np.ndarray
) -> tuple[int, float]:
    """Misclassification count of the global model (the attacker maximises it)."""
    if spec.task != "classification":
        raise ValueError("misclassification objective needs a classification model; "
                         "use regression_damage for regression")
    if len(labels) == 0:
        raise ValueError("test set is empty")
    pred = np.argmax(forward(spec, params, inputs), axis=1)
    wrong = int(np.count_nonzero(pred != np.asarray(labels)))
    return wrong, float(wrong)


def regression_damage(spec: ModelSpec, params: ParamVector, inputs, targets) -> float:
    """Summed absolute residual: the regression stand-in for misclassifications."""
    if spec.task != "regression":
        raise ValueError("regression_damage needs a regression model")
    if len(targets) == 0:
        raise ValueError("test set is empty")
    out = forward(spec, params, inputs)
    return float(np.abs(out - np.asarray(targets, dtype=np.float64).reshape(out.shape)).sum())


def attack_report(
    spec: ModelSpec,
    params: ParamVector,
    inputs,
    targets,
    benign: GaussianSpec,
    profile: AttackProfile,
) -> AttackReport:
    fa = deployed_spec(benign, profile)
    if spec.task == "classification":
        wrong, objective = adversarial_objective(spec, params, inputs, targets)
    else:
        wrong, objective = 0, regression_damage(spec, params, inputs, targets)
    return AttackReport(
        mu_a=fa.mean, kl=gaussian_kl(fa, benign), misclassified=wrong,
        objective_value=objective, sigma_used=benign.scale,
    )
