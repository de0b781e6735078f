"""Synchronous federated averaging with median-norm clipping and Gaussian noise.

One round: sample ``k`` of ``K`` clients, run local SGD on each, take the
median update norm as sensitivity ``S``, clip every update to ``S``, add a
single noise vector drawn from N(mu, (sigma*S)^2) to the sum and average.
A compromised aggregation path replaces the benign noise (mu = 0) with
the mean-shifted attack noise.  Training stops when the accuracy target
is met, the privacy budget cannot pay for another round (the last global
model is kept), or ``max_rounds`` is reached.

The sensitivity is computed from the current round's unclipped norms, so
it is itself data-dependent; it is used as-is here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np

from . import rng as rngs
from .attack import AttackProfile, deployed_spec
from .datasets import Dataset
from .nn import Batch, ModelSpec, ParamVector, evaluate, init_params, loss_and_gradient
from .privacy import (
    ChargeStatus,
    GaussianSpec,
    PrivacyAccountant,
    PrivacyParams,
    calibrate_sigma,
    gaussian_kl,
    sample_noise,
)
from .records import RoundRecord


class ConfigError(ValueError):
    pass


class RoundError(RuntimeError):
    def __init__(self, round_no: int, cause: Exception):
        super().__init__(f"round {round_no}: {cause}")
        self.round = round_no
        self.__cause__ = cause


@dataclass(frozen=True)
class FLConfig:
    total_clients: int = 100
    clients_per_round: int = 30
    batch_size: int = 32
    local_epochs: int = 10
    learning_rate: float = 0.01
    # classification: stop once accuracy >= tau; regression: once test loss <= tau
    accuracy_threshold: float | None = None
    max_rounds: int = 30
    master_seed: int = 0

    def __post_init__(self):
        for name in ("total_clients", "clients_per_round", "batch_size", "local_epochs", "max_rounds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.clients_per_round > self.total_clients:
            raise ConfigError(
                f"clients_per_round ({self.clients_per_round}) exceeds "
                f"total_clients ({self.total_clients})"
            )
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")

    @classmethod
    def consumption(cls, **overrides) -> "FLConfig":
        """Table defaults for the regression (power consumption) task."""
        return cls(**{"batch_size": 7, "learning_rate": 0.1, **overrides})


@dataclass(frozen=True)
class FederatedData:
    clients: Mapping[int, Dataset]
    test: Dataset


def select_clients(K: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct client ids drawn uniformly without replacement, ascending."""
    if k > K:
        raise ConfigError(f"cannot select {k} clients out of {K}")
    if k < 1:
        raise ConfigError("must select at least one client")
    return np.sort(rng.choice(K, size=k, replace=False))


class LocalUpdate(NamedTuple):
    delta: ParamVector
    norm: float
    train_loss: float


def local_train(
    spec: ModelSpec,
    data: Dataset,
    global_params: ParamVector,
    cfg: FLConfig,
    rng: np.random.Generator | None = None,
) -> LocalUpdate:
    """Local epochs of minibatch SGD from the global weights.

    Each epoch visits the client's samples once in an order drawn from
    ``rng`` (file order when ``rng`` is None).  ``train_loss`` is the mean
    batch loss over the final epoch.
    """
    n = len(data)
    if n == 0:
        raise ValueError("client has no data")
    w = global_params.values.copy()
    shapes = global_params.shapes
    b = cfg.batch_size
    lr = cfg.learning_rate
    last_losses: list[float] = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        last_losses = []
        for start in range(0, n, b):
            idx = order[start:start + b]
            batch = Batch(data.inputs[idx], data.targets[idx])
            loss, grad = loss_and_gradient(spec, ParamVector(w, shapes), batch)
            last_losses.append(loss)
            if lr > 0:
                w = w - lr * grad.values
    delta = w - global_params.values
    return LocalUpdate(ParamVector(delta, shapes), float(np.linalg.norm(delta)),
                       float(np.mean(last_losses)))


def median_sensitivity(norms: Sequence[float]) -> float:
    if len(norms) == 0:
        raise ValueError("median of an empty norm list")
    return float(np.median(np.asarray(norms, dtype=np.float64)))


def clip_update(delta: ParamVector, zeta: float, S: float) -> ParamVector:
    """Scale ``delta`` by 1/max(1, zeta/S) so its norm is at most ``S``."""
    if not S > 0:
        raise ValueError(f"clipping bound must be positive, got {S}")
    factor = max(1.0, zeta / S)
    if factor == 1.0:
        return delta
    return delta.with_values(delta.values / factor)


def aggregate(
    w_t: ParamVector,
    clipped: Mapping[int, ParamVector] | Sequence[ParamVector],
    noise: np.ndarray,
) -> ParamVector:
    """w_t + (sum of clipped updates + noise) / k.

    With a mapping the sum runs in ascending client-id order, so the
    result does not depend on the order clients reported in.
    """
    if isinstance(clipped, Mapping):
        updates = [clipped[c] for c in sorted(clipped)]
    else:
        updates = list(clipped)
    k = len(updates)
    if k == 0:
        raise ValueError("nothing to aggregate")
    d = len(w_t)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (d,) or any(len(u) != d for u in updates):
        raise ValueError("update, noise and model dimensions disagree")
    total = np.zeros(d)
    for u in updates:
        total = total + u.values
    total = total + noise
    return w_t.with_values(w_t.values + total / k)


@dataclass
class TrainingHistory:
    records: list[RoundRecord] = field(default_factory=list)
    stop_reason: str = ""
    initial_loss: float = float("nan")
    initial_accuracy: float = float("nan")


class FederatedSession:
    """Round-by-round driver; ``run_training`` and the RL environment share it."""

    def __init__(
        self,
        spec: ModelSpec,
        data: FederatedData,
        fl: FLConfig,
        privacy: PrivacyParams,
        budget: float,
        attack: AttackProfile | None = None,
        params: ParamVector | None = None,
    ):
        if len(data.clients) != fl.total_clients:
            raise ConfigError(
                f"{len(data.clients)} client shards for total_clients={fl.total_clients}"
            )
        self.spec = spec
        self.data = data
        self.fl = fl
        self.privacy = privacy
        self.attack = attack or AttackProfile()
        self.accountant = PrivacyAccountant(budget)
        seed = fl.master_seed
        self.params = params if params is not None else init_params(spec, rngs.stream(seed, "init"))
        self.round = 0
        self.done = False
        self.stop_reason = ""
        self.last_loss, self.last_accuracy = evaluate(spec, self.params, data.test.inputs, data.test.targets)
        self.initial_loss, self.initial_accuracy = self.last_loss, self.last_accuracy
        self.last_attacker_loss = 0.0

    def _threshold_met(self, loss: float, acc: float) -> bool:
        tau = self.fl.accuracy_threshold
        if tau is None:
            return False
        if self.spec.task == "classification":
            return acc >= tau
        return loss <= tau

    def step(self, epsilon: float | None = None) -> RoundRecord | None:
        """Run one round at privacy loss ``epsilon``; None when the budget stops training."""
        if self.done:
            raise RuntimeError("training already finished")
        t = self.round + 1
        try:
            return self._step(t, self.privacy.epsilon if epsilon is None else epsilon)
        except (ArithmeticError, ValueError) as exc:
            raise RoundError(t, exc) from exc

    def _step(self, t: int, epsilon: float) -> RoundRecord | None:
        fl, seed = self.fl, self.fl.master_seed
        chosen = select_clients(fl.total_clients, fl.clients_per_round, rngs.stream(seed, "select", t))
        updates = {
            int(c): local_train(self.spec, self.data.clients[int(c)], self.params, fl,
                                rngs.stream(seed, "client", t, int(c)))
            for c in chosen
        }
        S = median_sensitivity([u.norm for u in updates.values()])
        private = math.isfinite(epsilon)
        if not private:
            # clipping belongs to the DP recipe; the no-DP baseline is plain FedAvg
            clipped = {c: u.delta for c, u in updates.items()}
        elif S > 0:
            clipped = {c: clip_update(u.delta, u.norm, S) for c, u in updates.items()}
        else:
            clipped = {c: u.delta.with_values(np.zeros(len(u.delta))) for c, u in updates.items()}

        d = len(self.params)
        sigma = benign = fa = None
        gamma = self.attack.gamma if self.attack.enabled else 0.0
        noise_kl = 0.0
        if private and S > 0:
            sigma = calibrate_sigma(epsilon, self.privacy.delta_round, self.privacy.sensitivity)
            benign = GaussianSpec(0.0, sigma * S)
            fa = deployed_spec(benign, self.attack)
            noise = sample_noise(fa, d, rngs.stream(seed, "noise", t))
            noise_kl = gaussian_kl(fa, benign)
        else:
            if private:
                sigma = calibrate_sigma(epsilon, self.privacy.delta_round, self.privacy.sensitivity)
            noise = np.zeros(d)

        if private and self.accountant.charge(self.privacy.delta_round) is ChargeStatus.BUDGET_EXHAUSTED:
            self.done, self.stop_reason = True, "budget_exhausted"
            return None

        new_params = aggregate(self.params, clipped, noise)
        loss, acc = evaluate(self.spec, new_params, self.data.test.inputs, self.data.test.targets)
        attacker_loss = 0.0
        if fa is not None and fa != benign:
            shadow_noise = sample_noise(benign, d, rngs.stream(seed, "noise", t))
            shadow = aggregate(self.params, clipped, shadow_noise)
            shadow_loss, _ = evaluate(self.spec, shadow, self.data.test.inputs, self.data.test.targets)
            attacker_loss = loss - shadow_loss

        self.params = new_params
        self.round = t
        self.last_loss, self.last_accuracy = loss, acc
        self.last_attacker_loss = attacker_loss
        record = RoundRecord(
            round=t,
            epsilon=float(epsilon),
            sigma=float(sigma) if sigma is not None else 0.0,
            gamma=float(gamma),
            sensitivity=S,
            train_loss=float(np.mean([u.train_loss for u in updates.values()])),
            test_loss=loss,
            test_accuracy=acc,
            attacker_loss=attacker_loss,
            delta_spent=self.accountant.spent,
            noise_kl=noise_kl,
        )
        if self._threshold_met(loss, acc):
            self.done, self.stop_reason = True, "threshold"
        elif t >= fl.max_rounds:
            self.done, self.stop_reason = True, "max_rounds"
        return record


class RoundHook(Protocol):
    """Optional per-round controller (e.g. a trained privacy-selection policy)."""

    def choose_epsilon(self, session: FederatedSession) -> float: ...

    def observe(self, session: FederatedSession, record: RoundRecord) -> RoundRecord: ...


@dataclass
class TrainingResult:
    params: ParamVector
    history: TrainingHistory


def run_training(
    spec: ModelSpec,
    data: FederatedData,
    fl: FLConfig,
    privacy: PrivacyParams,
    budget: float,
    attack: AttackProfile | None = None,
    agent: RoundHook | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> TrainingResult:
    session = FederatedSession(spec, data, fl, privacy, budget, attack)
    history = TrainingHistory(initial_loss=session.initial_loss,
                              initial_accuracy=session.initial_accuracy)
    while not session.done:
        eps = agent.choose_epsilon(session) if agent is not None else None
        record = session.step(eps)
        if record is None:
            break
        if agent is not None:
            record = agent.observe(session, record)
        history.records.append(record)
        if on_round is not None:
            on_round(record)
    history.stop_reason = session.stop_reason
    return TrainingResult(session.params, history)


def build_federated_data(
    train: Dataset,
    test: Dataset,
    K: int,
    partition: Mapping[int, np.ndarray],
) -> FederatedData:
    if len(partition) != K:
        raise ConfigError(f"partition has {len(partition)} clients, expected {K}")
    return FederatedData({c: train.subset(partition[c]) for c in range(K)}, test)
