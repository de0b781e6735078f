"""Federated training wrapped as an episodic RL environment, and frozen-policy replays."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from . import rng as rngs
from .attack import AttackProfile
from .defense import (
    AgentState,
    BaselineTable,
    Observation,
    QTable,
    RLConfig,
    Verdict,
    apply_action,
    detect,
    discretize_state,
    reward,
    round_key,
)
from .federated import FederatedData, FederatedSession, FLConfig, RoundError
from .nn import ModelSpec, NonFiniteGradientError
from .privacy import PrivacyParams
from .records import RoundRecord


def diverged(exc: RoundError) -> bool:
    """True when a round failed because training blew up numerically."""
    return isinstance(exc.__cause__, NonFiniteGradientError)


def episode_seed(master_seed: int, episode: int) -> int:
    return int(rngs.stream(master_seed, "episode", episode).integers(2**31))


class FLEnvironment:
    """Each episode is a fresh federated run (new weights, new noise) under one attack profile."""

    def __init__(
        self,
        spec: ModelSpec,
        data: FederatedData,
        fl: FLConfig,
        privacy: PrivacyParams,
        budget: float,
        attack: AttackProfile | None = None,
        fixed_seed: bool = False,
    ):
        self.spec, self.data, self.fl = spec, data, fl
        self.privacy, self.budget = privacy, budget
        self.attack = attack or AttackProfile()
        self.attack_free = not self.attack.active
        self.fixed_seed = fixed_seed
        self.session: FederatedSession | None = None
        self.records: list[RoundRecord] = []
        self.diverged = False

    def reset(self, episode: int) -> Observation:
        seed = self.fl.master_seed if self.fixed_seed else episode_seed(self.fl.master_seed, episode)
        self.session = FederatedSession(self.spec, self.data, replace(self.fl, master_seed=seed),
                                        self.privacy, self.budget, self.attack)
        self.records = []
        self.diverged = False
        return Observation(0.0, self.session.initial_loss)

    def step(self, eps: float):
        try:
            rec = self.session.step(eps)
        except RoundError as exc:
            if not diverged(exc):
                raise
            # the noise blew the model up: the episode ends with an unbounded loss
            self.diverged = True
            return Observation(self.session.last_attacker_loss, math.inf), True
        if rec is None:
            return None, True
        self.records.append(rec)
        f_l = rec.test_loss if math.isfinite(rec.test_loss) else math.inf
        return Observation(rec.attacker_loss, f_l), self.session.done or not math.isfinite(rec.test_loss)


@dataclass
class DetectionRow:
    round: int
    epsilon: float
    state: AgentState
    baseline: float | None
    observed: float
    verdict: Verdict


class PolicyReplay:
    """Round hook that drives epsilon from a frozen greedy Q-table and runs detection.

    The defender cannot see the attacker loss at deployment, so unless
    ``observe_attacker_loss`` is set the state uses m_l = 0, matching the
    attack-free runs the baseline came from.  Passing ``schedule`` replays
    a fixed list of epsilon indices instead of consulting the table.
    """

    def __init__(
        self,
        q: QTable,
        cfg: RLConfig,
        baseline: BaselineTable | None = None,
        margin: float = 0.2,
        schedule: list[int] | None = None,
        observe_attacker_loss: bool = False,
    ):
        self.q, self.cfg, self.baseline, self.margin = q, cfg, baseline, margin
        self.schedule = schedule
        self.observe_attacker_loss = observe_attacker_loss
        self.eps_idx = cfg.initial_eps_index
        self.rows: list[DetectionRow] = []
        self.chosen: list[int] = []
        self._key: AgentState | None = None

    def choose_epsilon(self, session: FederatedSession) -> float:
        m_l = session.last_attacker_loss if self.observe_attacker_loss else 0.0
        s = discretize_state(m_l, session.last_loss, self.cfg.eps_grid[self.eps_idx], self.cfg)
        if self.schedule is not None:
            idx = self.schedule[session.round]
        else:
            idx = apply_action(s.eps_idx, self.q.greedy(s), len(self.cfg.eps_grid))
        self._key = round_key(s, idx)
        self.eps_idx = idx
        self.chosen.append(idx)
        return self.cfg.eps_grid[idx]

    def observe(self, session: FederatedSession, record: RoundRecord) -> RoundRecord:
        r = reward(record.test_loss, record.attacker_loss, record.epsilon, self.cfg)
        verdict = ""
        if self.baseline is not None:
            v = detect(record.test_loss, self._key, self.baseline, self.margin)
            self.rows.append(DetectionRow(record.round, record.epsilon, self._key,
                                          self.baseline.mean(self._key), record.test_loss, v))
            verdict = v.value
        return replace(record, reward=r, detection=verdict)


    def diverged(self, round_no: int) -> None:
        """Log the round whose training blew up as an unbounded loss."""
        if self.baseline is None or self._key is None:
            return
        v = detect(math.inf, self._key, self.baseline, self.margin)
        self.rows.append(DetectionRow(round_no, self.cfg.eps_grid[self.eps_idx], self._key,
                                      self.baseline.mean(self._key), math.inf, v))


@dataclass
class DetectionSummary:
    flagged: int
    clear: int
    no_baseline: int

    @property
    def judged(self) -> int:
        return self.flagged + self.clear

    @property
    def rate(self) -> float:
        """Share of judged rounds flagged (rounds without a baseline are excluded)."""
        return self.flagged / self.judged if self.judged else float("nan")


def summarize(rows: list[DetectionRow]) -> DetectionSummary:
    count = {v: 0 for v in Verdict}
    for r in rows:
        count[r.verdict] += 1
    return DetectionSummary(count[Verdict.ATTACK_SUSPECTED], count[Verdict.CLEAR],
                            count[Verdict.NO_BASELINE])


class ToyEnvironment:
    """Closed-form stand-in for federated training with a known optimal policy.

    The federated loss after a round is ``loss_scale / (1 + eps)``, strictly
    falling in epsilon, and the attacker loss never changes.  With only the
    federated-loss term rewarded the best policy climbs to the top of the
    grid as fast as it can and stays there.
    """

    attack_free = True

    def __init__(self, rounds: int = 10, loss_scale: float = 2.0, attacker_loss: float = 0.5):
        if rounds < 1:
            raise ValueError("rounds must be positive")
        self.rounds, self.loss_scale, self.attacker_loss = rounds, loss_scale, attacker_loss
        self._t = 0

    def reset(self, episode: int) -> Observation:
        self._t = 0
        return Observation(self.attacker_loss, self.loss_scale)

    def step(self, eps: float):
        self._t += 1
        return Observation(self.attacker_loss, self.loss_scale / (1.0 + eps)), self._t >= self.rounds
