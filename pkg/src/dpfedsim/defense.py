"""Tabular Q-learning over the per-round privacy loss, plus loss-baseline attack detection.

State is (attacker-loss bin, federated-loss bin, index into the epsilon
grid); actions move the index up or down by one or two grid steps or
leave it alone.  The reward favours low federated loss, low attacker
loss and strong privacy (small epsilon).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol

import numpy as np

from . import rng as rngs

FORMAT_TAG = "dpfedsim-policy"
FORMAT_VERSION = 1


class Action(NamedTuple):
    kind: str
    steps: int


# index order fixes greedy tie-breaking: an untrained table keeps epsilon where it is
ACTIONS = (
    Action("static", 0),
    Action("increase", 1),
    Action("increase", 2),
    Action("decrease", 1),
    Action("decrease", 2),
)
N_ACTIONS = len(ACTIONS)


def default_eps_grid() -> tuple[float, ...]:
    return tuple(float(e) for e in np.geomspace(0.1, 20.0, 10))


@dataclass(frozen=True)
class RLConfig:
    alpha: float = 0.1
    chi: float = 1.0
    psi: tuple[float, float, float] = (1.0, 1.0, 1.0)
    f_l_max: float = 2.5
    m_l_max: float = 1.0
    eps_grid: tuple[float, ...] = field(default_factory=default_eps_grid)
    m_bins: int = 10
    f_bins: int = 10
    explore_start: float = 1.0
    explore_min: float = 0.05
    explore_decay: float = 0.995
    episodes: int = 300
    initial_eps_index: int = 0
    loss_floor: float = 1e-6
    # sensitivity switch: reward large attacker loss instead of small
    invert_attacker_term: bool = False

    def __post_init__(self):
        object.__setattr__(self, "psi", tuple(float(p) for p in self.psi))
        object.__setattr__(self, "eps_grid", tuple(float(e) for e in self.eps_grid))
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 <= self.chi <= 1:
            raise ValueError("chi must lie in [0, 1]")
        if len(self.psi) != 3:
            raise ValueError("psi needs three weights")
        if not (self.f_l_max > 0 and self.m_l_max > 0):
            raise ValueError("f_l_max and m_l_max must be positive")
        if len(self.eps_grid) < 1 or any(e <= 0 for e in self.eps_grid):
            raise ValueError("eps_grid must hold positive values")
        if list(self.eps_grid) != sorted(self.eps_grid):
            raise ValueError("eps_grid must be ascending")
        if self.m_bins < 1 or self.f_bins < 1:
            raise ValueError("bin counts must be positive")
        if not 0 <= self.explore_min <= self.explore_start <= 1:
            raise ValueError("need 0 <= explore_min <= explore_start <= 1")
        if not 0 < self.explore_decay <= 1:
            raise ValueError("explore_decay must lie in (0, 1]")
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        if not 0 <= self.initial_eps_index < len(self.eps_grid):
            raise ValueError("initial_eps_index outside the grid")

    def explore_prob(self, episode: int) -> float:
        return max(self.explore_min, self.explore_start * self.explore_decay ** episode)


class AgentState(NamedTuple):
    m_bin: int
    f_bin: int
    eps_idx: int


def _bin(value: float, upper: float, n: int) -> int:
    if math.isnan(value) or value == math.inf:
        # a blown-up model belongs with the worst losses, not the best
        return n - 1
    if not value > 0:
        return 0
    return min(n - 1, int(math.floor(value / upper * n)))


def eps_index(eps: float, grid) -> int:
    for i, g in enumerate(grid):
        if math.isclose(eps, g, rel_tol=1e-9):
            return i
    raise ValueError(f"epsilon {eps} is not on the grid")


def discretize_state(m_l: float, f_l: float, eps: float, cfg: RLConfig) -> AgentState:
    """Uniform bins over [0, m_l_max] and [0, f_l_max], clamped at both ends."""
    return AgentState(
        _bin(m_l, cfg.m_l_max, cfg.m_bins),
        _bin(f_l, cfg.f_l_max, cfg.f_bins),
        eps_index(eps, cfg.eps_grid),
    )


def reward(f_l: float, m_l: float, eps: float, cfg: RLConfig) -> float:
    """psi1 * f_max/f_l + psi2 * m_max/m_l + psi3 / eps, losses floored at ``loss_floor``."""
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    p1, p2, p3 = cfg.psi
    f = max(f_l, cfg.loss_floor)
    m = max(m_l, cfg.loss_floor)
    attacker = m / cfg.m_l_max if cfg.invert_attacker_term else cfg.m_l_max / m
    return p1 * cfg.f_l_max / f + p2 * attacker + p3 / eps


class QTable:
    def __init__(self, m_bins: int, f_bins: int, n_eps: int):
        self.values = np.zeros((m_bins, f_bins, n_eps, N_ACTIONS))
        self.visits = np.zeros((m_bins, f_bins, n_eps, N_ACTIONS), dtype=np.int64)

    @classmethod
    def for_config(cls, cfg: RLConfig) -> "QTable":
        return cls(cfg.m_bins, cfg.f_bins, len(cfg.eps_grid))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape[:3]

    def row(self, s: AgentState) -> np.ndarray:
        return self.values[s]

    def greedy(self, s: AgentState) -> int:
        return int(np.argmax(self.values[s]))

    def copy(self) -> "QTable":
        out = QTable(*self.shape)
        out.values[...] = self.values
        out.visits[...] = self.visits
        return out


def choose_action(q: QTable, s: AgentState, explore_prob: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action index; greedy ties go to the lowest index."""
    if not 0 <= explore_prob <= 1:
        raise ValueError("explore_prob must lie in [0, 1]")
    # always draw the coin so the stream position does not depend on Q
    coin = rng.random()
    pick = int(rng.integers(N_ACTIONS))
    if coin < explore_prob:
        return pick
    return q.greedy(s)


def apply_action(eps_idx: int, action: int | Action, grid_len: int) -> int:
    a = ACTIONS[action] if isinstance(action, int) else action
    if a.kind == "static":
        return eps_idx
    step = a.steps if a.kind == "increase" else -a.steps
    return min(grid_len - 1, max(0, eps_idx + step))


def q_update(
    q: QTable, s: AgentState, a: int, r: float, s_next: AgentState | None,
    cfg: RLConfig, terminal: bool = False,
) -> QTable:
    """One-step Q-learning backup; ``terminal`` (or no next state) drops the bootstrap term."""
    if not math.isfinite(r):
        raise ValueError(f"non-finite reward {r}")
    target = r
    if not terminal and s_next is not None:
        target += cfg.chi * float(np.max(q.values[s_next]))
    key = (*s, a)
    q.values[key] += cfg.alpha * (target - q.values[key])
    q.visits[key] += 1
    return q


class Verdict(enum.Enum):
    ATTACK_SUSPECTED = "attack_suspected"
    CLEAR = "clear"
    NO_BASELINE = "no_baseline"


def round_key(s: AgentState, eps_idx: int) -> AgentState:
    """Baseline key for a round: the observed losses before it, the epsilon it ran at."""
    return AgentState(s.m_bin, s.f_bin, eps_idx)


class BaselineTable:
    """Running mean of the federated loss that followed each state during trusted training."""

    def __init__(self):
        self.entries: dict[AgentState, tuple[float, int]] = {}

    def update(self, s: AgentState, f_l: float) -> None:
        mean, n = self.entries.get(s, (0.0, 0))
        n += 1
        self.entries[AgentState(*s)] = (mean + (f_l - mean) / n, n)

    def mean(self, s: AgentState) -> float | None:
        entry = self.entries.get(AgentState(*s))
        return None if entry is None else entry[0]

    def __len__(self):
        return len(self.entries)


def detect(f_l_observed: float, s: AgentState, baseline: BaselineTable, margin: float) -> Verdict:
    if margin < 0:
        raise ValueError("margin must be non-negative")
    base = baseline.mean(s)
    if base is None:
        return Verdict.NO_BASELINE
    if f_l_observed > base * (1.0 + margin):
        return Verdict.ATTACK_SUSPECTED
    return Verdict.CLEAR


# --- environments and training --------------------------------------------

class Observation(NamedTuple):
    m_l: float
    f_l: float


class Environment(Protocol):
    """Episodic environment: one episode is one federated training run."""

    attack_free: bool

    def reset(self, episode: int) -> Observation: ...

    def step(self, eps: float) -> tuple[Observation, bool]: ...


@dataclass
class AgentTrainingResult:
    q: QTable
    rewards: list[float]
    explore_probs: list[float]
    baseline: BaselineTable


def run_episode(
    env: Environment,
    q: QTable,
    cfg: RLConfig,
    episode: int,
    explore_prob: float,
    rng: np.random.Generator,
    baseline: BaselineTable | None = None,
    learn: bool = True,
) -> float:
    obs = env.reset(episode)
    eps_idx = cfg.initial_eps_index
    s = discretize_state(obs.m_l, obs.f_l, cfg.eps_grid[eps_idx], cfg)
    total = 0.0
    done = False
    while not done:
        a = choose_action(q, s, explore_prob, rng)
        eps_idx = apply_action(s.eps_idx, a, len(cfg.eps_grid))
        eps = cfg.eps_grid[eps_idx]
        obs, done = env.step(eps)
        if obs is None:
            break
        r = reward(obs.f_l, obs.m_l, eps, cfg)
        total += r
        s_next = discretize_state(obs.m_l, obs.f_l, eps, cfg)
        if baseline is not None and math.isfinite(obs.f_l):
            baseline.update(round_key(s, eps_idx), obs.f_l)
        if learn:
            q_update(q, s, a, r, s_next, cfg, terminal=done)
        s = s_next
    return total


def train_agent(
    env: Environment,
    cfg: RLConfig,
    seed: int = 0,
    on_episode: Callable[[int, float, float], None] | None = None,
) -> AgentTrainingResult:
    """Epsilon-greedy Q-learning, one table carried across ``cfg.episodes`` episodes.

    Baselines are recorded only while the environment runs attack-free.
    """
    q = QTable.for_config(cfg)
    baseline = BaselineTable()
    rewards, probs = [], []
    explore_rng = rngs.stream(seed, "explore")
    for ep in range(cfg.episodes):
        p = cfg.explore_prob(ep)
        total = run_episode(env, q, cfg, ep, p, explore_rng,
                            baseline if env.attack_free else None)
        rewards.append(total)
        probs.append(p)
        if on_episode is not None:
            on_episode(ep, p, total)
    return AgentTrainingResult(q, rewards, probs, baseline)


def greedy_rollout(env: Environment, q: QTable, cfg: RLConfig, episode: int) -> list[int]:
    """Epsilon indices the frozen greedy policy visits over one episode."""
    obs = env.reset(episode)
    s = discretize_state(obs.m_l, obs.f_l, cfg.eps_grid[cfg.initial_eps_index], cfg)
    path, done = [], False
    while not done:
        idx = apply_action(s.eps_idx, q.greedy(s), len(cfg.eps_grid))
        obs, done = env.step(cfg.eps_grid[idx])
        if obs is None:
            break
        path.append(idx)
        s = discretize_state(obs.m_l, obs.f_l, cfg.eps_grid[idx], cfg)
    return path


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.empty(0)
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


# --- policy file -------------------------------------------------------------

def save_policy(path, q: QTable, baseline: BaselineTable, cfg: RLConfig) -> None:
    """Versioned flat text: one line per visited Q entry and per baseline state."""
    lines = [
        f"# {FORMAT_TAG} v{FORMAT_VERSION}",
        f"# shape {' '.join(str(n) for n in q.shape)} {N_ACTIONS}",
        f"# eps_grid {' '.join(repr(e) for e in cfg.eps_grid)}",
        f"# bins m_l_max={cfg.m_l_max!r} f_l_max={cfg.f_l_max!r} "
        f"initial_eps_index={cfg.initial_eps_index}",
    ]
    for key in zip(*np.nonzero((q.visits > 0) | (q.values != 0))):
        m, f, e, a = (int(k) for k in key)
        lines.append(f"q {m} {f} {e} {a} {float(q.values[key])!r} {int(q.visits[key])}")
    for s in sorted(baseline.entries):
        mean, n = baseline.entries[s]
        lines.append(f"b {s.m_bin} {s.f_bin} {s.eps_idx} {float(mean)!r} {n}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class PolicyFormatError(ValueError):
    pass


def load_policy(path) -> tuple[QTable, BaselineTable, dict]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != f"# {FORMAT_TAG} v{FORMAT_VERSION}":
        raise PolicyFormatError(f"{path}: not a v{FORMAT_VERSION} policy file")
    meta: dict = {}
    q = None
    baseline = BaselineTable()
    for n, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if parts[0] == "#":
            if parts[1] == "shape":
                m, f, e, a = (int(x) for x in parts[2:6])
                if a != N_ACTIONS:
                    raise PolicyFormatError(f"{path}:{n}: {a} actions, expected {N_ACTIONS}")
                q = QTable(m, f, e)
            elif parts[1] == "eps_grid":
                meta["eps_grid"] = tuple(float(x) for x in parts[2:])
            elif parts[1] == "bins":
                for kv in parts[2:]:
                    k, v = kv.split("=")
                    meta[k] = int(v) if k == "initial_eps_index" else float(v)
            continue
        if q is None:
            raise PolicyFormatError(f"{path}:{n}: entry before shape header")
        try:
            if parts[0] == "q":
                key = tuple(int(x) for x in parts[1:5])
                q.values[key] = float(parts[5])
                q.visits[key] = int(parts[6])
            elif parts[0] == "b":
                s = AgentState(*(int(x) for x in parts[1:4]))
                baseline.entries[s] = (float(parts[4]), int(parts[5]))
            else:
                raise PolicyFormatError(f"{path}:{n}: unknown record {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, PolicyFormatError):
                raise
            raise PolicyFormatError(f"{path}:{n}: {exc}") from None
    if q is None:
        raise PolicyFormatError(f"{path}: missing shape header")
    return q, baseline, meta
