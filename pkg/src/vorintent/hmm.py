"""Intention decoding: a hidden Markov model with g+2 states in the order
[G_1 .. G_g, G_?, G_x] (per-goal intention, undecided, irrational), a fixed
parametric transition matrix, emission rows built from filtered validation
vectors, and an online max-product (Viterbi) recursion with per-step
renormalisation. Goals can be added and removed while running, bounded by
the largest goal count that keeps the transition matrix row-stochastic.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

# Guards against float-division dust when the ratio is an exact integer,
# e.g. (1 - 0.05) / 0.05 evaluating to 18.999999999999996.
_FLOOR_EPS = 1e-9


class HmmError(ValueError):
    pass


@dataclass
class HmmParams:
    alpha: float = 0.5    # goal-state leak into G_?
    beta: float = 0.1     # G_? leak into each goal
    gamma: float = 0.05   # G_? leak into G_x
    delta: float = 0.1    # G_x recovery into G_?
    m_window: int = 8     # history length behind the irrationality average
    phi_threshold: float = 0.5
    unknown_floor: float = 0.1   # fixed G_? stimulus in the irrational branch
    # Above this goal count estimates stay pinned to G_?; still legal, the
    # hard limit is max_goals().
    soft_goal_limit: int = 5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise HmmError(f"{name} must be in (0, 1), got {v}")
        if self.m_window < 1:
            raise HmmError("m_window must be >= 1")


def max_goals(params: HmmParams) -> int:
    """floor((1 - gamma) / beta): the largest g keeping P(G_? stays) > 0."""
    return int(math.floor((1.0 - params.gamma) / params.beta + _FLOOR_EPS))


def build_transition(g: int, params: HmmParams) -> np.ndarray:
    """(g+2) x (g+2) row-stochastic transition matrix in state order
    [G_1 .. G_g, G_?, G_x]."""
    if g < 1:
        raise HmmError("need at least one goal")
    bound = max_goals(params)
    if g > bound:
        raise HmmError(f"{g} goals exceed the limit of {bound} for these parameters")
    stay_unknown = 1.0 - g * params.beta - params.gamma
    if stay_unknown <= 0.0:
        raise HmmError(f"{g} goals would make P(G_? stays) = {stay_unknown} <= 0")
    n = g + 2
    T = np.zeros((n, n))
    for i in range(g):
        T[i, i] = 1.0 - params.alpha
        T[i, g] = params.alpha
    T[g, :g] = params.beta
    T[g, g] = stay_unknown
    T[g, g + 1] = params.gamma
    T[g + 1, g] = params.delta
    T[g + 1, g + 1] = 1.0 - params.delta
    return T


def initial_distribution(g: int) -> np.ndarray:
    """All mass on G_?: the model starts not knowing the worker's desire."""
    pi = np.zeros(g + 2)
    pi[g] = 1.0
    return pi


def phi_statistic(history: "deque[np.ndarray]") -> float:
    """Maximum over goals of the windowed mean of filtered validation; the
    irrationality indicator. Averages whatever history exists during
    warm-up rather than zero-padding."""
    if not history:
        raise HmmError("phi requires at least one validation vector")
    stack = np.stack(history)
    return float(stack.mean(axis=0).max())


def emission_row(v_hat: np.ndarray, history: "deque[np.ndarray]",
                 params: HmmParams) -> tuple[np.ndarray, str]:
    """Expandable emission row for the current observation.

    Rational branch (some goal was being approached over the window):
    [tanh(v_hat), tanh(1 - gap), 0] where gap is the lead of the best goal
    over the runner-up. Irrational branch: [0 .. 0, tanh(floor),
    tanh(1 - phi)]. Normalised to sum one.
    """
    g = len(v_hat)
    phi = phi_statistic(history)
    row = np.zeros(g + 2)
    if phi > params.phi_threshold:
        branch = "rational"
        srt = np.sort(v_hat)[::-1]
        gap = srt[0] - (srt[1] if g >= 2 else 0.0)
        row[:g] = np.tanh(v_hat)
        row[g] = math.tanh(1.0 - gap)
        row[g + 1] = 0.0
    else:
        branch = "irrational"
        row[g] = math.tanh(params.unknown_floor)
        row[g + 1] = math.tanh(1.0 - phi)
    total = row.sum()
    if total <= 0.0:
        raise HmmError("emission row degenerated to zero")
    return row / total, branch


class OnlineViterbi:
    """Per-step renormalised max-product decoder over the g+2 states.

    Equivalent, step by step, to exhaustive enumeration of all state paths
    with the scores renormalised after every observation. A bounded
    backpointer window allows reconstructing the recent most-probable path
    for debugging. `algorithm="forward"` switches the max to a sum, giving
    filtering marginals instead.
    """

    def __init__(self, g: int, params: HmmParams, algorithm: str = "viterbi",
                 backpointer_window: int = 256):
        if algorithm not in ("viterbi", "forward"):
            raise HmmError(f"unknown algorithm {algorithm!r}")
        self.params = params
        self.algorithm = algorithm
        self.T = build_transition(g, params)
        self.scores = initial_distribution(g)
        self.steps = 0
        self.backpointers: deque[np.ndarray] = deque(maxlen=backpointer_window)
        self.restarts = 0

    @property
    def g(self) -> int:
        return len(self.scores) - 2

    @property
    def probabilities(self) -> np.ndarray:
        return self.scores.copy()

    def argmax_index(self) -> int:
        return int(np.argmax(self.scores))

    def step(self, row: np.ndarray) -> np.ndarray:
        if len(row) != len(self.scores):
            raise HmmError("emission row dimension mismatch")
        if self.steps == 0:
            new = self.scores * row
            bp = np.arange(len(row))
        else:
            trans = self.scores[:, None] * self.T
            if self.algorithm == "viterbi":
                bp = trans.argmax(axis=0)
                new = row * trans.max(axis=0)
            else:
                bp = trans.argmax(axis=0)
                new = row * trans.sum(axis=0)
        total = new.sum()
        if total <= 0.0:
            # Only reachable on the very first observation when the initial
            # G_? state is assigned zero emission; restart from the row.
            new = row.copy()
            total = new.sum()
            self.restarts += 1
        self.scores = new / total
        self.backpointers.append(bp)
        self.steps += 1
        assert self.scores.sum() > 0.0
        return self.probabilities

    def recent_path(self) -> list[int]:
        """Most probable state sequence across the backpointer window."""
        state = self.argmax_index()
        path = [state]
        for bp in reversed(self.backpointers):
            state = int(bp[state])
            path.append(state)
        path.reverse()
        return path[1:]  # drop the pre-window seed

    # -- dynamic goals -------------------------------------------------------

    def add_goal(self) -> None:
        """Expand state space for one more goal; the new goal takes
        max(min over existing goals of P, 0.1) before renormalisation."""
        g = self.g
        if g + 1 > max_goals(self.params):
            raise HmmError(
                f"goal budget exceeded: limit is {max_goals(self.params)} goals")
        p_new = max(float(self.scores[:g].min()), 0.1) if g >= 1 else 0.1
        self.scores = np.insert(self.scores, g, p_new)
        self.scores = self.scores / self.scores.sum()
        self.T = build_transition(g + 1, self.params)
        self.backpointers.clear()

    def remove_goal(self, index: int) -> None:
        """Drop one goal; its mass folds into the unknown-goal state."""
        g = self.g
        if g <= 1:
            raise HmmError("cannot remove the last goal")
        if not (0 <= index < g):
            raise HmmError(f"goal index {index} out of range")
        self.scores[g] += self.scores[index]
        self.scores = np.delete(self.scores, index)
        self.scores = self.scores / self.scores.sum()
        self.T = build_transition(g - 1, self.params)
        self.backpointers.clear()
