"""Exact evaluation of tabular state-adversarial MDPs.

A :class:`TabularIsaMdp` is an ordinary finite discounted MDP plus, for every
state, an ordered list of states the adversary may substitute for it when the
agent observes the world. Everything here is solved exactly with dense linear
algebra; no sampling happens in this module.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BudgetError, DimensionError, SolveError, ValidationError

STOCH_TOL = 1e-12
POLICY_TOL = 1e-10


@dataclass(frozen=True)
class TabularIsaMdp:
    reward: np.ndarray  # [S, A]
    transition: np.ndarray  # [S, A, S]
    gamma: float
    mu0: np.ndarray  # [S]
    perturb_sets: tuple  # tuple of tuples of state indices
    embeddings: Optional[np.ndarray] = None  # [S, d]

    def __post_init__(self):
        reward = np.array(self.reward, dtype=float)
        transition = np.array(self.transition, dtype=float)
        mu0 = np.array(self.mu0, dtype=float)
        if reward.ndim != 2:
            raise DimensionError(f"reward must be 2-d, got shape {reward.shape}")
        S, A = reward.shape
        if transition.shape != (S, A, S):
            raise DimensionError(f"transition must have shape {(S, A, S)}, got {transition.shape}")
        if mu0.shape != (S,):
            raise DimensionError(f"mu0 must have shape {(S,)}, got {mu0.shape}")
        if not np.all(np.isfinite(reward)):
            raise ValidationError("reward contains non-finite entries")
        if np.any(transition < 0):
            raise ValidationError("transition has negative entries")
        rowsum = transition.sum(axis=2)
        if np.max(np.abs(rowsum - 1.0)) > STOCH_TOL:
            s, a = np.unravel_index(np.argmax(np.abs(rowsum - 1.0)), rowsum.shape)
            raise ValidationError(f"transition row (s={s}, a={a}) sums to {rowsum[s, a]!r}")
        if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > STOCH_TOL:
            raise ValidationError(f"mu0 is not a distribution (sum={mu0.sum()!r})")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if len(self.perturb_sets) != S:
            raise DimensionError(f"need {S} perturbation sets, got {len(self.perturb_sets)}")
        psets = []
        for s, members in enumerate(self.perturb_sets):
            members = tuple(int(m) for m in members)
            if s not in members:
                raise ValidationError(f"perturbation set of state {s} must contain the state itself")
            if any(m < 0 or m >= S for m in members):
                raise ValidationError(f"perturbation set of state {s} has out-of-range entries {members}")
            if len(set(members)) != len(members):
                raise ValidationError(f"perturbation set of state {s} has duplicates {members}")
            psets.append(members)
        emb = None
        if self.embeddings is not None:
            emb = np.array(self.embeddings, dtype=float)
            if emb.ndim != 2 or emb.shape[0] != S:
                raise DimensionError(f"embeddings must have shape (S, d), got {emb.shape}")
            emb.setflags(write=False)
        for arr in (reward, transition, mu0):
            arr.setflags(write=False)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "perturb_sets", tuple(psets))
        object.__setattr__(self, "embeddings", emb)

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def obs_dim(self) -> Optional[int]:
        return None if self.embeddings is None else self.embeddings.shape[1]

    def replace(self, **changes) -> "TabularIsaMdp":
        fields = dict(reward=self.reward, transition=self.transition, gamma=self.gamma,
                      mu0=self.mu0, perturb_sets=self.perturb_sets, embeddings=self.embeddings)
        fields.update(changes)
        return TabularIsaMdp(**fields)


@dataclass(frozen=True)
class DiscreteAdversary:
    """Per-state index into ``mdp.perturb_sets[s]``."""

    remap: tuple

    def __post_init__(self):
        object.__setattr__(self, "remap", tuple(int(i) for i in self.remap))

    @classmethod
    def identity(cls, mdp: TabularIsaMdp) -> "DiscreteAdversary":
        return cls(tuple(pset.index(s) for s, pset in enumerate(mdp.perturb_sets)))

    def targets(self, mdp: TabularIsaMdp) -> np.ndarray:
        """The observed state ``nu(s)`` for every true state ``s``."""
        check_adversary(mdp, self)
        return np.array([mdp.perturb_sets[s][i] for s, i in enumerate(self.remap)], dtype=int)


@dataclass
class ValueSolveResult:
    v: np.ndarray
    q: np.ndarray
    bellman_residual: float = field(default=0.0)


def check_policy(mdp: TabularIsaMdp, pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(f"policy shape {pi.shape} does not match mdp {(mdp.n_states, mdp.n_actions)}")
    if pi.size and (pi.min() < -POLICY_TOL or np.abs(pi.sum(axis=1) - 1.0).max() > POLICY_TOL):
        raise ValidationError("policy rows must be probability vectors")
    return pi


def check_adversary(mdp: TabularIsaMdp, adv: DiscreteAdversary) -> None:
    if len(adv.remap) != mdp.n_states:
        raise DimensionError(f"adversary covers {len(adv.remap)} states, mdp has {mdp.n_states}")
    for s, i in enumerate(adv.remap):
        if not 0 <= i < len(mdp.perturb_sets[s]):
            raise ValidationError(f"remap[{s}] = {i} is not a valid index into perturb_sets[{s}]")


def induced_chain(mdp: TabularIsaMdp, pi: np.ndarray):
    """Return ``(r_pi, P_pi)`` for a state-conditioned policy matrix."""
    r_pi = np.sum(pi * mdp.reward, axis=1)
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    return r_pi, P_pi


def solve_value(mdp: TabularIsaMdp, pi) -> ValueSolveResult:
    pi = check_policy(mdp, pi)
    return _solve_chain(mdp, *induced_chain(mdp, pi))


def _solve_chain(mdp: TabularIsaMdp, r_pi, P_pi) -> ValueSolveResult:
    lhs = np.eye(mdp.n_states) - mdp.gamma * P_pi
    try:
        v = np.linalg.solve(lhs, r_pi)
    except np.linalg.LinAlgError as exc:
        raise SolveError(f"policy evaluation system is singular: {exc}") from exc
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    residual = float(np.max(np.abs(v - (r_pi + mdp.gamma * P_pi @ v)))) if v.size else 0.0
    return ValueSolveResult(v=v, q=q, bellman_residual=residual)


def fixed_point_value(mdp: TabularIsaMdp, pi, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Iterative policy evaluation. Slow; kept as an independent reference."""
    pi = check_policy(mdp, pi)
    r_pi, P_pi = induced_chain(mdp, pi)
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        v_new = r_pi + mdp.gamma * P_pi @ v
        if np.max(np.abs(v_new - v)) < tol:
            return v_new
        v = v_new
    raise SolveError("fixed-point iteration did not converge")


def visitation(mdp: TabularIsaMdp, pi, start=None) -> np.ndarray:
    """Normalized discounted state-action occupancy ``d(s, a)`` from ``start``."""
    pi = check_policy(mdp, pi)
    _, P_pi = induced_chain(mdp, pi)
    return _occupancy(mdp, P_pi, start)[:, None] * pi


def value_and_state_occupancy(mdp: TabularIsaMdp, pi, start=None):
    """``(solve_value(...), visitation(...).sum(axis=1))`` from one chain build."""
    pi = check_policy(mdp, pi)
    r_pi, P_pi = induced_chain(mdp, pi)
    return _solve_chain(mdp, r_pi, P_pi), _occupancy(mdp, P_pi, start)


def _occupancy(mdp: TabularIsaMdp, P_pi, start) -> np.ndarray:
    start = mdp.mu0 if start is None else np.asarray(start, dtype=float)
    if start.shape != (mdp.n_states,):
        raise DimensionError(f"start distribution must have shape {(mdp.n_states,)}")
    lhs = (np.eye(mdp.n_states) - mdp.gamma * P_pi).T
    try:
        d_state = (1.0 - mdp.gamma) * np.linalg.solve(lhs, start)
    except np.linalg.LinAlgError as exc:
        raise SolveError(str(exc)) from exc
    # clip round-off negatives; the exact solution is nonnegative
    return np.maximum(d_state, 0.0)


def apply_adversary(pi, adv: DiscreteAdversary, mdp: TabularIsaMdp) -> np.ndarray:
    pi = check_policy(mdp, pi)
    return pi[adv.targets(mdp)]


def _candidate_models(mdp: TabularIsaMdp, pi: np.ndarray):
    """Padded per-state reward/transition rows for every admissible observation.

    Returns ``(r_cand [S, K], P_cand [S, K, S], valid [S, K])``; padded slots
    are masked out of every minimization.
    """
    S = mdp.n_states
    K = max(len(p) for p in mdp.perturb_sets)
    r_cand = np.zeros((S, K))
    P_cand = np.zeros((S, K, S))
    valid = np.zeros((S, K), dtype=bool)
    for s, pset in enumerate(mdp.perturb_sets):
        rows = pi[list(pset)]  # [k, A]
        r_cand[s, : len(pset)] = rows @ mdp.reward[s]
        P_cand[s, : len(pset)] = rows @ mdp.transition[s]
        valid[s, : len(pset)] = True
    return r_cand, P_cand, valid


def _adversary_backup(models, v, gamma):
    r_cand, P_cand, valid = models
    vals = r_cand + gamma * (P_cand @ v)
    return np.where(valid, vals, np.inf)


def _greedy_remap(vals, tol=1e-12):
    # lowest index among (numerical) ties
    best = vals.min(axis=1, keepdims=True)
    return tuple(int(i) for i in np.argmax(vals <= best + tol, axis=1))


def strongest_adversary_exact(mdp: TabularIsaMdp, pi, tol: float = 1e-12, max_iter: int = 100_000,
                              natural: Optional[ValueSolveResult] = None):
    """Adversary minimizing the value at every state simultaneously.

    The adversary's problem is itself an MDP whose actions are the admissible
    observations. Policy iteration on that MDP gives a candidate in a handful
    of exact solves; value iteration is then run from the candidate's value
    until successive iterates differ by less than ``tol``, and the final remap
    is greedy with respect to the converged values. ``natural`` may carry an
    existing ``solve_value(mdp, pi)`` to skip the first solve.
    """
    pi = check_policy(mdp, pi)
    models = _candidate_models(mdp, pi)
    rows = np.arange(mdp.n_states)
    adv = DiscreteAdversary.identity(mdp)
    res = solve_value(mdp, pi) if natural is None else natural
    for _ in range(10 * mdp.n_states + 10):
        vals = _adversary_backup(models, res.v, mdp.gamma)
        current = vals[rows, adv.remap]
        better = vals.min(axis=1) < current - tol
        if not better.any():
            break
        # switch only where strictly improving, which keeps the iteration monotone
        adv = DiscreteAdversary(tuple(np.where(better, np.argmin(vals, axis=1), adv.remap)))
        res = solve_value(mdp, apply_adversary(pi, adv, mdp))
    v = res.v
    for _ in range(max_iter):
        v_new = _adversary_backup(models, v, mdp.gamma).min(axis=1)
        delta = np.max(np.abs(v_new - v)) if v.size else 0.0
        v = v_new
        if delta < tol:
            break
    else:
        raise SolveError("adversary value iteration did not converge")
    greedy = DiscreteAdversary(_greedy_remap(_adversary_backup(models, v, mdp.gamma)))
    if greedy != adv:
        greedy_res = solve_value(mdp, apply_adversary(pi, greedy, mdp))
        if np.all(greedy_res.v <= res.v + 1e-10):
            adv, res = greedy, greedy_res
    return adv, res


def brute_force_strongest(mdp: TabularIsaMdp, pi, budget: int = 1_000_000):
    """Enumerate every deterministic remap and keep the one minimizing V(mu0)."""
    pi = check_policy(mdp, pi)
    sizes = [len(p) for p in mdp.perturb_sets]
    if int(np.prod(sizes, dtype=float)) > budget:
        raise BudgetError(f"{int(np.prod(sizes, dtype=float))} adversaries exceed the budget of {budget}")
    best = None
    for remap in itertools.product(*(range(k) for k in sizes)):
        adv = DiscreteAdversary(remap)
        res = solve_value(mdp, apply_adversary(pi, adv, mdp))
        score = float(mdp.mu0 @ res.v)
        if best is None or score < best[0]:
            best = (score, adv, res)
    return best[1], best[2]


def value_at(mdp: TabularIsaMdp, pi, start=None) -> float:
    start = mdp.mu0 if start is None else np.asarray(start, dtype=float)
    return float(start @ solve_value(mdp, pi).v)


# ---------------------------------------------------------------------------
# built-in instances

TOY_REWARD = [-0.45, -0.1, 0.5, 0.5]
TOY_TRANSITION = [[0.7, 0.3], [0.99, 0.01], [0.2, 0.8], [0.99, 0.01]]


def toy_mdp(gamma: float = 0.9, perturb_sets: Optional[Sequence[Sequence[int]]] = None,
            embeddings=None) -> TabularIsaMdp:
    """The two-state, two-action example with B(s1) = B(s2) = {s1, s2}.

    Embeddings default to one-hot vectors so observation perturbations can be
    attached directly.
    """
    reward = np.array(TOY_REWARD).reshape(2, 2)
    transition = np.array(TOY_TRANSITION).reshape(2, 2, 2)
    if perturb_sets is None:
        perturb_sets = ((0, 1), (1, 0))
    if embeddings is None:
        embeddings = np.eye(2)
    return TabularIsaMdp(reward=reward, transition=transition, gamma=gamma,
                         mu0=np.array([0.5, 0.5]), perturb_sets=tuple(perturb_sets),
                         embeddings=embeddings)


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, max_set: int = 3,
               gamma: float = 0.9, obs_dim: Optional[int] = None) -> TabularIsaMdp:
    """Random dense MDP with full-support mu0 and random perturbation sets."""
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    # renormalize to kill the last-ulp drift dirichlet sometimes leaves
    transition /= transition.sum(axis=2, keepdims=True)
    mu0 = rng.dirichlet(np.ones(n_states))
    mu0 /= mu0.sum()
    psets = []
    for s in range(n_states):
        k = int(rng.integers(1, min(max_set, n_states) + 1))
        others = [t for t in range(n_states) if t != s]
        extra = rng.choice(others, size=k - 1, replace=False).tolist() if k > 1 else []
        members = [s] + [int(t) for t in extra]
        rng.shuffle(members)
        psets.append(tuple(members))
    emb = None if obs_dim is None else rng.normal(size=(n_states, obs_dim))
    return TabularIsaMdp(reward=reward, transition=transition, gamma=gamma, mu0=mu0,
                         perturb_sets=tuple(psets), embeddings=emb)
