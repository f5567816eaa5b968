"""Inner-problem solvers for observation adversaries.

Sign-gradient PGD on the adversarial value (with a first-order stationarity
stop), gradient ascent / SGLD on the clean-vs-perturbed KL divergence, and the
Monte Carlo and exact gradients of the adversarial value with respect to the
per-state perturbation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import BudgetError, ValidationError
from .mdp_core import TabularIsaMdp, solve_value, visitation
from .policy import (EmbeddedSoftmax, ObsPerturbation, action_probs, fisher_at_obs, kl,
                     kl_grad_obs, log_prob_grad_obs, observations,
                     policy_matrix_under_perturbation)

TRUNCATION = 1e-8


@dataclass(frozen=True)
class InnerSolverConfig:
    eps: float = 0.0
    steps: int = 10
    step_size: Optional[float] = None  # None -> eps / 10
    delta: float = 0.0
    temperature: float = 1e-5
    seed: int = 0
    gradient: str = "monte_carlo"  # or "exact"
    n_traj: int = 2000
    horizon: Optional[int] = None
    restarts: int = 1

    def __post_init__(self):
        if self.eps < 0:
            raise ValidationError("eps must be nonnegative")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValidationError("step_size must be positive")
        if self.delta < 0 or self.temperature < 0:
            raise ValidationError("delta and temperature must be nonnegative")
        if self.gradient not in ("monte_carlo", "exact"):
            raise ValidationError(f"unknown gradient mode {self.gradient!r}")
        if self.restarts < 1 or self.n_traj < 1:
            raise ValidationError("restarts and n_traj must be >= 1")

    @property
    def eta(self) -> float:
        return self.step_size if self.step_size is not None else self.eps / 10.0


@dataclass
class AdvGradEstimate:
    grad: np.ndarray  # [S, d]
    stderr: np.ndarray  # [S, d]
    visited: np.ndarray  # [S] bool
    n_trajectories: int


@dataclass
class FoscReport:
    gaps: np.ndarray  # [S], final per-state gap
    steps_taken: int
    converged: bool
    active: np.ndarray = field(default=None)  # states still above delta


def rng_stream(seed: int, *counters) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *counters)``.

    Streams depend only on the key, never on call order, so per-state or
    per-step work can be scheduled in any order.
    """
    key = [int(seed) & 0xFFFFFFFF] + [int(c) & 0xFFFFFFFF for c in counters]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def default_horizon(gamma: float) -> int:
    if gamma == 0.0:
        return 1
    return int(math.ceil(math.log(TRUNCATION) / math.log(gamma)))


class JsonlLog:
    """Append-only line-delimited record sink."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# sampling


def sample_weights(mdp: TabularIsaMdp, pi, start, n_traj: int, horizon: int,
                   rng: np.random.Generator, baseline=None):
    """Roll out ``pi`` and accumulate per-trajectory discounted weights.

    Returns ``(W_pos, W_neg)``, each ``[n_traj, S, A]``, where summing
    ``W_pos + W_neg`` gives ``sum_t gamma^t (Qhat_t - b(s_t)) 1{s_t = s, a_t = a}``
    for every trajectory, with ``Qhat_t`` the truncated reward-to-go. The two
    parts hold the positive and negative per-step terms separately so clipped
    surrogates can treat them differently.
    """
    pi = np.asarray(pi, dtype=float)
    S, A = mdp.n_states, mdp.n_actions
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")
    if mdp.gamma > 0 and mdp.gamma ** horizon > TRUNCATION * (1 + 1e-9):
        raise ValidationError(f"horizon {horizon} too short: gamma^T = {mdp.gamma ** horizon:.3g} > {TRUNCATION}")
    cdf_pi = np.cumsum(pi, axis=1)
    cdf_P = np.cumsum(mdp.transition, axis=2)
    idx = np.arange(n_traj)
    states = np.empty((horizon, n_traj), dtype=np.int32)
    actions = np.empty((horizon, n_traj), dtype=np.int32)
    s = np.minimum(np.searchsorted(np.cumsum(start), rng.random(n_traj), side="right"), S - 1)
    for t in range(horizon):
        a = np.minimum((rng.random(n_traj)[:, None] > cdf_pi[s]).sum(axis=1), A - 1)
        states[t] = s
        actions[t] = a
        s = np.minimum((rng.random(n_traj)[:, None] > cdf_P[s, a]).sum(axis=1), S - 1)
    b = np.zeros(S) if baseline is None else np.asarray(baseline, dtype=float)
    W_pos = np.zeros(n_traj * S * A)
    W_neg = np.zeros(n_traj * S * A)
    G = np.zeros(n_traj)
    disc = mdp.gamma ** np.arange(horizon)
    for t in range(horizon - 1, -1, -1):
        s, a = states[t], actions[t]
        G = mdp.reward[s, a] + mdp.gamma * G
        w = disc[t] * (G - b[s])
        flat = (idx * S + s) * A + a
        W_pos += np.bincount(flat, weights=np.maximum(w, 0.0), minlength=n_traj * S * A)
        W_neg += np.bincount(flat, weights=np.minimum(w, 0.0), minlength=n_traj * S * A)
    return W_pos.reshape(n_traj, S, A), W_neg.reshape(n_traj, S, A)


def _obs_log_grads(policy: EmbeddedSoftmax, obs) -> np.ndarray:
    """``[S, A, d]`` table of observation score vectors."""
    return np.stack([[log_prob_grad_obs(policy, x, a) for a in range(policy.n_actions)] for x in obs])


def _require_embedded(policy, mdp):
    if not isinstance(policy, EmbeddedSoftmax):
        raise TypeError("observation adversaries need an EmbeddedSoftmax policy")
    if mdp.embeddings is None:
        raise ValidationError("observation adversaries need state embeddings")


def adv_value_gradient_mc(mdp: TabularIsaMdp, policy: EmbeddedSoftmax, pert: ObsPerturbation,
                          start=None, n_traj: int = 10_000, horizon: Optional[int] = None,
                          seed: int = 0, weights=None) -> AdvGradEstimate:
    """Score-function estimate of ``d V^{pi o nu}(start) / d theta_s`` for each state.

    ``weights`` lets callers reuse an existing batch from :func:`sample_weights`
    (the PGD loop re-evaluates the score at moved perturbations without
    resampling).
    """
    _require_embedded(policy, mdp)
    start = mdp.mu0 if start is None else np.asarray(start, dtype=float)
    horizon = default_horizon(mdp.gamma) if horizon is None else horizon
    if weights is None:
        pi = policy_matrix_under_perturbation(policy, mdp, pert)
        weights = sample_weights(mdp, pi, start, n_traj, horizon, rng_stream(seed, 0))
    W = weights[0] + weights[1]
    n = W.shape[0]
    scores = _obs_log_grads(policy, observations(mdp, pert))  # [S, A, d]
    per_traj = np.einsum("nsa,sad->nsd", W, scores)
    grad = per_traj.mean(axis=0)
    stderr = per_traj.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(grad)
    visited = np.abs(W).sum(axis=(0, 2)) > 0
    grad[~visited] = 0.0
    return AdvGradEstimate(grad=grad, stderr=stderr, visited=visited, n_trajectories=n)


def exact_adv_gradient(mdp: TabularIsaMdp, policy: EmbeddedSoftmax, pert: ObsPerturbation,
                       start=None) -> np.ndarray:
    """Exact ``[S, d]`` adversary gradient from linear solves."""
    _require_embedded(policy, mdp)
    pi = policy_matrix_under_perturbation(policy, mdp, pert)
    res = solve_value(mdp, pi)
    d = visitation(mdp, pi, start)
    scores = _obs_log_grads(policy, observations(mdp, pert))
    return np.einsum("sa,sad->sd", d * res.q, scores) / (1.0 - mdp.gamma)


def adversarial_value(mdp, policy, pert, start=None) -> float:
    start = mdp.mu0 if start is None else np.asarray(start, dtype=float)
    return float(start @ solve_value(mdp, policy_matrix_under_perturbation(policy, mdp, pert)).v)


# ---------------------------------------------------------------------------
# PGD with a first-order stationarity stop


def fosc_gap(g, theta_s, eps: float) -> float:
    """``max_{|u|_inf <= eps} <theta_s - u, g>`` in closed form."""
    g = np.asarray(g, dtype=float)
    theta_s = np.asarray(theta_s, dtype=float)
    if theta_s.size and np.max(np.abs(theta_s)) > eps:
        raise BudgetError(f"perturbation {np.max(np.abs(theta_s))} outside the eps={eps} ball")
    return max(float(theta_s @ g + eps * np.abs(g).sum()), 0.0)


def pgd_inner(mdp: TabularIsaMdp, policy: EmbeddedSoftmax, config: InnerSolverConfig, start=None,
              init: Optional[ObsPerturbation] = None, log: Optional[Callable] = None,
              stream=()):
    """Sign-gradient descent of the adversarial value inside the l-inf ball.

    One sweep: draw a batch under the current perturbation, move every still
    active state by ``-eta * sign(grad)``, clamp, then recompute the gradient at
    the moved perturbation with the same batch and deactivate states whose
    stationarity gap is at most ``delta``. The batch is redrawn every sweep.
    With ``config.gradient == "exact"`` the gradients come from linear solves.
    """
    _require_embedded(policy, mdp)
    S, d = mdp.embeddings.shape
    eps = config.eps
    if eps == 0.0:
        zero = ObsPerturbation.zeros(S, d, 0.0)
        return zero, FoscReport(gaps=np.zeros(S), steps_taken=0, converged=True, active=np.zeros(S, bool))
    start = mdp.mu0 if start is None else np.asarray(start, dtype=float)
    horizon = config.horizon or default_horizon(mdp.gamma)
    theta = np.zeros((S, d)) if init is None else np.clip(np.array(init.theta, dtype=float), -eps, eps)
    active = np.ones(S, dtype=bool)
    gaps = np.full(S, np.inf)
    j = 0
    while active.any() and j < config.steps:
        pert = ObsPerturbation(theta, eps)
        if config.gradient == "exact":
            g = exact_adv_gradient(mdp, policy, pert, start)
            batch = None
        else:
            pi = policy_matrix_under_perturbation(policy, mdp, pert)
            batch = sample_weights(mdp, pi, start, config.n_traj, horizon,
                                   rng_stream(config.seed, *stream, j))
            g = adv_value_gradient_mc(mdp, policy, pert, weights=batch).grad
        stepped = theta - config.eta * np.sign(g) * active[:, None]
        clamped = np.any(np.abs(stepped) > eps, axis=1)
        theta = np.clip(stepped, -eps, eps)
        pert = ObsPerturbation(theta, eps)
        if batch is None:
            g = exact_adv_gradient(mdp, policy, pert, start)
        else:
            g = adv_value_gradient_mc(mdp, policy, pert, weights=batch).grad
        gaps = np.array([fosc_gap(g[s], theta[s], eps) for s in range(S)])
        if log is not None:
            obj = adversarial_value(mdp, policy, pert, start)
            for s in range(S):
                log({"solver": "pgd", "state": s, "step": j, "objective": obj,
                     "gap": float(gaps[s]), "clamped": bool(clamped[s])})
        active &= gaps > config.delta
        j += 1
    report = FoscReport(gaps=gaps, steps_taken=j, converged=not active.any(), active=active)
    return ObsPerturbation(theta, eps), report


# ---------------------------------------------------------------------------
# KL surrogate


def kl_objective(policy: EmbeddedSoftmax, obs, theta) -> float:
    return kl(action_probs(policy, obs), action_probs(policy, np.asarray(obs) + theta))


def kl_inner(policy: EmbeddedSoftmax, obs, config: InnerSolverConfig, state: int = 0,
             log: Optional[Callable] = None, stream=()) -> np.ndarray:
    """Maximize ``kl(pi(.|obs), pi(.|obs + theta))`` over the l-inf ball.

    Gradient ascent with optional Langevin noise of scale
    ``sqrt(2 * eta * temperature)``. Each restart starts from a uniform draw
    in the ball because ``theta = 0`` is a stationary point (the minimum) of
    the objective. Without noise, a step that lowers the objective is
    rejected and the step size halved. The best final iterate over restarts is
    returned.
    """
    if not isinstance(policy, EmbeddedSoftmax):
        raise TypeError("kl_inner needs an EmbeddedSoftmax policy")
    obs = np.asarray(obs, dtype=float)
    d = obs.shape[0]
    eps = config.eps
    if eps == 0.0:
        return np.zeros(d)
    best, best_val = None, -np.inf
    for r in range(config.restarts):
        rng = rng_stream(config.seed, *stream, state, r)
        theta = rng.uniform(-eps, eps, size=d)
        val = kl_objective(policy, obs, theta)
        eta = config.eta
        for k in range(config.steps):
            cand = theta + eta * kl_grad_obs(policy, obs, theta)
            if config.temperature > 0:
                cand = cand + math.sqrt(2.0 * eta * config.temperature) * rng.standard_normal(d)
            clamped = bool(np.any(np.abs(cand) > eps))
            cand = np.clip(cand, -eps, eps)
            cand_val = kl_objective(policy, obs, cand)
            accepted = config.temperature > 0 or cand_val >= val
            if accepted:
                theta, val = cand, cand_val
            else:
                eta *= 0.5
            if log is not None:
                log({"solver": "kl", "state": state, "restart": r, "step": k, "objective": val,
                     "gap": None, "clamped": clamped, "accepted": accepted})
        if val > best_val:
            best, best_val = theta, val
    return best


def kl_perturbation(mdp: TabularIsaMdp, policy: EmbeddedSoftmax, config: InnerSolverConfig,
                    states=None, stream=()) -> ObsPerturbation:
    """Run :func:`kl_inner` independently for every (or every listed) state."""
    _require_embedded(policy, mdp)
    S, d = mdp.embeddings.shape
    theta = np.zeros((S, d))
    for s in range(S) if states is None else states:
        theta[s] = kl_inner(policy, mdp.embeddings[s], config, state=s, stream=stream)
    return ObsPerturbation(theta, config.eps)


# ---------------------------------------------------------------------------
# KL lower-bound diagnostic


@dataclass
class SurrogateBoundReport:
    value_drop: float
    kl: float
    fisher_lambda_max: float
    ratio: Optional[float]
    degenerate: bool
    holds: Optional[bool]


def surrogate_bound_check(mdp: TabularIsaMdp, policy: EmbeddedSoftmax, obs_state: int,
                          pgd_config: InnerSolverConfig, coefficient: float = 0.0,
                          slack: float = 1.0, kl_guard: float = 0.01) -> SurrogateBoundReport:
    """Compare the exact value drop from a PGD perturbation of one state with its KL.

    Only ``obs_state`` is perturbed. ``coefficient`` plays the role of the
    unobservable leading constant; the report says whether
    ``drop >= slack * coefficient * kl``.
    """
    _require_embedded(policy, mdp)
    S, d = mdp.embeddings.shape
    cfg = replace(pgd_config, gradient="exact")
    pert, _ = pgd_inner(mdp, policy, cfg, start=np.eye(S)[obs_state])
    theta = np.zeros((S, d))
    theta[obs_state] = pert.theta[obs_state]
    pert = ObsPerturbation(theta, cfg.eps)
    x = mdp.embeddings[obs_state]
    G = kl_objective(policy, x, theta[obs_state])
    if G > kl_guard:
        raise BudgetError(f"KL {G:.3g} exceeds the small-perturbation guard {kl_guard}")
    v_nat = solve_value(mdp, policy_matrix_under_perturbation(policy, mdp, None)).v[obs_state]
    v_adv = solve_value(mdp, policy_matrix_under_perturbation(policy, mdp, pert)).v[obs_state]
    drop = float(v_nat - v_adv)
    lam = float(np.linalg.eigvalsh(fisher_at_obs(policy, x))[-1])
    degenerate = G <= 1e-15
    ratio = None if degenerate else drop / G
    holds = None if degenerate else drop >= slack * coefficient * G
    return SurrogateBoundReport(value_drop=drop, kl=G, fisher_lambda_max=lam, ratio=ratio,
                                degenerate=degenerate, holds=holds)
