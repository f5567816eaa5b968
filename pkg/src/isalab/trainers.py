"""Outer-loop policy optimization: SPO, ARPO and BARPO.

All trainers take one gradient step per inner solve and record one
:class:`IterRecord` per iterate, including the initial one. In exact mode every
quantity comes from linear solves; in Monte Carlo mode gradients are
score-function estimates from sampled rollouts with an exact value baseline.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .adversary import (InnerSolverConfig, default_horizon, kl_objective, kl_perturbation,
                        pgd_inner, rng_stream, sample_weights)
from .errors import ValidationError
from .mdp_core import (DiscreteAdversary, TabularIsaMdp, solve_value, strongest_adversary_exact,
                       value_and_state_occupancy, visitation)
from .policy import (Direct2, EmbeddedSoftmax, ObsPerturbation, PolicySpec,
                     get_params, policy_matrix, policy_matrix_under_perturbation,
                     prob_jacobian_theta, with_params)

PARADIGMS = ("SPO", "ARPO", "BARPO")


@dataclass(frozen=True)
class TrainerConfig:
    paradigm: str = "SPO"
    outer_steps: int = 100
    outer_step_size: float = 0.1
    schedule: str = "constant"  # or "one_over_sqrt_K"
    gradient_mode: str = "exact"  # or "monte_carlo"
    n_traj: int = 1000
    horizon: Optional[int] = None
    inner: InnerSolverConfig = field(default_factory=InnerSolverConfig)
    kappa: float = 0.0
    clip_eta: float = 0.2
    entropy_coeff: float = 0.0
    barpo_objective: str = "clipped"  # or "value"
    seed: int = 0
    track_exact_adversary: bool = True

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValidationError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.outer_steps < 1:
            raise ValidationError("outer_steps must be >= 1")
        if self.outer_step_size < 0:
            raise ValidationError("outer_step_size must be nonnegative")
        if self.schedule not in ("constant", "one_over_sqrt_K"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        if self.gradient_mode not in ("exact", "monte_carlo"):
            raise ValidationError(f"unknown gradient_mode {self.gradient_mode!r}")
        if not 0.0 < self.clip_eta < 1.0:
            raise ValidationError("clip_eta must lie in (0, 1)")
        if self.barpo_objective not in ("clipped", "value"):
            raise ValidationError(f"unknown barpo_objective {self.barpo_objective!r}")
        if self.kappa < 0 or self.entropy_coeff < 0:
            raise ValidationError("kappa and entropy_coeff must be nonnegative")

    @property
    def step_size(self) -> float:
        if self.schedule == "one_over_sqrt_K":
            return self.outer_step_size / math.sqrt(self.outer_steps)
        return self.outer_step_size


@dataclass
class IterRecord:
    iter: int
    params: list
    v_nat: float
    v_adv: float
    v_adv_exact: float
    grad_norm: float
    inner_metric: float
    wall_clock: float = 0.0
    kkt: Optional[dict] = None

    def comparable(self) -> dict:
        """Everything except timing, for determinism and equivalence checks."""
        d = asdict(self)
        d.pop("wall_clock")
        return d


@dataclass
class TrainTrace:
    paradigm: str
    records: list = field(default_factory=list)
    final_policy: Optional[PolicySpec] = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


# ---------------------------------------------------------------------------
# clipped surrogate


def clip_objective(ratio: float, advantage: float, eta: float) -> float:
    if not 0.0 < eta < 1.0:
        raise ValidationError("eta must lie in (0, 1)")
    return min(ratio * advantage, min(max(ratio, 1.0 - eta), 1.0 + eta) * advantage)


def _clip_active(ratio, eta):
    """Masks where ``d g(x, y) / dx = y`` for positive and negative ``y``."""
    return (ratio <= 1.0 + eta).astype(float), (ratio >= 1.0 - eta).astype(float)


# ---------------------------------------------------------------------------
# gradients


def _observation(policy, mdp, s, pert):
    """What the policy is conditioned on at true state ``s``."""
    if isinstance(policy, EmbeddedSoftmax):
        x = np.array(mdp.embeddings[s], dtype=float)
        if isinstance(pert, ObsPerturbation):
            x = x + pert.theta[s]
        elif isinstance(pert, DiscreteAdversary):
            x = np.array(mdp.embeddings[pert.targets(mdp)[s]], dtype=float)
        return x
    if isinstance(pert, DiscreteAdversary):
        return int(pert.targets(mdp)[s])
    if isinstance(pert, ObsPerturbation):
        raise TypeError("observation perturbations need an EmbeddedSoftmax policy")
    return s


def _jacobians(policy, mdp, pert):
    """``[S, A, P]`` derivatives of the (possibly perturbed) action probabilities."""
    return np.stack([prob_jacobian_theta(policy, _observation(policy, mdp, s, pert))
                     for s in range(mdp.n_states)])


def exact_policy_gradient(mdp: TabularIsaMdp, policy: PolicySpec, adversary=None, start=None) -> np.ndarray:
    """``dV^{pi o nu}(start)/dtheta`` with the adversary held fixed.

    Uses ``d(s, a) grad log pi = d(s) grad pi`` so the Direct2 box boundary,
    where a probability is zero, stays exact.
    """
    return policy_gradient_and_value(mdp, policy, adversary, start)[0]


def policy_gradient_and_value(mdp: TabularIsaMdp, policy: PolicySpec, adversary=None, start=None):
    """``(exact_policy_gradient(...), value solve)`` sharing one evaluation."""
    pi = policy_matrix_under_perturbation(policy, mdp, adversary)
    res, d_state = value_and_state_occupancy(mdp, pi, start)
    J = _jacobians(policy, mdp, adversary)
    return np.einsum("s,sa,sap->p", d_state, res.q, J) / (1.0 - mdp.gamma), res


def surrogate_gradient(mdp, policy, pert, weight_pos, weight_neg, eta=None, behaviour=None):
    """Gradient of the (clipped) surrogate at the current parameters.

    ``weight_pos`` / ``weight_neg`` ``[S, A]`` hold advantage mass split by
    sign, already divided by the behaviour probabilities' sampling weights
    (exact mode passes ``d(s) pi(a|s) A(s, a) / (1 - gamma)``). The ratio is
    ``pi(a | perturbed obs) / behaviour(a | s)``; with ``eta=None`` no clipping
    is applied.
    """
    J = _jacobians(policy, mdp, pert)  # d pi(a|x~) / dtheta
    beh = policy_matrix(policy, mdp) if behaviour is None else behaviour
    cur = policy_matrix_under_perturbation(policy, mdp, pert)
    safe_beh = np.where(beh > 0, beh, 1.0)
    ratio = np.where(beh > 0, cur / safe_beh, 1.0)
    if eta is None:
        act_pos = act_neg = np.ones_like(ratio)
    else:
        act_pos, act_neg = _clip_active(ratio, eta)
    w = (weight_pos * act_pos + weight_neg * act_neg) / safe_beh
    return np.einsum("sa,sap->p", w, J)


def _exact_advantage_weights(mdp, pi, start=None):
    res = solve_value(mdp, pi)
    d = visitation(mdp, pi, start)
    adv = res.q - res.v[:, None]
    w = d * adv / (1.0 - mdp.gamma)
    return np.maximum(w, 0.0), np.minimum(w, 0.0), res


def _mc_advantage_weights(mdp, pi, cfg: TrainerConfig, k: int, start=None):
    """Mean sampled weights with an exact-value baseline."""
    start = mdp.mu0 if start is None else np.asarray(start, dtype=float)
    horizon = cfg.horizon or default_horizon(mdp.gamma)
    res = solve_value(mdp, pi)
    W_pos, W_neg = sample_weights(mdp, pi, start, cfg.n_traj, horizon,
                                  rng_stream(cfg.seed, 1, k), baseline=res.v)
    return W_pos.mean(axis=0), W_neg.mean(axis=0), res


def _entropy_gradient(mdp, policy, pi):
    d = visitation(mdp, pi).sum(axis=1)
    J = _jacobians(policy, mdp, None)
    logp = np.log(np.maximum(pi, 1e-300))
    return -np.einsum("s,sa,sap->p", d, logp, J) / (1.0 - mdp.gamma)


# ---------------------------------------------------------------------------
# parameter updates


def _box_kkt(theta, g, tol=0.0):
    """Projected gradient and box multipliers for Direct2's [0, 1]^2."""
    lower = theta <= tol
    upper = theta >= 1.0 - tol
    proj = g.copy()
    proj[lower & (g < 0)] = 0.0
    proj[upper & (g > 0)] = 0.0
    lam_lower = np.where(lower, np.maximum(-g, 0.0), 0.0)
    lam_upper = np.where(upper, np.maximum(g, 0.0), 0.0)
    return proj, {"active_lower": lower.tolist(), "active_upper": upper.tolist(),
                  "lambda_lower": lam_lower.tolist(), "lambda_upper": lam_upper.tolist()}


def _step(policy, g, eta):
    theta = get_params(policy)
    new = theta + eta * g
    if isinstance(policy, Direct2):
        new = np.clip(new, 0.0, 1.0)
    return with_params(policy, new)


def _grad_norm(policy, g):
    if isinstance(policy, Direct2):
        proj, kkt = _box_kkt(get_params(policy), g)
        return float(np.linalg.norm(proj)), kkt
    return float(np.linalg.norm(g)), None


def _exact_strongest_value(mdp, policy, cfg):
    if not cfg.track_exact_adversary or isinstance(policy, EmbeddedSoftmax):
        return math.nan
    pi = policy_matrix(policy, mdp)
    _, res = strongest_adversary_exact(mdp, pi)
    return float(mdp.mu0 @ res.v)


# ---------------------------------------------------------------------------
# trainers


def _run(mdp, policy0, cfg, oracle):
    """Shared outer loop. ``oracle(policy, k)`` returns (grad, v_nat, v_adv, inner_metric)."""
    trace = TrainTrace(paradigm=cfg.paradigm)
    policy = policy0
    eta = cfg.step_size
    t0 = time.perf_counter()
    for k in range(cfg.outer_steps + 1):
        g, v_nat, v_adv, metric = oracle(policy, k)
        gnorm, kkt = _grad_norm(policy, g)
        trace.records.append(IterRecord(
            iter=k, params=get_params(policy).tolist(), v_nat=v_nat, v_adv=v_adv,
            v_adv_exact=_exact_strongest_value(mdp, policy, cfg), grad_norm=gnorm,
            inner_metric=metric, wall_clock=time.perf_counter() - t0, kkt=kkt))
        if k < cfg.outer_steps:
            policy = _step(policy, g, eta)
    trace.final_policy = policy
    return trace


def _check_paradigm(cfg, expected):
    if cfg.paradigm != expected:
        raise ValidationError(f"config paradigm is {cfg.paradigm}, expected {expected}")


def _plain_gradient(mdp, policy, pert, cfg, k):
    """Policy gradient of V^{pi o nu}(mu0) with nu held fixed, exact or sampled."""
    pi = policy_matrix_under_perturbation(policy, mdp, pert)
    if cfg.gradient_mode == "exact":
        g = exact_policy_gradient(mdp, policy, pert)
        v = float(mdp.mu0 @ solve_value(mdp, pi).v)
        return g, v
    w_pos, w_neg, res = _mc_advantage_weights(mdp, pi, cfg, k)
    g = surrogate_gradient(mdp, policy, pert, w_pos, w_neg, eta=None, behaviour=pi)
    return g, float(mdp.mu0 @ res.v)


def train_spo(mdp: TabularIsaMdp, policy0: PolicySpec, config: TrainerConfig) -> TrainTrace:
    _check_paradigm(config, "SPO")

    def oracle(policy, k):
        g, v = _plain_gradient(mdp, policy, _identity_for(policy, mdp), config, k)
        return g, v, v, 0.0

    return _run(mdp, policy0, config, oracle)


def _identity_for(policy, mdp):
    if isinstance(policy, EmbeddedSoftmax):
        return None
    return DiscreteAdversary.identity(mdp)


def train_arpo(mdp: TabularIsaMdp, policy0: PolicySpec, config: TrainerConfig) -> TrainTrace:
    """Alternate an inner adversary solve with an ascent step on V^{pi o nu}(mu0).

    Tabular policies face the exact strongest discrete adversary; embedded
    policies face PGD in the l-inf observation ball, warm-started from the
    previous outer iteration's perturbation.
    """
    _check_paradigm(config, "ARPO")
    continuous = isinstance(policy0, EmbeddedSoftmax)
    state = {"pert": None}

    def oracle(policy, k):
        v_nat = float(mdp.mu0 @ solve_value(mdp, policy_matrix(policy, mdp)).v)
        if continuous:
            inner = replace(config.inner, gradient=config.gradient_mode, seed=config.inner.seed)
            pert, report = pgd_inner(mdp, policy, inner, init=state["pert"], stream=(2, k))
            state["pert"] = pert
            metric = float(np.max(report.gaps)) if report.gaps.size else 0.0
        else:
            pert, _ = strongest_adversary_exact(mdp, policy_matrix(policy, mdp))
            metric = 0.0
        g, v_adv = _plain_gradient(mdp, policy, pert, config, k)
        return g, v_nat, v_adv, metric

    return _run(mdp, policy0, config, oracle)


def train_barpo(mdp: TabularIsaMdp, policy0: EmbeddedSoftmax, config: TrainerConfig) -> TrainTrace:
    """Bilevel training against the per-state KL-maximizing perturbation.

    The ascent direction is ``grad[g_rob] + kappa * grad[g_std] + c * grad[H]``
    at the current parameters, where ``g_rob`` is the clipped surrogate with the
    numerator evaluated at perturbed observations, ``g_std`` the clean clipped
    surrogate, and ``H`` the visitation-weighted policy entropy. With
    ``barpo_objective="value"`` the two surrogates are replaced by the policy
    gradients of ``V^{pi o nu}(mu0)`` and ``V^pi(mu0)``. The perturbation is
    treated as a constant during the step.
    """
    _check_paradigm(config, "BARPO")
    if not isinstance(policy0, EmbeddedSoftmax):
        raise TypeError("BARPO needs an EmbeddedSoftmax policy")

    def oracle(policy, k):
        pi = policy_matrix(policy, mdp)
        if config.gradient_mode == "exact":
            w_pos, w_neg, res = _exact_advantage_weights(mdp, pi)
        else:
            w_pos, w_neg, res = _mc_advantage_weights(mdp, pi, config, k)
        if config.barpo_objective == "value":
            visited = np.arange(mdp.n_states)
        else:
            visited = np.flatnonzero((np.abs(w_pos) + np.abs(w_neg)).sum(axis=1) > 0)
        inner = replace(config.inner, temperature=config.inner.temperature)
        pert = kl_perturbation(mdp, policy, inner, states=visited, stream=(3, k))
        if config.barpo_objective == "value":
            g, _ = _plain_gradient(mdp, policy, pert, config, k)
            if config.kappa:
                g = g + config.kappa * _plain_gradient(mdp, policy, None, config, k)[0]
        else:
            g = surrogate_gradient(mdp, policy, pert, w_pos, w_neg, eta=config.clip_eta, behaviour=pi)
            g = g + config.kappa * surrogate_gradient(mdp, policy, None, w_pos, w_neg,
                                                       eta=config.clip_eta, behaviour=pi)
        if config.entropy_coeff:
            g = g + config.entropy_coeff * _entropy_gradient(mdp, policy, pi)
        kls = [kl_objective(policy, mdp.embeddings[s], pert.theta[s]) for s in visited]
        v_nat = float(mdp.mu0 @ res.v)
        v_adv = float(mdp.mu0 @ solve_value(mdp, policy_matrix_under_perturbation(policy, mdp, pert)).v)
        return g, v_nat, v_adv, float(np.mean(kls)) if kls else 0.0

    return _run(mdp, policy0, config, oracle)


TRAINERS = {"SPO": train_spo, "ARPO": train_arpo, "BARPO": train_barpo}


def train(mdp, policy0, config: TrainerConfig) -> TrainTrace:
    return TRAINERS[config.paradigm](mdp, policy0, config)
