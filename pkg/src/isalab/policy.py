"""Policy parameterizations and their derivatives.

Three variants are supported:

* :class:`Direct2` -- the two-state, two-action direct parameterization
  ``pi(a1|s1) = alpha``, ``pi(a1|s2) = beta``.
* :class:`TabularSoftmax` -- one logit row per state.
* :class:`EmbeddedSoftmax` -- linear softmax over an observation vector,
  ``pi(.|x) = softmax(W x + b)``. Observations can be perturbed continuously.

Policies are immutable; trainers produce new instances with
:func:`with_params`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DimensionError, ValidationError
from .mdp_core import DiscreteAdversary, TabularIsaMdp, apply_adversary

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Direct2:
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            val = float(getattr(self, name))
            if not np.isfinite(val) or not 0.0 <= val <= 1.0:
                raise ValidationError(f"Direct2.{name} must lie in [0, 1], got {val}")
            object.__setattr__(self, name, val)


@dataclass(frozen=True)
class TabularSoftmax:
    logits: np.ndarray  # [S, A]

    def __post_init__(self):
        logits = np.array(self.logits, dtype=float)
        if logits.ndim != 2:
            raise DimensionError("logits must be a matrix")
        if not np.all(np.isfinite(logits)):
            raise ValidationError("logits must be finite")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)


@dataclass(frozen=True)
class EmbeddedSoftmax:
    weights: np.ndarray  # [A, d]
    bias: np.ndarray  # [A]

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        b = np.array(self.bias, dtype=float)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionError(f"weights {w.shape} and bias {b.shape} are inconsistent")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def obs_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_actions(self) -> int:
        return self.weights.shape[0]


PolicySpec = Union[Direct2, TabularSoftmax, EmbeddedSoftmax]


@dataclass(frozen=True)
class ObsPerturbation:
    """Per-state additive observation shifts ``theta[s]`` with an l-inf budget."""

    theta: np.ndarray  # [S, d]
    eps: float

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 2:
            raise DimensionError("theta must be [n_states, d]")
        if self.eps < 0:
            raise ValidationError("eps must be nonnegative")
        if theta.size and np.max(np.abs(theta)) > self.eps:
            raise ValidationError(f"perturbation exceeds budget: {np.max(np.abs(theta))} > {self.eps}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "eps", float(self.eps))

    @classmethod
    def zeros(cls, n_states: int, dim: int, eps: float = 0.0) -> "ObsPerturbation":
        return cls(np.zeros((n_states, dim)), eps)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def _obs(policy: EmbeddedSoftmax, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (policy.obs_dim,):
        raise DimensionError(f"observation has shape {x.shape}, policy expects ({policy.obs_dim},)")
    return x


def _state(policy, s, n_states) -> int:
    if isinstance(s, np.ndarray) or not np.issubdtype(type(s), np.integer):
        raise DimensionError(f"{type(policy).__name__} is indexed by integer state, got {s!r}")
    if not 0 <= s < n_states:
        raise DimensionError(f"state {s} out of range for {n_states} states")
    return int(s)


def action_probs(policy: PolicySpec, x) -> np.ndarray:
    if isinstance(policy, Direct2):
        p = policy.alpha if _state(policy, x, 2) == 0 else policy.beta
        return np.array([p, 1.0 - p])
    if isinstance(policy, TabularSoftmax):
        return softmax(policy.logits[_state(policy, x, policy.logits.shape[0])])
    if isinstance(policy, EmbeddedSoftmax):
        return softmax(policy.weights @ _obs(policy, x) + policy.bias)
    raise TypeError(f"unknown policy variant {type(policy).__name__}")


def get_params(policy: PolicySpec) -> np.ndarray:
    if isinstance(policy, Direct2):
        return np.array([policy.alpha, policy.beta])
    if isinstance(policy, TabularSoftmax):
        return policy.logits.ravel().copy()
    if isinstance(policy, EmbeddedSoftmax):
        return np.concatenate([policy.weights.ravel(), policy.bias])
    raise TypeError(f"unknown policy variant {type(policy).__name__}")


def with_params(policy: PolicySpec, flat) -> PolicySpec:
    flat = np.asarray(flat, dtype=float)
    if flat.shape != (n_params(policy),):
        raise DimensionError(f"expected {n_params(policy)} parameters, got {flat.shape}")
    if isinstance(policy, Direct2):
        return Direct2(flat[0], flat[1])
    if isinstance(policy, TabularSoftmax):
        return TabularSoftmax(flat.reshape(policy.logits.shape))
    A, d = policy.weights.shape
    return EmbeddedSoftmax(flat[: A * d].reshape(A, d), flat[A * d:])


def n_params(policy: PolicySpec) -> int:
    if isinstance(policy, Direct2):
        return 2
    if isinstance(policy, TabularSoftmax):
        return policy.logits.size
    return policy.weights.size + policy.bias.size


def prob_jacobian_theta(policy: PolicySpec, x) -> np.ndarray:
    """``J[a, k] = d pi(a|x) / d theta_k``. Finite at the Direct2 box boundary."""
    p = action_probs(policy, x)
    if isinstance(policy, Direct2):
        J = np.zeros((2, 2))
        col = 0 if x == 0 else 1
        J[:, col] = (1.0, -1.0)
        return J
    # softmax: dp_a/dz_b = p_a (delta_ab - p_b)
    dpdz = np.diag(p) - np.outer(p, p)
    if isinstance(policy, TabularSoftmax):
        S, A = policy.logits.shape
        J = np.zeros((A, S * A))
        J[:, x * A:(x + 1) * A] = dpdz
        return J
    xv = _obs(policy, x)
    A, d = policy.weights.shape
    # z_b = sum_j W[b, j] x_j + bias_b
    Jw = dpdz[:, :, None] * xv[None, None, :]  # [a, b, j]
    return np.concatenate([Jw.reshape(A, A * d), dpdz], axis=1)


def log_prob_grad_theta(policy: PolicySpec, x, action: int) -> np.ndarray:
    p = action_probs(policy, x)
    if not 0 <= action < p.size:
        raise DimensionError(f"action {action} out of range")
    if isinstance(policy, Direct2):
        return prob_jacobian_theta(policy, x)[action] / max(p[action], PROB_FLOOR)
    onehot = np.zeros_like(p)
    onehot[action] = 1.0
    score = onehot - p
    if isinstance(policy, TabularSoftmax):
        g = np.zeros(policy.logits.shape)
        g[x] = score
        return g.ravel()
    xv = _obs(policy, x)
    return np.concatenate([np.outer(score, xv).ravel(), score])


def log_prob_grad_obs(policy: EmbeddedSoftmax, obs, action: int) -> np.ndarray:
    if not isinstance(policy, EmbeddedSoftmax):
        raise TypeError("observation gradients need an EmbeddedSoftmax policy")
    p = action_probs(policy, obs)
    if not 0 <= action < p.size:
        raise DimensionError(f"action {action} out of range")
    onehot = np.zeros_like(p)
    onehot[action] = 1.0
    return policy.weights.T @ (onehot - p)


def kl(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionError(f"kl arguments differ in shape: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValidationError("kl(p, q) undefined: q vanishes where p is positive")
    val = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    return max(val, 0.0)


def kl_grad_obs(policy: EmbeddedSoftmax, obs, theta) -> np.ndarray:
    """Gradient in ``theta`` of ``kl(pi(.|obs), pi(.|obs + theta))``."""
    p = action_probs(policy, obs)
    q = action_probs(policy, np.asarray(obs) + np.asarray(theta))
    # KL = sum p log p - sum p log q; d/dx log q_a = W^T (e_a - q)
    return -policy.weights.T @ (p - q)


def fisher_at_obs(policy: EmbeddedSoftmax, obs) -> np.ndarray:
    p = action_probs(policy, obs)
    grads = np.stack([log_prob_grad_obs(policy, obs, a) for a in range(p.size)])
    F = (grads * p[:, None]).T @ grads
    return 0.5 * (F + F.T)


def policy_matrix(policy: PolicySpec, mdp: TabularIsaMdp) -> np.ndarray:
    if isinstance(policy, EmbeddedSoftmax):
        emb = _embeddings(policy, mdp)
        return softmax(emb @ policy.weights.T + policy.bias)
    return np.stack([action_probs(policy, s) for s in range(mdp.n_states)])


def _embeddings(policy: EmbeddedSoftmax, mdp: TabularIsaMdp) -> np.ndarray:
    if mdp.embeddings is None:
        raise ValidationError("EmbeddedSoftmax needs an mdp with state embeddings")
    if mdp.obs_dim != policy.obs_dim:
        raise DimensionError(f"embedding dim {mdp.obs_dim} != policy obs dim {policy.obs_dim}")
    return mdp.embeddings


def observations(mdp: TabularIsaMdp, pert: ObsPerturbation | None = None) -> np.ndarray:
    """Observed vector for every state, ``phi(s) + theta_s``."""
    if mdp.embeddings is None:
        raise ValidationError("mdp has no embeddings")
    if pert is None:
        return np.array(mdp.embeddings)
    if pert.theta.shape != mdp.embeddings.shape:
        raise DimensionError(f"perturbation shape {pert.theta.shape} != embeddings {mdp.embeddings.shape}")
    return mdp.embeddings + pert.theta


def policy_matrix_under_perturbation(policy: PolicySpec, mdp: TabularIsaMdp, pert=None) -> np.ndarray:
    if pert is None:
        return policy_matrix(policy, mdp)
    if isinstance(pert, DiscreteAdversary):
        return apply_adversary(policy_matrix(policy, mdp), pert, mdp)
    if isinstance(pert, ObsPerturbation):
        if not isinstance(policy, EmbeddedSoftmax):
            raise TypeError("observation perturbations need an EmbeddedSoftmax policy")
        _embeddings(policy, mdp)
        obs = observations(mdp, pert)
        return softmax(obs @ policy.weights.T + policy.bias)
    raise TypeError(f"unsupported perturbation {type(pert).__name__}")
