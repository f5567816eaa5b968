"""Landscape analysis of the two-state toy and attack evaluation.

Closed forms, the switching threshold ``beta_tilde``, robust-region
classification, KKT-based stationarity checks, grid sweeps, basin statistics
of trainers, and an attack suite with a relative-degradation metric.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage, optimize

from .adversary import (InnerSolverConfig, adversarial_value, kl_perturbation, pgd_inner,
                        rng_stream)
from .errors import IsaError, ValidationError
from .mdp_core import (DiscreteAdversary, TabularIsaMdp, solve_value, strongest_adversary_exact,
                       toy_mdp)
from .policy import (Direct2, EmbeddedSoftmax, ObsPerturbation, PolicySpec, action_probs, kl,
                     policy_matrix, policy_matrix_under_perturbation)
from .trainers import TrainerConfig, exact_policy_gradient, policy_gradient_and_value, train

ROBUST_TOL = 1e-8
BOUNDARY_BAND = 0.01
FOSP_TOL_GRAD = 1e-7
MULTIPLIER_TOL = -1e-9
ACTIVE_TOL = 1e-9
CLUSTER_RADIUS = 0.05


class SignStructureError(IsaError):
    """The threshold function does not change sign on [0, 1]."""


def fmt(x) -> str:
    """CSV float formatting: 12 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return "undefined"
    return f"{float(x):.12g}"


# ---------------------------------------------------------------------------
# closed forms


@dataclass(frozen=True)
class ToyClosedForm:
    v1: float
    v2: float
    dv1_dalpha: float
    dv1_dbeta: float
    dv2_dalpha: float
    dv2_dbeta: float
    P: float
    A: float
    B: float


def toy_closed_form(alpha: float, beta: float) -> ToyClosedForm:
    """Rational closed forms of the toy's value and its derivatives (gamma = 0.9)."""
    a, b = float(alpha), float(beta)
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise ValidationError("alpha and beta must lie in [0, 1]")
    P = (0.991 - 0.711 * b) * (0.261 * a + 0.109) + (0.261 * a + 0.009) * (0.711 * b - 0.891)
    A = 0.1305 * a + (0.35 * a + 0.1) * (0.711 * b - 0.991) + 0.0045
    B = 0.1305 * a + (0.35 * a + 0.1) * (0.711 * b - 0.891) + 0.0545
    return ToyClosedForm(
        v1=A / P,
        v2=B / P,
        dv1_dalpha=(0.24885 * b - 0.21635) / P - 0.0261 * A / P**2,
        dv1_dbeta=(0.24885 * a + 0.0711) / P + 0.0711 * A / P**2,
        dv2_dalpha=(0.24885 * b - 0.18135) / P - 0.0261 * B / P**2,
        dv2_dbeta=(0.24885 * a + 0.0711) / P + 0.0711 * B / P**2,
        P=P, A=A, B=B,
    )


def direct_value(mdp: TabularIsaMdp, alpha: float, beta: float) -> np.ndarray:
    return solve_value(mdp, policy_matrix(Direct2(alpha, beta), mdp)).v


def _threshold_fn(mdp, state):
    return lambda b: float(direct_value(mdp, 1.0, b)[state] - direct_value(mdp, 0.0, b)[state])


def find_beta_tilde(mdp: Optional[TabularIsaMdp] = None, xtol: float = 1e-9,
                    agreement: float = 1e-6) -> float:
    """Root of ``V^{pi_{1,b}}(s) - V^{pi_{0,b}}(s)`` on [0, 1], checked for both states."""
    mdp = toy_mdp() if mdp is None else mdp
    roots = []
    for s in (0, 1):
        f = _threshold_fn(mdp, s)
        lo, hi = f(0.0), f(1.0)
        if not (lo < 0.0 < hi):
            raise SignStructureError(f"f(0)={lo:.6g}, f(1)={hi:.6g} at state s{s + 1}: no sign change")
        roots.append(optimize.bisect(f, 0.0, 1.0, xtol=xtol))
    if abs(roots[0] - roots[1]) > agreement:
        raise SignStructureError(f"state roots disagree: {roots[0]!r} vs {roots[1]!r}")
    return roots[0]


# ---------------------------------------------------------------------------
# robust region


def robust_gap(mdp: TabularIsaMdp, policy: PolicySpec) -> float:
    """``V^pi(mu0) - V^{pi o nu*}(mu0)``; nonnegative up to round-off."""
    pi = policy_matrix(policy, mdp)
    _, res = strongest_adversary_exact(mdp, pi)
    return float(mdp.mu0 @ (solve_value(mdp, pi).v - res.v))


def classify_robust(alpha: float, beta: float, tol: float = ROBUST_TOL,
                    mdp: Optional[TabularIsaMdp] = None) -> bool:
    """Whether the strongest discrete adversary leaves ``V(mu0)`` unchanged."""
    mdp = toy_mdp() if mdp is None else mdp
    return robust_gap(mdp, Direct2(alpha, beta)) <= tol


def closed_form_robust(alpha: float, beta: float, beta_tilde: float) -> bool:
    return alpha == beta or beta <= min(alpha, beta_tilde)


def _segment_distance(p, a, b):
    p, a, b = (np.asarray(x, dtype=float) for x in (p, a, b))
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def boundary_distance(alpha: float, beta: float, beta_tilde: float) -> float:
    """Distance to the boundary of the closed-form robust region inside the square."""
    p = (alpha, beta)
    return min(_segment_distance(p, (0.0, 0.0), (1.0, 1.0)),
               _segment_distance(p, (beta_tilde, beta_tilde), (1.0, beta_tilde)))


def robust_mask(mdp: TabularIsaMdp, pis: np.ndarray, tol: float = ROBUST_TOL) -> np.ndarray:
    """Batched robustness test for policies ``pis[N, S, A]``.

    The identity remap is a strongest adversary iff no admissible observation
    lowers the one-step lookahead at any state, which is the optimality
    condition of the adversary's own MDP.
    """
    pis = np.asarray(pis, dtype=float)
    N, S, A = pis.shape
    r_pi = np.einsum("nsa,sa->ns", pis, mdp.reward)
    P_pi = np.einsum("nsa,sat->nst", pis, mdp.transition)
    v = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, r_pi[..., None])[..., 0]
    q = mdp.reward[None] + mdp.gamma * np.einsum("sat,nt->nsa", mdp.transition, v)
    robust = np.ones(N, dtype=bool)
    for s, members in enumerate(mdp.perturb_sets):
        # value at s when the policy acts as if in b
        looks = np.einsum("nba,na->nb", pis[:, list(members)], q[:, s])
        robust &= looks.min(axis=1) >= v[:, s] - tol
    return robust


# ---------------------------------------------------------------------------
# stationarity


@dataclass
class FospResult:
    is_fosp: bool
    active_constraints: tuple
    kkt_multipliers: dict
    gradient: np.ndarray
    residual: float
    feasible: bool = True


def _constraints(objective, beta_tilde):
    """``(name, value_fn, gradient)`` for constraints written as ``c(x) >= 0``."""
    if objective == "spo":
        return [("alpha>=0", lambda a, b: a, (1.0, 0.0)),
                ("beta>=0", lambda a, b: b, (0.0, 1.0)),
                ("alpha<=1", lambda a, b: 1.0 - a, (-1.0, 0.0)),
                ("beta<=1", lambda a, b: 1.0 - b, (0.0, -1.0))]
    if objective == "arpo":
        return [("alpha-beta>=0", lambda a, b: a - b, (1.0, -1.0)),
                ("beta>=0", lambda a, b: b, (0.0, 1.0)),
                ("beta<=beta_tilde", lambda a, b: beta_tilde - b, (0.0, -1.0)),
                ("alpha<=1", lambda a, b: 1.0 - a, (-1.0, 0.0))]
    raise ValidationError(f"objective must be 'spo' or 'arpo', got {objective!r}")


def detect_fosp(point, objective: str = "spo", tol_grad: float = FOSP_TOL_GRAD,
                mdp: Optional[TabularIsaMdp] = None, beta_tilde: Optional[float] = None,
                start=None, gradient=None) -> FospResult:
    """KKT check for maximizing ``V(start)`` over the objective's feasible region.

    ``spo`` uses the box [0, 1]^2. ``arpo`` uses the lower robust region
    ``{alpha >= beta, 0 <= beta <= beta_tilde, alpha <= 1}``, on which the
    robust value equals the natural value. Multipliers come from nonnegative
    least squares on the active constraint gradients. A precomputed
    ``gradient`` of the objective at ``point`` may be passed in.
    """
    mdp = toy_mdp() if mdp is None else mdp
    a, b = (float(x) for x in point)
    if objective == "arpo" and beta_tilde is None:
        beta_tilde = find_beta_tilde(mdp)
    cons = _constraints(objective, beta_tilde)
    g = exact_policy_gradient(mdp, Direct2(a, b), None, start) if gradient is None else np.asarray(gradient)
    values = {name: fn(a, b) for name, fn, _ in cons}
    feasible = all(v >= -ACTIVE_TOL for v in values.values())
    active = [(name, grad) for name, _, grad in cons if abs(values[name]) <= ACTIVE_TOL]
    if not feasible:
        return FospResult(False, tuple(n for n, _ in active), {}, g, math.inf, feasible=False)
    if active:
        C = np.array([grad for _, grad in active]).T  # [2, m]
        lam, residual = optimize.nnls(C, -g)
    else:
        lam, residual = np.zeros(0), float(np.linalg.norm(g))
    multipliers = {name: float(l) for (name, _), l in zip(active, lam)}
    ok = residual <= tol_grad and all(l >= MULTIPLIER_TOL for l in lam)
    return FospResult(bool(ok), tuple(multipliers), multipliers, g, float(residual))


# ---------------------------------------------------------------------------
# landscape sweep


@dataclass
class LandscapeCell:
    alpha: float
    beta: float
    v_nat: float
    v_rob: float
    robust: bool
    grad_nat: np.ndarray
    grad_rob: np.ndarray
    fosp_spo: bool
    fosp_arpo: bool


@dataclass
class LandscapeGrid:
    resolution: int
    cells: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.cells])

    def to_csv(self, path) -> None:
        cols = ("alpha", "beta", "v_nat", "v_rob", "robust", "fosp_spo", "fosp_arpo")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for c in self.cells:
                w.writerow([fmt(getattr(c, k)) for k in cols])


def _sweep_row(args):
    mdp, axis, j, objectives, beta_tilde, tol = args
    out = []
    beta = axis[j]
    for alpha in axis:
        policy = Direct2(alpha, beta)
        pi = policy_matrix(policy, mdp)
        g_nat, nat = policy_gradient_and_value(mdp, policy)
        v_nat = float(mdp.mu0 @ nat.v)
        adv, res = strongest_adversary_exact(mdp, pi, natural=nat)
        v_rob = float(mdp.mu0 @ res.v)
        robust = v_nat - v_rob <= tol
        fosp_spo = "spo" in objectives and detect_fosp(
            (alpha, beta), "spo", mdp=mdp, gradient=g_nat).is_fosp
        fosp_arpo = "arpo" in objectives and detect_fosp(
            (alpha, beta), "arpo", mdp=mdp, beta_tilde=beta_tilde, gradient=g_nat).is_fosp
        out.append(LandscapeCell(
            alpha=float(alpha), beta=float(beta), v_nat=v_nat, v_rob=v_rob, robust=robust,
            grad_nat=g_nat,
            grad_rob=g_nat if robust else exact_policy_gradient(mdp, policy, adv),
            fosp_spo=bool(fosp_spo), fosp_arpo=bool(fosp_arpo)))
    return j, out


def sweep_landscape(resolution: int, objectives: Sequence[str] = ("spo", "arpo"),
                    mdp: Optional[TabularIsaMdp] = None, workers: int = 1,
                    tol: float = ROBUST_TOL) -> LandscapeGrid:
    """Exact values, robustness and stationarity on a ``resolution^2`` grid.

    Cells are ordered with ``alpha`` varying fastest.
    """
    if resolution < 2:
        raise ValidationError("resolution must be >= 2")
    mdp = toy_mdp() if mdp is None else mdp
    axis = np.linspace(0.0, 1.0, resolution)
    beta_tilde = find_beta_tilde(mdp) if "arpo" in objectives else None
    jobs = [(mdp, axis, j, tuple(objectives), beta_tilde, tol) for j in range(resolution)]
    rows = dict(_map(_sweep_row, jobs, workers))
    grid = LandscapeGrid(resolution)
    for j in range(resolution):
        grid.cells.extend(rows[j])
    return grid


def _map(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# basins


@dataclass
class BasinCluster:
    cluster_id: int
    alpha: float
    beta: float
    fraction: float
    v_nat: float
    v_rob: float
    members: list = field(default_factory=list)


@dataclass
class BasinReport:
    clusters: list
    inits: np.ndarray
    terminals: np.ndarray

    def fraction_near(self, point, radius: float) -> float:
        """Total fraction of clusters whose center lies within ``radius`` of ``point``."""
        p = np.asarray(point, dtype=float)
        return float(sum(c.fraction for c in self.clusters
                         if np.linalg.norm([c.alpha - p[0], c.beta - p[1]]) <= radius))

    def dominant(self) -> BasinCluster:
        return self.clusters[0]

    def to_csv(self, path) -> None:
        cols = ("cluster_id", "alpha", "beta", "fraction", "v_nat", "v_rob")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for c in self.clusters:
                w.writerow([c.cluster_id] + [fmt(getattr(c, k)) for k in cols[1:]])


def leader_cluster(points: np.ndarray, radius: float) -> list:
    """Assign each point, in order, to the nearest existing leader within ``radius``."""
    leaders, groups = [], []
    for i, p in enumerate(points):
        if leaders:
            dist = np.linalg.norm(np.asarray(leaders) - p, axis=1)
            k = int(np.argmin(dist))
            if dist[k] <= radius:
                groups[k].append(i)
                continue
        leaders.append(p)
        groups.append([i])
    return groups


def _basin_run(args):
    mdp, init, config = args
    trace = train(mdp, Direct2(*init), config)
    p = trace.final_policy
    return p.alpha, p.beta


def basin_statistics(trainer_config: TrainerConfig, n_inits: int = 300,
                     init_distribution: str = "uniform", cluster_radius: float = CLUSTER_RADIUS,
                     mdp: Optional[TabularIsaMdp] = None, seed: int = 0, workers: int = 1,
                     inits=None) -> BasinReport:
    """Train Direct2 policies from random inits and cluster their end points.

    Inits are drawn uniformly from [0, 1]^2 with a stream keyed by ``seed``
    unless given explicitly. Clusters are sorted by decreasing fraction, ties
    broken by position; each cluster reports exact values at its mean point.
    """
    mdp = toy_mdp() if mdp is None else mdp
    if inits is None:
        if init_distribution != "uniform":
            raise ValidationError(f"unknown init distribution {init_distribution!r}")
        if n_inits < 1:
            raise ValidationError("n_inits must be >= 1")
        inits = rng_stream(seed, 4).uniform(0.0, 1.0, size=(n_inits, 2))
    inits = np.asarray(inits, dtype=float).reshape(-1, 2)
    terminals = np.array(_map(_basin_run, [(mdp, x, trainer_config) for x in inits], workers))
    groups = leader_cluster(terminals, cluster_radius)
    clusters = []
    for members in groups:
        center = np.clip(terminals[members].mean(axis=0), 0.0, 1.0)
        pi = policy_matrix(Direct2(*center), mdp)
        _, res = strongest_adversary_exact(mdp, pi)
        clusters.append(BasinCluster(
            cluster_id=0, alpha=float(center[0]), beta=float(center[1]),
            fraction=len(members) / len(inits), v_nat=float(mdp.mu0 @ solve_value(mdp, pi).v),
            v_rob=float(mdp.mu0 @ res.v), members=members))
    clusters.sort(key=lambda c: (-c.fraction, c.alpha, c.beta))
    for i, c in enumerate(clusters):
        c.cluster_id = i
    return BasinReport(clusters, inits, terminals)


# ---------------------------------------------------------------------------
# value gap and cut point


@dataclass(frozen=True)
class ValueGapReport:
    gap_spo: float
    gap_arpo: float
    inequality_holds: bool


def value_gap_check(mdp: Optional[TabularIsaMdp] = None) -> ValueGapReport:
    """Compare the ARPO and SPO stationary values against the worst corner policy."""
    mdp = toy_mdp() if mdp is None else mdp

    def v(a, b):
        return float(mdp.mu0 @ direct_value(mdp, a, b))

    worst = v(1.0, 0.0)
    gap_spo = v(1.0, 1.0) - worst
    gap_arpo = v(0.0, 0.0) - worst
    return ValueGapReport(gap_spo, gap_arpo, gap_arpo < 0.5 * gap_spo)


def robust_grid(resolution: int, mdp: Optional[TabularIsaMdp] = None,
                tol: float = ROBUST_TOL) -> np.ndarray:
    """Boolean ``[beta, alpha]`` robustness image on a uniform grid."""
    mdp = toy_mdp() if mdp is None else mdp
    axis = np.linspace(0.0, 1.0, resolution)
    aa, bb = np.meshgrid(axis, axis)  # rows index beta
    p1 = np.stack([aa.ravel(), bb.ravel()], axis=1)
    pis = np.stack([np.stack([p1[:, 0], 1 - p1[:, 0]], -1),
                    np.stack([p1[:, 1], 1 - p1[:, 1]], -1)], axis=1)
    return robust_mask(mdp, pis, tol).reshape(resolution, resolution)


def cut_point_check(path_resolution: int = 401, disk_radius: float = 0.02, remove_disk: bool = True,
                    mdp: Optional[TabularIsaMdp] = None) -> bool:
    """Whether removing a disk around ``(beta_tilde, beta_tilde)`` disconnects the robust set.

    Connectivity uses 8-neighborhoods on the grid. The two probes are the grid
    points nearest to (1, 1) and (1, 0). Without a sign change of the threshold
    function there is no distinguished point and the check returns False.
    """
    if path_resolution < 100:
        raise ValidationError("path_resolution must be >= 100")
    mdp = toy_mdp() if mdp is None else mdp
    mask = robust_grid(path_resolution, mdp)
    try:
        center = find_beta_tilde(mdp)
    except SignStructureError:
        return False
    if remove_disk:
        axis = np.linspace(0.0, 1.0, path_resolution)
        aa, bb = np.meshgrid(axis, axis)
        mask &= np.hypot(aa - center, bb - center) > disk_radius
    labels, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    top, bottom = labels[-1, -1], labels[0, -1]
    return bool(top and bottom and top != bottom)


def value_ordering(mdp: Optional[TabularIsaMdp] = None) -> bool:
    """Componentwise ``V^{1,1} >= V^{0,1} >= V^{0,0} >= V^{1,0}``."""
    mdp = toy_mdp() if mdp is None else mdp
    chain = [direct_value(mdp, a, b) for a, b in ((1, 1), (0, 1), (0, 0), (1, 0))]
    return all(np.all(hi >= lo) for hi, lo in zip(chain, chain[1:]))


# ---------------------------------------------------------------------------
# attacks

ATTACKS = ("random", "critic", "mad", "exact_strongest")


@dataclass
class AttackRecord:
    name: str
    ret: float
    robustness: Optional[float]
    fallback: bool = False  # the attack's candidate helped the agent, so it was withheld


@dataclass
class AttackReport:
    natural: float
    records: list

    def by_name(self, name: str) -> AttackRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("attack", "return", "robustness"))
            for r in self.records:
                w.writerow((r.name, fmt(r.ret), fmt(r.robustness)))


def robustness_metric(v_adv: float, v_nat: float, floor: float = 1e-9) -> Optional[float]:
    """Relative degradation ``(v_adv - v_nat) / v_nat``; ``None`` when ``|v_nat|`` is tiny."""
    if abs(v_nat) < floor:
        return None
    # + 0.0 turns a signed zero from a negative v_nat into 0.0
    return (v_adv - v_nat) / v_nat + 0.0


def _safe_kl(p, q):
    try:
        return kl(p, q)
    except ValidationError:
        return math.inf


def _discrete_attack(name, mdp, policy, rng):
    pi = policy_matrix(policy, mdp)
    if name == "random":
        return DiscreteAdversary(tuple(int(rng.integers(len(m))) for m in mdp.perturb_sets))
    if name == "critic":
        q = solve_value(mdp, pi).q
        remap = [int(np.argmin([pi[b] @ q[s] for b in members]))
                 for s, members in enumerate(mdp.perturb_sets)]
        return DiscreteAdversary(tuple(remap))
    if name == "mad":
        remap = [int(np.argmax([_safe_kl(pi[s], pi[b]) for b in members]))
                 for s, members in enumerate(mdp.perturb_sets)]
        return DiscreteAdversary(tuple(remap))
    return strongest_adversary_exact(mdp, pi)[0]


def _critic_obs(mdp, policy, inner):
    """Per-state sign descent of ``sum_a pi(a | x + theta) Q^pi(s, a)``."""
    q = solve_value(mdp, policy_matrix(policy, mdp)).q
    S, d = mdp.embeddings.shape
    theta = np.zeros((S, d))
    for s in range(S):
        x = mdp.embeddings[s]
        best, best_val = np.zeros(d), float(action_probs(policy, x) @ q[s])
        t = np.zeros(d)
        for _ in range(inner.steps):
            p = action_probs(policy, x + t)
            grad = policy.weights.T @ (p * (q[s] - p @ q[s]))
            t = np.clip(t - inner.eta * np.sign(grad), -inner.eps, inner.eps)
            val = float(action_probs(policy, x + t) @ q[s])
            if val < best_val:
                best, best_val = t.copy(), val
        theta[s] = best
    return ObsPerturbation(theta, inner.eps)


def _embedded_attacks(names, mdp, policy, inner, rng):
    S, d = mdp.embeddings.shape
    eps = inner.eps
    out = {}
    for name in names:
        if name == "random":
            out[name] = ObsPerturbation(rng.uniform(-eps, eps, size=(S, d)), eps)
        elif name == "critic":
            out[name] = _critic_obs(mdp, policy, inner)
        elif name == "mad":
            out[name] = kl_perturbation(mdp, policy, inner, stream=(5,))
    if "exact_strongest" in names:
        # exact-gradient PGD from zero and warm-started from every other attack;
        # the lowest value among these and the other attacks is kept
        exact = replace(inner, gradient="exact")
        candidates = [pgd_inner(mdp, policy, exact)[0]]
        for pert in list(out.values()):
            candidates.append(pert)
            candidates.append(pgd_inner(mdp, policy, exact, init=pert)[0])
        out["exact_strongest"] = min(candidates, key=lambda p: adversarial_value(mdp, policy, p))
    return out


def attack_eval(mdp: TabularIsaMdp, policy: PolicySpec, attacks: Sequence[str] = ATTACKS,
                budget: Optional[float] = None, inner: Optional[InnerSolverConfig] = None,
                seed: int = 0) -> AttackReport:
    """Evaluate each named attack exactly and report return and robustness.

    A candidate perturbation that would raise the return is withheld and the
    natural return reported instead (flagged on the record).
    Tabular policies face discrete remaps within the perturbation sets
    (``budget=0`` restricts every set to the true state). Embedded policies
    face observation shifts in the l-inf ball of radius ``budget``; ``inner``
    controls the iterative attacks.
    """
    unknown = [a for a in attacks if a not in ATTACKS]
    if unknown:
        raise ValidationError(f"unknown attack(s) {unknown}; choose from {ATTACKS}")
    rng = rng_stream(seed, 6)
    v_nat = float(mdp.mu0 @ solve_value(mdp, policy_matrix(policy, mdp)).v)
    if isinstance(policy, EmbeddedSoftmax):
        eps = float(budget if budget is not None else (inner.eps if inner else 0.0))
        inner = replace(inner or InnerSolverConfig(), eps=eps)
        if eps == 0.0:
            perts = {name: ObsPerturbation.zeros(*mdp.embeddings.shape) for name in attacks}
        else:
            perts = _embedded_attacks(attacks, mdp, policy, inner, rng)
    else:
        if budget is not None and budget == 0:
            mdp = mdp.replace(perturb_sets=tuple((s,) for s in range(mdp.n_states)))
        perts = {name: _discrete_attack(name, mdp, policy, rng) for name in attacks}
    records = []
    for name in attacks:
        pi = policy_matrix_under_perturbation(policy, mdp, perts[name])
        ret = float(mdp.mu0 @ solve_value(mdp, pi).v)
        # not perturbing is always admissible, so an attacker never deploys a
        # perturbation that raises the agent's return
        fallback = ret > v_nat
        ret = min(ret, v_nat)
        records.append(AttackRecord(name, ret, robustness_metric(ret, v_nat), fallback))
    return AttackReport(v_nat, records)


# ---------------------------------------------------------------------------
# curvature


@dataclass
class HessianResult:
    matrix: np.ndarray
    eigenvalues: np.ndarray


def hessian_fd(objective: Callable[[np.ndarray], float], point, step: float = 1e-4,
               bounds: Optional[tuple] = (0.0, 1.0)) -> HessianResult:
    """Symmetrized central-difference Hessian.

    With ``bounds`` set, every coordinate must be at least ``2 * step`` from
    both ends so all stencil points are feasible.
    """
    x = np.asarray(point, dtype=float)
    if bounds is not None:
        lo, hi = bounds
        if np.any(x - lo < 2 * step) or np.any(hi - x < 2 * step):
            raise ValidationError(f"point {x.tolist()} is within {2 * step} of the boundary")
    n = x.size
    H = np.zeros((n, n))
    E = np.eye(n) * step
    for i in range(n):
        for j in range(i, n):
            val = (objective(x + E[i] + E[j]) - objective(x + E[i] - E[j])
                   - objective(x - E[i] + E[j]) + objective(x - E[i] - E[j])) / (4 * step**2)
            H[i, j] = H[j, i] = val
    H = 0.5 * (H + H.T)
    return HessianResult(H, np.linalg.eigvalsh(H))


def natural_objective(mdp: Optional[TabularIsaMdp] = None) -> Callable:
    mdp = toy_mdp() if mdp is None else mdp
    return lambda x: float(mdp.mu0 @ direct_value(mdp, x[0], x[1]))


def robust_objective(mdp: Optional[TabularIsaMdp] = None) -> Callable:
    mdp = toy_mdp() if mdp is None else mdp

    def f(x):
        pi = policy_matrix(Direct2(x[0], x[1]), mdp)
        return float(mdp.mu0 @ strongest_adversary_exact(mdp, pi)[1].v)

    return f
