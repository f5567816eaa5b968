"""End-to-end acceptance checks.

Each test prints one ``PASS`` or ``FAIL`` line for its criterion, so
``pytest tests/test_acceptance.py -s`` (or ``-v``) gives a summary table.
"""

import contextlib
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import optimize

from conftest import central_diff
from oracles import grid_max_kl, grid_min_value
from isalab.adversary import (InnerSolverConfig, adv_value_gradient_mc, adversarial_value, exact_adv_gradient,
                              kl_inner, kl_objective, pgd_inner)
from isalab.analysis import (BOUNDARY_BAND, basin_statistics, boundary_distance, closed_form_robust,
                             cut_point_check, detect_fosp, direct_value, find_beta_tilde, sweep_landscape,
                             value_gap_check)
from isalab.cli import load_config, main, random_embedded, run_paired
from isalab.mdp_core import brute_force_strongest, random_mdp, solve_value, strongest_adversary_exact, toy_mdp
from isalab.policy import (Direct2, ObsPerturbation, TabularSoftmax, action_probs, fisher_at_obs, get_params,
                           kl, kl_grad_obs, log_prob_grad_obs, log_prob_grad_theta, policy_matrix,
                           policy_matrix_under_perturbation, with_params)
from isalab.trainers import TrainerConfig, exact_policy_gradient, train

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(number, title):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            with capsys.disabled():
                print(f"\n[criterion {number:2d}] FAIL  {title}  ({time.perf_counter() - start:.1f}s): "
                      f"{str(exc).splitlines()[0] if str(exc) else type(exc).__name__}")
            raise
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] PASS  {title}  ({time.perf_counter() - start:.1f}s)")

    return run


def elapsed_since(t0):
    return time.perf_counter() - t0


def test_01_corner_values(criterion):
    with criterion(1, "corner-policy values"):
        t0 = time.perf_counter()
        mdp = toy_mdp()
        expected = {(1, 1): (0.16, 1.89), (0, 1): (-0.81, 1.26), (0, 0): (-0.95, -0.35), (1, 0): (-2.47, -1.71)}
        for (a, b), v in expected.items():
            got = solve_value(mdp, policy_matrix(Direct2(a, b), mdp)).v
            assert np.max(np.abs(got - v)) <= 0.01, f"V at ({a},{b}) = {got}"
        assert elapsed_since(t0) < 1.0


def test_02_beta_tilde(criterion):
    with criterion(2, "threshold beta_tilde"):
        t0 = time.perf_counter()
        bt = find_beta_tilde()
        mdp = toy_mdp()
        other = optimize.brentq(lambda b: direct_value(mdp, 1, b)[1] - direct_value(mdp, 0, b)[1], 0, 1,
                                xtol=1e-12)
        assert 0.776 <= bt <= 0.778, bt
        assert abs(bt - other) <= 1e-6
        assert elapsed_since(t0) < 1.0


def test_03_robust_region_sweep(criterion):
    with criterion(3, "robust-region sweep 101x101"):
        t0 = time.perf_counter()
        grid = sweep_landscape(101)
        took = elapsed_since(t0)
        bt = find_beta_tilde()
        checked = bad = 0
        for c in grid.cells:
            if boundary_distance(c.alpha, c.beta, bt) > BOUNDARY_BAND:
                checked += 1
                bad += c.robust != closed_form_robust(c.alpha, c.beta, bt)
        assert bad == 0, f"{bad}/{checked} cells disagree"
        assert checked > 9000
        assert np.all(grid.column("v_rob") <= grid.column("v_nat") + 1e-9)
        assert took < 10.0, f"sweep took {took:.1f}s"


def test_04_kkt_triple(criterion):
    with criterion(4, "KKT triple"):
        t0 = time.perf_counter()
        assert detect_fosp((0, 0), "arpo").is_fosp
        assert not detect_fosp((0, 0), "spo").is_fosp
        assert detect_fosp((1, 1), "spo").is_fosp
        assert elapsed_since(t0) < 1.0


def test_05_value_gaps(criterion):
    with criterion(5, "value gaps and half-inequality"):
        rep = value_gap_check()
        assert abs(rep.gap_spo - 3.12) <= 0.02, rep.gap_spo
        assert abs(rep.gap_arpo - 1.44) <= 0.02, rep.gap_arpo
        assert rep.gap_arpo < 0.5 * rep.gap_spo and rep.inequality_holds


def test_06_cut_point(criterion):
    with criterion(6, "cut point"):
        assert cut_point_check() is True
        assert cut_point_check(remove_disk=False) is False


def test_07_strongest_adversary_oracle(criterion):
    with criterion(7, "strongest adversary vs brute force on 100 random MDPs"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        for _ in range(100):
            S, A = int(rng.integers(1, 7)), int(rng.integers(1, 4))
            mdp = random_mdp(rng, S, A, max_set=3)
            pi = rng.dirichlet(np.ones(A), size=S)
            _, fast = strongest_adversary_exact(mdp, pi)
            _, slow = brute_force_strongest(mdp, pi)
            assert np.max(np.abs(fast.v - slow.v)) <= 1e-9
        assert elapsed_since(t0) < 60.0


def test_08_gradient_suite(criterion):
    with criterion(8, "finite-difference gradient suite"):
        rng = np.random.default_rng(8)
        mdp = toy_mdp()
        for _ in range(50):
            # parameter scores, all three variants
            A, d = int(rng.integers(2, 5)), int(rng.integers(1, 5))
            cases = [(Direct2(*rng.uniform(0.05, 0.95, 2)), int(rng.integers(2))),
                     (TabularSoftmax(rng.standard_normal((3, A))), int(rng.integers(3))),
                     (random_embedded(rng, A, d), rng.standard_normal(d))]
            for pol, x in cases:
                a = int(rng.integers(len(action_probs(pol, x))))
                fd = central_diff(lambda th: np.log(action_probs(with_params(pol, th), x)[a]), get_params(pol))
                assert np.max(np.abs(log_prob_grad_theta(pol, x, a) - fd)) <= 1e-5
            # observation score and KL gradient
            pol, x = cases[2]
            fd = central_diff(lambda y: np.log(action_probs(pol, y)[a]), x)
            assert np.max(np.abs(log_prob_grad_obs(pol, x, a) - fd)) <= 1e-5
            theta = rng.uniform(-0.5, 0.5, d)
            p = action_probs(pol, x)
            fd = central_diff(lambda t: kl(p, action_probs(pol, x + t)), theta)
            assert np.max(np.abs(kl_grad_obs(pol, x, theta) - fd)) <= 1e-5
            # value gradients in parameters and in observations
            emb = random_embedded(rng, 2, 2)
            pert = ObsPerturbation(rng.uniform(-0.3, 0.3, (2, 2)), 0.3)
            for pol in (Direct2(*rng.uniform(0.05, 0.95, 2)), TabularSoftmax(rng.standard_normal((2, 2))), emb):
                adv = pert if pol is emb else None

                def v(th):
                    m = policy_matrix_under_perturbation(with_params(pol, th), mdp, adv)
                    return float(mdp.mu0 @ solve_value(mdp, m).v)

                fd = central_diff(v, get_params(pol))
                assert np.max(np.abs(exact_policy_gradient(mdp, pol, adv) - fd)) <= 1e-6
            fd = central_diff(lambda f: adversarial_value(mdp, emb, ObsPerturbation(f.reshape(2, 2), 1.0)),
                              pert.theta.ravel()).reshape(2, 2)
            assert np.max(np.abs(exact_adv_gradient(mdp, emb, pert) - fd)) <= 1e-6


def test_09_monte_carlo_adversary_gradient(criterion):
    with criterion(9, "Monte Carlo adversary gradient at 1e5 trajectories"):
        mdp = toy_mdp()
        for i, theta in enumerate((np.zeros((2, 2)), np.array([[0.2, -0.1], [0.05, 0.3]]))):
            pol = random_embedded(np.random.default_rng(100 + i), 2, 2)
            eps = float(np.max(np.abs(theta)))
            est = adv_value_gradient_mc(mdp, pol, ObsPerturbation(theta, eps), n_traj=100_000, seed=i)
            fd = central_diff(lambda f: adversarial_value(mdp, pol, ObsPerturbation(f.reshape(2, 2), 1.0)),
                              theta.ravel()).reshape(2, 2)
            # the finite-difference error is ~1e-10, negligible next to the sampling error
            z = np.abs(est.grad - fd) / est.stderr
            assert np.all(z <= 3.0), f"z-scores {z.ravel()}"


def test_10_kl_fisher_taylor(criterion):
    with criterion(10, "KL / Fisher quadratic form at |theta| = 1e-3"):
        rng = np.random.default_rng(10)
        for _ in range(20):
            A, d = int(rng.integers(2, 5)), int(rng.integers(1, 5))
            pol = random_embedded(rng, A, d)
            x = rng.standard_normal(d)
            theta = 1e-3 * rng.choice([-1.0, 1.0], size=d)
            quad = 0.5 * theta @ fisher_at_obs(pol, x) @ theta
            ratio = kl(action_probs(pol, x), action_probs(pol, x + theta)) / quad
            assert abs(ratio - 1.0) <= 0.05, ratio


def test_11_inner_solver_oracles(criterion):
    with criterion(11, "inner solvers vs 41-point grid optimum"):
        mdp, eps = toy_mdp(), 0.5
        pgd = InnerSolverConfig(eps=eps, steps=50, gradient="exact")
        kl_cfg = InnerSolverConfig(eps=eps, temperature=0.0, steps=100, step_size=100 * eps, restarts=8)
        for seed in range(30):
            pol = random_embedded(np.random.default_rng(seed), 2, 2)
            for s in range(2):
                x = mdp.embeddings[s]
                best = grid_max_kl(pol, x, eps)
                got = kl_objective(pol, x, kl_inner(pol, x, kl_cfg, state=s))
                assert abs(got - best) <= 0.01 * best, (seed, s, got, best)
            if seed < 10:
                pert, _ = pgd_inner(mdp, pol, pgd)
                got, best = adversarial_value(mdp, pol, pert), grid_min_value(mdp, pol, eps)
                assert abs(got - best) <= 0.01 * abs(best), (seed, got, best)
        # a zero budget leaves everything untouched, bit for bit
        pol = random_embedded(np.random.default_rng(0), 2, 2)
        pert, rep = pgd_inner(mdp, pol, InnerSolverConfig(eps=0.0))
        assert rep.steps_taken == 0 and np.all(pert.theta == 0)
        assert adversarial_value(mdp, pol, pert) == adversarial_value(mdp, pol, None)
        assert np.all(kl_inner(pol, mdp.embeddings[0], InnerSolverConfig(eps=0.0)) == 0)


def test_12_arpo_basins(criterion):
    with criterion(12, "ARPO basin near (0, 0) from 300 uniform inits"):
        t0 = time.perf_counter()
        rep = basin_statistics(TrainerConfig(paradigm="ARPO", outer_steps=300, outer_step_size=0.05),
                               n_inits=300, seed=0)
        frac = rep.fraction_near((0.0, 0.0), 0.1)
        took = elapsed_since(t0)
        print(f"\n  low-value cluster fraction = {frac:.4f}")
        assert 0.2 <= frac <= 0.5, frac
        assert took < 300.0


def test_13_barpo_vs_arpo(criterion):
    with criterion(13, "BARPO median natural value above ARPO over 100 paired inits"):
        t0 = time.perf_counter()
        cfg = load_config(ROOT / "configs" / "paired_embedded.cfg")
        rows = run_paired(toy_mdp(), cfg, seed=0)
        med = {k: float(np.median([r[0] for r in v])) for k, v in rows.items()}
        took = elapsed_since(t0)
        print(f"\n  median v_nat: ARPO {med['ARPO']:.6f}  BARPO {med['BARPO']:.6f}")
        assert took < 600.0
        assert med["BARPO"] > med["ARPO"], med


def test_14_convergence_trend(criterion):
    with criterion(14, "ARPO mean squared gradient norm decreases with K"):
        means = []
        for K in (100, 1000, 10_000):
            cfg = TrainerConfig(paradigm="ARPO", outer_steps=K, outer_step_size=1.0, schedule="one_over_sqrt_K",
                                track_exact_adversary=False)
            trace = train(toy_mdp(), Direct2(0.5, 0.5), cfg)
            means.append(float(np.mean(trace.column("grad_norm") ** 2)))
        print(f"\n  mean squared gradient norms: {means}")
        assert means[0] > means[1] > means[2]


def test_15_determinism(criterion, tmp_path, capsys):
    with criterion(15, "byte-identical reruns with --workers 1"):
        mc = tmp_path / "mc.cfg"
        mc.write_text("[run]\nseed = 5\n[policy]\nvariant = embedded_softmax\ninit = normal\n"
                      "[trainer]\nparadigm = BARPO\nouter_steps = 5\ngradient_mode = monte_carlo\n"
                      "n_traj = 200\nkappa = 0.3\n[inner]\neps = 0.3\n")
        sweep = tmp_path / "sweep.cfg"
        sweep.write_text("[sweep]\nresolution = 21\n")
        basins = tmp_path / "basins.cfg"
        basins.write_text("[trainer]\nparadigm = ARPO\nouter_steps = 30\n[basins]\nn_inits = 10\n")
        runs = [("reproduce-toy", None), ("train", ROOT / "configs" / "arpo_toy.cfg"), ("train", mc),
                ("sweep", sweep), ("attack", ROOT / "configs" / "attack_embedded.cfg"), ("basins", basins)]
        for i, (cmd, cfg) in enumerate(runs):
            dirs = []
            for rep in ("a", "b"):
                out = tmp_path / f"{i}{rep}"
                argv = [cmd, "--out", str(out), "--workers", "1"] + (["--config", str(cfg)] if cfg else [])
                assert main(argv) == 0
                dirs.append(out)
            names = sorted(p.name for p in dirs[0].iterdir())
            assert names == sorted(p.name for p in dirs[1].iterdir())
            for name in names:
                a, b = (d / name for d in dirs)
                if name == "manifest.json":
                    import json
                    ma, mb = json.loads(a.read_text()), json.loads(b.read_text())
                    for key in ("started", "finished"):
                        ma.pop(key), mb.pop(key)
                    assert ma == mb, f"{cmd}: manifests differ beyond timestamps"
                else:
                    assert a.read_bytes() == b.read_bytes(), f"{cmd}: {name} differs"
        capsys.readouterr()
