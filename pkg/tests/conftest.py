import numpy as np
import pytest
from hypothesis import settings

from isalab.mdp_core import TabularIsaMdp, toy_mdp
from isalab.policy import EmbeddedSoftmax

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def toy():
    return toy_mdp()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_embedded_policy(rng, n_actions=2, obs_dim=2, scale=1.0):
    return EmbeddedSoftmax(scale * rng.standard_normal((n_actions, obs_dim)),
                           scale * rng.standard_normal(n_actions))


def single_state_mdp(rewards, gamma=0.9, obs=None):
    rewards = np.asarray(rewards, dtype=float)
    A = rewards.size
    emb = None if obs is None else np.atleast_2d(obs)
    return TabularIsaMdp(reward=rewards[None, :], transition=np.ones((1, A, 1)), gamma=gamma,
                         mu0=np.ones(1), perturb_sets=((0,),), embeddings=emb)


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
