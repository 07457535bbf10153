import numpy as np
import pytest

from latentsafe.data import convert_dataset, empirical_offline_tables, generate_offline
from latentsafe.envs import build_driving_env, build_mediator_toy_env, build_mismatch_env
from latentsafe.mdp import uniform_policy

MEDIATOR_SEED = 20250810
MISMATCH_SEED = 424242


@pytest.fixture(scope="session")
def driving():
    return build_driving_env(horizon=10)


@pytest.fixture(scope="session")
def mismatch():
    return build_mismatch_env(horizon=6)


@pytest.fixture(scope="session")
def mediator_toy():
    return build_mediator_toy_env(horizon=3)


@pytest.fixture(scope="session")
def uniform2(mismatch):
    return uniform_policy(mismatch.model.n_states, mismatch.model.n_actions)


@pytest.fixture(scope="session")
def uniform5(driving):
    return uniform_policy(driving.model.n_states, driving.model.n_actions)


@pytest.fixture(scope="session")
def mediator_raw_100k(mediator_toy):
    return generate_offline(
        mediator_toy.model,
        mediator_toy.behavioral,
        100_000,
        x0=0,
        seed=MEDIATOR_SEED,
        mediator=mediator_toy.mediator,
        env_id="mediator-toy",
    )


@pytest.fixture(scope="session")
def mediator_converted_100k(mediator_toy, mediator_raw_100k):
    return convert_dataset(mediator_raw_100k, mediator_toy.model.safe)


@pytest.fixture(scope="session")
def mediator_tables_100k(mediator_toy, mediator_converted_100k):
    return empirical_offline_tables(
        mediator_converted_100k, mediator_toy.model, mediator_toy.mediator
    )


@pytest.fixture(scope="session")
def mismatch_h4():
    return build_mismatch_env(horizon=4)


@pytest.fixture(scope="session")
def mismatch_raw_100k(mismatch_h4):
    return generate_offline(
        mismatch_h4.model,
        mismatch_h4.behavioral,
        100_000,
        x0=0,
        seed=MISMATCH_SEED,
        env_id="mismatch",
    )


@pytest.fixture(scope="session")
def mismatch_converted_100k(mismatch_h4, mismatch_raw_100k):
    return convert_dataset(mismatch_raw_100k, mismatch_h4.model.safe)


def three_sigma_match(empirical: float, exact: float, n: int) -> bool:
    """|p_hat - p| within three binomial standard errors (exact for p in {0,1})."""
    se = np.sqrt(exact * (1.0 - exact) / n)
    return abs(empirical - exact) <= 3.0 * se + 1e-12
