"""Kernel algebra: marginalized one-step laws and the absorbing auxiliary kernel."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentsafe.envs import (
    DrivingNoise,
    DrivingState,
    build_driving_env,
    build_mismatch_env,
    driving_latent_dist,
    driving_step,
    encode_driving,
)
from latentsafe.errors import (
    EncodingError,
    EpisodeEndError,
    ModelError,
    PositivityError,
)
from latentsafe.mdp import (
    AugmentedState,
    ConfoundedMdpModel,
    TabularPolicy,
    absorbing_kernel,
    absorbing_online_matrix,
    online_row,
    p_offline,
    p_offline_matrix,
    p_online,
    p_online_matrix,
    reward,
    uniform_policy,
)


class TestPOnline:
    def test_mismatch_marginalized_value(self, mismatch):
        assert abs(p_online(mismatch.model, 0, 0, 1) - 0.55) < 1e-12

    def test_single_latent_point_mass_is_raw_row(self):
        transition = np.zeros((2, 1, 1, 2))
        transition[0, 0, 0] = [0.3, 0.7]
        transition[1, 0, 0] = [0.0, 1.0]
        model = ConfoundedMdpModel(
            transition=transition,
            latent_dist=np.ones((2, 1)),
            horizon=2,
            safe=np.array([True, False]),
            action_values=(0,),
        )
        assert p_online(model, 1, 0, 0) == transition[0, 0, 0, 1]

    def test_driving_value_matches_independent_enumeration(self, driving):
        # Oracle: direct enumeration over (w, n1, n2) with the scalar step map.
        x = DrivingState(0, 0)
        target = DrivingState(0, 2)
        latent = driving_latent_dist(x)
        expected = 0.0
        for w, p_w in enumerate(latent):
            if p_w == 0.0:
                continue
            for n1 in (-1, 0, 1):
                for n2 in (-2, -1, 0, 1, 2):
                    if driving_step(x, 1, w, DrivingNoise(n1, n2)) == target:
                        expected += p_w / 15.0
        got = p_online(driving.model, encode_driving(target), encode_driving(x), 4)
        assert abs(got - expected) < 1e-12
        # Hand count, independent of any shared code: from velocity 0 under
        # action 1 the drive term is max(0, |1 + n1| - w), which for w = 1
        # reaches 2 only via n1 = 1, so velocity 2 needs (n1=1, n2=1) or
        # (any n1, n2=2) minus overlap: 3 of 15 noise draws per latent level
        # at w = 1, and exactly the n2 = 2 column (3 draws) at w in {2, 3}.
        assert abs(got - 0.2) < 1e-12

    def test_rows_sum_to_one(self, mismatch, driving):
        for model in (mismatch.model, driving.model):
            rows = p_online_matrix(model)
            assert np.allclose(rows.sum(axis=-1), 1.0, atol=1e-9)

    def test_unknown_state_raises(self, mismatch):
        with pytest.raises(EncodingError):
            p_online(mismatch.model, 0, 5, 0)
        with pytest.raises(EncodingError):
            p_online(mismatch.model, 0, 0, 9)


class TestPOffline:
    def test_mismatch_logged_value(self, mismatch):
        assert abs(p_offline(mismatch.model, mismatch.behavioral, 0, 0, 1) - 1.0) < 1e-12

    def test_latent_free_policy_reduces_to_online(self, mismatch):
        table = np.tile([[0.3, 0.7]], (2, 2, 1))  # same row for every latent
        blindish = TabularPolicy(table=table, kind="aware")
        for x in range(2):
            for u in range(2):
                assert abs(
                    p_offline(mismatch.model, blindish, 0, x, u)
                    - p_online(mismatch.model, 0, x, u)
                ) < 1e-12

    def test_two_term_ratio_hand_value(self, mismatch):
        # numerator 0.5*0.9*0.5 + 0.5*1*1, denominator 0.5*0.5 + 0.5*1
        assert abs(
            p_offline(mismatch.model, mismatch.behavioral, 0, 0, 0) - 0.725 / 0.75
        ) < 1e-12

    def test_zero_support_names_cell(self, mismatch):
        table = np.zeros((2, 2, 2))
        table[:, :, 0] = 1.0  # action 1 never taken anywhere
        never_one = TabularPolicy(table=table, kind="aware")
        with pytest.raises(PositivityError) as err:
            p_offline(mismatch.model, never_one, 0, 0, 1)
        assert err.value.cell == (0, 1)

    def test_defined_rows_sum_to_one(self, mismatch, driving):
        for env in (mismatch, driving):
            rows, defined = p_offline_matrix(env.model, env.behavioral)
            assert defined.all()
            assert np.allclose(rows.sum(axis=-1), 1.0, atol=1e-9)

    def test_blind_policy_rejected(self, mismatch, uniform2):
        with pytest.raises(ModelError):
            p_offline(mismatch.model, uniform2, 0, 0, 0)


class TestAbsorbingKernel:
    def test_unsafe_state_freezes(self, mismatch):
        dist = absorbing_kernel(online_row, mismatch.model, AugmentedState(1, 3), 0)
        assert dist == {AugmentedState(1, 2): 1.0}

    def test_safe_state_keeps_base_row(self, mismatch):
        dist = absorbing_kernel(online_row, mismatch.model, AugmentedState(0, 2), 1)
        assert dist == {
            AugmentedState(0, 1): pytest.approx(0.55, abs=1e-12),
            AugmentedState(1, 1): pytest.approx(0.45, abs=1e-12),
        }

    def test_no_time_remaining(self, mismatch):
        with pytest.raises(EpisodeEndError):
            absorbing_kernel(online_row, mismatch.model, AugmentedState(0, 0), 0)

    def test_matrix_rows_are_point_masses_at_unsafe(self, driving):
        rows = absorbing_online_matrix(driving.model)
        for x in np.flatnonzero(~driving.model.safe):
            for u in range(driving.model.n_actions):
                expected = np.zeros(driving.model.n_states)
                expected[x] = 1.0
                assert np.array_equal(rows[x, u], expected)


class TestReward:
    def test_cases(self, mismatch):
        safe = mismatch.model.safe
        assert reward(AugmentedState(0, 0), safe) == 1
        assert reward(AugmentedState(0, 3), safe) == 0
        assert reward(AugmentedState(1, 0), safe) == 0

    def test_exhaustive_support(self, mismatch):
        safe = mismatch.model.safe
        hits = {
            (x, k)
            for x in range(2)
            for k in range(mismatch.model.horizon + 1)
            if reward(AugmentedState(x, k), safe) == 1
        }
        assert hits == {(0, 0)}


class TestMarkovProperty:
    def test_two_step_histories_agree(self, mismatch):
        """P(X2 | X1=0, U1=u) is the same whichever (X0, U0) prefix produced X1."""
        model = mismatch.model
        n = 100_000
        rng = np.random.default_rng(97)
        freqs = {}
        counts = {}
        for prefix_u in (0, 1):
            w0 = rng.random(n) < model.latent_dist[0, 1]
            p_stay = np.where(
                w0, model.transition[0, prefix_u, 1, 0], model.transition[0, prefix_u, 0, 0]
            )
            x1 = np.where(rng.random(n) < p_stay, 0, 1)
            at_zero = x1 == 0
            m = int(at_zero.sum())
            w1 = rng.random(m) < model.latent_dist[0, 1]
            for u1 in (0, 1):
                p_stay1 = np.where(
                    w1, model.transition[0, u1, 1, 0], model.transition[0, u1, 0, 0]
                )
                x2 = rng.random(m) < p_stay1
                freqs[(prefix_u, u1)] = float(x2.mean())
                counts[(prefix_u, u1)] = m
        for u1 in (0, 1):
            a, b = freqs[(0, u1)], freqs[(1, u1)]
            na, nb = counts[(0, u1)], counts[(1, u1)]
            se = np.sqrt(a * (1 - a) / na + b * (1 - b) / nb)
            assert abs(a - b) <= 3 * se + 1e-12


class TestLatentPermutation:
    def test_online_kernel_invariant(self, mismatch):
        model = mismatch.model
        perm = [1, 0]
        permuted = ConfoundedMdpModel(
            transition=model.transition[:, :, perm, :],
            latent_dist=model.latent_dist[:, perm],
            horizon=model.horizon,
            safe=model.safe,
            action_values=model.action_values,
        )
        assert np.allclose(
            p_online_matrix(model), p_online_matrix(permuted), atol=1e-15
        )


def _normalized(rows: np.ndarray) -> np.ndarray:
    return rows / rows.sum(axis=-1, keepdims=True)


@st.composite
def small_models(draw):
    n = draw(st.integers(2, 4))
    nu = draw(st.integers(1, 3))
    nw = draw(st.integers(1, 3))
    raw_t = draw(
        st.lists(
            st.floats(0.01, 1.0), min_size=n * nu * nw * n, max_size=n * nu * nw * n
        )
    )
    raw_d = draw(st.lists(st.floats(0.01, 1.0), min_size=n * nw, max_size=n * nw))
    transition = _normalized(np.array(raw_t).reshape(n, nu, nw, n))
    latent = _normalized(np.array(raw_d).reshape(n, nw))
    safe = np.array([draw(st.booleans()) for _ in range(n)])
    safe[0] = True  # keep at least one safe state
    return ConfoundedMdpModel(
        transition=transition,
        latent_dist=latent,
        horizon=3,
        safe=safe,
        action_values=tuple(range(nu)),
    )


@settings(max_examples=50, deadline=None)
@given(small_models())
def test_online_rows_normalized_for_random_models(model):
    rows = p_online_matrix(model)
    assert np.allclose(rows.sum(axis=-1), 1.0, atol=1e-9)
    assert rows.min() >= -1e-15


@settings(max_examples=50, deadline=None)
@given(small_models(), st.randoms(use_true_random=False))
def test_latent_free_behavioral_matches_online_for_random_models(model, rand):
    rows = np.array(
        [[rand.random() + 0.05 for _ in range(model.n_actions)] for _ in range(model.n_states)]
    )
    rows = _normalized(rows)
    table = np.repeat(rows[:, None, :], model.n_latents, axis=1)
    behavioral = TabularPolicy(table=table, kind="aware")
    offline, defined = p_offline_matrix(model, behavioral)
    assert defined.all()
    assert np.allclose(offline, p_online_matrix(model), atol=1e-12)
