"""Concrete environment fixtures: dynamics, distributions, and construction."""

import numpy as np
import pytest

from latentsafe.envs import (
    DRIVING_ACTIONS,
    DrivingNoise,
    DrivingState,
    behavioral_policy_driving,
    build_environment,
    decode_driving,
    driving_latent_dist,
    driving_safe,
    driving_step,
    encode_driving,
)
from latentsafe.errors import ConfigurationError, EncodingError


class TestDrivingStep:
    def test_traction_loss_on_slippery_road(self):
        assert driving_step(DrivingState(3, 2), 1, 3, DrivingNoise(0, 0)) == DrivingState(5, 2)

    def test_velocity_clamped_at_zero(self):
        assert driving_step(DrivingState(0, 0), -3, 0, DrivingNoise(0, 0)) == DrivingState(0, 0)

    def test_velocity_capped_at_nine(self):
        assert driving_step(DrivingState(7, 5), 1, 0, DrivingNoise(1, 2)) == DrivingState(12, 9)

    def test_position_wraps(self):
        assert driving_step(DrivingState(29, 5), 0, 3, DrivingNoise(0, 0)).position == 4

    def test_out_of_range_inputs(self):
        with pytest.raises(EncodingError):
            driving_step(DrivingState(0, 0), 2, 0, DrivingNoise(0, 0))
        with pytest.raises(EncodingError):
            driving_step(DrivingState(0, 0), 0, 4, DrivingNoise(0, 0))
        with pytest.raises(EncodingError):
            driving_step(DrivingState(0, 0), 0, 0, DrivingNoise(2, 0))
        with pytest.raises(EncodingError):
            DrivingState(30, 0)
        with pytest.raises(EncodingError):
            DrivingState(0, 10)


class TestDrivingLatent:
    def test_dry_zone(self):
        assert np.allclose(driving_latent_dist(DrivingState(3, 0)), [0.5, 0.5, 0, 0])

    def test_slippery_zone(self):
        assert np.allclose(driving_latent_dist(DrivingState(0, 0)), [0, 1 / 3, 1 / 3, 1 / 3])

    def test_zone_boundary_at_nine(self):
        # 9 mod 6 = 3, so position 9 is on the dry side of the boundary
        assert np.allclose(driving_latent_dist(DrivingState(9, 0)), [0.5, 0.5, 0, 0])


class TestBehavioralPolicy:
    def test_heavy_braking_when_most_slippery(self):
        row = behavioral_policy_driving(DrivingState(2, 2), 3)
        assert np.allclose(row, [0.9, 0.05, 0.03, 0.01, 0.01])

    def test_uniform_when_dry(self):
        for code in range(0, 300, 7):
            state = decode_driving(code)
            assert np.allclose(behavioral_policy_driving(state, 0), np.full(5, 0.2))

    def test_low_speed_gap_for_mild_slip(self):
        # velocity 1 in a low-limit zone is only covered by the w >= 2 rule
        row = behavioral_policy_driving(DrivingState(2, 1), 1)
        assert np.allclose(row, np.full(5, 0.2))
        row = behavioral_policy_driving(DrivingState(2, 1), 2)
        assert np.allclose(row, [0.5, 0.4, 0.05, 0.04, 0.01])

    def test_rows_sum_to_one_everywhere(self):
        for code in range(300):
            state = decode_driving(code)
            for w in range(4):
                assert abs(behavioral_policy_driving(state, w).sum() - 1.0) < 1e-12


class TestDrivingModel:
    def test_safe_set_decomposition(self, driving):
        safe = driving.model.safe
        assert int(safe.sum()) == 156
        low_cap = 0
        for code in range(300):
            state = decode_driving(code)
            if state.velocity > 5:
                assert not safe[code]
            if state.position % 10 < 4 and state.velocity in (4, 5):
                assert not safe[code]
                low_cap += 1
        # 180 pairs have velocity <= 5; 24 of them sit over the lower limit
        assert low_cap == 24
        assert int((np.arange(300) % 10 <= 5).sum()) == 180

    def test_transition_rows_marginalize_sixty_combinations(self, driving):
        assert np.allclose(driving.model.transition.sum(axis=-1), 1.0, atol=1e-9)

    def test_step_deterministic_given_inputs(self):
        a = driving_step(DrivingState(17, 4), -2, 1, DrivingNoise(-1, 1))
        b = driving_step(DrivingState(17, 4), -2, 1, DrivingNoise(-1, 1))
        assert a == b

    def test_position_wrap_preserves_predicates(self):
        for raw_position in range(120):
            wrapped = raw_position % 30
            for velocity in range(10):
                expect_safe = (
                    velocity <= 3 if raw_position % 10 < 4 else velocity <= 5
                )
                assert driving_safe(DrivingState(wrapped, velocity)) == expect_safe
            if raw_position % 6 >= 3:
                expected = [0.5, 0.5, 0, 0]
            else:
                expected = [0, 1 / 3, 1 / 3, 1 / 3]
            assert np.allclose(driving_latent_dist(DrivingState(wrapped, 0)), expected)

    def test_encoding_roundtrip(self):
        for code in range(300):
            assert encode_driving(decode_driving(code)) == code


class TestMismatchEnv:
    def test_published_transition_table(self, mismatch):
        t = mismatch.model.transition  # (x, u, w, x')
        assert t[0, 0, 0, 0] == 0.9
        assert t[0, 0, 1, 0] == 1.0
        assert t[1, 0, 1, 0] == 0.0
        assert t[0, 1, 0, 0] == 1.0
        assert t[0, 1, 1, 0] == 0.1
        assert t[1, 1, 1, 0] == 0.0
        latent = mismatch.model.latent_dist
        assert latent[0, 0] == 0.5
        assert latent[1, 0] == 0.0

    def test_rows_complement(self, mismatch):
        assert np.allclose(mismatch.model.transition.sum(axis=-1), 1.0, atol=0)

    def test_behavioral_rows(self, mismatch):
        table = mismatch.behavioral.table
        assert table[0, 0, 0] == 0.5
        assert table[0, 1, 0] == 1.0

    def test_safety(self, mismatch):
        assert mismatch.model.safe.tolist() == [True, False]


class TestMediatorToyEnv:
    def test_mediator_law(self, mediator_toy):
        md = mediator_toy.mediator.mediator_dist
        assert md[0, 1, 1] == 0.8
        assert md[0, 1, 0] == pytest.approx(0.2)
        assert np.allclose(md.sum(axis=-1), 1.0, atol=0)

    def test_direct_kernel_is_mediator_marginal(self, mediator_toy):
        med = mediator_toy.mediator
        marginal = np.einsum("xum,xmwy->xuwy", med.mediator_dist, med.mediated_transition)
        assert np.allclose(marginal, mediator_toy.model.transition, atol=1e-15)

    def test_mediated_law_reuses_mismatch_rows(self, mediator_toy, mismatch):
        assert np.array_equal(
            mediator_toy.mediator.mediated_transition, mismatch.model.transition
        )


class TestRegistry:
    def test_builders(self):
        for env_id in ("driving", "mismatch", "mediator-toy"):
            bundle = build_environment(env_id, horizon=4)
            assert bundle.env_id == env_id
            assert bundle.model.horizon == 4

    def test_unknown_id(self):
        with pytest.raises(ConfigurationError):
            build_environment("rocketry")

    def test_action_values(self, driving):
        assert driving.model.action_values == DRIVING_ACTIONS
