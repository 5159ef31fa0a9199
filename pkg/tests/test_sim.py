import math

import numpy as np
import pytest
from sklearn.cluster import KMeans

from goalpair_cvae.errors import ConfigError
from goalpair_cvae.sim import (
    IdmParams,
    InitDistribution,
    ScenarioParams,
    VehicleState,
    assign_target,
    generate_dataset,
    idm_acceleration,
    read_jsonl,
    right_of_way_probability,
    rollout,
    time_headway,
    to_arrays,
    write_jsonl,
)


class TestTimeHeadway:
    def test_formula(self):
        assert time_headway(VehicleState(10, 2)) == 5.0

    def test_passed_vehicle_is_zero(self):
        assert time_headway(VehicleState(-3, 4)) == 0.0

    def test_stopped_vehicle_uses_sentinel(self):
        assert time_headway(VehicleState(10, 0)) == 1e6
        assert time_headway(VehicleState(10, 0), ScenarioParams(headway_sentinel=7.0)) == 7.0


class TestRightOfWay:
    def test_equal_headways(self):
        init = (VehicleState(30, 10), VehicleState(30, 10))
        assert right_of_way_probability(init) == 0.5

    def test_literal_sign(self):
        # A: 4 s headway, B: 3 s headway
        init = (VehicleState(20, 5), VehicleState(30, 10))
        p = right_of_way_probability(init, ScenarioParams(eta=1.0))
        assert p == pytest.approx(0.5 * (math.tanh(1.0) + 1.0), abs=1e-12)
        assert p == pytest.approx(0.88079, abs=1e-5)

    def test_intuitive_sign_flips(self):
        init = (VehicleState(20, 5), VehicleState(30, 10))
        p = right_of_way_probability(init, ScenarioParams(eta=1.0, sign_mode="intuitive"))
        assert p == pytest.approx(1 - 0.8807970779778824, abs=1e-12)

    @pytest.mark.parametrize("gap,expected", [(1.0, 1.0), (-1.0, 0.0)])
    def test_saturates_for_small_eta(self, gap, expected):
        init = (VehicleState(10 + 10 * gap, 10), VehicleState(10, 10))
        assert right_of_way_probability(init, ScenarioParams(eta=1e-4)) == pytest.approx(expected, abs=1e-12)

    def test_eta_must_be_positive(self):
        with pytest.raises(ConfigError):
            ScenarioParams(eta=0.0)


class TestIdm:
    def test_free_road_from_standstill(self):
        assert idm_acceleration(VehicleState(0, 0), 1e6) == pytest.approx(2.0, rel=1e-6)

    def test_at_desired_speed(self):
        assert idm_acceleration(VehicleState(0, 10), 1e6) == pytest.approx(0.0, abs=1e-6)

    def test_close_target(self):
        # hand evaluation: s* = 2 + 15 + 100 / (2 sqrt 6); a = 2 (1 - 1 - (s*/5)^2)
        assert idm_acceleration(VehicleState(0, 10), 5.0) == pytest.approx(-111.97510083641869, rel=1e-12)

    def test_gap_is_floored(self):
        assert math.isfinite(idm_acceleration(VehicleState(0, 5), 0.0))
        assert idm_acceleration(VehicleState(0, 5), -3.0) == idm_acceleration(VehicleState(0, 5), 0.1)

    def test_params_positive(self):
        with pytest.raises(ConfigError):
            IdmParams(delta=0)


class TestAssignTarget:
    params = ScenarioParams()

    def test_right_of_way_targets_far_point(self):
        own = VehicleState(20, 5)
        assert assign_target(own, VehicleState(10, 5), True) == own.s - self.params.far_target

    def test_yield_targets_collision_point(self):
        assert assign_target(VehicleState(20, 5), VehicleState(5, 5), False) == 0.0

    def test_yield_released_after_other_passes(self):
        own = VehicleState(20, 5)
        assert assign_target(own, VehicleState(-2, 5), False) == own.s - self.params.far_target


class TestRollout:
    def test_both_past_collision_point(self):
        sc = rollout((VehicleState(-1, 3), VehicleState(-2, 4)), "A")
        s = sc.displacements()
        v = np.array([[sv[1] for sv in veh] for veh in sc.rollout])
        assert np.all(np.diff(s, axis=1) < 0)
        assert np.all(np.diff(v, axis=1) > 0)

    def test_yielding_vehicle_waits(self):
        params, idm = ScenarioParams(), IdmParams()
        sc = rollout((VehicleState(idm.s0, 0.0), VehicleState(40.0, 10.0)), "B", params, idm)
        # independent hand simulation of the right-of-way vehicle for 5 steps
        s, v = 40.0, 10.0
        for t in range(1, 6):
            star = idm.s0 + v * idm.T + v * v / (2 * math.sqrt(idm.a_max * idm.b))
            acc = idm.a_max * (1 - (v / idm.v0) ** idm.delta - (star / params.far_target) ** 2)
            v = max(v + acc * params.dt, 0.0)
            s = s - v * params.dt
            assert sc.rollout[1][t][0] == pytest.approx(s, rel=1e-12)
            # B is still ahead of the collision point, so A holds at the stop line
            assert s > 0
            assert sc.rollout[0][t] == pytest.approx((idm.s0, 0.0), abs=1e-9)

    def test_endpoints_match_rollout(self):
        sc = rollout((VehicleState(30, 8), VehicleState(40, 9)), "A")
        assert sc.endpoints == (sc.rollout[0][-1][0], sc.rollout[1][-1][0])
        assert len(sc.rollout[0]) == ScenarioParams().horizon + 1

    def test_zero_horizon_rejected(self):
        with pytest.raises(ConfigError):
            ScenarioParams(horizon=0)


class TestDataset:
    def test_deterministic(self, tmp_path):
        a = generate_dataset(5, seed=3)
        b = generate_dataset(5, seed=3)
        write_jsonl(a, tmp_path / "a.jsonl")
        write_jsonl(b, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_jsonl_roundtrip(self, tmp_path):
        data = generate_dataset(3, seed=1)
        write_jsonl(data, tmp_path / "d.jsonl")
        back = read_jsonl(tmp_path / "d.jsonl")
        assert [sc.to_record() for sc in back] == [sc.to_record() for sc in data]
        rec = back[0].to_record()
        assert set(rec) == {"initial", "row", "rollout", "endpoints"}

    def test_invalid_ranges(self):
        with pytest.raises(ConfigError):
            InitDistribution(s_range=(60.0, 20.0))
        with pytest.raises(ConfigError):
            generate_dataset(0)

    def test_fixed_condition_frequency(self):
        init = (VehicleState(20, 5), VehicleState(30, 10))
        data = generate_dataset(10000, params=ScenarioParams(eta=1.0), seed=11, fixed_initial=init)
        freq = np.mean([sc.right_of_way == "A" for sc in data])
        assert abs(freq - 0.8807970779778824) < 0.01

    def test_rollout_invariants(self, toy_arrays):
        s = toy_arrays.trajectories
        assert np.all(np.diff(s, axis=2) <= 0)

    def test_velocity_non_negative(self):
        for sc in generate_dataset(200, seed=5):
            assert min(sv[1] for veh in sc.rollout for sv in veh) >= 0

    def test_fixed_condition_is_bimodal(self):
        init = (VehicleState(35, 8), VehicleState(40, 9))
        ends = to_arrays(generate_dataset(1000, seed=2, fixed_initial=init)).endpoints
        km = KMeans(n_clusters=2, n_init=10, random_state=0).fit(ends)
        total = ((ends - ends.mean(0)) ** 2).sum()
        assert km.inertia_ < 0.05 * total
