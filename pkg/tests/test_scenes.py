"""Scene generation and expert planner tests."""

import math

import numpy as np
import pytest

from bevpilot import scenes as sc
from bevpilot.errors import InvalidArgumentError, ScenarioError
from bevpilot.scenes import (AGENT_LENGTH, DT, K_STEPS, ArcPath, Crosswalk,
                             DynamicObject, OrientedBox, StopSign, StraightPath,
                             TrafficLight, VectorScene, boxes_overlap,
                             generate_scenario, refresh_derived, validate_scene,
                             wrap_angle)


def manual_scene(limit=4.0, signs=(), lights=(), crosswalks=(), objects=(),
                 kind="straight"):
    """Straight east-bound road with the agent at the origin."""
    path = StraightPath((0.0, 0.0), 0.0)
    lane_w = 3.0
    scene = VectorScene(
        path=path, s_min=sc.ROUTE_BEHIND, s_max=sc.ROUTE_AHEAD,
        road_lo=-lane_w / 2, road_hi=lane_w / 2, lane_width=lane_w, two_way=False,
        base_limit=limit,
        lanes=[sc.Lane(np.zeros((2, 2)), 0.0, lane_w, limit)],
        road_edges=[], stop_signs=list(signs), crosswalks=list(crosswalks),
        traffic_lights=list(lights), objects=list(objects),
        route=np.asarray([[-1.0, 0.0], [40.0, 0.0]]),
        agent_pose=np.asarray([0.0, 0.0, 0.0]), kind=kind, seed=0)
    return refresh_derived(scene)


def speeds_of(poses):
    d = np.diff(np.concatenate([[[0.0, 0.0]], poses[:, :2]]), axis=0)
    return np.linalg.norm(d, axis=1) / DT


class TestPaths:
    def test_wrap_angle(self):
        assert abs(wrap_angle(3 * math.pi / 2) - (-math.pi / 2)) <= 1e-12
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)

    def test_straight_frame_roundtrip(self):
        path = StraightPath((2.0, -1.0), 0.7)
        pts = np.asarray([path.point(s, lat) for s, lat in [(3, 0.5), (-2, -1.2)]])
        s, lat = path.frame_of(pts)
        np.testing.assert_allclose(s, [3, -2], atol=1e-12)
        np.testing.assert_allclose(lat, [0.5, -1.2], atol=1e-12)

    def test_arc_frame_roundtrip(self):
        for turn in (+1, -1):
            path = ArcPath.from_pose((1.0, 2.0, 0.3), 15.0, turn)
            p0 = path.pose(0.0)
            np.testing.assert_allclose(p0, [1.0, 2.0, 0.3], atol=1e-12)
            pts = np.asarray([path.point(s, lat) for s, lat in [(5, 0.4), (20, -1.0)]])
            s, lat = path.frame_of(pts)
            np.testing.assert_allclose(s, [5, 20], atol=1e-9)
            np.testing.assert_allclose(lat, [0.4, -1.0], atol=1e-9)

    def test_arc_left_offset_shrinks_left_turn_radius(self):
        path = ArcPath.from_pose((0.0, 0.0, 0.0), 10.0, +1)
        inner = path.point(0.0, 1.0)
        assert np.linalg.norm(inner - path.center) == pytest.approx(9.0)

    def test_to_frame_moves_agent_to_origin(self):
        path = StraightPath((5.0, 3.0), 1.1)
        pose = path.pose(4.0)
        local = path.to_frame(pose)
        s, lat = local.frame_of(np.zeros(2))
        assert float(s) == pytest.approx(4.0, abs=1e-12)
        assert float(lat) == pytest.approx(0.0, abs=1e-12)


class TestBoxOverlap:
    def test_known_cases(self):
        a = OrientedBox(np.zeros(2), 0.0, 4.0, 2.0)
        assert boxes_overlap(a, OrientedBox(np.asarray([3.0, 0.0]), 0.0, 4.0, 2.0))
        assert not boxes_overlap(a, OrientedBox(np.asarray([5.0, 0.0]), 0.0, 4.0, 2.0))
        # rotated box slipping diagonally between the corners
        b = OrientedBox(np.asarray([2.6, 1.6]), math.pi / 4, 4.0, 2.0)
        assert boxes_overlap(a, b) == boxes_overlap(b, a)

    def test_far_apart_never_overlap(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = OrientedBox(rng.normal(size=2), rng.uniform(0, 7), 4, 2)
            radius = math.hypot(2, 1) * 2 + 0.1
            direction = rng.normal(size=2)
            direction /= np.linalg.norm(direction)
            b = OrientedBox(a.center + direction * radius, rng.uniform(0, 7), 4, 2)
            assert not boxes_overlap(a, b)

    def test_contained_overlaps(self):
        a = OrientedBox(np.zeros(2), 0.3, 4.0, 2.0)
        b = OrientedBox(np.asarray([0.1, 0.05]), 1.2, 0.5, 0.5)
        assert boxes_overlap(a, b)


class TestExpertPolicy:
    def test_constant_speed_on_empty_road(self):
        scene = manual_scene(limit=4.0)
        future = scene.expert_future
        gaps = np.linalg.norm(np.diff(
            np.concatenate([[[0, 0]], future[:, :2]]), axis=0), axis=1)
        np.testing.assert_allclose(gaps, 4.0 * DT, atol=1e-9)
        np.testing.assert_allclose(future[:, 1], 0.0, atol=1e-12)

    def test_stop_sign_ahead_brakes_to_rest(self):
        # line at s=7 -> rest 1 m short of it, bumper to line
        scene = manual_scene(limit=5.0, signs=[StopSign(np.asarray([7.0, -2.1]), 7.0)])
        v = speeds_of(scene.expert_future)
        assert np.all(np.diff(v) <= 1e-9)
        stop_center = 7.0 - 1.0 - AGENT_LENGTH / 2
        assert scene.expert_future[-1, 0] == pytest.approx(stop_center, abs=0.05)
        assert np.linalg.norm(
            scene.expert_future[-1, :2] - scene.expert_future[-2, :2]) < 0.15

    def test_green_light_matches_empty_road(self):
        empty = manual_scene(limit=4.5)
        green = manual_scene(limit=4.5, lights=[TrafficLight(8.0, ("green",) * 5)])
        np.testing.assert_array_equal(empty.expert_future, green.expert_future)

    def test_yellow_light_brakes_like_red(self):
        red = manual_scene(limit=4.5, lights=[TrafficLight(8.0, ("red",) * 5)])
        yellow = manual_scene(limit=4.5, lights=[TrafficLight(8.0, ("yellow",) * 5)])
        np.testing.assert_array_equal(red.expert_future, yellow.expert_future)
        assert speeds_of(red.expert_future)[-1] < speeds_of(
            manual_scene(limit=4.5).expert_future)[-1]

    def test_occupied_crosswalk_forces_stop(self):
        ped = DynamicObject(
            0, "pedestrian", 0.6, 0.6,
            track=np.tile([8.0, 0.5, math.pi / 2], (5, 1)),
            future=np.tile([8.0, 0.5, math.pi / 2], (K_STEPS, 1)))
        scene = manual_scene(limit=5.0, crosswalks=[Crosswalk(8.0, 0.75)],
                             objects=[ped])
        assert scene.crosswalks[0].occupied
        # rest 1 m before the near stripe edge
        assert scene.expert_future[-1, 0] <= 8.0 - 0.75 - 1.0 - AGENT_LENGTH / 2 + 0.05

    def test_pinch_zone_caps_speed(self):
        parked = [DynamicObject(
            i, "parked", 4.0, 1.8,
            track=np.tile([7.0, side * 2.2, 0.0], (5, 1)),
            future=np.tile([7.0, side * 2.2, 0.0], (K_STEPS, 1)))
            for i, side in enumerate((-1, 1))]
        scene = manual_scene(limit=5.0, objects=parked)
        assert len(scene.speed_zones) == 1
        v = speeds_of(scene.expert_future)
        s = scene.expert_future[:, 0]
        zone = scene.speed_zones[0]
        inside = (s >= zone.s0 + 0.2) & (s <= zone.s1)
        assert inside.any()
        assert np.all(v[inside] <= sc.PINCH_CAP + 0.05)

    def test_no_route_raises(self):
        scene = manual_scene()
        scene.route = scene.route[:1]
        with pytest.raises(ScenarioError):
            sc.expert_policy(scene)


class TestGenerateScenario:
    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidArgumentError):
            generate_scenario("roundabout", 0)

    def test_deterministic_per_kind_and_seed(self):
        for kind in ("stop_sign", "lead_vehicle_brake", "traffic_light"):
            a = generate_scenario(kind, 1234)
            b = generate_scenario(kind, 1234)
            np.testing.assert_array_equal(a.expert_future, b.expert_future)
            np.testing.assert_array_equal(a.agent_past, b.agent_past)
            np.testing.assert_array_equal(a.agent_pose, b.agent_pose)
            for oa, ob in zip(a.objects, b.objects):
                np.testing.assert_array_equal(oa.track, ob.track)
                np.testing.assert_array_equal(oa.future, ob.future)

    def test_straight_is_empty_and_cruises(self):
        scene = generate_scenario("straight", 7)
        assert len(scene.lanes) >= 1 and not scene.objects
        gaps = np.linalg.norm(np.diff(scene.expert_future[:, :2], axis=0), axis=1)
        np.testing.assert_allclose(gaps, scene.lanes[0].speed_limit * DT, atol=1e-6)

    def test_lead_vehicle_is_ahead_on_route(self):
        for seed in range(8):
            scene = generate_scenario("lead_vehicle_brake", seed)
            leads = [o for o in scene.objects if o.role == "vehicle"]
            assert leads
            s, lat = scene.path.frame_of(leads[0].track[-1, :2])
            assert 0.0 < float(s) <= 12.0
            assert abs(float(lat)) < scene.lane_width / 2

    @pytest.mark.parametrize("kind", sc.SCENARIO_KINDS)
    def test_all_kinds_validate(self, kind):
        for seed in range(4):
            scene = generate_scenario(kind, seed)
            validate_scene(scene)
            assert scene.expert_future.shape == (K_STEPS, 3)
            assert scene.agent_past.shape == (5, 3)

    def test_curved_headings_follow_tangent(self):
        scene = generate_scenario("curved_road", 3)
        s, _ = scene.path.frame_of(scene.expert_future[:, :2])
        expected = scene.path.heading_at(s)
        np.testing.assert_allclose(
            wrap_angle(scene.expert_future[:, 2] - expected), 0.0, atol=1e-6)

    def test_red_light_scene_brakes(self):
        found = False
        for seed in range(20):
            scene = generate_scenario("traffic_light", seed)
            if scene.traffic_lights[0].states[-1] == "red":
                found = True
                v = speeds_of(scene.expert_future)
                assert v[-1] < v[0] or v[0] < 0.5
        assert found
