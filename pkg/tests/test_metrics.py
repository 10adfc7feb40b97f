"""Metric definitions against independent scalar-loop oracles."""

import math

import numpy as np
import pytest

from bevpilot.dataset import example_from_spec
from bevpilot.errors import InvalidArgumentError
from bevpilot.metrics import (MetricsRow, ade, attention_entropy,
                              attention_mass_in_region, collision_rate,
                              constant_velocity_baseline, displacement_errors,
                              evaluate_model, fde, paired_bootstrap_ci,
                              upsample_pyramid)
from bevpilot.model import PRESETS, DrivingModel
from bevpilot.raster import GridConfig
from bevpilot.scenes import DT, K_STEPS, OrientedBox

GRID = GridConfig()


def ade_oracle(pred, gt):
    total = 0.0
    for p, g in zip(pred, gt):
        total += math.sqrt((p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2)
    return total / len(pred)


class TestDisplacement:
    def test_identical_zero(self):
        wp = np.random.default_rng(0).normal(size=(10, 2))
        assert ade(wp, wp) == 0.0
        assert fde(wp, wp) == 0.0

    def test_constant_offset(self):
        gt = np.random.default_rng(1).normal(size=(10, 2))
        pred = gt + [1.0, 0.0]
        np.testing.assert_allclose(ade(pred, gt), 1.0, atol=1e-12)

    def test_final_three_four_five(self):
        gt = np.zeros((10, 2))
        pred = gt.copy()
        pred[-1] = [3.0, 4.0]
        np.testing.assert_allclose(fde(pred, gt), 5.0, atol=1e-12)
        np.testing.assert_allclose(ade(pred, gt), 0.5, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            pred = rng.normal(size=(10, 2))
            gt = rng.normal(size=(10, 2))
            assert abs(ade(pred, gt) - ade_oracle(pred, gt)) <= 1e-12
            step = displacement_errors(pred, gt)
            assert abs(fde(pred, gt) - step[-1]) <= 1e-12
            # bounds: both statistics sit inside the per-step error range
            assert ade(pred, gt) <= step.max() + 1e-12
            assert fde(pred, gt) <= step.max() + 1e-12

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ade(np.zeros((10, 2)), np.zeros((9, 2)))
        with pytest.raises(InvalidArgumentError):
            fde(np.zeros((3, 3)), np.zeros((3, 3)))


class TestCollisionRate:
    def test_disjoint_zero(self):
        b = np.zeros((5, 4, 4))
        o = np.zeros((5, 4, 4))
        b[:, 0, 0] = 1.0
        o[:, 3, 3] = 1.0
        assert collision_rate(b, o) == 0.0

    def test_identical_single_pixel_is_one(self):
        b = np.zeros((5, 4, 4))
        b[:, 2, 1] = 1.0
        assert collision_rate(b, b) == 1.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        b = rng.random((10, 6, 6))
        o = rng.random((10, 6, 6))
        want = 0.0
        for k in range(10):
            s = 0.0
            for i in range(6):
                for j in range(6):
                    s += b[k, i, j] * o[k, i, j]
            want += s
        want /= 10
        assert abs(collision_rate(b, o) - want) <= 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            collision_rate(np.zeros((5, 4, 4)), np.zeros((5, 4, 5)))
        with pytest.raises(InvalidArgumentError):
            collision_rate(np.zeros((4, 4)), np.zeros((4, 4)))


class TestAttentionEntropy:
    def test_uniform_is_log_count(self):
        alpha = np.full((16, 16), 1.0 / 256)
        assert abs(attention_entropy(alpha) - math.log(256)) <= 1e-9

    def test_one_hot_is_zero(self):
        alpha = np.zeros((16, 16))
        alpha[3, 7] = 1.0
        assert attention_entropy(alpha) == 0.0

    def test_closed_form_half_quarter_quarter(self):
        got = attention_entropy(np.array([0.5, 0.25, 0.25]))
        np.testing.assert_allclose(got, 1.5 * math.log(2), atol=1e-12)

    def test_matches_loop_oracle_and_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = rng.random(64)
            a /= a.sum()
            want = -sum(x * math.log(x) for x in a if x > 0)
            got = attention_entropy(a)
            assert abs(got - want) <= 1e-12
            assert 0.0 <= got <= math.log(64) + 1e-12

    def test_rejects_unnormalized_and_negative(self):
        with pytest.raises(InvalidArgumentError):
            attention_entropy(np.full(10, 0.11))
        bad = np.full(4, 0.25)
        bad[0], bad[1] = -0.25, 0.75
        with pytest.raises(InvalidArgumentError):
            attention_entropy(bad)


class TestUpsamplePyramid:
    def test_constant_stays_constant(self):
        a = np.full((4, 4), 0.0625)
        up = upsample_pyramid(a, 16)
        np.testing.assert_allclose(up, np.full((16, 16), 0.0625 / 16), atol=1e-12)

    def test_one_hot_blob_centered(self):
        a = np.zeros((8, 8))
        a[2, 5] = 1.0
        up = upsample_pyramid(a, 64)
        r, c = np.unravel_index(np.argmax(up), up.shape)
        # argmax stays inside the 8x8 footprint of the source cell
        assert 2 * 8 <= r < 3 * 8
        assert 5 * 8 <= c < 6 * 8
        assert (up >= 0).all()

    def test_mass_preserved_on_random_maps(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = rng.random((16, 16))
            a /= a.sum()
            assert abs(upsample_pyramid(a, 64).sum() - 1.0) <= 1e-6

    def test_identity_factor(self):
        a = np.random.default_rng(6).random((8, 8))
        np.testing.assert_array_equal(upsample_pyramid(a, 8), a)

    def test_rejects_bad_targets(self):
        a = np.full((16, 16), 1 / 256)
        for bad in (8, 24, 48, 17):
            with pytest.raises(InvalidArgumentError):
                upsample_pyramid(a, bad)
        with pytest.raises(InvalidArgumentError):
            upsample_pyramid(np.zeros((4, 5)), 8)


class TestAttentionMassInRegion:
    def test_full_grid_region_totals_one(self):
        a = np.full((16, 16), 1.0 / 256)
        box = OrientedBox(np.zeros(2), 0.0, 100.0, 100.0)
        np.testing.assert_allclose(
            attention_mass_in_region(a, [box], GRID), 1.0, atol=1e-12)

    def test_empty_regions_zero(self):
        a = np.full((16, 16), 1.0 / 256)
        assert attention_mass_in_region(a, [], GRID) == 0.0

    def test_region_without_mass_zero(self):
        a = np.zeros((16, 16))
        a[0, 0] = 1.0   # far corner, ~12 m from the agent
        box = OrientedBox(np.array([0.0, 0.0]), 0.0, 1.0, 1.0)
        assert attention_mass_in_region(a, [box], GRID, dilation_m=1.0) == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        centers = GRID.cell_centers(4)
        for _ in range(10):
            a = rng.random((16, 16))
            a /= a.sum()
            box = OrientedBox(rng.uniform(-6, 6, size=2), rng.uniform(0, 2 * np.pi),
                              rng.uniform(1, 5), rng.uniform(1, 3))
            dil = rng.uniform(0.5, 3.0)
            want = 0.0
            for i in range(16):
                for j in range(16):
                    d = centers[i, j] - box.center
                    c, s = math.cos(box.heading), math.sin(box.heading)
                    lx = d[0] * c + d[1] * s
                    ly = -d[0] * s + d[1] * c
                    ex = max(abs(lx) - box.length / 2, 0.0)
                    ey = max(abs(ly) - box.width / 2, 0.0)
                    if math.hypot(ex, ey) <= dil:
                        want += a[i, j]
            got = attention_mass_in_region(a, [box], GRID, dilation_m=dil)
            assert abs(got - want) <= 1e-12

    def test_union_of_regions(self):
        a = np.zeros((16, 16))
        a[0, 0] = 0.5
        a[15, 15] = 0.5
        c0 = GRID.cell_centers(4)[0, 0]
        c1 = GRID.cell_centers(4)[15, 15]
        boxes = [OrientedBox(c0, 0.0, 0.5, 0.5), OrientedBox(c1, 0.0, 0.5, 0.5)]
        np.testing.assert_allclose(
            attention_mass_in_region(a, boxes, GRID, dilation_m=0.1), 1.0,
            atol=1e-12)

    def test_resolution_must_divide(self):
        with pytest.raises(InvalidArgumentError):
            attention_mass_in_region(np.zeros((20, 20)),
                                     [OrientedBox(np.zeros(2), 0.0, 1, 1)], GRID)


@pytest.fixture(scope="module")
def examples():
    return [example_from_spec("straight", s, GRID) for s in range(5)]


class TestEvaluateModel:
    def test_row_and_arrays(self, examples):
        model = DrivingModel(PRESETS["bottleneck"], seed=0)
        res = evaluate_model(model, examples, batch_size=2)
        assert res.row.variant == "bneck_full"
        assert res.row.count == 5
        assert res.ade_per_example.shape == (5,)
        assert res.entropy_per_example.shape == (5,)
        assert res.alphas.shape == (5, 16, 16)
        np.testing.assert_allclose(res.row.ade, res.ade_per_example.mean())
        assert res.row.entropy >= 0.0

    def test_attention_free_variant_has_no_entropy(self, examples):
        model = DrivingModel(PRESETS["A"], seed=0)
        res = evaluate_model(model, examples)
        assert res.row.entropy is None
        assert res.entropy_per_example is None
        assert res.alphas is None

    def test_matches_manual_rollout(self, examples):
        model = DrivingModel(PRESETS["B"], seed=1)
        res = evaluate_model(model, examples, batch_size=8)
        wp = model.rollout(examples[2].channels).waypoints_m.numpy()[0]
        want = ade(wp, examples[2].expert_future[:, :2])
        np.testing.assert_allclose(res.ade_per_example[2], want, rtol=1e-6)

    def test_empty_rejected(self):
        model = DrivingModel(PRESETS["A"], seed=0)
        with pytest.raises(InvalidArgumentError):
            evaluate_model(model, [])

    def test_csv_row_format(self):
        row = MetricsRow("attn_none", 10, 1.5, 2.5, 0.01, None)
        cells = row.as_csv_row()
        assert cells[0] == "attn_none"
        assert cells[-1] == ""
        row2 = MetricsRow("x", 1, 0, 0, 0, 1.25)
        assert row2.as_csv_row()[-1] == "1.250000"


class TestBootstrap:
    def test_identical_arrays_zero_interval(self):
        a = np.random.default_rng(8).normal(size=50)
        lo, hi = paired_bootstrap_ci(a, a)
        assert lo == hi == 0.0

    def test_constant_shift_recovered(self):
        a = np.random.default_rng(9).normal(size=80)
        lo, hi = paired_bootstrap_ci(a + 1.0, a)
        np.testing.assert_allclose([lo, hi], [1.0, 1.0], atol=1e-9)

    def test_separated_samples_exclude_zero(self):
        rng = np.random.default_rng(10)
        base = rng.normal(size=100)
        lo, hi = paired_bootstrap_ci(base + rng.normal(0.5, 0.1, size=100), base)
        assert lo > 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(size=30), rng.normal(size=30)
        assert paired_bootstrap_ci(a, b, seed=3) == paired_bootstrap_ci(a, b, seed=3)

    def test_rejects_mismatched(self):
        with pytest.raises(InvalidArgumentError):
            paired_bootstrap_ci(np.zeros(3), np.zeros(4))


class TestConstantVelocityBaseline:
    def test_straight_motion_extrapolates(self):
        past = np.array([[-4.0, 0, 0], [-3, 0, 0], [-2, 0, 0], [-1, 0, 0],
                         [0, 0, 0]])
        wp = constant_velocity_baseline(past, K_STEPS, DT)
        # 1 m per past step of dt seconds continues at 1 m per future step
        np.testing.assert_allclose(wp[:, 0], np.arange(1, K_STEPS + 1),
                                   atol=1e-12)
        np.testing.assert_allclose(wp[:, 1], 0.0, atol=1e-12)

    def test_stationary_stays(self):
        past = np.zeros((5, 3))
        wp = constant_velocity_baseline(past, K_STEPS, DT)
        np.testing.assert_array_equal(wp, np.zeros((K_STEPS, 2)))

    def test_needs_two_poses(self):
        with pytest.raises(InvalidArgumentError):
            constant_velocity_baseline(np.zeros((1, 3)), K_STEPS, DT)
