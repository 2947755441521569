"""Metric oracles: every statistic is re-derived with plain scalar loops."""

import math

import numpy as np
import pytest
import torch

from endodepth.geometry import Pose6, axis_angle_to_se3
from endodepth.metrics import (
    MetricsError,
    accumulate_trajectory,
    depth_metrics,
    pose_metrics,
    trajectory_positions,
)


def scalar_depth_metrics(pred, gt, mode, min_depth=0.1, max_depth=20.0):
    """Independent loop-based reimplementation of the depth statistics."""
    pairs = [(p, g) for p, g in zip(pred.ravel(), gt.ravel()) if g > 0]
    if mode == "median":
        med_g = float(np.median([g for _, g in pairs]))
        med_p = float(np.median([p for p, _ in pairs]))
        pairs = [(p * med_g / med_p, g) for p, g in pairs]
    clamp = lambda x: min(max(x, min_depth), max_depth)
    pairs = [(clamp(p), clamp(g)) for p, g in pairs]

    n = len(pairs)
    abs_rel = sum(abs(p - g) / g for p, g in pairs) / n
    sq_rel = sum((p - g) ** 2 / g for p, g in pairs) / n
    rmse = math.sqrt(sum((p - g) ** 2 for p, g in pairs) / n)
    rmse_log = math.sqrt(sum((math.log(p) - math.log(g)) ** 2 for p, g in pairs) / n)
    l1 = sum(abs(p - g) for p, g in pairs) / n
    deltas = []
    for k in (1, 2, 3):
        deltas.append(sum(1 for p, g in pairs if max(p / g, g / p) < 1.25**k) / n)
    return abs_rel, sq_rel, rmse, rmse_log, l1, *deltas


def random_pose(rng, t_scale=1.0, r_scale=0.5):
    return Pose6(
        rotation=tuple(rng.uniform(-r_scale, r_scale, 3)),
        translation=tuple(rng.uniform(-t_scale, t_scale, 3)),
    )


class TestDepthMetrics:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).uniform(0.5, 5.0, (8, 8))
        m = depth_metrics(gt, gt, mode="none")
        assert m.abs_rel == 0 and m.sq_rel == 0 and m.rmse == 0 and m.rmse_log == 0 and m.l1 == 0
        assert m.delta_1 == m.delta_2 == m.delta_3 == 1.0

    def test_median_mode_removes_global_scale(self):
        gt = np.random.default_rng(1).uniform(0.5, 5.0, (8, 8))
        m = depth_metrics(2.0 * gt, gt, mode="median")
        assert m.abs_rel == pytest.approx(0.0, abs=1e-12)
        assert m.rmse == pytest.approx(0.0, abs=1e-12)
        assert m.delta_1 == 1.0

    def test_twenty_percent_overshoot(self):
        gt = np.random.default_rng(2).uniform(0.5, 5.0, (8, 8))
        m = depth_metrics(1.2 * gt, gt, mode="none")
        assert m.abs_rel == pytest.approx(0.2, rel=1e-12)
        assert m.delta_1 == 1.0  # ratio 1.2 < 1.25
        expected_rmse = 0.2 * math.sqrt((gt**2).mean())
        assert m.rmse == pytest.approx(expected_rmse, rel=1e-12)

    @pytest.mark.parametrize("mode", ["none", "median"])
    def test_matches_scalar_loop_oracle(self, mode):
        rng = np.random.default_rng(3)
        for _ in range(50):
            gt = rng.uniform(0.2, 10.0, (8, 8))
            pred = gt * rng.uniform(0.5, 2.0, (8, 8))
            m = depth_metrics(pred, gt, mode=mode)
            oracle = scalar_depth_metrics(pred, gt, mode)
            got = (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.l1, m.delta_1, m.delta_2, m.delta_3)
            assert got == pytest.approx(oracle, abs=1e-9)

    def test_delta_monotonicity_random_sweep(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            gt = rng.uniform(0.2, 10.0, (4, 4))
            pred = gt * rng.uniform(0.3, 3.0, (4, 4))
            m = depth_metrics(pred, gt, mode="none")
            assert m.delta_1 <= m.delta_2 <= m.delta_3

    def test_median_mode_invariant_to_prediction_rescale(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            gt = rng.uniform(0.2, 10.0, (4, 4))
            pred = gt * rng.uniform(0.5, 2.0, (4, 4))
            scale = rng.uniform(0.1, 10.0)
            a = depth_metrics(pred, gt, mode="median")
            b = depth_metrics(scale * pred, gt, mode="median")
            for key, val in a.as_dict().items():
                assert abs(val - b.as_dict()[key]) <= 1e-9

    def test_invalid_inputs(self):
        with pytest.raises(MetricsError):
            depth_metrics(np.ones((2, 2)), np.zeros((2, 2)))
        with pytest.raises(MetricsError):
            depth_metrics(np.ones(3), np.ones(4))
        with pytest.raises(MetricsError):
            depth_metrics(np.ones(3), np.ones(3), mode="mean")


class TestPoseMetrics:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(6)
        poses = [random_pose(rng) for _ in range(5)]
        m = pose_metrics(poses, poses)
        assert m.rte == pytest.approx(0.0, abs=1e-12)
        assert m.rot == pytest.approx(0.0, abs=1e-5)

    def test_known_z_rotation(self):
        t = (0.1, 0.2, 0.3)
        gt = Pose6(rotation=(0, 0, 0), translation=t)
        pred = Pose6(rotation=(0, 0, math.radians(10.0)), translation=t)
        m = pose_metrics([pred], [gt])
        assert m.rot == pytest.approx(10.0, abs=1e-6)
        assert m.rte == pytest.approx(0.0, abs=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        pred = [random_pose(rng) for _ in range(20)]
        gt = [random_pose(rng) for _ in range(20)]

        # scalar oracle: closed-form scale, then per-pair loops
        num = sum(
            sum(p.translation[i] * g.translation[i] for i in range(3)) for p, g in zip(pred, gt)
        )
        den = sum(sum(p.translation[i] ** 2 for i in range(3)) for p in pred)
        s = num / den
        rte = 0.0
        rot = 0.0
        for p, g in zip(pred, gt):
            rte += math.sqrt(
                sum((s * p.translation[i] - g.translation[i]) ** 2 for i in range(3))
            )
            rp = axis_angle_to_se3(p.as_tensor(torch.float64))[:3, :3].numpy()
            rg = axis_angle_to_se3(g.as_tensor(torch.float64))[:3, :3].numpy()
            tr = np.trace(rp.T @ rg)
            rot += math.degrees(math.acos(min(max((tr - 1.0) / 2.0, -1.0), 1.0)))
        m = pose_metrics(pred, gt)
        assert m.rte == pytest.approx(rte / 20, abs=1e-9)
        assert m.rot == pytest.approx(rot / 20, abs=1e-9)

    def test_scale_invariance_of_rte(self):
        rng = np.random.default_rng(8)
        gt = [random_pose(rng) for _ in range(10)]
        pred = [random_pose(rng) for _ in range(10)]
        scaled = [
            Pose6(rotation=p.rotation, translation=tuple(3.7 * t for t in p.translation))
            for p in pred
        ]
        assert pose_metrics(pred, gt).rte == pytest.approx(pose_metrics(scaled, gt).rte, abs=1e-9)

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(9)
        with pytest.raises(MetricsError):
            pose_metrics([random_pose(rng)], [])


class TestTrajectory:
    def test_empty_chain_is_identity(self):
        traj = accumulate_trajectory([])
        assert len(traj) == 1
        assert torch.equal(traj[0], torch.eye(4, dtype=torch.float64))

    def test_two_z_steps(self):
        step = Pose6(rotation=(0, 0, 0), translation=(0, 0, 1.0))
        traj = accumulate_trajectory([step, step])
        zs = [m[2, 3].item() for m in traj]
        assert zs == [0.0, 1.0, 2.0]

    def test_matches_matrix_product_oracle(self):
        rng = np.random.default_rng(10)
        poses = [random_pose(rng) for _ in range(12)]
        traj = accumulate_trajectory(poses)

        oracle = np.eye(4)
        assert np.abs(traj[0].numpy() - oracle).max() == 0
        for i, p in enumerate(poses):
            oracle = oracle @ axis_angle_to_se3(p.as_tensor(torch.float64)).numpy()
            assert np.abs(traj[i + 1].numpy() - oracle).max() < 1e-12

    def test_positions_shape(self):
        rng = np.random.default_rng(11)
        traj = accumulate_trajectory([random_pose(rng) for _ in range(4)])
        assert trajectory_positions(traj).shape == (5, 3)
