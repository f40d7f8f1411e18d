import math

import numpy as np
import pytest

from epvr import core, eval as evalmod, kinematics
from epvr.errors import DegenerateCloud, ShapeError, UnknownMotionKind

import oracles


def test_mpjpe_zero_on_equal():
    rng = np.random.default_rng(80)
    pts = rng.standard_normal((22, 3))
    assert evalmod.mpjpe(pts, pts) == 0.0


def test_mpjpe_uniform_offset():
    rng = np.random.default_rng(81)
    gt = rng.standard_normal((22, 3))
    pred = gt + np.array([0.01, 0.0, 0.0])
    assert abs(evalmod.mpjpe(pred, gt) - 1.0) < 1e-12


def test_mpjpe_matches_per_joint_oracle():
    rng = np.random.default_rng(82)
    pred, gt = rng.standard_normal((22, 3)), rng.standard_normal((22, 3))
    want = sum(
        math.sqrt(float((pred[j] - gt[j]) @ (pred[j] - gt[j]))) for j in range(22)
    ) / 22 * 100
    assert abs(evalmod.mpjpe(pred, gt) - want) < 1e-9


def test_mpjpe_shape_mismatch():
    with pytest.raises(ShapeError):
        evalmod.mpjpe(np.zeros((22, 3)), np.zeros((21, 3)))


def test_pa_mpjpe_removes_similarity_transform():
    rng = np.random.default_rng(83)
    gt = rng.standard_normal((22, 3))
    rot = oracles.random_rotation(rng)
    pred = 2.0 * gt @ rot.T + np.array([0.3, -1.0, 0.5])
    assert evalmod.pa_mpjpe(pred, gt) < 1e-9
    assert evalmod.pa_mpjpe(gt, gt) < 1e-12


def test_pa_mpjpe_never_exceeds_mpjpe():
    rng = np.random.default_rng(84)
    for _ in range(200):
        gt = rng.standard_normal((22, 3))
        pred = gt + rng.normal(0, rng.uniform(0.001, 0.5), (22, 3))
        assert evalmod.pa_mpjpe(pred, gt) <= evalmod.mpjpe(pred, gt) + 1e-9


def test_pa_mpjpe_degenerate_reference():
    with pytest.raises(DegenerateCloud):
        evalmod.pa_mpjpe(np.random.default_rng(85).standard_normal((5, 3)), np.zeros((5, 3)))


def _rotvec_grid(center, span, steps):
    offsets = np.linspace(-span, span, steps)
    grid = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"), -1).reshape(-1, 3)
    return center + grid


def _rot_from_vec(v):
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    return oracles.quat_to_matrix(oracles.quat_from_axis_angle(v / angle, angle))


def _grid_procrustes(pred, gt):
    """Brute-force similarity alignment: hierarchical rotation grid, with the
    closed-form least-squares scale/translation per candidate rotation.
    Candidates are ranked by the least-squares objective; the returned value
    is the mean per-joint error of the best alignment, in cm."""
    pred_c = pred - pred.mean(axis=0)
    gt_c = gt - gt.mean(axis=0)
    denom = float(np.sum(pred_c * pred_c))

    def score(rot):
        rotated = pred_c @ rot.T
        scale = float(np.sum(rotated * gt_c)) / denom
        res = scale * rotated - gt_c
        sse = float(np.sum(res * res))
        return sse, float(np.mean(np.linalg.norm(res, axis=1))) * 100.0

    best_vec, best_sse, best_val = np.zeros(3), np.inf, np.inf
    span = math.pi
    for level in range(9):
        for vec in _rotvec_grid(best_vec, span, 9):
            sse, val = score(_rot_from_vec(vec))
            if sse < best_sse:
                best_sse, best_val, best_vec = sse, val, vec
        span /= 4.0
    return best_val


def test_pa_mpjpe_matches_rotation_grid_oracle():
    rng = np.random.default_rng(86)
    for _ in range(8):
        gt = rng.standard_normal((5, 3)) * 0.2
        pred = gt + rng.normal(0, 0.05, (5, 3))
        got = evalmod.pa_mpjpe(pred, gt)
        want = _grid_procrustes(pred, gt)
        assert abs(got - want) < 1e-3


def test_mpjre_zero_on_identical():
    rng = np.random.default_rng(87)
    rots = np.stack([core.matrix_to_rot6d(oracles.random_rotation(rng)) for _ in range(22)])
    assert evalmod.mpjre(rots, rots) < 1e-5


def test_mpjre_uniform_ninety_degrees():
    rng = np.random.default_rng(88)
    gt = [oracles.random_rotation(rng) for _ in range(22)]
    quarter = oracles.quat_to_matrix(oracles.quat_from_axis_angle([1, 0, 0], np.pi / 2))
    pred = [g @ quarter for g in gt]
    got = evalmod.mpjre(np.stack(pred), np.stack(gt))
    assert abs(got - 90.0) < 1e-6


def test_mpjre_matches_quaternion_oracle():
    rng = np.random.default_rng(89)
    pred = [oracles.random_rotation(rng) for _ in range(22)]
    gt = [oracles.random_rotation(rng) for _ in range(22)]
    want = sum(oracles.quat_angle_deg(a, b) for a, b in zip(pred, gt)) / 22
    got = evalmod.mpjre(np.stack(pred), np.stack(gt))
    assert abs(got - want) < 1e-6


def test_project_center_point():
    cam = evalmod.default_camera()
    head = core.DevicePose(0.0, [0, 0, 0], core.IDENTITY_6D)
    # a point 1 m along the camera's optical axis (straight down, through
    # the mount 5 cm below the head)
    world = cam.mount_position + cam.mount_rotation @ np.array([0.0, 0.0, 1.0])
    uv, depth, visible = evalmod.project_joints(world[None, :], head, cam)
    assert abs(uv[0, 0] - cam.cx) < 1e-9
    assert abs(uv[0, 1] - cam.cy) < 1e-9
    assert abs(depth[0] - 1.0) < 1e-12
    assert visible[0]


def test_project_behind_camera_invisible():
    cam = evalmod.default_camera()
    head = core.DevicePose(0.0, [0, 0, 0], core.IDENTITY_6D)
    world = cam.mount_position + cam.mount_rotation @ np.array([0.0, 0.0, -1.0])
    _, depth, visible = evalmod.project_joints(world[None, :], head, cam)
    assert depth[0] < 0
    assert not visible[0]


def test_project_matches_homogeneous_oracle():
    cam = evalmod.default_camera()
    rng = np.random.default_rng(90)
    head_rot = oracles.random_rotation(rng)
    head = core.DevicePose(0.0, rng.standard_normal(3), core.matrix_to_rot6d(head_rot))
    pts = rng.standard_normal((22, 3)) * 2.0
    uv, depth, visible = evalmod.project_joints(pts, head, cam)
    t_world_cam = oracles.make_transform(head_rot, head.position) @ oracles.make_transform(
        cam.mount_rotation, cam.mount_position
    )
    t_inv = oracles.invert_transform(t_world_cam)
    for j in range(22):
        pc = oracles.apply_transform(t_inv, pts[j])
        u = cam.fx * pc[0] / pc[2] + cam.cx
        v = cam.fy * pc[1] / pc[2] + cam.cy
        assert abs(depth[j] - pc[2]) < 1e-9
        assert abs(uv[j, 0] - u) < 1e-6
        assert abs(uv[j, 1] - v) < 1e-6
        want_visible = pc[2] > 0 and 0 <= u < cam.width and 0 <= v < cam.height
        assert visible[j] == want_visible


def test_generator_is_deterministic():
    a = evalmod.generate_sequence("walk", 1.0, 60.0, seed=5)
    b = evalmod.generate_sequence("walk", 1.0, 60.0, seed=5)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.keypoints_cam, b.keypoints_cam)
    assert np.array_equal(a.visibility, b.visibility)
    c = evalmod.generate_sequence("walk", 1.0, 60.0, seed=6)
    assert not np.array_equal(a.positions, c.positions)


def test_static_sequence_is_constant_with_zero_velocity():
    seq = evalmod.generate_sequence("static", 0.5, 60.0, seed=1)
    assert np.max(np.abs(seq.positions - seq.positions[0])) < 1e-12
    for pose_list in (seq.head, seq.left, seq.right):
        for pose in pose_list:
            assert np.allclose(pose.linear_velocity, 0.0, atol=1e-9)
            assert np.allclose(pose.angular_velocity, 0.0, atol=1e-9)


@pytest.mark.parametrize("kind", evalmod.MOTION_KINDS)
def test_generated_bones_stay_rigid(kind):
    seq = evalmod.generate_sequence(kind, 1.0, 30.0, seed=2)
    rest = seq.tree.rest_lengths()
    for i in range(seq.frame_count):
        lengths, _ = kinematics.bone_vectors(seq.positions[i], seq.tree)
        assert np.max(np.abs(lengths - rest)) < 1e-9


def test_generated_projections_are_self_consistent():
    seq = evalmod.generate_sequence("squat", 1.0, 30.0, seed=3)
    for i in range(seq.frame_count):
        uv, depth, visible = evalmod.project_joints(
            seq.positions[i], seq.head[i], seq.camera
        )
        assert np.max(np.abs(uv - seq.projections[i])) < 1e-6
        assert np.array_equal(visible, seq.visibility[i])
        # camera-frame keypoints reproject to the stored pixels as well
        z = seq.keypoints_cam[i]
        u = seq.camera.fx * z[:, 0] / z[:, 2] + seq.camera.cx
        assert np.max(np.abs(u - seq.projections[i][:, 0])) < 1e-6


def test_device_poses_sit_on_their_joints():
    seq = evalmod.generate_sequence("kick", 1.0, 30.0, seed=4)
    for i in range(seq.frame_count):
        assert np.array_equal(seq.head[i].position, seq.positions[i][core.HEAD_JOINT])
        assert np.array_equal(seq.left[i].position, seq.positions[i][core.LEFT_HAND_JOINT])
        assert np.array_equal(seq.right[i].position, seq.positions[i][core.RIGHT_HAND_JOINT])


def test_unknown_motion_kind():
    with pytest.raises(UnknownMotionKind):
        evalmod.generate_sequence("моonwalk", 1.0, 60.0)


def test_noisy_keypoints_shapes_and_scores():
    seq = evalmod.generate_sequence("walk", 1.0, 30.0, seed=5)
    z, zeta = evalmod.noisy_keypoints(seq, sigma=0.02, seed=6)
    assert z.shape == seq.keypoints_cam.shape
    assert zeta.shape == seq.visibility.shape
    assert np.all(zeta[seq.visibility] >= 0.85)
    assert np.all(zeta[~seq.visibility] <= 0.3)
    # false positives: invisible joints get much larger offsets
    if np.any(~seq.visibility):
        err_visible = np.linalg.norm((z - seq.keypoints_cam)[seq.visibility], axis=-1).mean()
        err_invisible = np.linalg.norm((z - seq.keypoints_cam)[~seq.visibility], axis=-1).mean()
        assert err_invisible > err_visible


def test_summarize_and_render():
    mean, std = evalmod.summarize([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert abs(std - math.sqrt(2.0 / 3.0)) < 1e-12
    text = evalmod.render_report({"mpjpe": (1.5, 0.25), "fps": 97.0})
    lines = text.strip().split("\n")
    assert lines[0].startswith("mpjpe 1.5")
    assert lines[1].startswith("fps 97")
