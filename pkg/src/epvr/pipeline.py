"""Per-frame orchestration of the full pose pipeline.

Fixed stage order, each stage individually toggleable (disabled stages
are identity pass-throughs with zero latency):

    descriptor push -> keypoint refine -> predict -> FK (head-anchored)
    -> one-Euro position filter -> kinematic pose optimization

Predictor backends behind one small contract:

* neural:    the toy-scale dual-stream encoders + fusion + decoders
* replay:    ground-truth rotations looked up from an annotated motion file
* heuristic: constant rest pose whose root follows the headset's heading

One session is strictly sequential (filters and caches are stateful);
separate sessions share nothing and may run concurrently.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import core, descriptor, eval as evalmod, kinematics, kpo, neural, refine
from .errors import FileFormat, FrameCountMismatch
from .filtering import VectorFilterBank


@dataclass(frozen=True)
class PipelineConfig:
    predictor: str = "neural"
    use_keypoints: bool = True
    use_refine_normalized: bool = False
    use_fusion: bool = True
    use_filter: bool = True
    use_kpo: bool = True
    window: int = 40
    kpo: kpo.KpoConfig = field(default_factory=kpo.KpoConfig)
    filter_min_cutoff: float = 1.0
    filter_beta: float = 0.007
    filter_d_cutoff: float = 1.0
    refine_min_cutoff: float = 1.0
    refine_beta: float = 0.007
    refine_d_cutoff: float = 1.0
    weights_path: str | None = None
    weights_seed: int = 0
    replay_file: str | None = None
    prediction_noise_sigma: float = 0.0
    prediction_noise_seed: int = 0
    missing_zeta_decay: float = 0.9

    def __post_init__(self):
        if self.predictor not in ("neural", "replay", "heuristic"):
            raise ValueError(f"unknown predictor {self.predictor!r}")
        if self.use_fusion and not self.use_keypoints:
            raise ValueError("fusion requires the keypoint stream")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def to_dict(self):
        doc = {
            "predictor": self.predictor,
            "use_keypoints": self.use_keypoints,
            "use_refine_normalized": self.use_refine_normalized,
            "use_fusion": self.use_fusion,
            "use_filter": self.use_filter,
            "use_kpo": self.use_kpo,
            "window": self.window,
            "kpo": {
                "lambda_a": self.kpo.lambda_a,
                "lambda_s": self.kpo.lambda_s,
                "lambda_l": self.kpo.lambda_l,
                "lambda_d": self.kpo.lambda_d,
                "max_iters": self.kpo.max_iterations,
                "step_size": self.kpo.step_size,
                "tol": self.kpo.energy_tolerance,
            },
            "filter": {
                "min_cutoff": self.filter_min_cutoff,
                "beta": self.filter_beta,
                "d_cutoff": self.filter_d_cutoff,
            },
            "refine_filter": {
                "min_cutoff": self.refine_min_cutoff,
                "beta": self.refine_beta,
                "d_cutoff": self.refine_d_cutoff,
            },
            "weights_path": self.weights_path,
            "weights_seed": self.weights_seed,
            "replay_file": self.replay_file,
            "prediction_noise_sigma": self.prediction_noise_sigma,
            "prediction_noise_seed": self.prediction_noise_seed,
            "missing_zeta_decay": self.missing_zeta_decay,
        }
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "PipelineConfig":
        kwargs = {}
        simple = (
            "predictor", "use_keypoints", "use_refine_normalized", "use_fusion",
            "use_filter", "use_kpo", "window", "weights_path", "weights_seed",
            "replay_file", "prediction_noise_sigma", "prediction_noise_seed",
            "missing_zeta_decay",
        )
        for key in simple:
            if key in doc:
                kwargs[key] = doc[key]
        if "kpo" in doc:
            k = doc["kpo"]
            kwargs["kpo"] = kpo.KpoConfig(
                lambda_a=k.get("lambda_a", 1.0),
                lambda_s=k.get("lambda_s", 0.1),
                lambda_l=k.get("lambda_l", 1.0),
                lambda_d=k.get("lambda_d", 0.5),
                max_iterations=k.get("max_iters", 30),
                step_size=k.get("step_size", 0.1),
                energy_tolerance=k.get("tol", 1e-6),
            )
        if "filter" in doc:
            f = doc["filter"]
            kwargs["filter_min_cutoff"] = f.get("min_cutoff", 1.0)
            kwargs["filter_beta"] = f.get("beta", 0.007)
            kwargs["filter_d_cutoff"] = f.get("d_cutoff", 1.0)
        if "refine_filter" in doc:
            f = doc["refine_filter"]
            kwargs["refine_min_cutoff"] = f.get("min_cutoff", 1.0)
            kwargs["refine_beta"] = f.get("beta", 0.007)
            kwargs["refine_d_cutoff"] = f.get("d_cutoff", 1.0)
        return PipelineConfig(**kwargs)


@dataclass
class FrameResult:
    pose: core.FullBodyPose
    latencies: dict
    timestamp: float


STAGES = ("descriptor", "refine", "predict", "fk", "filter", "kpo")


class NeuralPredictor:
    """Dual-stream encode, optional cross-attention fusion, MLP decode."""

    def __init__(self, motion_w, visual_w, fusion_w, net_cfg: neural.NetConfig,
                 use_fusion: bool = True):
        self.motion_w = motion_w
        self.visual_w = visual_w
        self.fusion_w = fusion_w
        self.net_cfg = net_cfg
        self.use_fusion = use_fusion

    def predict(self, window: descriptor.DescriptorWindow, keypoints):
        m = neural.spatiotemporal_encode(window.frames, self.motion_w, self.net_cfg.heads)
        if self.use_fusion and keypoints is not None:
            flat = np.asarray(keypoints).reshape(len(keypoints), -1)
            n = neural.spatiotemporal_encode(flat, self.visual_w, self.net_cfg.heads)
            m = neural.cross_attention_fuse(m, n, self.fusion_w, self.net_cfg.heads)
        return neural.decode_pose(m, self.fusion_w)


class ReplayPredictor:
    """Ground-truth rotations looked up by timestamp from an annotated file."""

    def __init__(self, records):
        self._times = np.array([t for t, _ in records])
        self._poses = [p for _, p in records]
        if len(self._times) == 0:
            raise FileFormat("replay file carries no pose annotations")

    @staticmethod
    def from_motion_file(path):
        records = []
        for head, _, _, rec in descriptor.read_motion_file(path):
            if "gt" in rec:
                gt = rec["gt"]
                rots = np.array(gt["r6"], dtype=np.float64).reshape(22, 6)
                records.append((head.timestamp, core.FullBodyPose(rots[0], rots[1:])))
        return ReplayPredictor(records)

    def predict(self, window: descriptor.DescriptorWindow, keypoints):
        t = window.end_timestamp
        idx = int(np.searchsorted(self._times, t))
        if idx >= len(self._times):
            idx = len(self._times) - 1
        elif idx > 0 and abs(self._times[idx - 1] - t) < abs(self._times[idx] - t):
            idx -= 1
        return self._poses[idx]


class HeuristicPredictor:
    """Rest pose whose root yaw follows the headset heading."""

    def predict(self, window: descriptor.DescriptorWindow, keypoints):
        head6 = window.frames[-1, 3:9]
        rot = core.rot6d_to_matrix(head6)
        forward = rot @ np.array([0.0, 0.0, 1.0])
        horiz = math.hypot(forward[0], forward[2])
        if horiz < 1e-6:
            root = core.IDENTITY_6D
        else:
            yaw = math.atan2(forward[0], forward[2])
            root = core.axis_angle_rot6d([0.0, 1.0, 0.0], yaw)
        return core.FullBodyPose(root, np.tile(core.IDENTITY_6D, (21, 1)))


def build_predictor(config: PipelineConfig, tree: core.KinematicTree):
    if config.predictor == "neural":
        if config.weights_path:
            motion_w, visual_w, fusion_w, net_cfg = neural.load_weights(config.weights_path)
            if net_cfg.window != config.window:
                raise ValueError(
                    f"weights built for window {net_cfg.window}, pipeline uses {config.window}"
                )
        else:
            net_cfg = neural.NetConfig(
                window=config.window, keypoint_dim=3 * tree.joint_count
            )
            motion_w, visual_w, fusion_w = neural.init_weights(net_cfg, config.weights_seed)
        return NeuralPredictor(motion_w, visual_w, fusion_w, net_cfg, config.use_fusion)
    if config.predictor == "replay":
        if not config.replay_file:
            raise ValueError("replay predictor needs replay_file")
        return ReplayPredictor.from_motion_file(config.replay_file)
    return HeuristicPredictor()


class PipelineSession:
    """Stateful single-stream pose pipeline; one instance per client session."""

    def __init__(self, config: PipelineConfig, tree: core.KinematicTree | None = None,
                 predictor=None):
        self.config = config
        self.tree = tree or core.default_tree()
        self.predictor = predictor or build_predictor(config, self.tree)
        j = self.tree.joint_count
        self._window = None
        self._kp_fill = 0
        self._kp_times = np.zeros(config.window)
        self._kp_z = np.zeros((config.window, j, 3))
        self._kp_zeta = np.zeros((config.window, j))
        self._refine_cache = refine.make_cache(
            j, config.refine_min_cutoff, config.refine_beta, config.refine_d_cutoff
        )
        self._refine_fn = refine.refine_normalized if config.use_refine_normalized else refine.refine
        self._pos_filter = None
        if config.use_filter:
            self._pos_filter = VectorFilterBank(
                3 * j, config.filter_min_cutoff, config.filter_beta, config.filter_d_cutoff
            )
        self._noise_rng = (
            np.random.default_rng(config.prediction_noise_seed)
            if config.prediction_noise_sigma > 0.0
            else None
        )
        self._last_z = None
        self._carry_zeta = None
        self._anchor_joints = (
            self.tree.joint_index("head"),
            self.tree.joint_index("left_wrist"),
            self.tree.joint_index("right_wrist"),
        )
        self._kpo_solver = kpo.KpoSolver(config.kpo, self.tree) if config.use_kpo else None

    def _push_keypoints(self, timestamp, keypoints):
        if keypoints is not None:
            z, zeta = keypoints
            self._last_z = np.asarray(z, dtype=np.float64)
            self._carry_zeta = np.asarray(zeta, dtype=np.float64)
        elif self._last_z is not None:
            self._carry_zeta = self._carry_zeta * self.config.missing_zeta_decay
        else:
            return None
        if self._kp_fill == self.config.window:
            self._kp_times[:-1] = self._kp_times[1:]
            self._kp_z[:-1] = self._kp_z[1:]
            self._kp_zeta[:-1] = self._kp_zeta[1:]
        else:
            self._kp_fill += 1
        i = self._kp_fill - 1
        self._kp_times[i] = timestamp
        self._kp_z[i] = self._last_z
        self._kp_zeta[i] = self._carry_zeta
        seq = refine.KeypointSequence(
            self._kp_z[: self._kp_fill],
            self._kp_zeta[: self._kp_fill],
            self._kp_times[: self._kp_fill],
        )
        refined, self._refine_cache = self._refine_fn(seq, self._refine_cache)
        return refined

    def process_frame(self, head: core.DevicePose, left: core.DevicePose,
                      right: core.DevicePose, keypoints=None) -> FrameResult:
        cfg = self.config
        latencies = dict.fromkeys(STAGES, 0.0)
        t_start = time.perf_counter_ns()

        d = descriptor.build_descriptor(head, left, right)
        self._window = descriptor.push_frame(
            self._window, d, head.timestamp, window_length=cfg.window
        )
        latencies["descriptor"] = (time.perf_counter_ns() - t_start) / 1e3

        refined = None
        if cfg.use_keypoints:
            t0 = time.perf_counter_ns()
            refined = self._push_keypoints(head.timestamp, keypoints)
            latencies["refine"] = (time.perf_counter_ns() - t0) / 1e3

        t0 = time.perf_counter_ns()
        pose = self.predictor.predict(self._window, refined)
        latencies["predict"] = (time.perf_counter_ns() - t0) / 1e3

        t0 = time.perf_counter_ns()
        positions = kinematics.forward_kinematics(
            pose, self.tree, kinematics.WorldAnchor(head.position, head.orientation)
        )
        if self._noise_rng is not None:
            positions = positions + self._noise_rng.normal(
                0.0, cfg.prediction_noise_sigma, size=positions.shape
            )
        latencies["fk"] = (time.perf_counter_ns() - t0) / 1e3

        if cfg.use_filter:
            t0 = time.perf_counter_ns()
            positions = self._pos_filter.step(positions.ravel(), head.timestamp).reshape(-1, 3)
            latencies["filter"] = (time.perf_counter_ns() - t0) / 1e3

        if cfg.use_kpo:
            t0 = time.perf_counter_ns()
            hj, lj, rj = self._anchor_joints
            anchors = {hj: head.position, lj: left.position, rj: right.position}
            solver = self._kpo_solver
            solver.set_arrays(
                positions, np.stack([anchors[k] for k in solver.obs])
            )
            positions, _ = solver.run()
            latencies["kpo"] = (time.perf_counter_ns() - t0) / 1e3

        latencies["total"] = (time.perf_counter_ns() - t_start) / 1e3
        return FrameResult(pose.with_positions(positions), latencies, head.timestamp)


# ---------------------------------------------------------------------------
# file-driven replay with metric aggregation


@dataclass
class ReplayReport:
    frames: int
    fps: float
    metrics: dict
    per_frame: dict

    def render(self) -> str:
        doc = dict(self.metrics)
        doc["fps"] = self.fps
        doc["frames"] = float(self.frames)
        return evalmod.render_report(doc)


def _gt_from_record(rec):
    if "gt" not in rec:
        return None
    gt = rec["gt"]
    rots = np.array(gt["r6"], dtype=np.float64).reshape(22, 6)
    pos = np.array(gt["p"], dtype=np.float64).reshape(22, 3)
    return rots, pos


def run_replay(motion_path, keypoint_path, config: PipelineConfig,
               tree: core.KinematicTree | None = None) -> ReplayReport:
    """Stream a replay file through one session and aggregate metrics.

    Ground truth comes from the gt annotations in the motion file; the
    keypoint file is optional when the keypoint stage is disabled.
    """
    frames = descriptor.read_motion_file(motion_path)
    kp_frames = None
    if keypoint_path:
        kp_frames = refine.read_keypoint_file(keypoint_path)
        if len(kp_frames) != len(frames):
            raise FrameCountMismatch(
                f"{len(frames)} motion frames vs {len(kp_frames)} keypoint frames"
            )
    session = PipelineSession(config, tree)

    per_frame = {"mpjpe": [], "mpjpe_u": [], "mpjpe_l": [], "pa_mpjpe": [], "mpjre": []}
    results = []
    t_wall = time.perf_counter()
    for i, (head, left, right, rec) in enumerate(frames):
        kp = None
        if kp_frames is not None and config.use_keypoints:
            _, z, zeta = kp_frames[i]
            kp = (z, zeta)
        results.append(session.process_frame(head, left, right, kp))
    wall = time.perf_counter() - t_wall
    fps = len(frames) / wall if wall > 0 else float("inf")

    have_gt = True
    for (head, left, right, rec), res in zip(frames, results):
        gt = _gt_from_record(rec)
        if gt is None:
            have_gt = False
            break
        gt_rots, gt_pos = gt
        pred_pos = res.pose.positions
        per_frame["mpjpe"].append(evalmod.mpjpe(pred_pos, gt_pos))
        per_frame["mpjpe_u"].append(evalmod.mpjpe(pred_pos, gt_pos, evalmod.UPPER_BODY_JOINTS))
        per_frame["mpjpe_l"].append(evalmod.mpjpe(pred_pos, gt_pos, evalmod.LOWER_BODY_JOINTS))
        per_frame["pa_mpjpe"].append(evalmod.pa_mpjpe(pred_pos, gt_pos))
        per_frame["mpjre"].append(evalmod.mpjre(res.pose.stacked_rotations(), gt_rots))

    metrics = {}
    if have_gt:
        per_frame = {k: np.array(v) for k, v in per_frame.items()}
        metrics = {k: evalmod.summarize(v) for k, v in per_frame.items()}
    else:
        per_frame = {}
    return ReplayReport(len(frames), fps, metrics, per_frame)


def write_sequence_files(seq: evalmod.SyntheticSequence, motion_path, keypoint_path,
                         noise_sigma: float = 0.0, noise_seed: int = 0):
    """Serialize a synthetic sequence to replay files with gt annotations."""
    with descriptor.MotionWriter(motion_path) as mw:
        for i in range(seq.frame_count):
            rots = seq.poses[i].stacked_rotations()
            gt = {
                "gt": {
                    "r6": [[float(v) for v in row] for row in rots],
                    "p": [[float(v) for v in row] for row in seq.positions[i]],
                }
            }
            mw.write(seq.head[i], seq.left[i], seq.right[i], extra=gt)
    if keypoint_path:
        if noise_sigma > 0.0:
            z, zeta = evalmod.noisy_keypoints(seq, noise_sigma, noise_seed)
        else:
            z, zeta = evalmod.clean_keypoints(seq)
        with refine.KeypointWriter(keypoint_path) as kw:
            for i in range(seq.frame_count):
                kw.write(seq.timestamps[i], z[i], zeta[i])
