"""Per-frame 72-D headset/controller motion descriptors and temporal windows.

Descriptor layout (72 entries):

    [ g_head(18) | g_left(18) | g_right(18) | r_left(9) | r_right(9) ]

where each global block g = [position(3), rot6d(6), lin_vel(3), rot6d_rate(6)]
and each relative block r = [position(3), rot6d(6)] expressed in the
headset frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import core
from .errors import FileFormat, NonMonotonicTime, StaleFrame, TimestampSkew

DESCRIPTOR_DIM = 72
SYNC_TOLERANCE = 1e-4  # seconds between the three device timestamps

# slot ranges of the layout, usable to slice descriptors back apart
G_HEAD = slice(0, 18)
G_LEFT = slice(18, 36)
G_RIGHT = slice(36, 54)
R_LEFT = slice(54, 63)
R_RIGHT = slice(63, 72)


def build_descriptor(head: core.DevicePose, left: core.DevicePose, right: core.DevicePose):
    """Concatenate global and head-relative motion blocks into one 72-vector."""
    ts = (head.timestamp, left.timestamp, right.timestamp)
    if max(ts) - min(ts) > SYNC_TOLERANCE:
        raise TimestampSkew(f"device timestamps diverge: {ts}")
    rots = core.rot6d_to_matrix(
        np.stack([head.orientation, left.orientation, right.orientation])
    )
    head_rot_t = rots[0].T
    out = np.empty(DESCRIPTOR_DIM)
    for slot, pose in zip((G_HEAD, G_LEFT, G_RIGHT), (head, left, right)):
        block = out[slot]
        block[0:3] = pose.position
        block[3:9] = pose.orientation
        block[9:12] = pose.linear_velocity
        block[12:18] = pose.angular_velocity
    for slot, pose, rot in zip((R_LEFT, R_RIGHT), (left, right), rots[1:]):
        block = out[slot]
        block[0:3] = head_rot_t @ (pose.position - head.position)
        rel = head_rot_t @ rot  # orthonormal product: extract 6D directly
        block[3:6] = rel[:, 0]
        block[6:9] = rel[:, 1]
    return out


def split_descriptor(descriptor):
    """Inverse of build_descriptor's concatenation: the five layout blocks."""
    d = np.asarray(descriptor)
    if d.shape != (DESCRIPTOR_DIM,):
        raise ValueError(f"descriptor must have {DESCRIPTOR_DIM} entries, got {d.shape}")
    return d[G_HEAD], d[G_LEFT], d[G_RIGHT], d[R_LEFT], d[R_RIGHT]


def derive_velocities(prev: core.DevicePose, curr: core.DevicePose) -> core.DevicePose:
    """Fill velocity fields by finite differences over two consecutive poses.

    The angular rate is the componentwise rate of the 6D representation,
    matching the descriptor's rot6d_rate slots.
    """
    dt = curr.timestamp - prev.timestamp
    if dt <= 0.0:
        raise NonMonotonicTime(f"dt = {dt} between consecutive poses")
    v = (curr.position - prev.position) / dt
    w = (curr.orientation - prev.orientation) / dt
    return core.DevicePose(curr.timestamp, curr.position, curr.orientation, v, w)


@dataclass(frozen=True)
class DescriptorWindow:
    """Immutable T-frame stack of descriptors ending at end_timestamp.

    Until T distinct frames have been pushed, the earliest frame is
    replicated backward so the window is always full.
    """

    frames: np.ndarray
    end_timestamp: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != DESCRIPTOR_DIM:
            raise ValueError(f"window frames must be (T, {DESCRIPTOR_DIM}), got {frames.shape}")
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)

    @property
    def window_length(self):
        return self.frames.shape[0]


def push_frame(window: DescriptorWindow | None, descriptor, timestamp: float,
               window_length: int | None = None) -> DescriptorWindow:
    """Append one frame with sliding-window semantics.

    Passing window=None starts a new window (window_length required); the
    first frame is replicated across all T rows. Later pushes drop the
    oldest row. Raises StaleFrame when timestamp is not newer than the
    window end.
    """
    d = np.asarray(descriptor, dtype=np.float64)
    if d.shape != (DESCRIPTOR_DIM,):
        raise ValueError(f"descriptor must have {DESCRIPTOR_DIM} entries, got {d.shape}")
    if window is None:
        if window_length is None:
            raise ValueError("window_length required for the first push")
        return DescriptorWindow(np.tile(d, (window_length, 1)), timestamp)
    if timestamp <= window.end_timestamp:
        raise StaleFrame(
            f"frame at {timestamp} not newer than window end {window.end_timestamp}"
        )
    frames = np.empty_like(window.frames)
    frames[:-1] = window.frames[1:]
    frames[-1] = d
    return DescriptorWindow(frames, timestamp)


# ---------------------------------------------------------------------------
# Motion replay files: one JSON object per line, self-describing header first.
# Extra keys on frame records (e.g. ground-truth pose annotations written by
# the synthetic generator) are preserved for other readers.

MOTION_HEADER = {
    "format": "epvr-motion",
    "version": 1,
    "coordinate_convention": {"handedness": "right", "up": "y"},
    "units": "meters",
}


def _pose_to_record(pose: core.DevicePose):
    return {
        "p": [float(v) for v in pose.position],
        "r6": [float(v) for v in pose.orientation],
        "v": [float(v) for v in pose.linear_velocity],
        "w6": [float(v) for v in pose.angular_velocity],
    }


def _pose_from_record(t, rec):
    return core.DevicePose(t, rec["p"], rec["r6"], rec["v"], rec["w6"])


class MotionWriter:
    """Writes line-delimited motion replay records."""

    def __init__(self, path):
        self._fh = open(path, "w")
        self._fh.write(json.dumps(MOTION_HEADER) + "\n")

    def write(self, head, left, right, extra=None):
        rec = {
            "t": float(head.timestamp),
            "head": _pose_to_record(head),
            "left": _pose_to_record(left),
            "right": _pose_to_record(right),
        }
        if extra:
            rec.update(extra)
        self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_motion_file(path):
    """Load every frame: list of (head, left, right, raw_record) tuples."""
    frames = []
    with open(path) as fh:
        header = fh.readline()
        try:
            head_doc = json.loads(header)
        except json.JSONDecodeError as e:
            raise FileFormat(f"bad motion file header: {e}") from None
        if head_doc.get("format") != "epvr-motion":
            raise FileFormat(f"not a motion replay file: {path}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                t = rec["t"]
                frames.append(
                    (
                        _pose_from_record(t, rec["head"]),
                        _pose_from_record(t, rec["left"]),
                        _pose_from_record(t, rec["right"]),
                        rec,
                    )
                )
            except (json.JSONDecodeError, KeyError) as e:
                raise FileFormat(f"{path}:{lineno}: bad frame record ({e})") from None
    return frames
