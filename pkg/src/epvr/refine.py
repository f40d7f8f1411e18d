"""Visibility-aware temporal refinement of 3D keypoint sequences.

Per joint, the visibility probability stream is smoothed by a one-Euro
filter, turned into a soft mask, and multiplied into the keypoint
coordinates. A cache carries filter state and already-refined frames
across calls so that streaming appends reproduce a single full pass
bit-for-bit.

Two mask variants exist:

* literal:     mask = max(smoothed_visibility - 0.5, 0)   (range [0, 0.5])
* normalized:  mask = clamp(2 * literal, 0, 1)            (range [0, 1])

The literal variant attenuates even fully visible joints by 0.5; the
normalized variant passes them through unchanged. Downstream consumers
must pick one and stay with it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheMismatch, FileFormat, ShapeError
from .filtering import DEFAULT_BETA, DEFAULT_D_CUTOFF, DEFAULT_MIN_CUTOFF, VectorFilterBank


@dataclass(frozen=True)
class KeypointSequence:
    """T x J x 3 camera-centered keypoints with per-joint visibility in [0,1]."""

    positions: np.ndarray
    visibility: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        vis = np.asarray(self.visibility, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise ShapeError(f"positions must be (T, J, 3), got {pos.shape}")
        if vis.shape != pos.shape[:2]:
            raise ShapeError(f"visibility must be (T, J), got {vis.shape}")
        if ts.shape != (pos.shape[0],):
            raise ShapeError(f"timestamps must be (T,), got {ts.shape}")
        if np.any(vis < 0.0) or np.any(vis > 1.0):
            raise ShapeError("visibility probabilities must lie in [0, 1]")
        if np.any(np.diff(ts) <= 0.0):
            raise ShapeError("timestamps must be strictly increasing")
        for arr in (pos, vis, ts):
            arr.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(self, "timestamps", ts)

    @property
    def frame_count(self):
        return self.positions.shape[0]

    @property
    def joint_count(self):
        return self.positions.shape[1]


@dataclass
class RefineCache:
    """State carried between refinement calls on one stream."""

    filters: VectorFilterBank
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    refined: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 3)))
    smoothed_visibility: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def last_timestamp(self):
        return self.timestamps[-1] if len(self.timestamps) else None


def make_cache(joint_count: int, min_cutoff=DEFAULT_MIN_CUTOFF, beta=DEFAULT_BETA,
               d_cutoff=DEFAULT_D_CUTOFF) -> RefineCache:
    return RefineCache(VectorFilterBank(joint_count, min_cutoff, beta, d_cutoff))


def _overlap_length(cache: RefineCache, timestamps):
    """Frames at the start of the sequence already covered by the cache.

    The cache spans the previously seen window; a new window may extend it
    (growing stream) or overlap its tail (sliding window). Any claimed
    overlap must match the cached timestamps exactly.
    """
    cached = cache.timestamps
    if len(cached) == 0:
        return 0
    first = timestamps[0]
    if first > cached[-1]:
        return 0
    matches = np.nonzero(cached == first)[0]
    if len(matches) == 0:
        raise CacheMismatch(
            f"window starts at {first}, inside cached span but not on a cached frame"
        )
    start = int(matches[0])
    overlap = len(cached) - start
    if overlap > len(timestamps) or not np.array_equal(
        cached[start:], timestamps[:overlap]
    ):
        raise CacheMismatch("cached timestamps do not align with the new window")
    return overlap


def _refine(seq: KeypointSequence, cache: RefineCache | None, normalized: bool):
    if cache is None:
        cache = make_cache(seq.joint_count)
    if cache.filters.channels != seq.joint_count:
        raise ShapeError(
            f"cache built for {cache.filters.channels} joints, sequence has {seq.joint_count}"
        )
    overlap = _overlap_length(cache, seq.timestamps)
    new_count = seq.frame_count - overlap

    refined = np.empty_like(seq.positions)
    smoothed = np.empty_like(seq.visibility)
    if overlap:
        start = len(cache.timestamps) - overlap
        refined[:overlap] = cache.refined[start:]
        smoothed[:overlap] = cache.smoothed_visibility[start:]
    for i in range(overlap, overlap + new_count):
        zeta = cache.filters.step(seq.visibility[i], float(seq.timestamps[i]))
        mask = np.maximum(zeta - 0.5, 0.0)
        if normalized:
            mask = np.minimum(2.0 * mask, 1.0)
        smoothed[i] = zeta
        refined[i] = seq.positions[i] * mask[:, None]

    cache.timestamps = seq.timestamps.copy()
    cache.refined = refined.copy()
    cache.smoothed_visibility = smoothed.copy()
    return refined, cache


def refine(seq: KeypointSequence, cache: RefineCache | None = None):
    """Literal-mask refinement; returns (refined T x J x 3, updated cache)."""
    return _refine(seq, cache, normalized=False)


def refine_normalized(seq: KeypointSequence, cache: RefineCache | None = None):
    """Normalized-mask variant: fully visible joints pass unattenuated."""
    return _refine(seq, cache, normalized=True)


# ---------------------------------------------------------------------------
# Keypoint replay files: header line, then one JSON record per frame.

KEYPOINT_HEADER = {
    "format": "epvr-keypoints",
    "version": 1,
    "coordinate_convention": {"handedness": "right", "up": "y"},
    "units": "meters",
}


class KeypointWriter:
    def __init__(self, path):
        self._fh = open(path, "w")
        self._fh.write(json.dumps(KEYPOINT_HEADER) + "\n")

    def write(self, t, positions, visibility):
        positions = np.asarray(positions)
        visibility = np.asarray(visibility)
        rec = {
            "t": float(t),
            "Z": [[float(v) for v in row] for row in positions],
            "zeta": [float(v) for v in visibility],
        }
        self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_keypoint_file(path):
    """Load every frame: list of (t, positions (J,3), visibility (J,)) tuples."""
    frames = []
    with open(path) as fh:
        try:
            head_doc = json.loads(fh.readline())
        except json.JSONDecodeError as e:
            raise FileFormat(f"bad keypoint file header: {e}") from None
        if head_doc.get("format") != "epvr-keypoints":
            raise FileFormat(f"not a keypoint replay file: {path}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frames.append(
                    (
                        float(rec["t"]),
                        np.array(rec["Z"], dtype=np.float64),
                        np.array(rec["zeta"], dtype=np.float64),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise FileFormat(f"{path}:{lineno}: bad frame record ({e})") from None
    return frames
