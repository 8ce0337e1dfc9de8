"""Detection-to-landmark data association and map bookkeeping.

Each detection is scored against map landmarks by a label-gated blend of
reprojected-box IoU, color-histogram similarity, and embedding similarity;
a one-to-one optimal assignment with a score gate decides matches. Unmatched
detections spawn new landmarks.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .features import Detection, FilterConfig, emb_similarity, hist_similarity
from .geometry import CameraIntrinsics, Cuboid, NotVisible, Pose, iou_2d, predict_bbox


@dataclass
class Landmark:
    """Persistent map object with appearance history and per-frame measurements."""

    id: int
    label: str
    pose: Pose  # T_wo
    dims: np.ndarray
    hist_history: deque
    emb_history: deque
    first_frame: int
    observed_frames: list
    measurements: dict  # frame id -> measured pose in that frame's camera

    @property
    def obs_count(self) -> int:
        return len(self.observed_frames)

    @property
    def last_frame(self) -> int:
        return self.observed_frames[-1]

    def cuboid(self) -> Cuboid:
        return Cuboid(t=self.pose.t, yaw=self.pose.yaw(), dims=self.dims)

    def mean_hist(self) -> np.ndarray:
        return np.mean(list(self.hist_history), axis=0)

    def mean_emb(self) -> np.ndarray:
        m = np.mean(list(self.emb_history), axis=0)
        n = np.linalg.norm(m)
        return m / n if n > 0 else m


@dataclass
class MapState:
    """Landmarks plus keyframe camera-pose estimates; ids are never reused."""

    landmarks: dict = field(default_factory=dict)
    keyframes: dict = field(default_factory=dict)  # frame id -> T_wc
    next_id: int = 0

    def new_landmark(self, frame: int, det: Detection, t_wc: Pose, history_cap: int) -> Landmark:
        lm = Landmark(
            id=self.next_id,
            label=det.label,
            pose=t_wc.compose(det.pose_in_camera),
            dims=det.dims.copy(),
            hist_history=deque([det.hist], maxlen=history_cap),
            emb_history=deque([det.emb], maxlen=history_cap),
            first_frame=frame,
            observed_frames=[frame],
            measurements={frame: det.pose_in_camera},
        )
        self.landmarks[lm.id] = lm
        self.next_id += 1
        return lm

    def active_ids(self, current_frame: int, window: int) -> list:
        """Landmarks observed within the last ``window`` keyframes."""
        lo = current_frame - window
        return sorted(i for i, lm in self.landmarks.items() if lm.last_frame >= lo)


@dataclass(frozen=True)
class AssocConfig:
    weight: float = 0.5  # balance between IoU / histogram / embedding terms
    threshold: float = 0.35
    history_cap: int = 10
    active_window: int = 15
    filter: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("weight must lie in [0, 1]")


def detection_similarity(
    det: Detection,
    lm: Landmark,
    t_wc: Pose,
    k: CameraIntrinsics,
    weight: float,
) -> float:
    """Label-gated similarity score; zero when labels differ.

    score = w * iou + w(1-w) * hist + (1-w)^2 * emb, with the embedding
    term clamped at zero so an adversarial embedding cannot veto a strong
    geometric match. An invisible reprojection contributes zero IoU.
    """
    if det.label != lm.label:
        return 0.0
    try:
        predicted = predict_bbox(lm.cuboid(), t_wc.inverse(), k)
        iou = iou_2d(det.bbox, predicted)
    except NotVisible:
        iou = 0.0
    his = hist_similarity(det.hist, lm.hist_history)
    dis = max(0.0, emb_similarity(det.emb, lm.emb_history))
    w = weight
    return w * iou + w * (1.0 - w) * his + (1.0 - w) ** 2 * dis


def build_similarity_matrix(
    dets,
    map_state: MapState,
    t_wc: Pose,
    k: CameraIntrinsics,
    cfg: AssocConfig,
    landmark_ids=None,
):
    """(N x M) score matrix; rows are detections, columns follow landmark_ids.

    Returns (matrix, landmark_ids). ``landmark_ids`` defaults to every
    landmark in ascending id order; pass a subset to restrict candidates.
    """
    if landmark_ids is None:
        landmark_ids = sorted(map_state.landmarks)
    matrix = np.zeros((len(dets), len(landmark_ids)))
    for i, det in enumerate(dets):
        for j, lid in enumerate(landmark_ids):
            matrix[i, j] = detection_similarity(det, map_state.landmarks[lid], t_wc, k, cfg.weight)
    return matrix, list(landmark_ids)


def assign_matches(matrix: np.ndarray, threshold: float):
    """One-to-one assignment maximizing total score among entries >= threshold.

    Entries below the gate contribute exactly zero benefit, so the optimal
    assignment over the gated matrix equals the optimum over partial
    assignments restricted to gated entries. Returns (matches, unmatched)
    where matches is a list of (row, column) pairs.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    n, m = matrix.shape
    if n == 0 or m == 0:
        return [], list(range(n))
    gated = np.where(matrix >= threshold, matrix, 0.0)
    rows, cols = linear_sum_assignment(gated, maximize=True)
    matches = [(int(r), int(c)) for r, c in zip(rows, cols) if matrix[r, c] >= threshold]
    matched_rows = {r for r, _ in matches}
    unmatched = [i for i in range(n) if i not in matched_rows]
    return matches, unmatched


def apply_associations(
    map_state: MapState,
    frame: int,
    matches,
    unmatched,
    dets,
    t_wc: Pose,
    cfg: AssocConfig,
):
    """Fold one frame's assignment into the map; returns the mutated map.

    Matched landmarks get the detection's histogram/embedding pushed into
    their FIFO histories and the camera-frame measurement recorded; each
    unmatched detection becomes a new landmark at T_wc o T_co.
    """
    for det_idx, lid in matches:
        det = dets[det_idx]
        lm = map_state.landmarks[lid]
        lm.hist_history.append(det.hist)
        lm.emb_history.append(det.emb)
        lm.observed_frames.append(frame)
        lm.measurements[frame] = det.pose_in_camera
    for det_idx in unmatched:
        map_state.new_landmark(frame, dets[det_idx], t_wc, cfg.history_cap)
    return map_state


def map_snapshot(map_state: MapState) -> dict:
    """JSON-ready summary of the landmark map."""
    return {
        "landmarks": [
            {
                "id": lm.id,
                "label": lm.label,
                "t": lm.pose.t.tolist(),
                "yaw": lm.pose.yaw(),
                "dims": lm.dims.tolist(),
                "obs_count": lm.obs_count,
                "first_frame": lm.first_frame,
            }
            for lm in sorted(map_state.landmarks.values(), key=lambda l: l.id)
        ]
    }


def write_map_snapshot(path, map_state: MapState) -> None:
    with open(path, "w") as fh:
        json.dump(map_snapshot(map_state), fh, indent=2)
