"""Loop-closure back-end: drift estimation from matched object pairs,
current-pose correction, frame pose-graph optimization, and map
resynchronization with local/global landmark fusion.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, se3_log, so3_log
from .refinement import NLLSProblem, SolveReport, SolverConfig, solve_gauss_newton

# Odometry information: rotation entries first, rad^2 vs m^2 scale.
DEFAULT_ODOMETRY_SQRT_INFO = np.diag([10.0, 10.0, 10.0, 5.0, 5.0, 5.0])


@dataclass(frozen=True)
class ObjectConstraint:
    """One matched object pair entering the drift estimation."""

    local_pose: Pose
    global_pose: Pose
    sqrt_info: np.ndarray = field(default_factory=lambda: np.eye(6))


@dataclass
class LoopResult:
    loop_frame: int
    current_frame: int
    matches: list
    drift: Pose
    cost_before: float
    cost_after: float

    def __post_init__(self):
        if not self.loop_frame < self.current_frame:
            raise ValueError("loop frame must precede the current frame")

    def to_record(self) -> dict:
        angle = float(np.linalg.norm(so3_log(self.drift.r)))
        return {
            "loop_frame": self.loop_frame,
            "current_frame": self.current_frame,
            "n_matches": len(self.matches),
            "drift_translation_m": float(np.linalg.norm(self.drift.t)),
            "drift_rotation_deg": math.degrees(angle),
            "cost_before": self.cost_before,
            "cost_after": self.cost_after,
        }


def append_loop_log(path, result: LoopResult) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(result.to_record()) + "\n")


def select_loop_frame(matches, map_state) -> int:
    """Earliest first-observation frame over the matched global landmarks."""
    if not matches:
        raise ValueError("cannot select a loop frame from zero matches")
    return min(map_state.landmarks[c.global_id].first_frame for c in matches)


def estimate_drift(constraints, cfg: SolverConfig | None = None):
    """Alignment transform minimizing the matched-pair consistency error.

    Minimizes sum_i || log(D^-1 · local_i^-1 · global_i) ||_Sigma over D,
    seeded at local^-1 · global of the first constraint (callers order
    constraints best-first), which zeroes that term exactly.
    """
    constraints = list(constraints)
    if not constraints:
        raise ValueError("drift estimation needs at least one constraint")
    init = constraints[0].local_pose.inverse() @ constraints[0].global_pose
    problem = NLLSProblem()
    drift = problem.add_variable(init, fixed=False)
    for c in constraints:
        target = problem.add_variable(c.local_pose.inverse() @ c.global_pose, fixed=True)
        problem.add_block(drift, target, sqrt_info=c.sqrt_info)
    optimized, report = solve_gauss_newton(problem, cfg)
    return optimized[drift], report


def correct_current_pose(t_wc: Pose, drift: Pose) -> Pose:
    """Apply the inverse drift to the current camera pose.

    Not idempotent: applying the same non-identity drift twice over-corrects,
    so callers must apply each estimated drift exactly once.
    """
    return drift.inverse() @ t_wc


def optimize_frame_graph(poses, relative_measurements, cfg: SolverConfig | None = None,
                         sqrt_info: np.ndarray | None = None):
    """Distribute the loop correction along a chain of camera poses.

    ``poses`` is the ordered chain; the first (loop frame) and last
    (corrected current frame) entries are anchors and never move. One
    relative measurement constrains each consecutive pair. Returns
    (optimized poses, SolveReport).
    """
    poses = list(poses)
    if len(poses) < 2:
        raise ValueError("frame graph needs at least 2 poses")
    if len(relative_measurements) != len(poses) - 1:
        raise ValueError("need exactly one relative measurement per consecutive pair")
    weight = DEFAULT_ODOMETRY_SQRT_INFO if sqrt_info is None else sqrt_info

    problem = NLLSProblem()
    ids = []
    for i, p in enumerate(poses):
        ids.append(problem.add_variable(p, fixed=(i == 0 or i == len(poses) - 1)))
    for i, rel in enumerate(relative_measurements):
        problem.add_block(ids[i], ids[i + 1], left=rel.inverse(), sqrt_info=weight)
    optimized, report = solve_gauss_newton(problem, cfg)
    return [optimized[i] for i in ids], report


def propagate_correction(map_state, old_poses: dict, new_poses: dict, matches=None):
    """Re-express landmarks through their anchor frames and fuse matched pairs.

    ``old_poses``/``new_poses`` map frame ids to the pre/post-optimization
    camera poses of the corrected span. Each landmark observed inside the
    span is re-anchored at its first observing frame there:
    T_wo <- T_new_anchor · (T_old_anchor^-1 · T_wo). Landmarks with no
    observation in the span stay put. When ``matches`` is given, each
    (local, global) landmark pair is fused: the global landmark absorbs the
    local one's history and the local id is retired.
    """
    span = set(old_poses)
    if set(new_poses) != span:
        raise ValueError("old and new pose maps must cover the same frames")
    for lm in map_state.landmarks.values():
        anchors = [f for f in lm.observed_frames if f in span]
        if not anchors:
            continue
        anchor = min(anchors)
        lm.pose = new_poses[anchor] @ (old_poses[anchor].inverse() @ lm.pose)
    if matches:
        for c in matches:
            _fuse(map_state, local_id=c.local_id, global_id=c.global_id)
    return map_state


def _fuse(map_state, local_id: int, global_id: int) -> None:
    local = map_state.landmarks.pop(local_id, None)
    if local is None:
        return
    target = map_state.landmarks[global_id]
    cap = target.hist_history.maxlen
    merged_frames = sorted(set(target.observed_frames) | set(local.observed_frames))
    target.observed_frames = merged_frames
    target.first_frame = merged_frames[0]
    target.measurements.update(local.measurements)
    # concatenate histories oldest-first, then keep the newest ``cap`` entries
    target.hist_history = deque(
        list(target.hist_history) + list(local.hist_history), maxlen=cap
    )
    target.emb_history = deque(
        list(target.emb_history) + list(local.emb_history), maxlen=cap
    )
