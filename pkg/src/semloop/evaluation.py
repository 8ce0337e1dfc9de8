"""Trajectory alignment, absolute translation error metrics, and the
precision-recall protocol for loop declarations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, pose_from_tum_line, pose_to_tum_line

STAMP_MATCH_TOL = 0.05  # seconds, nearest-neighbor association of samples
LOOP_DISTANCE_TAU = 5.0  # meters, the loop-truth radius
MIN_LOOP_GAP = 50  # frames between a revisit and its earlier pass


class DegenerateGeometry(Exception):
    """Trajectory samples are collinear or coincident; alignment is ambiguous."""


class NoOverlap(Exception):
    """No timestamp pairs match within tolerance."""


@dataclass
class Trajectory:
    stamps: list
    poses: list

    def __post_init__(self):
        if len(self.stamps) != len(self.poses):
            raise ValueError("stamps and poses must align")
        if any(b <= a for a, b in zip(self.stamps, self.stamps[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.stamps)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])

    @staticmethod
    def load_tum(path) -> "Trajectory":
        stamps, poses = [], []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                stamp, pose = pose_from_tum_line(line)
                stamps.append(stamp)
                poses.append(pose)
        return Trajectory(stamps, poses)

    def save_tum(self, path) -> None:
        with open(path, "w") as fh:
            for stamp, pose in zip(self.stamps, self.poses):
                fh.write(pose_to_tum_line(stamp, pose) + "\n")


def _match_samples(est: Trajectory, gt: Trajectory):
    """Indices of nearest-stamp pairs within tolerance."""
    gt_stamps = np.asarray(gt.stamps)
    pairs = []
    for i, s in enumerate(est.stamps):
        j = int(np.argmin(np.abs(gt_stamps - s)))
        if abs(gt_stamps[j] - s) <= STAMP_MATCH_TOL:
            pairs.append((i, j))
    if not pairs:
        raise NoOverlap("no timestamp pairs within tolerance")
    return pairs


def align_point_sets(src: np.ndarray, dst: np.ndarray, fix_scale: bool = True):
    """Closed-form least-squares similarity mapping src points onto dst.

    Returns (scale, Pose) minimizing sum ||s·R·p_src + t - p_dst||^2.
    Raises DegenerateGeometry when the points are collinear or coincident.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) != len(dst) or len(src) < 3:
        raise DegenerateGeometry(f"need >= 3 point pairs, got {len(src)}")
    mp, mq = src.mean(axis=0), dst.mean(axis=0)
    pc, qc = src - mp, dst - mq

    cov = qc.T @ pc / len(src)
    u, s_diag, vt = np.linalg.svd(cov)
    rank = int(np.sum(s_diag > 1e-12 * max(s_diag[0], 1e-300)))
    if rank < 2:
        raise DegenerateGeometry("point pairs are collinear or coincident")
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    fix = np.diag([1.0, 1.0, d])
    rot = u @ fix @ vt

    if fix_scale:
        scale = 1.0
    else:
        var_p = (pc**2).sum() / len(src)
        if var_p <= 0:
            raise DegenerateGeometry("source positions are coincident")
        scale = float(np.trace(np.diag(s_diag) @ fix) / var_p)
    trans = mq - scale * rot @ mp
    return scale, Pose(rot, trans)


def align_similarity(est: Trajectory, gt: Trajectory, fix_scale: bool = True):
    """Closed-form least-squares similarity aligning est onto gt.

    Returns (scale, Pose) minimizing sum ||s·R·p_est + t - p_gt||^2 over
    matched samples. ``fix_scale`` clamps s = 1 (rigid, the stereo-scale
    setting); pass False for the full similarity.
    """
    pairs = _match_samples(est, gt)
    if len(pairs) < 3:
        raise DegenerateGeometry(f"need >= 3 matched samples, got {len(pairs)}")
    p = np.array([est.poses[i].t for i, _ in pairs])
    q = np.array([gt.poses[j].t for _, j in pairs])
    return align_point_sets(p, q, fix_scale=fix_scale)


@dataclass
class AteReport:
    mse: float
    rmse: float
    std: float
    max: float
    n: int
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mse": self.mse, "rmse": self.rmse, "std": self.std, "max": self.max, "n": self.n}


def ate(est: Trajectory, gt: Trajectory, alignment: str = "rigid") -> AteReport:
    """Absolute translation error after trajectory alignment.

    ``alignment``: "rigid" (scale 1), "similarity", or "none" (compare in
    the shared frame directly).
    """
    pairs = _match_samples(est, gt)
    if alignment == "none":
        scale, transform = 1.0, Pose.identity()
    elif alignment in ("rigid", "similarity"):
        scale, transform = align_similarity(est, gt, fix_scale=(alignment == "rigid"))
    else:
        raise ValueError(f"unknown alignment '{alignment}'")
    errors = []
    for i, j in pairs:
        aligned = scale * (transform.r @ est.poses[i].t) + transform.t
        errors.append(float(np.linalg.norm(aligned - gt.poses[j].t)))
    errors_arr = np.array(errors)
    mse = float(np.mean(errors_arr**2))
    return AteReport(
        mse=mse,
        rmse=math.sqrt(mse),
        std=float(errors_arr.std()),
        max=float(errors_arr.max()),
        n=len(errors),
        errors=errors,
    )


@dataclass(frozen=True)
class LoopAttempt:
    """One loop-detection check: its score and the would-be corrected position."""

    frame: int
    stamp: float
    score: float
    est_position: tuple
    gt_position: tuple
    opportunity: bool  # an earlier pass exists within the loop radius

    def to_record(self) -> dict:
        return {
            "frame": self.frame,
            "stamp": self.stamp,
            "score": self.score,
            "est_pos": list(self.est_position),
            "gt_pos": list(self.gt_position),
            "opportunity": self.opportunity,
        }


def write_attempts(path, attempts) -> None:
    with open(path, "w") as fh:
        for a in attempts:
            fh.write(json.dumps(a.to_record()) + "\n")


def read_attempts(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                LoopAttempt(
                    frame=int(rec["frame"]),
                    stamp=float(rec["stamp"]),
                    score=float(rec["score"]),
                    est_position=tuple(rec["est_pos"]),
                    gt_position=tuple(rec["gt_pos"]),
                    opportunity=bool(rec["opportunity"]),
                )
            )
    return out


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def pr_curve(attempts, tau: float = LOOP_DISTANCE_TAU, thresholds=None):
    """Precision-recall points over score thresholds.

    A declared loop (score >= threshold) is true when the corrected position
    lies within ``tau`` of ground truth. Recall counts loop opportunities
    (attempts where an earlier pass exists within ``tau``) that were not
    declared as misses. With no declarations, precision is 1 by convention.
    """
    attempts = list(attempts)
    if not attempts:
        raise ValueError("attempt log is empty")
    if thresholds is None:
        scores = sorted({a.score for a in attempts})
        thresholds = scores + [scores[-1] + 1.0]
    points = []
    for theta in thresholds:
        tp = fp = fn = 0
        for a in attempts:
            declared = a.score >= theta
            correct = (
                np.linalg.norm(np.array(a.est_position) - np.array(a.gt_position)) <= tau
            )
            if declared and correct:
                tp += 1
            elif declared:
                fp += 1
            elif a.opportunity:
                fn += 1
        precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
        recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
        points.append(PrPoint(float(theta), precision, recall, tp, fp, fn))
    return points


def write_pr_csv(path, points) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall,tp,fp,fn\n")
        for p in points:
            fh.write(f"{p.threshold:.9g},{p.precision:.9g},{p.recall:.9g},{p.tp},{p.fp},{p.fn}\n")


def association_accuracy(assoc_log) -> float:
    """Fraction of correctly associated detections.

    Each log entry is (true_id, landmark_true_id, was_new, had_active_true):
    a match is correct when the landmark belongs to the detection's true
    object; a spawn is correct when no active landmark of that object existed.
    """
    log = list(assoc_log)
    if not log:
        return 1.0
    good = 0
    for true_id, lm_true_id, was_new, had_active_true in log:
        if was_new:
            good += not had_active_true
        else:
            good += lm_true_id == true_id
    return good / len(log)
