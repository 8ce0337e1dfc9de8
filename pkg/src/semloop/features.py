"""Per-object appearance features: HSV color histograms, embeddings, and
detection filtering / JSONL ingestion.

Histograms are cluster-membership fractions sorted descending, which makes
the dot-product comparison invariant to cluster labeling. Embeddings are
L2-normalized on construction so mean dot products behave as bounded cosine
similarities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox2D, Pose

DEFAULT_HIST_BINS = 8
LLOYD_MAX_ITER = 50
LLOYD_TOL = 1e-6
HISTORY_CAP = 10

# Canonical upright-object rotation in a level camera (x right, y down,
# z forward): object x -> camera x, object z (up) -> camera -y.
R_UPRIGHT = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


class EmptyPatch(Exception):
    """Pixel patch contains no samples."""


class EmptyHistory(Exception):
    """Similarity requested against an empty history set."""


class DimMismatch(Exception):
    """Vector lengths disagree."""


class ParseError(Exception):
    """Malformed detection file line."""


class SchemaError(Exception):
    """Detection record is missing a required field."""


def normalize_histogram(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    s = h.sum()
    if s <= 0:
        raise ValueError("histogram has non-positive mass")
    if abs(s - 1.0) <= 1e-12:  # keep already-normalized inputs bit-stable
        return h
    return h / s


def normalize_embedding(e) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    n = np.linalg.norm(e)
    if n == 0:
        raise ValueError("embedding has zero norm")
    if abs(n - 1.0) <= 1e-12:
        return e
    return e / n


def upright_pose_in_camera(t_co, yaw_co: float) -> Pose:
    """Camera-frame pose of an upright object from its vertical-axis yaw."""
    c, s = math.cos(yaw_co), math.sin(yaw_co)
    ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return Pose(ry @ R_UPRIGHT, np.asarray(t_co, dtype=float).reshape(3))


def camera_yaw_of(pose_in_camera: Pose) -> float:
    """Inverse of :func:`upright_pose_in_camera` for near-upright poses."""
    m = pose_in_camera.r @ R_UPRIGHT.T
    return math.atan2(m[0, 2] - m[2, 0], m[0, 0] + m[2, 2])


@dataclass(frozen=True)
class Detection:
    """One per-frame object measurement."""

    label: str
    bbox: BBox2D
    hist: np.ndarray
    emb: np.ndarray
    pose_in_camera: Pose
    dims: np.ndarray
    score: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "hist", np.asarray(self.hist, dtype=float))
        object.__setattr__(self, "emb", np.asarray(self.emb, dtype=float))
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=float).reshape(3))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if np.any(self.dims <= 0):
            raise ValueError(f"dims must be positive, got {self.dims}")


def extract_color_histogram(patch: np.ndarray, k: int = DEFAULT_HIST_BINS, seed: int = 0) -> np.ndarray:
    """Cluster HSV pixels and return member fractions, sorted descending.

    Hue is scaled by 1/360 so all channels live in [0, 1] before k-means++
    seeding and Lloyd iterations. Padded with zeros when fewer than ``k``
    distinct clusters survive; deterministic given ``seed``.
    """
    patch = np.asarray(patch, dtype=float)
    if patch.size == 0:
        raise EmptyPatch("no pixels in patch")
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = patch.reshape(-1, 3).copy()
    pts[:, 0] /= 360.0

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_seed(pts, k, rng)
    labels = _nearest(pts, centers)
    for _ in range(LLOYD_MAX_ITER):
        new_centers = centers.copy()
        for j in range(len(centers)):
            members = pts[labels == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        shift = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        labels = _nearest(pts, centers)
        if shift < LLOYD_TOL:
            break

    counts = np.bincount(labels, minlength=k)[:k]
    hist = np.sort(counts / len(pts))[::-1]
    return hist


def _kmeanspp_seed(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [pts[rng.integers(len(pts))]]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break  # every point coincides with a chosen center
        probs = d2 / total
        idx = rng.choice(len(pts), p=probs)
        centers.append(pts[idx])
        d2 = np.minimum(d2, np.sum((pts - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def _nearest(pts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def hist_similarity(h: np.ndarray, history) -> float:
    """Mean dot product of ``h`` against each histogram in the history."""
    history = list(history)
    if not history:
        raise EmptyHistory("no histograms to compare against")
    h = np.asarray(h, dtype=float)
    total = 0.0
    for other in history:
        other = np.asarray(other, dtype=float)
        if other.shape != h.shape:
            raise DimMismatch(f"histogram lengths {h.shape} vs {other.shape}")
        total += float(h @ other)
    return total / len(history)


def emb_similarity(e: np.ndarray, history) -> float:
    """Mean dot product of ``e`` against each embedding in the history."""
    history = list(history)
    if not history:
        raise EmptyHistory("no embeddings to compare against")
    e = np.asarray(e, dtype=float)
    total = 0.0
    for other in history:
        other = np.asarray(other, dtype=float)
        if other.shape != e.shape:
            raise DimMismatch(f"embedding dims {e.shape} vs {other.shape}")
        total += float(e @ other)
    return total / len(history)


@dataclass(frozen=True)
class FilterConfig:
    max_dim: float = 6.0
    max_range: float = 40.0
    min_score: float = 0.0


def filter_proposals(dets, cfg: FilterConfig):
    """Drop oversized, distant, or low-confidence detections; keep order."""
    kept = []
    for d in dets:
        if np.any(d.dims > cfg.max_dim):
            continue
        if np.linalg.norm(d.pose_in_camera.t) > cfg.max_range:
            continue
        if d.score < cfg.min_score:
            continue
        kept.append(d)
    return kept


_REQUIRED_FIELDS = ("frame", "stamp", "label", "bbox", "dims", "t_co", "yaw_co", "hist", "emb", "score")


def detection_to_record(frame: int, stamp: float, det: Detection) -> dict:
    rec = {
        "frame": int(frame),
        "stamp": float(stamp),
        "label": det.label,
        "bbox": [float(det.bbox.u_min), float(det.bbox.v_min), float(det.bbox.u_max), float(det.bbox.v_max)],
        "dims": det.dims.tolist(),
        "t_co": det.pose_in_camera.t.tolist(),
        "yaw_co": camera_yaw_of(det.pose_in_camera),
        "hist": det.hist.tolist(),
        "emb": det.emb.tolist(),
        "score": det.score,
    }
    if "true_id" in det.meta:
        rec["true_id"] = det.meta["true_id"]
    return rec


def record_to_detection(rec: dict) -> Detection:
    bbox = BBox2D(*[float(v) for v in rec["bbox"]])
    meta = {"true_id": rec["true_id"]} if "true_id" in rec else {}
    return Detection(
        label=str(rec["label"]),
        bbox=bbox,
        hist=normalize_histogram(rec["hist"]),
        emb=normalize_embedding(rec["emb"]),
        pose_in_camera=upright_pose_in_camera(rec["t_co"], float(rec["yaw_co"])),
        dims=rec["dims"],
        score=float(rec["score"]),
        meta=meta,
    )


def write_detections(path, frames) -> None:
    """Write per-frame detections as JSONL, one object per line.

    ``frames`` is an iterable of (frame_id, stamp, detections).
    """
    with open(path, "w") as fh:
        for frame, stamp, dets in frames:
            for det in dets:
                fh.write(json.dumps(detection_to_record(frame, stamp, det)) + "\n")


def ingest_detections(path):
    """Parse a detection JSONL file into per-frame groups.

    Returns a list of (frame_id, stamp, [Detection]) sorted by frame id.
    Histograms and embeddings are renormalized on load.
    """
    groups: dict[int, tuple[float, list]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            for name in _REQUIRED_FIELDS:
                if name not in rec:
                    raise SchemaError(f"line {lineno}: missing '{name}'")
            try:
                det = record_to_detection(rec)
            except (ValueError, TypeError) as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            frame = int(rec["frame"])
            stamp = float(rec["stamp"])
            groups.setdefault(frame, (stamp, []))[1].append(det)
    return [(frame, groups[frame][0], groups[frame][1]) for frame in sorted(groups)]
