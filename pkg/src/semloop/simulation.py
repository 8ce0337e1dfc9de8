"""Deterministic scenario generator: labeled cuboid worlds, closed-circuit
trajectories with a configurable revisit viewpoint, drifting odometry, and
noisy per-frame detections.

Stands in for the detector and visual-odometry front-ends so the mapping and
loop-closure back-end can be exercised and measured against exact ground
truth. Everything is reproducible from (config, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import Detection
from .geometry import CameraIntrinsics, Cuboid, NotVisible, Pose, predict_bbox, se3_exp

FRAME_DT = 0.1  # seconds between keyframes in emitted stamps
NEAR_PLANE = 0.5


class PlacementFailure(Exception):
    """Could not place objects at the required separation."""


@dataclass(frozen=True)
class LabelSpec:
    name: str
    dims: tuple  # nominal (dx, dy, dz) in meters
    weight: float = 1.0


DEFAULT_LABELS = (
    LabelSpec("car", (4.3, 1.8, 1.5), 1.0),
    LabelSpec("van", (4.9, 2.0, 2.1), 0.7),
    LabelSpec("suv", (4.6, 1.9, 1.75), 0.8),
    LabelSpec("pickup", (5.2, 1.9, 1.85), 0.5),
    LabelSpec("kiosk", (2.5, 2.5, 2.6), 0.4),
)

DEFAULT_INTRINSICS = CameraIntrinsics(fx=448.0, fy=448.0, cx=640.0, cy=360.0, width=1280, height=720)


@dataclass
class TrajectoryConfig:
    shape: str = "rectangle"  # rectangle | line | curve
    span: tuple = (40.0, 20.0)  # rectangle (w, h); line (length,); curve (radius,)
    spacing: float = 1.0
    laps: int = 1  # closed shapes may run their circuit several times
    revisit_offset_deg: float = 0.0
    revisit_length: float = 14.0  # approach run-in before the revisited region
    lookahead: float = 12.0  # how far ahead of the start the viewed region sits

    def __post_init__(self):
        if self.shape not in ("rectangle", "line", "curve"):
            raise ValueError(f"unknown trajectory shape '{self.shape}'")
        if self.spacing <= 0 or any(s <= 0 for s in self.span):
            raise ValueError("span and spacing must be positive")
        if self.laps < 1:
            raise ValueError("laps must be >= 1")


@dataclass
class NoiseConfig:
    odom_sigma_rot: float = 0.0  # rad per meter traveled (random walk)
    odom_sigma_trans: float = 0.0  # m per meter traveled (random walk)
    det_sigma_trans: float = 0.0  # m, on the object position
    det_sigma_yaw: float = 0.0  # rad, on the object heading
    det_sigma_dims: float = 0.0  # m, on the box extents
    label_flip_prob: float = 0.0
    hist_jitter_conc: float = 200.0
    emb_noise_sigma: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("odom_sigma_rot", "odom_sigma_trans", "det_sigma_trans",
                     "det_sigma_yaw", "det_sigma_dims", "emb_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("label_flip_prob", "dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class ScenarioConfig:
    seed: int = 0
    n_objects: int = 30
    labels: tuple = DEFAULT_LABELS
    world_margin: float = 18.0  # band around the trajectory where objects live
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    camera_height: float = 1.5
    max_detection_range: float = 40.0
    hist_bins: int = 8
    emb_dim: int = 16
    emb_instance_sigma: float = 0.75  # instance spread around the label anchor
    anchor_min_angle_deg: float = 30.0
    min_separation: float = 2.0
    dims_spread: float = 0.1  # +-10% around the nominal label dims


@dataclass(frozen=True)
class TrueObject:
    id: int
    label: str
    cuboid: Cuboid
    hist: np.ndarray
    emb: np.ndarray


@dataclass
class GroundTruth:
    objects: list
    trajectory: list  # true camera poses, one per keyframe
    stamps: list

    def poses_by_frame(self) -> dict:
        return dict(enumerate(self.trajectory))


@dataclass
class FrameObservation:
    frame: int
    stamp: float
    odom_rel: Pose | None  # relative pose from the previous keyframe
    detections: list


def _rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream)))


def heading_pose(x: float, y: float, heading: float, height: float) -> Pose:
    """Camera pose for a level camera at (x, y) looking along ``heading``.

    Camera axes: x right, y down, z forward (optical axis).
    """
    c, s = math.cos(heading), math.sin(heading)
    r = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    return Pose(r, np.array([x, y, height]))


def generate_trajectory(cfg: ScenarioConfig):
    """True keyframe poses along the configured shape.

    Rectangles and curves close their circuit and then re-approach the first
    segment's viewed region with the heading rotated by the configured
    revisit offset; lines never revisit.
    """
    tj = cfg.trajectory
    if tj.shape == "line":
        waypoints = [np.array([0.0, 0.0]), np.array([tj.span[0], 0.0])]
        samples = _march(waypoints, tj.spacing)
    elif tj.shape == "rectangle":
        w, h = tj.span[0], tj.span[1]
        circuit = [
            np.array([w, 0.0]),
            np.array([w, h]),
            np.array([0.0, h]),
            np.array([0.0, 0.0]),
        ]
        waypoints = [np.array([0.0, 0.0])] + circuit * tj.laps
        samples = _march(waypoints, tj.spacing)
        samples += _revisit_leg(samples[-1][0], tj)
    else:  # curve: circular arc, then the same revisit construction
        radius = tj.span[0]
        arc = math.radians(300.0)
        n = max(2, int(round(radius * arc / tj.spacing)))
        samples = []
        for i in range(n + 1):
            phi = arc * i / n
            pos = np.array([radius * math.sin(phi), radius * (1.0 - math.cos(phi))])
            samples.append((pos, phi))
        samples += _revisit_leg(samples[-1][0], tj)
    return [heading_pose(p[0], p[1], th, cfg.camera_height) for p, th in samples]


def _march(waypoints, spacing):
    """Sample positions every ``spacing`` meters along a polyline."""
    samples = []
    carry = 0.0
    for a, b in zip(waypoints, waypoints[1:]):
        seg = b - a
        length = float(np.linalg.norm(seg))
        heading = math.atan2(seg[1], seg[0])
        d = carry
        while d < length:
            samples.append((a + seg * (d / length), heading))
            d += spacing
        carry = d - length
    samples.append((waypoints[-1].copy(), samples[-1][1] if samples else 0.0))
    return samples


def _revisit_leg(from_pos, tj: TrajectoryConfig):
    """Connector plus a straight pass through the start region at the offset heading."""
    center = np.array([tj.lookahead, 0.0])
    theta = math.radians(tj.revisit_offset_deg)
    u = np.array([math.cos(theta), math.sin(theta)])
    start = center - u * tj.revisit_length
    leg = []
    gap = start - from_pos
    gap_len = float(np.linalg.norm(gap))
    if gap_len > tj.spacing:
        heading = math.atan2(gap[1], gap[0])
        n = int(gap_len / tj.spacing)
        for i in range(1, n + 1):
            leg.append((from_pos + gap * (i * tj.spacing / gap_len), heading))
    end = center + u * (2.0 * tj.spacing)
    seg_pts = _march([start, end], tj.spacing)
    leg += [(p, theta) for p, _ in seg_pts]
    return leg


def generate_world(cfg: ScenarioConfig, trajectory=None):
    """Labeled cuboids on the ground plane with per-instance appearance.

    Objects are rejection-sampled inside the trajectory's bounding box plus
    the configured margin, at least ``min_separation`` apart.
    """
    if cfg.n_objects < 1:
        raise ValueError("need at least one object")
    rng = _rng_for(cfg.seed, 0)
    trajectory = trajectory if trajectory is not None else generate_trajectory(cfg)
    xy = np.array([[p.t[0], p.t[1]] for p in trajectory])
    lo = xy.min(axis=0) - cfg.world_margin
    hi = xy.max(axis=0) + cfg.world_margin

    anchors = _label_anchors(rng, [spec.name for spec in cfg.labels], cfg.emb_dim,
                             cfg.anchor_min_angle_deg)
    base_hists = {
        spec.name: rng.dirichlet(2.0 * np.ones(cfg.hist_bins)) for spec in cfg.labels
    }
    weights = np.array([spec.weight for spec in cfg.labels], dtype=float)
    weights /= weights.sum()

    centers = []
    attempts = 0
    while len(centers) < cfg.n_objects:
        if attempts >= 10_000:
            raise PlacementFailure(
                f"placed {len(centers)}/{cfg.n_objects} objects after {attempts} attempts"
            )
        attempts += 1
        cand = rng.uniform(lo, hi)
        if all(np.linalg.norm(cand - c) >= cfg.min_separation for c in centers):
            centers.append(cand)

    objects = []
    for i, center in enumerate(centers):
        spec = cfg.labels[rng.choice(len(cfg.labels), p=weights)]
        dims = np.array(spec.dims) * (1.0 + rng.uniform(-cfg.dims_spread, cfg.dims_spread, 3))
        yaw = rng.uniform(-math.pi, math.pi)
        hist = np.sort(rng.dirichlet(60.0 * base_hists[spec.name] + 0.5))[::-1]
        latent = anchors[spec.name] + cfg.emb_instance_sigma * rng.normal(size=cfg.emb_dim)
        latent /= np.linalg.norm(latent)
        cuboid = Cuboid(t=[center[0], center[1], dims[2] / 2.0], yaw=yaw, dims=dims)
        objects.append(TrueObject(i, spec.name, cuboid, hist, latent))
    return objects


def _label_anchors(rng, names, dim, min_angle_deg):
    """Unit anchor per label, pairwise at least ``min_angle_deg`` apart."""
    min_cos = math.cos(math.radians(min_angle_deg))
    anchors = []
    guard = 0
    while len(anchors) < len(names):
        guard += 1
        if guard > 10_000:
            raise PlacementFailure("could not separate label anchors")
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ a)) <= min_cos for a in anchors):
            anchors.append(v)
    return dict(zip(names, anchors))


def simulate_odometry(true_poses, cfg: ScenarioConfig, seed: int):
    """Noisy relative poses between consecutive keyframes.

    Each true relative is right-perturbed by exp(eps) with per-axis sigma
    proportional to the segment length, so errors accumulate as a random
    walk with unbounded drift. Rotation noise acts about the vertical only:
    a ground vehicle with an IMU observes gravity, so heading is the drifting
    rotation degree of freedom.
    """
    if len(true_poses) < 2:
        raise ValueError("need at least two poses")
    rng = np.random.default_rng(seed)
    rels = []
    for a, b in zip(true_poses, true_poses[1:]):
        rel = a.inverse() @ b
        length = float(np.linalg.norm(rel.t))
        s_r = cfg.noise.odom_sigma_rot * length
        s_t = cfg.noise.odom_sigma_trans * length
        # camera y axis points down, so heading noise is rotation about y
        omega = np.array([0.0, rng.normal(0.0, s_r), 0.0]) if s_r > 0 else np.zeros(3)
        v = rng.normal(0.0, s_t, 3) if s_t > 0 else np.zeros(3)
        eps = np.concatenate([omega, v])
        rels.append(rel @ se3_exp(eps) if (s_r > 0 or s_t > 0) else rel)
    return rels


def render_detections(objects, t_wc: Pose, cfg: ScenarioConfig, seed: int) -> list:
    """Noisy detections of the objects visible from one true camera pose."""
    rng = np.random.default_rng(seed)
    k = cfg.intrinsics
    half_h = math.atan2(k.width / 2.0, k.fx)
    half_v = math.atan2(k.height / 2.0, k.fy)
    t_cw = t_wc.inverse()
    labels = [spec.name for spec in cfg.labels]
    noise = cfg.noise

    dets = []
    for obj in objects:
        p_cam = t_cw.apply(obj.cuboid.t)
        depth = p_cam[2]
        if depth < NEAR_PLANE or np.linalg.norm(p_cam) > cfg.max_detection_range:
            continue
        if abs(math.atan2(p_cam[0], depth)) > half_h or abs(math.atan2(p_cam[1], depth)) > half_v:
            continue
        if noise.dropout > 0 and rng.uniform() < noise.dropout:
            continue

        yaw = obj.cuboid.yaw + (rng.normal(0.0, noise.det_sigma_yaw) if noise.det_sigma_yaw else 0.0)
        center = obj.cuboid.t + (rng.normal(0.0, noise.det_sigma_trans, 3) if noise.det_sigma_trans else 0.0)
        dims = obj.cuboid.dims + (rng.normal(0.0, noise.det_sigma_dims, 3) if noise.det_sigma_dims else 0.0)
        dims = np.maximum(dims, 0.2)
        noisy = Cuboid(t=center, yaw=yaw, dims=dims)
        try:
            bbox = predict_bbox(noisy, t_cw, k)
        except NotVisible:
            continue

        label = obj.label
        if noise.label_flip_prob > 0 and rng.uniform() < noise.label_flip_prob:
            others = [l for l in labels if l != label]
            label = others[rng.integers(len(others))]

        hist = rng.dirichlet(noise.hist_jitter_conc * obj.hist + 1.0)
        hist = np.sort(hist)[::-1]
        emb = obj.emb + (rng.normal(0.0, noise.emb_noise_sigma, cfg.emb_dim)
                         if noise.emb_noise_sigma else 0.0)
        emb = emb / np.linalg.norm(emb)

        dets.append(
            Detection(
                label=label,
                bbox=bbox,
                hist=hist,
                emb=emb,
                pose_in_camera=t_cw @ noisy.pose(),
                dims=dims,
                score=float(rng.uniform(0.6, 1.0)),
                meta={"true_id": obj.id},
            )
        )
    return dets


@dataclass
class SimulatedRun:
    config: ScenarioConfig
    truth: GroundTruth
    observations: list


def simulate_scenario(cfg: ScenarioConfig) -> SimulatedRun:
    """Full deterministic scenario: world, trajectory, odometry, detections."""
    trajectory = generate_trajectory(cfg)
    objects = generate_world(cfg, trajectory)
    rels = simulate_odometry(trajectory, cfg, seed=int(_rng_for(cfg.seed, 1).integers(2**31)))
    stamps = [i * FRAME_DT for i in range(len(trajectory))]
    observations = []
    for i, pose in enumerate(trajectory):
        frame_seed = int(_rng_for(cfg.seed, 100 + i).integers(2**31))
        dets = render_detections(objects, pose, cfg, seed=frame_seed)
        observations.append(
            FrameObservation(
                frame=i,
                stamp=stamps[i],
                odom_rel=None if i == 0 else rels[i - 1],
                detections=dets,
            )
        )
    return SimulatedRun(cfg, GroundTruth(objects, trajectory, stamps), observations)


# ---------------------------------------------------------------------------
# Scenario-file round trip.
# ---------------------------------------------------------------------------


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    d["labels"] = [asdict(spec) for spec in cfg.labels]
    d["intrinsics"] = asdict(cfg.intrinsics)
    return d


def scenario_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    if "labels" in d:
        d["labels"] = tuple(
            LabelSpec(spec["name"], tuple(spec["dims"]), spec.get("weight", 1.0))
            for spec in d["labels"]
        )
    if "trajectory" in d:
        tj = dict(d["trajectory"])
        if "span" in tj:
            tj["span"] = tuple(tj["span"])
        d["trajectory"] = TrajectoryConfig(**tj)
    if "noise" in d:
        d["noise"] = NoiseConfig(**d["noise"])
    if "intrinsics" in d:
        d["intrinsics"] = CameraIntrinsics(**d["intrinsics"])
    return ScenarioConfig(**d)


def save_scenario(path, cfg: ScenarioConfig) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(cfg), fh, indent=2)


def load_scenario(path) -> ScenarioConfig:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def world_to_dict(objects) -> dict:
    return {
        "objects": [
            {
                "id": o.id,
                "label": o.label,
                "t": o.cuboid.t.tolist(),
                "yaw": o.cuboid.yaw,
                "dims": o.cuboid.dims.tolist(),
            }
            for o in objects
        ]
    }
