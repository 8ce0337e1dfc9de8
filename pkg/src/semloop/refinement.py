"""Manifold Gauss-Newton on pose graphs and the sliding-window joint
refinement of object and camera poses.

Every residual block has the same shape: a weighted twist

    r = sqrt_info @ log(L · A^-1 · B · R)

where A and B are pose variables (possibly fixed) and L, R are constant
poses. Object-camera, odometry, and drift-alignment constraints are all
instances of this form. Jacobians come from central finite differences on
the right-perturbation T · exp(delta), matching the solver's update rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, batch_exp, batch_inverse, batch_log, se3_log

FD_STEP = 1e-6


class SingularNormalEquations(Exception):
    """Normal equations are rank deficient after gauge fixing."""


def object_camera_residual(t_wo: Pose, t_wc: Pose, t_co: Pose) -> np.ndarray:
    """Twist error between an object pose and one camera-frame measurement.

    Zero exactly when t_wo == t_wc o t_co.
    """
    return se3_log(t_wo.inverse().compose(t_wc).compose(t_co))


@dataclass
class SolverConfig:
    max_iterations: int = 50
    tolerance: float = 1e-8
    fd_step: float = FD_STEP
    max_step_halvings: int = 10


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    trace: list = field(default_factory=list)  # (iteration, cost, step_norm)


def write_solver_trace(path, report: SolveReport) -> None:
    """Diagnostic CSV of (iteration, cost, step norm) for one solve."""
    with open(path, "w") as fh:
        fh.write("iteration,cost,step_norm\n")
        for it, cost, step in report.trace:
            fh.write(f"{it},{cost:.12g},{step:.12g}\n")


class NLLSProblem:
    """Pose variables plus two-slot relative-pose residual blocks."""

    def __init__(self):
        self.variables: list[Pose] = []
        self.fixed: list[bool] = []
        self._blocks: list[tuple[int, int, Pose, Pose, np.ndarray]] = []

    def add_variable(self, pose: Pose, fixed: bool = False) -> int:
        self.variables.append(pose)
        self.fixed.append(fixed)
        return len(self.variables) - 1

    def add_block(self, a: int, b: int, left: Pose | None = None, right: Pose | None = None,
                  sqrt_info: np.ndarray | None = None) -> None:
        n = len(self.variables)
        if not (0 <= a < n and 0 <= b < n):
            raise ValueError("residual block references a missing variable")
        self._blocks.append(
            (
                a,
                b,
                left if left is not None else Pose.identity(),
                right if right is not None else Pose.identity(),
                np.eye(6) if sqrt_info is None else np.asarray(sqrt_info, dtype=float),
            )
        )

    @property
    def n_blocks(self) -> int:
        return len(self._blocks)

    def _arrays(self):
        a_idx = np.array([b[0] for b in self._blocks], dtype=int)
        b_idx = np.array([b[1] for b in self._blocks], dtype=int)
        left = np.stack([b[2].matrix() for b in self._blocks])
        right = np.stack([b[3].matrix() for b in self._blocks])
        sqrt_info = np.stack([b[4] for b in self._blocks])
        return a_idx, b_idx, left, right, sqrt_info


def _residuals(var_mats, a_idx, b_idx, left, right, sqrt_info) -> np.ndarray:
    chain = left @ batch_inverse(var_mats[a_idx]) @ var_mats[b_idx] @ right
    return np.einsum("nij,nj->ni", sqrt_info, batch_log(chain))


def solve_gauss_newton(problem: NLLSProblem, cfg: SolverConfig | None = None):
    """Iterate manifold Gauss-Newton steps with step halving.

    Returns (optimized variable poses, SolveReport). The cost never
    increases across accepted iterations; a step that cannot be made to
    decrease the cost after the configured halvings ends the solve with
    ``converged`` reporting whether the last step was below tolerance.
    """
    cfg = cfg or SolverConfig()
    free = [i for i, fx in enumerate(problem.fixed) if not fx]
    if not free:
        return list(problem.variables), SolveReport(0, 0.0, 0.0, True)
    if problem.n_blocks == 0:
        raise ValueError("problem has free variables but no residual blocks")

    a_idx, b_idx, left, right, sqrt_info = problem._arrays()
    touched = set(a_idx) | set(b_idx)
    for v in free:
        if v not in touched:
            raise ValueError(f"free variable {v} has no residual touching it")

    var_mats = np.stack([p.matrix() for p in problem.variables])
    col_of = {v: 6 * k for k, v in enumerate(free)}
    nfree = len(free)
    nres = 6 * problem.n_blocks

    h = cfg.fd_step
    unit = np.eye(6)
    pert_plus = batch_exp(h * unit)
    pert_minus = batch_exp(-h * unit)

    def eval_cost(mats):
        r = _residuals(mats, a_idx, b_idx, left, right, sqrt_info).ravel()
        return r, float(r @ r)

    def jacobian(mats):
        jac = np.zeros((nres, 6 * nfree))
        for idx_arr, slot in ((a_idx, 0), (b_idx, 1)):
            sel = np.flatnonzero(np.isin(idx_arr, free))
            if len(sel) == 0:
                continue
            base = mats[idx_arr[sel]]
            rows = (6 * sel[:, None] + np.arange(6)[None, :]).ravel()
            for d in range(6):
                plus, minus = base @ pert_plus[d], base @ pert_minus[d]
                if slot == 0:
                    rp = _residuals_sub(plus, mats[b_idx[sel]], left[sel], right[sel], sqrt_info[sel])
                    rm = _residuals_sub(minus, mats[b_idx[sel]], left[sel], right[sel], sqrt_info[sel])
                else:
                    rp = _residuals_sub(mats[a_idx[sel]], plus, left[sel], right[sel], sqrt_info[sel])
                    rm = _residuals_sub(mats[a_idx[sel]], minus, left[sel], right[sel], sqrt_info[sel])
                col = (rp - rm).ravel() / (2.0 * h)
                for k, blk in enumerate(sel):
                    var = idx_arr[blk]
                    jac[6 * blk : 6 * blk + 6, col_of[var] + d] += col[6 * k : 6 * k + 6]
        return jac

    r, cost = eval_cost(var_mats)
    report = SolveReport(0, cost, cost, False, trace=[(0, cost, 0.0)])
    if cost < 1e-24:  # already at numerical zero
        report.converged = True
        return _to_poses(var_mats, problem), report

    for it in range(1, cfg.max_iterations + 1):
        jac = jacobian(var_mats)
        hess = jac.T @ jac
        grad = jac.T @ r
        try:
            chol = np.linalg.cholesky(hess)
            delta = -np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        except np.linalg.LinAlgError as exc:
            raise SingularNormalEquations(str(exc)) from exc

        step = 1.0
        accepted = False
        for _ in range(cfg.max_step_halvings + 1):
            trial = var_mats.copy()
            inc = batch_exp(step * delta.reshape(nfree, 6))
            trial[free] = trial[free] @ inc
            r_new, cost_new = eval_cost(trial)
            if cost_new <= cost:
                var_mats, r, cost = trial, r_new, cost_new
                accepted = True
                break
            step *= 0.5
        step_norm = float(np.abs(step * delta).max())
        report.iterations = it
        report.final_cost = cost
        report.trace.append((it, cost, step_norm))
        if not accepted:
            break
        if step_norm < cfg.tolerance:
            report.converged = True
            break
    else:
        report.converged = False

    report.final_cost = cost
    return _to_poses(var_mats, problem), report


def _residuals_sub(a_mats, b_mats, left, right, sqrt_info):
    chain = left @ batch_inverse(a_mats) @ b_mats @ right
    return np.einsum("nij,nj->ni", sqrt_info, batch_log(chain))


def _to_poses(var_mats, problem):
    return [Pose.from_matrix(m) for m in var_mats]


@dataclass
class WindowConfig:
    window_size: int = 10
    min_track_count: int = 4  # objects tracked more than this many times are optimized
    min_camera_obs: int = 2   # free a camera only when this many residuals touch it
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window must span at least 2 keyframes")
        if self.min_track_count < 1:
            raise ValueError("min_track_count must be >= 1")


def refine_window(map_state, window_frames, cfg: WindowConfig | None = None):
    """Jointly optimize window camera poses and well-tracked object poses.

    One residual per (eligible object, observing frame in the window) using
    that frame's stored camera-frame measurement. The oldest participating
    window camera is the gauge; cameras with fewer than ``min_camera_obs``
    eligible residuals stay fixed so a lone observation cannot drag its
    camera, and every connected component of the constraint graph gets a
    fixed camera so no subproblem is left gauge-free. Optimized poses are
    written back into the map. Returns the SolveReport, or None when no
    object is eligible.
    """
    cfg = cfg or WindowConfig()
    frames = sorted(f for f in window_frames if f in map_state.keyframes)
    if len(frames) < 2:
        raise ValueError("window must contain at least 2 known keyframes")
    frame_set = set(frames)

    eligible = [
        lm
        for lm in map_state.landmarks.values()
        if lm.obs_count > cfg.min_track_count and any(f in frame_set for f in lm.measurements)
    ]
    if not eligible:
        return None
    eligible.sort(key=lambda lm: lm.id)

    obs_per_frame = {f: 0 for f in frames}
    for lm in eligible:
        for f in lm.measurements:
            if f in frame_set:
                obs_per_frame[f] += 1
    participating = [f for f in frames if obs_per_frame[f] > 0]

    fixed_frames = {
        f for f in participating
        if f == participating[0] or obs_per_frame[f] < cfg.min_camera_obs
    }
    fixed_frames |= _component_anchors(eligible, frame_set, participating, fixed_frames)

    problem = NLLSProblem()
    cam_var = {
        f: problem.add_variable(map_state.keyframes[f], fixed=f in fixed_frames)
        for f in participating
    }
    obj_var = {}
    for lm in eligible:
        obj_var[lm.id] = problem.add_variable(lm.pose, fixed=False)
        for f, t_co in sorted(lm.measurements.items()):
            if f in frame_set:
                problem.add_block(obj_var[lm.id], cam_var[f], right=t_co)

    optimized, report = solve_gauss_newton(problem, cfg.solver)
    for f in participating:
        map_state.keyframes[f] = optimized[cam_var[f]]
    for lm in eligible:
        lm.pose = optimized[obj_var[lm.id]]
    return report


def _component_anchors(eligible, frame_set, participating, fixed_frames):
    """Oldest camera of every constraint-graph component lacking a fixed one."""
    parent = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        parent[find(a)] = find(b)

    for lm in eligible:
        for f in lm.measurements:
            if f in frame_set:
                union(("obj", lm.id), ("cam", f))

    anchored = {find(("cam", f)) for f in fixed_frames}
    extra = set()
    for f in participating:
        root = find(("cam", f))
        if root not in anchored:
            anchored.add(root)
            extra.add(f)  # frames scan oldest-first
    return extra
