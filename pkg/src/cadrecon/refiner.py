"""Joint refinement of absolute camera poses over a pose graph.

Each camera ``c`` has a pose ``theta_c`` mapping its own frame into the
common (model) frame. For every graph edge and both of its directions, the
points of view ``h`` are matched to their nearest neighbours in view ``k``
and the robust point-to-plane energy

    E = sum over pairs of sum_i rho(r_i^2),  r_i = n_q . (theta_k^-1 theta_h p_i - q_i)

is minimized with Levenberg-Marquardt. One camera stays fixed to remove
the global rigid-motion freedom. KD trees are built once per cloud, in the
cloud's own frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedGraph, SingularNormalEquations
from .geometry import KdIndex, OrientedPointCloud, Pose, rotation_from_angle_axis
from .posegraph import PoseGraph


@dataclass
class RefineParams:
    kernel: str = "huber"  # "huber" or "quadratic"
    # Huber scale; None means 3 * noise_sigma
    kernel_scale: float | None = None
    noise_sigma: float = 0.0006
    # correspondence rejection; None means max(10 * noise_sigma, 0.02 * diameter)
    reject_dist: float | None = None
    diameter: float = 0.3
    outer_iters: int = 20
    inner_iters: int = 10
    lm_lambda_init: float = 1e-4
    lm_lambda_factor: float = 10.0
    max_damping_retries: int = 12
    rel_tol: float = 1e-6
    # outer loop also stops once no pose moves more than this (radians, and
    # fraction of the diameter for translations)
    pose_tol: float = 1e-5
    # stop after this many outer iterations without a new minimum of the
    # mean energy per correspondence;
    # correspondence switching on sparse scans can otherwise cycle forever
    stall_iters: int = 3
    fixed_frame: int | str = "auto"

    def __post_init__(self):
        if self.kernel not in ("huber", "quadratic"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.scale <= 0:
            raise ValueError("kernel scale must be positive")
        if self.rejection <= 0:
            raise ValueError("reject_dist must be positive")
        if self.outer_iters < 1 or self.inner_iters < 1 or self.stall_iters < 1:
            raise ValueError("iteration counts must be >= 1")

    @property
    def scale(self) -> float:
        return self.kernel_scale if self.kernel_scale is not None else 3.0 * self.noise_sigma

    @property
    def rejection(self) -> float:
        if self.reject_dist is not None:
            return self.reject_dist
        return max(10.0 * self.noise_sigma, 0.02 * self.diameter)


def rho(s, kernel="huber", scale=1.0):
    """Robust loss of squared residuals ``s``."""
    s = np.asarray(s, float)
    if kernel == "quadratic":
        return s
    a2 = scale * scale
    return np.where(s <= a2, s, 2.0 * scale * np.sqrt(np.maximum(s, a2)) - a2)


def rho_weight(r, kernel="huber", scale=1.0):
    """IRLS weight ``rho'(r^2)`` for residuals ``r``."""
    r = np.abs(np.asarray(r, float))
    if kernel == "quadratic":
        return np.ones_like(r)
    return np.where(r <= scale, 1.0, scale / np.maximum(r, scale))


def point_to_plane(p, q, n_q, R, t):
    """Signed distance ``(R p + t - q) . n_q``; works row-wise on arrays."""
    p = np.asarray(p, float)
    x = p @ np.asarray(R, float).T + np.asarray(t, float)
    return np.sum((x - np.asarray(q, float)) * np.asarray(n_q, float), axis=-1)


@dataclass
class CorrespondenceSet:
    """Matches from view ``h`` into view ``k``, all in their own frames."""

    h: int
    k: int
    p: np.ndarray
    q: np.ndarray
    n_q: np.ndarray

    def __len__(self):
        return len(self.p)


def _relative(theta_h: Pose, theta_k: Pose) -> Pose:
    return theta_k.inverse().compose(theta_h)


def pair_residuals(theta_h: Pose, theta_k: Pose, corr: CorrespondenceSet):
    rel = _relative(theta_h, theta_k)
    return point_to_plane(corr.p, corr.q, corr.n_q, rel.rotation, rel.translation)


def pair_energy(theta_h: Pose, theta_k: Pose, corr: CorrespondenceSet, kernel="huber", scale=1.0) -> float:
    """Sum of ``rho(r^2)`` over the pair's correspondences."""
    if len(corr) == 0:
        return 0.0
    r = pair_residuals(theta_h, theta_k, corr)
    return float(np.sum(rho(r * r, kernel, scale)))


def total_energy(poses: dict[int, Pose], correspondences: list[CorrespondenceSet], kernel="huber", scale=1.0) -> float:
    return float(sum(pair_energy(poses[c.h], poses[c.k], c, kernel, scale) for c in correspondences))


def analytic_jacobian(p, q, n_q, theta_h: Pose, theta_k: Pose, fixed_h=False, fixed_k=False):
    """Residuals and their derivatives w.r.t. ``(dw_h, dt_h, dw_k, dt_k)``.

    Poses are perturbed on the left in the common frame:
    ``R <- exp(dw) R`` and ``t <- t + dt``. Returns ``(r, J)`` with ``J`` of
    shape ``(N, 12)``; the block of a fixed camera is zero.
    """
    p = np.atleast_2d(np.asarray(p, float))
    q = np.atleast_2d(np.asarray(q, float))
    n_q = np.atleast_2d(np.asarray(n_q, float))
    a = p @ theta_h.rotation.T  # R_h p
    x = a + theta_h.translation
    m = n_q @ theta_k.rotation.T  # R_k n_q
    d = x - theta_k.translation
    r = np.einsum("ij,ij->i", d, m) - np.einsum("ij,ij->i", n_q, q)
    J = np.zeros((len(p), 12))
    if not fixed_h:
        J[:, 0:3] = np.cross(a, m)
        J[:, 3:6] = m
    if not fixed_k:
        J[:, 6:9] = np.cross(m, d)
        J[:, 9:12] = -m
    return r, J


def perturb(pose: Pose, delta) -> Pose:
    """Apply a left perturbation ``(dw, dt)`` to ``pose``."""
    delta = np.asarray(delta, float)
    return Pose(rotation_from_angle_axis(delta[:3]) @ pose.rotation, pose.translation + delta[3:])


def choose_fixed_frame(clouds: dict[int, OrientedPointCloud], cameras, fixed_frame="auto") -> int:
    """The requested camera, or the one with the most points (smallest id on ties)."""
    if fixed_frame != "auto":
        if fixed_frame not in cameras:
            raise ValueError(f"fixed frame {fixed_frame} is not a graph node")
        return int(fixed_frame)
    return min(cameras, key=lambda c: (-len(clouds[c]), c))


@dataclass
class RefineReport:
    fixed_frame: int
    energies: list = field(default_factory=list)  # one per outer iteration, after the inner solve
    pose_updates: list = field(default_factory=list)  # largest (angle, translation) change per outer iteration
    step_energies: list = field(default_factory=list)  # per outer iteration, accepted inner steps
    correspondence_counts: list = field(default_factory=list)  # per outer iteration, {"h-k": n}
    kd_builds: int = 0
    damping_retries: int = 0
    converged: bool = False
    poses: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fixed_frame": self.fixed_frame,
            "energies": self.energies,
            "pose_updates": self.pose_updates,
            "step_energies": self.step_energies,
            "correspondence_counts": self.correspondence_counts,
            "kd_builds": self.kd_builds,
            "damping_retries": self.damping_retries,
            "converged": self.converged,
            "poses": {str(c): p.matrix3x4().tolist() for c, p in sorted(self.poses.items())},
        }


def find_correspondences(poses, clouds, indices, pairs, reject_dist) -> list[CorrespondenceSet]:
    out = []
    for h, k in pairs:
        rel = _relative(poses[h], poses[k])
        ph = clouds[h].points
        d, idx = indices[k].nearest(rel.apply(ph), max_dist=reject_dist)
        ok = idx >= 0
        out.append(CorrespondenceSet(h, k, ph[ok], clouds[k].points[idx[ok]], clouds[k].normals[idx[ok]]))
    return out


def _normal_equations(poses, corrs, slot, params: RefineParams):
    n = 6 * len(slot)
    H = np.zeros((n, n))
    g = np.zeros(n)
    for c in corrs:
        if len(c) == 0:
            continue
        sh, sk = slot.get(c.h), slot.get(c.k)
        r, J = analytic_jacobian(c.p, c.q, c.n_q, poses[c.h], poses[c.k], sh is None, sk is None)
        w = rho_weight(r, params.kernel, params.scale)
        blocks = [(s, J[:, o:o + 6]) for s, o in ((sh, 0), (sk, 6)) if s is not None]
        for sa, Ja in blocks:
            Jw = Ja * w[:, None]
            g[6 * sa:6 * sa + 6] += Jw.T @ r
            for sb, Jb in blocks:
                H[6 * sa:6 * sa + 6, 6 * sb:6 * sb + 6] += Jw.T @ Jb
    return H, g


def refine(graph: PoseGraph, clouds, params: RefineParams | None = None):
    """Minimize the multiview energy; returns ``(poses, report)``.

    ``clouds[c]`` is camera ``c``'s cloud in its own frame, with normals.
    The fixed camera's pose is returned untouched.
    """
    params = params or RefineParams()
    cams = graph.node_ids
    if len(cams) < 2 or not graph.is_connected():
        raise DisconnectedGraph("refinement needs a connected graph with at least two cameras")
    clouds = {c: clouds[c] for c in cams}
    fixed = choose_fixed_frame(clouds, cams, params.fixed_frame)
    free = [c for c in cams if c != fixed]
    slot = {c: s for s, c in enumerate(free)}
    pairs = []
    for e in graph.edges:
        pairs += [(e.i, e.j), (e.j, e.i)]

    report = RefineReport(fixed)
    indices = {}
    for c in cams:
        indices[c] = KdIndex(clouds[c].points)
        report.kd_builds += 1

    poses = dict(graph.nodes)
    kernel, scale = params.kernel, params.scale
    lam = params.lm_lambda_init
    prev = None
    best, stall = np.inf, 0
    for _ in range(params.outer_iters):
        start = poses
        corrs = find_correspondences(poses, clouds, indices, pairs, params.rejection)
        report.correspondence_counts.append({f"{c.h}-{c.k}": len(c) for c in corrs})
        energy = total_energy(poses, corrs, kernel, scale)
        steps = [energy]
        for _ in range(params.inner_iters):
            H, g = _normal_equations(poses, corrs, slot, params)
            damp = np.eye(len(g))
            accepted = False
            retries = 0
            while retries <= params.max_damping_retries:
                try:
                    delta = -np.linalg.solve(H + lam * damp, g)
                    if not np.all(np.isfinite(delta)):
                        raise np.linalg.LinAlgError("non-finite step")
                except np.linalg.LinAlgError:
                    lam *= params.lm_lambda_factor
                    retries += 1
                    report.damping_retries += 1
                    if retries > params.max_damping_retries:
                        raise SingularNormalEquations("normal equations stayed singular", retries) from None
                    continue
                trial = dict(poses)
                for c, s in slot.items():
                    trial[c] = perturb(poses[c], delta[6 * s:6 * s + 6])
                e_trial = total_energy(trial, corrs, kernel, scale)
                if e_trial <= energy:
                    poses, energy = trial, e_trial
                    lam = max(lam / params.lm_lambda_factor, 1e-15)
                    accepted = True
                    steps.append(energy)
                    break
                lam *= params.lm_lambda_factor
                retries += 1
            if not accepted or steps[-2] - steps[-1] <= params.rel_tol * max(steps[-2], 1e-300):
                break
        report.step_energies.append(steps)
        report.energies.append(energy)
        rot = max(poses[c].rotation_angle_to(start[c]) for c in free)
        trans = max(poses[c].translation_distance_to(start[c]) for c in free)
        report.pose_updates.append((rot, trans))
        small = rot <= params.pose_tol and trans <= params.pose_tol * params.diameter
        if small or (prev is not None and abs(prev - energy) <= params.rel_tol * max(prev, 1e-300)):
            report.converged = True
            break
        prev = energy
        # the total grows as more pairs pass the rejection test, so compare
        # the mean energy per correspondence
        mean = energy / max(sum(len(c) for c in corrs), 1)
        if mean < best * (1.0 - params.rel_tol):
            best, stall = mean, 0
        else:
            stall += 1
            if stall >= params.stall_iters:
                report.converged = True
                break
    report.poses = poses
    return poses, report
