"""Local implicit voting for model detection in a single scan.

Each scene reference point pairs with every other scene sample. Every pair
feature is soft-quantized into ``K`` codebook keys of weight ``1/K``; every
entry of a hit bucket of size ``N_b`` then adds ``1/(K N_b)`` to the
reference's private ``(model point, alpha)`` accumulator. The accumulator
maximum of each reference is one pose hypothesis, and hypotheses are
clustered greedily by vote mass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySpace, NoHypotheses
from .geometry import OrientedPointCloud, Pose, quaternion_to_rotation, rotation_to_quaternion, sample_uniform
from .ppf import (
    Codebook,
    QuantizedPPF,
    alpha_batch,
    lcf_rotations,
    pack_keys,
    ppf_batch,
    rotation_about_x_batch,
)


@dataclass
class DetectorParams:
    K: int = 4
    n_alpha_bins: int = 30
    ref_fraction: float = 0.2
    cluster_rot_thresh: float = np.deg2rad(12.0)
    # None means 0.1 * model diameter
    cluster_trans_thresh: float | None = None
    # references processed per vectorized batch
    batch_size: int = 16

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.n_alpha_bins < 8:
            raise ValueError("n_alpha_bins must be >= 8")
        if not 0 < self.ref_fraction <= 1:
            raise ValueError("ref_fraction must lie in (0, 1]")


@dataclass
class PoseHypothesis:
    pose: Pose  # model -> scene
    vote_mass: float
    source_ref_index: int


@dataclass
class PoseCluster:
    mean_pose: Pose  # model -> scene
    total_mass: float
    member_count: int


@dataclass
class VoteSpace:
    votes: np.ndarray  # (n_model_samples, n_alpha_bins)

    @property
    def total_mass(self):
        return float(self.votes.sum())

    @property
    def n_alpha_bins(self):
        return self.votes.shape[1]


def alpha_bin(alpha, n_bins):
    """Periodic bin of an angle; bin 0 starts at -pi, so +pi falls in bin 0 too."""
    b = np.floor((np.asarray(alpha, float) + np.pi) * (n_bins / (2 * np.pi))).astype(np.int64)
    return np.mod(b, n_bins)


def alpha_bin_center(b, n_bins):
    return -np.pi + (np.asarray(b, float) + 0.5) * (2 * np.pi / n_bins)


def soft_quantize_batch(f, codebook: Codebook, K):
    """Soft keys of feature rows ``f`` ``(M, 4)``.

    Returns packed keys ``(M, K)`` (``-1`` marks an unused slot) and matching
    weights. Besides the base bin, up to ``K - 1`` single-axis neighbours are
    activated, taking first the axes whose un-floored coordinate lies closest
    to a bin boundary. Neighbours falling off the grid are skipped; weights
    are uniform over the keys actually produced.
    """
    f = np.asarray(f, dtype=float).reshape(-1, 4)
    M = len(f)
    n_dist, n_ang = codebook.n_dist_bins, codebook.n_angle_bins
    limits = np.array([n_dist, n_ang, n_ang, n_ang])
    coord = f / np.array([codebook.dist_step, codebook.angle_step, codebook.angle_step, codebook.angle_step])
    base = np.floor(coord).astype(np.int64)
    base[:, 1:] = np.minimum(base[:, 1:], n_ang - 1)
    frac = coord - base
    in_range = base[:, 0] < n_dist

    keys = np.full((M, K), -1, dtype=np.int64)
    keys[:, 0] = np.where(in_range, pack_keys(base, n_ang), -1)
    if K > 1:
        direction = np.where(frac >= 0.5, 1, -1)
        proximity = np.minimum(frac, 1.0 - frac)
        rank = np.argsort(proximity, axis=1, kind="stable")
        filled = np.ones(M, dtype=np.int64)
        rows = np.arange(M)
        for r in range(4):
            dim = rank[:, r]
            nb = base.copy()
            nb[rows, dim] += direction[rows, dim]
            ok = in_range & (filled < K) & (nb[rows, dim] >= 0) & (nb[rows, dim] < limits[dim])
            slot = np.minimum(filled, K - 1)
            keys[rows[ok], slot[ok]] = pack_keys(nb[ok], n_ang)
            filled += ok
    used = keys >= 0
    n_used = used.sum(axis=1, keepdims=True)
    weights = np.where(used, 1.0 / np.maximum(n_used, 1), 0.0)
    return keys, weights


def soft_quantize(f, codebook: Codebook, params: DetectorParams) -> list[tuple[QuantizedPPF, float]]:
    from .ppf import unpack_keys

    keys, weights = soft_quantize_batch(np.asarray(f, float)[None], codebook, params.K)
    out = []
    for k, w in zip(keys[0], weights[0]):
        if k >= 0:
            out.append((QuantizedPPF(*map(int, unpack_keys(k, codebook.n_angle_bins))), float(w)))
    return out


def _cast_votes(scene: OrientedPointCloud, refs, codebook: Codebook, params: DetectorParams, feature_jitter=0.0,
                rng=None):
    """Dense accumulators ``(len(refs), n_model, n_alpha)`` for a batch of references.

    ``feature_jitter`` adds uniform noise of that many bins (per axis, in
    ``[-j, j]``) to every pair feature before quantization. It is a probe
    for quantization robustness and is off in normal use.
    """
    P, N = scene.points, scene.normals
    n_model, n_alpha = codebook.n_samples, params.n_alpha_bins
    refs = np.asarray(refs, dtype=np.int64)
    B, n = len(refs), len(P)
    acc = np.zeros(B * n_model * n_alpha)
    if n < 2 or len(codebook.keys) == 0:
        return acc.reshape(B, n_model, n_alpha)

    pair_ref = np.repeat(np.arange(B), n)
    pair_other = np.tile(np.arange(n), B)
    keep = pair_other != refs[pair_ref]
    pair_ref, pair_other = pair_ref[keep], pair_other[keep]
    r_idx = refs[pair_ref]
    d = np.linalg.norm(P[r_idx] - P[pair_other], axis=1)
    near = d < codebook.n_dist_bins * codebook.dist_step
    pair_ref, pair_other, r_idx = pair_ref[near], pair_other[near], r_idx[near]
    if len(pair_ref) == 0:
        return acc.reshape(B, n_model, n_alpha)

    f = ppf_batch(P[r_idx], N[r_idx], P[pair_other], N[pair_other])
    if feature_jitter > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        steps = np.array([codebook.dist_step] + [codebook.angle_step] * 3)
        f = f + rng.uniform(-feature_jitter, feature_jitter, f.shape) * steps
    keys, weights = soft_quantize_batch(f, codebook, params.K)
    R_ref = lcf_rotations(N[refs])
    alpha_scene = alpha_batch(P[r_idx], R_ref[pair_ref], P[pair_other])

    K = keys.shape[1]
    flat_keys = keys.ravel()
    flat_w = weights.ravel()
    flat_pair = np.repeat(np.arange(len(f)), K)
    bucket = np.where(flat_keys >= 0, codebook.lookup_keys(np.maximum(flat_keys, 0)), -1)
    hit = bucket >= 0
    bucket, flat_w, flat_pair = bucket[hit], flat_w[hit], flat_pair[hit]
    if len(bucket) == 0:
        return acc.reshape(B, n_model, n_alpha)

    counts = codebook.counts[bucket]
    starts = codebook.starts[bucket]
    total = int(counts.sum())
    offsets = np.cumsum(counts) - counts
    entry = np.repeat(starts - offsets, counts) + np.arange(total)
    activation = np.repeat(np.arange(len(bucket)), counts)
    vote_w = (flat_w / counts)[activation]
    pair = flat_pair[activation]
    # the difference lies in (-2pi, 2pi); periodic binning wraps it
    col = alpha_bin(codebook.entry_alpha[entry] - alpha_scene[pair], n_alpha)
    cell = (pair_ref[pair] * n_model + codebook.entry_ref[entry]) * n_alpha + col
    acc += np.bincount(cell, weights=vote_w, minlength=len(acc))
    return acc.reshape(B, n_model, n_alpha)


def vote_reference(scene: OrientedPointCloud, r, codebook: Codebook, params: DetectorParams, feature_jitter=0.0,
                   rng=None) -> VoteSpace:
    """Accumulator of one scene reference point (``scene`` already sampled)."""
    return VoteSpace(_cast_votes(scene, [r], codebook, params, feature_jitter, rng)[0])


def self_match_recovery(codebook: Codebook, K, feature_jitter=0.0, seed=0, batch=32) -> float:
    """Fraction of references whose accumulator argmax row is the reference itself.

    The scene is the codebook's own sampled model, so every scene pair has
    an exact twin in the table.
    """
    params = DetectorParams(K=K)
    scene = codebook.sampled_model
    rng = np.random.default_rng(seed)
    hits = 0
    for b in range(0, codebook.n_samples, batch):
        refs = np.arange(b, min(b + batch, codebook.n_samples))
        acc = _cast_votes(scene, refs, codebook, params, feature_jitter, rng)
        rows = acc.reshape(len(refs), -1).argmax(axis=1) // params.n_alpha_bins
        hits += int((rows == refs).sum())
    return hits / codebook.n_samples


def extract_local_max(v: VoteSpace):
    """``(model index, alpha bin centre, mass)`` of the accumulator maximum.

    Ties go to the lowest ``(row, col)``.
    """
    if not v.votes.any():
        raise EmptySpace("vote space is empty")
    flat = int(np.argmax(v.votes))
    m, b = divmod(flat, v.n_alpha_bins)
    return m, float(alpha_bin_center(b, v.n_alpha_bins)), float(v.votes[m, b])


def pose_from_correspondence(s_point, s_normal, m_point, m_normal, alpha) -> Pose:
    """Model -> scene pose aligning ``m`` onto ``s`` with residual rotation ``alpha`` about the normal."""
    Rs = lcf_rotations(np.asarray(s_normal, float)[None])[0]
    Rm = lcf_rotations(np.asarray(m_normal, float)[None])[0]
    R = Rs.T @ rotation_about_x_batch(np.array([alpha]))[0] @ Rm
    t = np.asarray(s_point, float) - R @ np.asarray(m_point, float)
    return Pose(R, t)


def _poses_from_correspondences(s_pts, s_nrm, m_pts, m_nrm, alphas):
    Rs = lcf_rotations(s_nrm)
    Rm = lcf_rotations(m_nrm)
    R = np.transpose(Rs, (0, 2, 1)) @ rotation_about_x_batch(alphas) @ Rm
    t = s_pts - np.einsum("nij,nj->ni", R, m_pts)
    return R, t


def reference_indices(n_samples, ref_fraction):
    step = max(int(np.ceil(1.0 / ref_fraction - 1e-12)), 1)
    return np.arange(0, n_samples, step)


def hypotheses(scene_samples: OrientedPointCloud, codebook: Codebook, params: DetectorParams) -> list[PoseHypothesis]:
    """One hypothesis per reference point with a non-empty accumulator."""
    refs = reference_indices(len(scene_samples), params.ref_fraction)
    M = codebook.sampled_model
    out = []
    for start in range(0, len(refs), params.batch_size):
        batch = refs[start : start + params.batch_size]
        acc = _cast_votes(scene_samples, batch, codebook, params)
        flat = acc.reshape(len(batch), -1)
        best = np.argmax(flat, axis=1)
        mass = flat[np.arange(len(batch)), best]
        live = mass > 0
        if not live.any():
            continue
        m_idx, col = np.divmod(best[live], params.n_alpha_bins)
        r_idx = batch[live]
        R, t = _poses_from_correspondences(
            scene_samples.points[r_idx],
            scene_samples.normals[r_idx],
            M.points[m_idx],
            M.normals[m_idx],
            alpha_bin_center(col, params.n_alpha_bins),
        )
        for k in range(len(r_idx)):
            out.append(PoseHypothesis(Pose(R[k], t[k]), float(mass[live][k]), int(r_idx[k])))
    return out


def cluster_poses(hyps: list[PoseHypothesis], rot_thresh, trans_thresh) -> list[PoseCluster]:
    """Greedy clustering in order of decreasing vote mass.

    A hypothesis joins the first cluster whose running mean lies within both
    thresholds, otherwise it opens a new cluster. Means are mass-weighted:
    translations averaged, quaternions sign-aligned to the cluster's first
    member and averaged.
    """
    order = sorted(range(len(hyps)), key=lambda i: (-hyps[i].vote_mass, hyps[i].source_ref_index, i))
    n = len(hyps)
    mean_R = np.empty((n, 3, 3))
    mean_t = np.empty((n, 3))
    q_ref = np.empty((n, 4))
    q_sum = np.zeros((n, 4))
    t_sum = np.zeros((n, 3))
    mass = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    n_clusters = 0
    cos_thresh = np.cos(rot_thresh)
    for i in order:
        h = hyps[i]
        R, t, w = h.pose.rotation, h.pose.translation, h.vote_mass
        c = -1
        if n_clusters:
            # cos(angle) = (trace(Rc^T R) - 1) / 2
            cos = 0.5 * (np.einsum("kij,ij->k", mean_R[:n_clusters], R) - 1.0)
            near = np.linalg.norm(mean_t[:n_clusters] - t, axis=1) < trans_thresh
            hit = np.flatnonzero((cos > cos_thresh) & near)
            if len(hit):
                c = int(hit[0])
        q = rotation_to_quaternion(R)
        if c < 0:
            c = n_clusters
            n_clusters += 1
            q_ref[c] = q
        if q @ q_ref[c] < 0:
            q = -q
        q_sum[c] += w * q
        t_sum[c] += w * t
        mass[c] += w
        count[c] += 1
        mean_R[c] = quaternion_to_rotation(q_sum[c])
        mean_t[c] = t_sum[c] / mass[c]
    out = [PoseCluster(Pose(mean_R[c], mean_t[c]), float(mass[c]), int(count[c])) for c in range(n_clusters)]
    out.sort(key=lambda c: -c.total_mass)
    return out


def detect(scene: OrientedPointCloud, codebook: Codebook, params: DetectorParams | None = None) -> list[PoseCluster]:
    """Pose clusters of the model in ``scene``, strongest first."""
    params = params or DetectorParams()
    if len(scene) == 0:
        raise NoHypotheses("scene is empty")
    samples = sample_uniform(scene, codebook.dist_step)
    hyps = hypotheses(samples, codebook, params)
    if not hyps:
        raise NoHypotheses("no reference point received any vote")
    trans = params.cluster_trans_thresh
    if trans is None:
        trans = 0.1 * codebook.model_diameter
    return cluster_poses(hyps, params.cluster_rot_thresh, trans)
