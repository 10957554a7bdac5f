"""Point pair features and the model hashtable they index.

A trained :class:`Codebook` maps every quantized feature of the sampled
model to the list of ``(reference point, alpha)`` entries that produced it.
``alpha`` is the rotation about the +x axis that brings the paired point
into the half-plane ``z == 0, y > 0`` once the reference point sits at the
origin with its normal along +x. Detection has to use the very same
convention, so both sides go through :func:`alpha_batch`.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import CoincidentPoints, DegeneratePair, EmptyModel, MalformedFile, TooFewSamples
from .geometry import OrientedPointCloud, Pose, TriMesh, diameter, sample_surface, sample_uniform

MAGIC = b"PPFC"
VERSION = 1
DEFAULT_ANGLE_STEP = np.pi / 15


class PPF(NamedTuple):
    dist: float
    angle_nd1: float
    angle_nd2: float
    angle_nn: float


class QuantizedPPF(NamedTuple):
    dist: int
    angle_nd1: int
    angle_nd2: int
    angle_nn: int


class CodebookEntry(NamedTuple):
    model_ref_index: int
    alpha_model: float


def _angle(u, v):
    """Unsigned angle between row vectors, robust near 0 and pi."""
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = np.einsum("...i,...i->...", u, v)
    return np.arctan2(cross, dot)


def ppf_batch(p1, n1, p2, n2):
    """Features of pairs ``(p1, p2)``; inputs broadcast over leading axes.

    Returns an ``(..., 4)`` array ``(|d|, angle(n1, d), angle(n2, d), angle(n1, n2))``
    with ``d = p1 - p2``.
    """
    d = np.asarray(p1, float) - np.asarray(p2, float)
    n1 = np.broadcast_to(np.asarray(n1, float), d.shape)
    n2 = np.broadcast_to(np.asarray(n2, float), d.shape)
    dist = np.linalg.norm(d, axis=-1)
    return np.stack([dist, _angle(n1, d), _angle(n2, d), _angle(n1, n2)], axis=-1)


def compute_ppf(p1, n1, p2, n2) -> PPF:
    d = np.asarray(p1, float) - np.asarray(p2, float)
    if np.linalg.norm(d) < 1e-12:
        raise CoincidentPoints("point pair feature of coincident points is undefined")
    return PPF(*(float(x) for x in ppf_batch(p1, n1, p2, n2)))


def quantize(f, dist_step, angle_step) -> QuantizedPPF:
    """Floor each component; an angle of exactly pi stays in the top bin."""
    if dist_step <= 0 or angle_step <= 0:
        raise ValueError("quantization steps must be positive")
    n_angle = int(round(np.pi / angle_step))
    q = quantize_batch(np.asarray(f, float)[None], dist_step, angle_step, n_angle)[0]
    return QuantizedPPF(*(int(x) for x in q))


def quantize_batch(f, dist_step, angle_step, n_angle_bins, n_dist_bins=None):
    f = np.asarray(f, dtype=float)
    q = np.empty(f.shape, dtype=np.int64)
    q[..., 0] = np.floor(f[..., 0] / dist_step)
    if n_dist_bins is not None:
        q[..., 0] = np.minimum(q[..., 0], n_dist_bins - 1)
    q[..., 1:] = np.minimum(np.floor(f[..., 1:] / angle_step), n_angle_bins - 1)
    return q


def pack_keys(q, n_angle_bins):
    """Injective packing of four bin indices into one int64."""
    q = np.asarray(q, dtype=np.int64)
    A = n_angle_bins
    return ((q[..., 0] * A + q[..., 1]) * A + q[..., 2]) * A + q[..., 3]


def unpack_keys(keys, n_angle_bins):
    keys = np.asarray(keys, dtype=np.int64)
    A = n_angle_bins
    a3 = keys % A
    a2 = (keys // A) % A
    a1 = (keys // (A * A)) % A
    d = keys // (A * A * A)
    return np.stack([d, a1, a2, a3], axis=-1)


def lcf_rotations(normals):
    """Rotations ``R`` with ``R @ n == +x``, one per row of ``normals``.

    Uses the minimal rotation; normals within 1e-9 of ``-x`` use a half
    turn about +z instead.
    """
    n = np.asarray(normals, dtype=float).reshape(-1, 3)
    c = n[:, 0]
    # v = n x e_x = (0, n_z, -n_y)
    vx = np.zeros(len(n))
    vy, vz = n[:, 2], -n[:, 1]
    K = np.zeros((len(n), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -vz, vy
    K[:, 1, 0], K[:, 1, 2] = vz, -vx
    K[:, 2, 0], K[:, 2, 1] = -vy, vx
    anti = c < -1.0 + 1e-9
    denom = np.where(anti, 1.0, 1.0 + c)
    R = np.eye(3)[None] + K + (K @ K) / denom[:, None, None]
    R[anti] = np.diag([-1.0, -1.0, 1.0])
    return R


def lcf_pose(point, normal) -> Pose:
    """Frame moving ``point`` to the origin with ``normal`` along +x."""
    R = lcf_rotations(np.asarray(normal, float)[None])[0]
    return Pose(R, -R @ np.asarray(point, float))


def alpha_batch(ref_p, ref_R, paired_p):
    """Alpha for pairs sharing a reference point whose LCF rotation is ``ref_R``.

    ``paired_p`` may be ``(N, 3)``; ``ref_p``/``ref_R`` broadcast or match row-wise.
    """
    local = np.einsum("...ij,...j->...i", ref_R, np.asarray(paired_p, float) - ref_p)
    a = np.arctan2(-local[..., 2], local[..., 1])
    return np.where(a <= -np.pi, np.pi, a)


def compute_alpha(ref_p, ref_n, paired_p) -> float:
    R = lcf_rotations(np.asarray(ref_n, float)[None])[0]
    local = R @ (np.asarray(paired_p, float) - np.asarray(ref_p, float))
    if np.hypot(local[1], local[2]) < 1e-9:
        raise DegeneratePair("paired point lies on the reference normal axis")
    return float(alpha_batch(np.asarray(ref_p, float), R, np.asarray(paired_p, float)))


def rotation_about_x_batch(angles):
    a = np.asarray(angles, dtype=float).reshape(-1)
    c, s = np.cos(a), np.sin(a)
    R = np.zeros((len(a), 3, 3))
    R[:, 0, 0] = 1.0
    R[:, 1, 1], R[:, 1, 2] = c, -s
    R[:, 2, 1], R[:, 2, 2] = s, c
    return R


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w <= -np.pi, np.pi, w)


@dataclass(eq=False)
class Codebook:
    """Hashtable from quantized pair features to model ``(ref, alpha)`` entries.

    Buckets are stored flat: ``keys`` is sorted and unique, bucket ``b`` owns
    entries ``starts[b] : starts[b] + counts[b]`` of ``entry_ref``/``entry_alpha``.
    """

    sampled_model: OrientedPointCloud
    dist_step: float
    n_angle_bins: int
    model_diameter: float
    keys: np.ndarray
    counts: np.ndarray
    entry_ref: np.ndarray
    entry_alpha: np.ndarray

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.entry_ref = np.asarray(self.entry_ref, dtype=np.int64)
        self.entry_alpha = np.asarray(self.entry_alpha, dtype=float)
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)

    @property
    def angle_step(self):
        return np.pi / self.n_angle_bins

    @property
    def n_dist_bins(self):
        return max(int(np.ceil(self.model_diameter / self.dist_step - 1e-9)), 1)

    @property
    def n_samples(self):
        return len(self.sampled_model)

    @property
    def n_entries(self):
        return len(self.entry_ref)

    def quantize(self, f):
        return quantize_batch(f, self.dist_step, self.angle_step, self.n_angle_bins, self.n_dist_bins)

    def lookup_keys(self, keys):
        """Bucket position per packed key, ``-1`` where the bucket does not exist."""
        keys = np.asarray(keys, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos] == keys, pos, -1)

    def lookup(self, q) -> list[CodebookEntry]:
        """Entries stored under one :class:`QuantizedPPF`."""
        b = int(self.lookup_keys(pack_keys(np.asarray(q)[None], self.n_angle_bins))[0])
        if b < 0:
            return []
        s, c = self.starts[b], self.counts[b]
        return [CodebookEntry(int(r), float(a)) for r, a in zip(self.entry_ref[s : s + c], self.entry_alpha[s : s + c])]

    @property
    def table(self) -> dict[QuantizedPPF, list[CodebookEntry]]:
        out = {}
        for b, q in enumerate(unpack_keys(self.keys, self.n_angle_bins)):
            s, c = self.starts[b], self.counts[b]
            out[QuantizedPPF(*map(int, q))] = [
                CodebookEntry(int(r), float(a)) for r, a in zip(self.entry_ref[s : s + c], self.entry_alpha[s : s + c])
            ]
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        n = self.n_samples
        buf.write(MAGIC)
        buf.write(struct.pack("<IdId", VERSION, self.dist_step, self.n_angle_bins, self.model_diameter))
        buf.write(struct.pack("<I", n))
        buf.write(self.sampled_model.points.astype("<f8").tobytes())
        buf.write(self.sampled_model.normals.astype("<f8").tobytes())
        buf.write(struct.pack("<I", len(self.keys)))
        buf.write(unpack_keys(self.keys, self.n_angle_bins).astype("<u4").tobytes())
        buf.write(self.counts.astype("<u4").tobytes())
        buf.write(self.entry_ref.astype("<u4").tobytes())
        buf.write(self.entry_alpha.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        view = memoryview(data)
        pos = 0

        def take(nbytes, what):
            nonlocal pos
            if pos + nbytes > len(view):
                raise MalformedFile(f"codebook truncated while reading {what}", pos)
            chunk = view[pos : pos + nbytes]
            pos += nbytes
            return chunk

        if bytes(take(4, "magic")) != MAGIC:
            raise MalformedFile("not a PPFC codebook", 0)
        version, dist_step, n_angle, diam = struct.unpack("<IdId", take(24, "header"))
        if version != VERSION:
            raise MalformedFile(f"unsupported codebook version {version}", 4)
        (n,) = struct.unpack("<I", take(4, "sample count"))
        pts = np.frombuffer(take(24 * n, "points"), dtype="<f8").reshape(n, 3)
        nrm = np.frombuffer(take(24 * n, "normals"), dtype="<f8").reshape(n, 3)
        (nb,) = struct.unpack("<I", take(4, "bucket count"))
        q = np.frombuffer(take(16 * nb, "bucket keys"), dtype="<u4").reshape(nb, 4)
        counts = np.frombuffer(take(4 * nb, "bucket sizes"), dtype="<u4").astype(np.int64)
        total = int(counts.sum())
        refs = np.frombuffer(take(4 * total, "entry refs"), dtype="<u4").astype(np.int64)
        alphas = np.frombuffer(take(8 * total, "entry alphas"), dtype="<f8").astype(float)
        if pos != len(view):
            raise MalformedFile("trailing bytes after codebook", pos)
        return cls(
            OrientedPointCloud(pts, nrm),
            dist_step,
            n_angle,
            diam,
            pack_keys(q.astype(np.int64), n_angle),
            counts,
            refs,
            alphas,
        )

    def save(self, path):
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def sample_model(mesh: TriMesh, min_dist, seed=0, density=25.0) -> OrientedPointCloud:
    """Evenly spaced oriented samples of the mesh surface.

    Draws ``density`` random surface points per ``min_dist**2`` of area and
    thins them greedily; the seed makes the result reproducible.
    """
    area = float(mesh.face_areas().sum())
    n = int(np.clip(np.ceil(density * area / min_dist**2), 64, 2_000_000))
    dense = sample_surface(mesh, n, np.random.default_rng(seed))
    return sample_uniform(dense, min_dist)


def build_codebook(samples: OrientedPointCloud, dist_step, n_angle_bins, model_diameter) -> Codebook:
    """Insert every ordered pair ``(i, j), i != j`` of ``samples``."""
    P, N = samples.points, samples.normals
    n = len(P)
    angle_step = np.pi / n_angle_bins
    n_dist = max(int(np.ceil(model_diameter / dist_step - 1e-9)), 1)
    Rs = lcf_rotations(N)
    all_keys, all_ref, all_alpha = [], [], []
    others = np.arange(n)
    for i in range(n):
        j = others[others != i]
        f = ppf_batch(P[i], N[i], P[j], N[j])
        q = quantize_batch(f, dist_step, angle_step, n_angle_bins, n_dist)
        all_keys.append(pack_keys(q, n_angle_bins))
        all_ref.append(np.full(len(j), i, dtype=np.int64))
        all_alpha.append(alpha_batch(P[i], Rs[i], P[j]))
    keys = np.concatenate(all_keys)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    ukeys, counts = np.unique(keys, return_counts=True)
    return Codebook(
        samples,
        float(dist_step),
        int(n_angle_bins),
        float(model_diameter),
        ukeys,
        counts,
        np.concatenate(all_ref)[order],
        np.concatenate(all_alpha)[order],
    )


def train(model: TriMesh, tau=0.05, angle_step=DEFAULT_ANGLE_STEP, seed=0) -> Codebook:
    """Sample the model at ``tau * diameter`` and hash all of its point pairs."""
    if len(model.vertices) < 2 or len(model.faces) == 0:
        raise EmptyModel("model mesh has no geometry")
    if not 0 < tau < 0.2:
        raise ValueError(f"tau must lie in (0, 0.2), got {tau}")
    n_angle = int(round(np.pi / angle_step))
    if n_angle < 1:
        raise ValueError("angle_step must be at most pi")
    diam = diameter(model)
    step = tau * diam
    samples = sample_model(model, step, seed=seed)
    if len(samples) < 10:
        raise TooFewSamples(f"only {len(samples)} model samples at tau={tau}")
    return build_codebook(samples, step, n_angle, diam)
