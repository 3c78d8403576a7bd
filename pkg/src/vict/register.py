"""Closed-form rigid paired-landmark registration.

The fit minimizes the sum of squared residuals ||R s_k + t - g_k||^2
over rotations R and translations t via the cross-covariance SVD, with
the usual sign correction so a reflection can never be returned. No
scale is estimated: the reconstruction frame is already metric, and a
scale error should surface in the evaluation metrics, not be absorbed
here.
"""

from dataclasses import dataclass

import numpy as np

from .errors import RegistrationError
from .geomio import FiducialSet, TriMesh

_ROT_TOL = 1e-9
# collinear landmarks leave a rotation axis unconstrained
_DEGENERACY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation in SE(3)."""

    rotation: np.ndarray  # (3, 3), det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        t = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not np.allclose(r.T @ r, np.eye(3), rtol=0.0, atol=_ROT_TOL):
            raise RegistrationError("rotation is not orthonormal to within 1e-9")
        if abs(float(np.linalg.det(r)) - 1.0) > _ROT_TOL:
            raise RegistrationError("rotation determinant is not +1 (reflection rejected)")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4) or not np.allclose(m[3], [0, 0, 0, 1], rtol=0.0, atol=1e-12):
            raise RegistrationError("expected a 4x4 homogeneous rigid matrix")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """self applied after inner: (self . inner)(p) = self(inner(p))."""
        return RigidTransform(self.rotation @ inner.rotation, self.rotation @ inner.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians.

        Uses atan2 of the skew norm against the trace so angles near 0
        resolve to machine precision (arccos saturates around 1e-8
        there).
        """
        r = self.rotation
        skew = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        cos_term = (float(np.trace(r)) - 1.0) / 2.0
        return float(np.arctan2(np.linalg.norm(skew), cos_term))


@dataclass(frozen=True, eq=False)
class LandmarkPairs:
    """Labelled source/target point correspondences for the rigid fit."""

    pairs: tuple  # of (label, source (3,), target (3,))

    def __post_init__(self):
        norm = []
        for label, s, g in self.pairs:
            s = np.asarray(s, dtype=np.float64).reshape(3)
            g = np.asarray(g, dtype=np.float64).reshape(3)
            s.setflags(write=False)
            g.setflags(write=False)
            norm.append((str(label), s, g))
        object.__setattr__(self, "pairs", tuple(norm))
        if len(norm) < 3:
            raise RegistrationError(f"rigid registration needs at least 3 landmark pairs, got {len(norm)}")
        src = self.source()
        centered = src - src.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[1] <= _DEGENERACY_TOL:
            raise RegistrationError("source landmarks are collinear; rotation would be underdetermined")

    def __len__(self):
        return len(self.pairs)

    def source(self) -> np.ndarray:
        return np.array([s for _, s, _ in self.pairs], dtype=np.float64)

    def target(self) -> np.ndarray:
        return np.array([g for _, _, g in self.pairs], dtype=np.float64)


def pair_landmarks(source: FiducialSet, target: FiducialSet):
    """Match two fiducial sets by label.

    Returns (LandmarkPairs, skipped_labels); labels present on only one
    side are skipped, not guessed.
    """
    src = {label: p for label, p in source.points}
    dst = {label: p for label, p in target.points}
    common = [label for label in src if label in dst]
    skipped = sorted(set(src) ^ set(dst))
    pairs = LandmarkPairs(tuple((label, src[label], dst[label]) for label in common))
    return pairs, skipped


def fit_rigid(pairs: LandmarkPairs):
    """Least-squares rigid fit of source onto target landmarks.

    Returns (RigidTransform, fre) where fre is the RMS residual in mm.
    """
    src = pairs.source()
    dst = pairs.target()
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - r @ cs
    transform = RigidTransform(r, t)
    return transform, fre_against(transform, pairs)


def apply_transform(transform: RigidTransform, subject):
    """Map points, a mesh, or a fiducial set through a rigid transform."""
    r, t = transform.rotation, transform.translation
    if isinstance(subject, TriMesh):
        return TriMesh(subject.vertices @ r.T + t, subject.triangles)
    if isinstance(subject, FiducialSet):
        moved = tuple((label, r @ p + t) for label, p in subject.points)
        return FiducialSet(moved, subject.frame)
    pts = np.asarray(subject, dtype=np.float64)
    return pts @ r.T + t


def fre_against(transform: RigidTransform, pairs) -> float:
    """RMS landmark residual (mm) of a transform on given pairs.

    Accepts a :class:`LandmarkPairs` or a raw (source, target) array
    pair, so residuals can be probed on fewer points than a fit needs.
    """
    if isinstance(pairs, LandmarkPairs):
        src, dst = pairs.source(), pairs.target()
    else:
        src, dst = (np.asarray(x, dtype=np.float64).reshape(-1, 3) for x in pairs)
    if len(src) == 0:
        raise RegistrationError("cannot compute FRE of an empty pair list")
    res = apply_transform(transform, src) - dst
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
