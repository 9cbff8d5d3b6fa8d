"""Point-cloud containers, symmetry transforms and set distances.

Everything here is pure: functions never mutate their inputs, and the
containers freeze their arrays after construction so clouds can be shared
across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

NORMAL_TOL = 1e-4
DIRECTION_TOL = 1e-6


class GeometryError(ValueError):
    """Raised for empty inputs or malformed geometric specs."""


class SymKind(enum.Enum):
    REFLECTIVE = "reflective"
    TRANSLATIONAL = "translational"
    ROTATIONAL = "rotational"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """N points with positions, unit normals and stable original indices.

    ``orig_index`` maps each point back to its row in the root shape, so
    recursive subsets always know which points of the full cloud they cover.
    """

    positions: np.ndarray  # (N, 3) float64
    normals: np.ndarray  # (N, 3) float64, unit length
    orig_index: np.ndarray  # (N,) int64, unique within one cloud

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        idx = np.asarray(self.orig_index, dtype=np.int64).reshape(-1)
        if not (len(pos) == len(nrm) == len(idx)):
            raise GeometryError(
                f"field lengths differ: positions {len(pos)}, normals {len(nrm)}, "
                f"orig_index {len(idx)}"
            )
        if not np.isfinite(pos).all() or not np.isfinite(nrm).all():
            raise GeometryError("non-finite coordinates")
        if len(nrm):
            lens = np.linalg.norm(nrm, axis=1)
            worst = np.abs(lens - 1.0).max()
            if worst > NORMAL_TOL:
                raise GeometryError(f"normals not unit length (max deviation {worst:.2g})")
        if len(np.unique(idx)) != len(idx):
            raise GeometryError("orig_index entries not unique")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "normals", _frozen(nrm))
        object.__setattr__(self, "orig_index", _frozen(idx))

    def __len__(self) -> int:
        return len(self.positions)

    def take(self, rows) -> "PointCloud":
        """Sub-cloud at the given row positions (orig_index carried along)."""
        rows = np.asarray(rows)
        return PointCloud(self.positions[rows], self.normals[rows], self.orig_index[rows])

    def centroid(self) -> np.ndarray:
        if not len(self):
            raise GeometryError("empty input")
        return self.positions.mean(axis=0)


@dataclass(frozen=True)
class SymmetrySpec:
    """Parameters of one symmetry relation (the payload of a symmetry node).

    ``direction`` is the plane normal (reflective), translation direction
    (translational) or rotation axis (rotational). ``fold`` counts copies
    including the generator; ``step`` is the translation spacing and is
    stored as 0 for the other kinds.
    """

    kind: SymKind
    anchor: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit length
    fold: int
    step: float = 0.0

    def __post_init__(self):
        anchor = np.asarray(self.anchor, dtype=np.float64).reshape(3)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not np.isfinite(anchor).all() or not np.isfinite(direction).all():
            raise GeometryError("non-finite symmetry parameters")
        n = np.linalg.norm(direction)
        if abs(n - 1.0) > DIRECTION_TOL:
            raise GeometryError(f"direction not unit length (norm {n:.8g})")
        if self.fold < 2:
            raise GeometryError(f"fold must be >= 2, got {self.fold}")
        if self.kind is SymKind.REFLECTIVE and self.fold != 2:
            raise GeometryError("reflective symmetry has fold 2")
        if self.kind is SymKind.TRANSLATIONAL and not self.step > 0:
            raise GeometryError("translational symmetry needs step > 0")
        object.__setattr__(self, "anchor", _frozen(anchor))
        object.__setattr__(self, "direction", _frozen(direction))
        object.__setattr__(self, "fold", int(self.fold))
        object.__setattr__(self, "step", float(self.step))


def canonical_direction(direction) -> np.ndarray:
    """Unit direction with its first nonzero component positive.

    Resolves the sign ambiguity of plane normals and rotation axes so that
    fitted specs serialize deterministically. Not applicable to translation
    directions, whose sign is meaningful.
    """
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    n = np.linalg.norm(d)
    if n < DIRECTION_TOL:
        raise GeometryError("zero direction")
    d = d / n
    for c in d:
        if abs(c) > 1e-9:
            return d if c > 0 else -d
    raise GeometryError("zero direction")


def canonicalize_spec(spec: SymmetrySpec) -> SymmetrySpec:
    """Unique representative of an equivalent family of specs.

    Reflective/rotational directions get a canonical sign and the anchor is
    moved to the point of the plane/axis closest to the origin; the unused
    translational anchor collapses to 0. Regression targets are built from
    canonicalized specs so the same relation always maps to the same vector.
    """
    if spec.kind is SymKind.REFLECTIVE:
        d = canonical_direction(spec.direction)
        anchor = np.dot(spec.anchor, d) * d
        return SymmetrySpec(spec.kind, anchor, d, 2, 0.0)
    if spec.kind is SymKind.ROTATIONAL:
        d = canonical_direction(spec.direction)
        anchor = spec.anchor - np.dot(spec.anchor, d) * d
        return SymmetrySpec(spec.kind, anchor, d, spec.fold, 0.0)
    d = np.asarray(spec.direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return SymmetrySpec(spec.kind, np.zeros(3), d, spec.fold, spec.step)


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = np.asarray(axis, dtype=np.float64).reshape(3)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.cos(angle) * np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * np.outer(k, k)


def symmetry_transforms(spec: SymmetrySpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """The ``fold`` rigid maps (R, t) of a spec; element 0 is the identity."""
    out = [(np.eye(3), np.zeros(3))]
    if spec.kind is SymKind.REFLECTIVE:
        n = spec.direction
        r = np.eye(3) - 2.0 * np.outer(n, n)
        out.append((r, 2.0 * np.dot(spec.anchor, n) * n))
    elif spec.kind is SymKind.ROTATIONAL:
        for k in range(1, spec.fold):
            r = rotation_matrix(spec.direction, 2.0 * np.pi * k / spec.fold)
            out.append((r, spec.anchor - r @ spec.anchor))
    else:
        for k in range(1, spec.fold):
            out.append((np.eye(3), k * spec.step * spec.direction))
    return out


def transform_points(positions: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    return positions @ r.T + t


def apply_symmetry(generator: PointCloud, spec: SymmetrySpec) -> list[PointCloud]:
    """All ``fold`` copies of the generator under the spec's transforms.

    Copy 0 is the generator itself; normals are mapped by the linear part of
    each transform. Copies keep the generator's orig_index (they are separate
    clouds, not subsets of one).
    """
    if not len(generator):
        raise GeometryError("empty input")
    copies = [generator]
    for r, t in symmetry_transforms(spec)[1:]:
        copies.append(
            PointCloud(
                transform_points(generator.positions, r, t),
                generator.normals @ r.T,
                generator.orig_index,
            )
        )
    return copies


def normalize_cloud(cloud: PointCloud):
    """Center the cloud at its centroid and scale the max radius to 1.

    Returns ``(normalized, center, scale)`` where ``center`` and ``scale``
    invert the transform (original = normalized * scale + center). Normals
    are untouched. Degenerate single-position clouds keep scale 1.
    """
    if not len(cloud):
        raise GeometryError("empty input")
    center = cloud.positions.mean(axis=0)
    shifted = cloud.positions - center
    scale = float(np.linalg.norm(shifted, axis=1).max())
    if scale <= 0.0:
        scale = 1.0
    return (
        PointCloud(shifted / scale, cloud.normals, cloud.orig_index),
        center,
        scale,
    )


def min_set_distance(a: PointCloud, b: PointCloud) -> float:
    """Minimum Euclidean distance over all cross pairs of two clouds."""
    if not len(a) or not len(b):
        raise GeometryError("empty input")
    d, _ = cKDTree(b.positions).query(a.positions, k=1)
    return float(d.min())


def nearest_source_rows(targets: np.ndarray, source: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Row of the nearest source point for every target point.

    Brute-force argmin so distance ties resolve to the smallest source row
    regardless of build order (kd-tree tie behavior is unspecified).
    """
    out = np.empty(len(targets), dtype=np.int64)
    for lo in range(0, len(targets), chunk):
        block = targets[lo : lo + chunk]
        d2 = ((block[:, None, :] - source[None, :, :]) ** 2).sum(axis=2)
        out[lo : lo + chunk] = d2.argmin(axis=1)
    return out


def nn_label_transfer(targets: PointCloud, source: PointCloud, labels) -> np.ndarray:
    """Label every target point with the label of its nearest source point."""
    if not len(source):
        raise GeometryError("empty input")
    labels = np.asarray(labels)
    if len(labels) != len(source):
        raise GeometryError(f"{len(source)} source points but {len(labels)} labels")
    if not len(targets):
        return labels[:0]
    return labels[nearest_source_rows(targets.positions, source.positions)]
