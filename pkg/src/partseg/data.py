"""Procedural synthetic shapes with exact part instances and symmetry groups.

Three categories: chairs (seat, back, paired legs, optional mirrored arms),
tables (round top with a rotational leg ring, or a rectangular top with two
translated leg pairs) and ladders (mirrored rails plus a translational rung
run). Symmetric members are sampled once on the generator part and copied
through the exact transform, so declared symmetry specs hold to floating
point accuracy. Shapes are normalized (centroid at origin, max radius 1)
before they leave the generator.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace

import numpy as np

from .geom import (
    GeometryError,
    PointCloud,
    SymKind,
    SymmetrySpec,
    canonicalize_spec,
    normalize_cloud,
    symmetry_transforms,
    transform_points,
)
from .hierarchy import Hierarchy, build_hierarchy, detect_symmetry_groups

CATEGORIES = ("chair", "table", "ladder")
SEMANTIC_CLASSES = ("seat", "back", "leg", "arm", "top", "rail", "rung")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeRecord:
    cloud: PointCloud
    instance_label: np.ndarray  # (N,) int64, a part id per point
    parts: tuple  # ((part_id, semantic_class), ...)
    symmetry_groups: tuple  # ((member_ids, SymmetrySpec), ...)
    category: str
    seed: int

    def part_rows(self, part_id: int) -> np.ndarray:
        return np.flatnonzero(self.instance_label == part_id)

    def part_cloud(self, part_id: int) -> PointCloud:
        return self.cloud.take(self.part_rows(part_id))

    def parts_as_clouds(self) -> list[tuple[int, PointCloud]]:
        return [(pid, self.part_cloud(pid)) for pid, _ in self.parts]

    def semantic_of(self, part_id: int) -> str:
        for pid, cls in self.parts:
            if pid == part_id:
                return cls
        raise KeyError(part_id)


# ---------------------------------------------------------------------------
# surface primitives


class _Box:
    def __init__(self, center, size):
        self.center = np.asarray(center, dtype=np.float64)
        self.size = np.asarray(size, dtype=np.float64)

    def area(self) -> float:
        w, d, h = self.size
        return 2.0 * (w * d + w * h + d * h)

    def sample(self, rng: np.random.Generator, n: int):
        w, d, h = self.size
        face_areas = np.array([d * h, d * h, w * h, w * h, w * d, w * d])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 3)) * self.size
        pos = u.copy()
        nrm = np.zeros((n, 3))
        for f in range(6):
            rows = faces == f
            ax, side = f // 2, 1.0 if f % 2 == 0 else -1.0
            pos[rows, ax] = side * self.size[ax] / 2.0
            nrm[rows, ax] = side
        return pos + self.center, nrm


class _Cylinder:
    """Vertical (z-axis) cylinder with caps."""

    def __init__(self, center, radius, height):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.height = float(height)

    def area(self) -> float:
        return 2.0 * np.pi * self.radius * self.height + 2.0 * np.pi * self.radius**2

    def sample(self, rng: np.random.Generator, n: int):
        side = 2.0 * np.pi * self.radius * self.height
        cap = np.pi * self.radius**2
        region = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        pos = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        on_side = region == 0
        pos[on_side, 0] = self.radius * np.cos(phi[on_side])
        pos[on_side, 1] = self.radius * np.sin(phi[on_side])
        pos[on_side, 2] = rng.uniform(-0.5, 0.5, size=on_side.sum()) * self.height
        nrm[on_side, 0] = np.cos(phi[on_side])
        nrm[on_side, 1] = np.sin(phi[on_side])
        for reg, side_z in ((1, 1.0), (2, -1.0)):
            rows = region == reg
            r = self.radius * np.sqrt(rng.uniform(size=rows.sum()))
            pos[rows, 0] = r * np.cos(phi[rows])
            pos[rows, 1] = r * np.sin(phi[rows])
            pos[rows, 2] = side_z * self.height / 2.0
            nrm[rows, 2] = side_z
        return pos + self.center, nrm


# ---------------------------------------------------------------------------
# category layouts


@dataclass
class _PartPlan:
    part_id: int
    semantic: str
    primitive: object


@dataclass
class _GroupPlan:
    member_ids: tuple  # generator first
    spec: SymmetrySpec


def _chair_plan(rng):
    leg_h = rng.uniform(0.45, 0.8)
    w, d = rng.uniform(0.9, 1.3), rng.uniform(0.9, 1.3)
    seat_t = rng.uniform(0.08, 0.14)
    back_t, back_h = rng.uniform(0.06, 0.12), rng.uniform(0.6, 1.1)
    lw = rng.uniform(0.07, 0.13)
    with_arms = rng.uniform() < 0.5

    x_off, y_off = w / 2 - lw / 2 - 0.02, d / 2 - lw / 2 - 0.02
    parts = [
        _PartPlan(0, "seat", _Box((0, 0, leg_h + seat_t / 2), (w, d, seat_t))),
        _PartPlan(1, "back", _Box((0, -d / 2 + back_t / 2, leg_h + seat_t + back_h / 2), (w, back_t, back_h))),
        _PartPlan(2, "leg", _Box((-x_off, y_off, leg_h / 2), (lw, lw, leg_h))),
        _PartPlan(3, "leg", _Box((x_off, y_off, leg_h / 2), (lw, lw, leg_h))),
        _PartPlan(4, "leg", _Box((-x_off, -y_off, leg_h / 2), (lw, lw, leg_h))),
        _PartPlan(5, "leg", _Box((x_off, -y_off, leg_h / 2), (lw, lw, leg_h))),
    ]
    tr = SymmetrySpec(SymKind.TRANSLATIONAL, np.zeros(3), (1, 0, 0), 2, 2 * x_off)
    groups = [_GroupPlan((2, 3), tr), _GroupPlan((4, 5), tr)]
    if with_arms:
        aw, ah = rng.uniform(0.06, 0.1), rng.uniform(0.25, 0.4)
        arm = _Box((-(w / 2 + aw / 2), 0.05 * d, leg_h + seat_t + ah / 2), (aw, 0.7 * d, ah))
        arm_r = _Box((w / 2 + aw / 2, 0.05 * d, leg_h + seat_t + ah / 2), (aw, 0.7 * d, ah))
        parts += [_PartPlan(6, "arm", arm), _PartPlan(7, "arm", arm_r)]
        groups.append(
            _GroupPlan((6, 7), SymmetrySpec(SymKind.REFLECTIVE, np.zeros(3), (1, 0, 0), 2))
        )
    return parts, groups


def _table_plan(rng):
    leg_h = rng.uniform(0.5, 0.9)
    if rng.uniform() < 0.5:
        top_r, top_t = rng.uniform(0.5, 0.85), rng.uniform(0.05, 0.1)
        fold = int(rng.integers(3, 7))
        leg_r = rng.uniform(0.04, 0.08)
        ring = top_r * rng.uniform(0.55, 0.8)
        parts = [_PartPlan(0, "top", _Cylinder((0, 0, leg_h + top_t / 2), top_r, top_t))]
        parts += [
            _PartPlan(k, "leg", _Cylinder((ring, 0, leg_h / 2), leg_r, leg_h))
            for k in range(1, fold + 1)
        ]
        spec = SymmetrySpec(SymKind.ROTATIONAL, np.zeros(3), (0, 0, 1), fold)
        return parts, [_GroupPlan(tuple(range(1, fold + 1)), spec)]
    w, d = rng.uniform(1.0, 1.6), rng.uniform(0.7, 1.2)
    top_t = rng.uniform(0.05, 0.1)
    lw = rng.uniform(0.06, 0.11)
    x_off, y_off = w / 2 - lw / 2 - 0.02, d / 2 - lw / 2 - 0.02
    parts = [
        _PartPlan(0, "top", _Box((0, 0, leg_h + top_t / 2), (w, d, top_t))),
        _PartPlan(1, "leg", _Box((-x_off, y_off, leg_h / 2), (lw, lw, leg_h))),
        _PartPlan(2, "leg", _Box((x_off, y_off, leg_h / 2), (lw, lw, leg_h))),
        _PartPlan(3, "leg", _Box((-x_off, -y_off, leg_h / 2), (lw, lw, leg_h))),
        _PartPlan(4, "leg", _Box((x_off, -y_off, leg_h / 2), (lw, lw, leg_h))),
    ]
    tr = SymmetrySpec(SymKind.TRANSLATIONAL, np.zeros(3), (1, 0, 0), 2, 2 * x_off)
    return parts, [_GroupPlan((1, 2), tr), _GroupPlan((3, 4), tr)]


def _ladder_plan(rng):
    height = rng.uniform(1.6, 2.4)
    rail_t = rng.uniform(0.05, 0.09)
    rx = rng.uniform(0.25, 0.45)
    n_rungs = int(rng.integers(3, 8))
    rung_t = rng.uniform(0.04, 0.07)
    z0 = 0.12 * height
    dz = 0.76 * height / (n_rungs - 1)
    parts = [
        _PartPlan(0, "rail", _Box((-rx, 0, height / 2), (rail_t, rail_t, height))),
        _PartPlan(1, "rail", _Box((rx, 0, height / 2), (rail_t, rail_t, height))),
    ]
    parts += [
        _PartPlan(2 + k, "rung", _Box((0, 0, z0 + k * dz), (2 * rx - rail_t, rung_t, rung_t)))
        for k in range(n_rungs)
    ]
    groups = [
        _GroupPlan((0, 1), SymmetrySpec(SymKind.REFLECTIVE, np.zeros(3), (1, 0, 0), 2)),
        _GroupPlan(
            tuple(range(2, 2 + n_rungs)),
            SymmetrySpec(SymKind.TRANSLATIONAL, np.zeros(3), (0, 0, 1), n_rungs, dz),
        ),
    ]
    return parts, groups


_PLANS = {"chair": _chair_plan, "table": _table_plan, "ladder": _ladder_plan}


# ---------------------------------------------------------------------------
# point-count allocation: group members share the generator's count exactly


def _allocate_counts(unit_weights: list[float], folds: list[int], n: int) -> list[int]:
    """Per-unit generator counts c_u >= 1 with sum(c_u * fold_u) == n.

    Proportional targets first, then a bounded search around them picks the
    exact-sum combination with minimal deviation (deterministic tie-break).
    """
    total_w = sum(unit_weights)
    targets = [n * w / total_w / f for w, f in zip(unit_weights, folds)]
    if n < sum(folds):
        raise DataError(f"need at least {sum(folds)} points, got {n}")
    for halfwidth in (3, 8, 32):
        windows = [
            range(max(1, int(t) - halfwidth), int(t) + halfwidth + 1) for t in targets
        ]
        best = None
        for combo in itertools.product(*windows):
            if sum(c * f for c, f in zip(combo, folds)) != n:
                continue
            dev = sum(abs(c - t) for c, t in zip(combo, targets))
            key = (dev, combo)
            if best is None or key < best:
                best = key
        if best is not None:
            return list(best[1])
    raise DataError(f"cannot allocate exactly {n} points over folds {folds}")


def generate_shape(category: str, seed: int, n_points: int = 2048) -> ShapeRecord:
    """One synthetic shape, bitwise deterministic per (category, seed, n)."""
    if category not in _PLANS:
        raise DataError(f"unknown category {category!r}, expected one of {CATEGORIES}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    parts, groups = _PLANS[category](rng)
    by_id = {p.part_id: p for p in parts}
    grouped = {pid for g in groups for pid in g.member_ids}

    units = []  # (member_ids, weight, fold)
    for g in groups:
        units.append((g.member_ids, by_id[g.member_ids[0]].primitive.area() * len(g.member_ids),
                      len(g.member_ids)))
    for p in parts:
        if p.part_id not in grouped:
            units.append(((p.part_id,), p.primitive.area(), 1))
    units.sort(key=lambda u: u[0][0])
    counts = _allocate_counts([u[1] for u in units], [u[2] for u in units], n_points)

    pos_of: dict[int, np.ndarray] = {}
    nrm_of: dict[int, np.ndarray] = {}
    for (member_ids, _, _), c in zip(units, counts):
        gen_pos, gen_nrm = by_id[member_ids[0]].primitive.sample(rng, c)
        spec = next((g.spec for g in groups if g.member_ids == member_ids), None)
        if spec is None:
            pos_of[member_ids[0]], nrm_of[member_ids[0]] = gen_pos, gen_nrm
            continue
        for pid, (r, t) in zip(member_ids, symmetry_transforms(spec)):
            pos_of[pid] = transform_points(gen_pos, r, t)
            nrm_of[pid] = gen_nrm @ r.T

    order = sorted(by_id)
    positions = np.concatenate([pos_of[pid] for pid in order])
    normals = np.concatenate([nrm_of[pid] for pid in order])
    labels = np.concatenate(
        [np.full(len(pos_of[pid]), pid, dtype=np.int64) for pid in order]
    )
    cloud = PointCloud(positions, normals, np.arange(n_points))
    cloud, center, scale_ = normalize_cloud(cloud)

    out_groups = []
    for g in groups:
        s = g.spec
        anchor = (np.asarray(s.anchor) - center) / scale_
        step = s.step / scale_ if s.kind is SymKind.TRANSLATIONAL else 0.0
        moved = SymmetrySpec(s.kind, anchor, s.direction, s.fold, step)
        out_groups.append((tuple(g.member_ids), canonicalize_spec(moved)))

    return ShapeRecord(
        cloud=cloud,
        instance_label=labels,
        parts=tuple((p.part_id, p.semantic) for p in sorted(parts, key=lambda q: q.part_id)),
        symmetry_groups=tuple(out_groups),
        category=category,
        seed=int(seed),
    )


def add_gaussian_noise(record: ShapeRecord, sigma: float, rng: np.random.Generator) -> ShapeRecord:
    """Perturb positions i.i.d.; labels, normals and groups untouched."""
    if sigma < 0:
        raise DataError(f"negative sigma {sigma}")
    if sigma == 0:
        return record
    noisy = record.cloud.positions + rng.normal(0.0, sigma, size=record.cloud.positions.shape)
    cloud = PointCloud(noisy, record.cloud.normals, record.cloud.orig_index)
    return replace(record, cloud=cloud)


def resample(record: ShapeRecord, n: int, seed: int = 0) -> ShapeRecord:
    """Resample to exactly n points, at least one per part, labels carried.

    Group members are subsampled in lockstep with their generator so the
    declared symmetry stays exact. ``n`` equal to the current size is the
    identity.
    """
    if n == len(record.cloud):
        return record
    rng = np.random.default_rng(np.random.PCG64(seed))
    grouped = {pid for members, _ in record.symmetry_groups for pid in members}
    units = [(members, len(members)) for members, _ in record.symmetry_groups]
    units += [((pid,), 1) for pid, _ in record.parts if pid not in grouped]
    units.sort(key=lambda u: u[0][0])

    weights = [sum(len(record.part_rows(p)) for p in members) for members, _ in units]
    counts = _allocate_counts(weights, [f for _, f in units], n)

    keep_rows = []
    for (members, _), c in zip(units, counts):
        gen_rows = record.part_rows(members[0])
        if c <= len(gen_rows):
            pick = np.sort(rng.choice(len(gen_rows), size=c, replace=False))
        else:
            pick = np.sort(rng.choice(len(gen_rows), size=c, replace=True))
        for pid in members:
            rows = record.part_rows(pid)
            if len(rows) != len(gen_rows):
                raise DataError(f"group member {pid} lost sample correspondence")
            keep_rows.append(rows[pick])
    keep = np.concatenate(keep_rows)
    keep.sort()
    cloud = PointCloud(
        record.cloud.positions[keep], record.cloud.normals[keep], np.arange(len(keep))
    )
    return replace(record, cloud=cloud, instance_label=record.instance_label[keep])


def build_gt_hierarchy(record: ShapeRecord, detect: bool = False) -> Hierarchy:
    """Ground-truth tree for a record.

    Generated records carry their symmetry groups, which are used verbatim;
    ``detect=True`` forces geometric re-detection instead.
    """
    parts = record.parts_as_clouds()
    if detect or not record.symmetry_groups:
        groups = detect_symmetry_groups(parts)
    else:
        groups = list(record.symmetry_groups)
    return build_hierarchy(parts, groups, shape_id=f"{record.category}-{record.seed}")


# ---------------------------------------------------------------------------
# dataset I/O


def record_to_json(record: ShapeRecord) -> dict:
    cloud = record.cloud
    pts = np.concatenate([cloud.positions, cloud.normals], axis=1)
    return {
        "category": record.category,
        "seed": record.seed,
        "points": [[float(v) for v in row] for row in pts],
        "instance_label": [int(v) for v in record.instance_label],
        "parts": [{"id": pid, "class": cls} for pid, cls in record.parts],
        "groups": [
            {
                "members": [int(m) for m in members],
                "symmetry": {
                    "kind": spec.kind.value,
                    "anchor": [float(v) for v in spec.anchor],
                    "direction": [float(v) for v in spec.direction],
                    "fold": spec.fold,
                    "step": spec.step,
                },
            }
            for members, spec in record.symmetry_groups
        ],
    }


def record_from_json(obj: dict, source: str = "<record>") -> ShapeRecord:
    try:
        pts = np.asarray(obj["points"], dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 6:
            raise DataError(f"{source}: points must be Nx6")
        labels = np.asarray(obj["instance_label"], dtype=np.int64)
        cloud = PointCloud(pts[:, :3], pts[:, 3:], np.arange(len(pts)))
        parts = tuple((int(p["id"]), str(p["class"])) for p in obj["parts"])
        groups = []
        for g in obj.get("groups", []):
            s = g["symmetry"]
            groups.append(
                (
                    tuple(int(m) for m in g["members"]),
                    SymmetrySpec(SymKind(s["kind"]), s["anchor"], s["direction"],
                                 int(s["fold"]), float(s["step"])),
                )
            )
        return ShapeRecord(cloud, labels, parts, tuple(groups),
                           str(obj["category"]), int(obj["seed"]))
    except (KeyError, TypeError, GeometryError) as e:
        raise DataError(f"{source}: malformed record ({e})") from None


def save_record(record: ShapeRecord, path) -> None:
    with open(path, "w") as f:
        json.dump(record_to_json(record), f)


def load_record(path) -> ShapeRecord:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: line {e.lineno}: {e.msg}") from None
    return record_from_json(obj, source=str(path))


@dataclass(frozen=True)
class DatasetManifest:
    seed: int
    n_points: int
    train: tuple
    test: tuple

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "n_points": self.n_points,
            "train": list(self.train),
            "test": list(self.test),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(int(obj["seed"]), int(obj["n_points"]),
                   tuple(obj["train"]), tuple(obj["test"]))


def split_dataset(paths: list[str], ratio: float, seed: int, n_points: int) -> DatasetManifest:
    """Seeded disjoint train/test split, train share = round(ratio * N)."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must be in (0, 1), got {ratio}")
    order = np.random.default_rng(np.random.PCG64(seed)).permutation(len(paths))
    n_train = int(round(ratio * len(paths)))
    train = tuple(paths[i] for i in sorted(order[:n_train]))
    test = tuple(paths[i] for i in sorted(order[n_train:]))
    return DatasetManifest(seed, n_points, train, test)


def generate_dataset(categories, count: int, seed: int, n_points: int) -> list[ShapeRecord]:
    """Deterministic list of records, cycling through the categories."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    child_seeds = rng.integers(0, 2**62, size=count)
    return [
        generate_shape(categories[i % len(categories)], int(child_seeds[i]), n_points)
        for i in range(count)
    ]
