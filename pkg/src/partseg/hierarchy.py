"""Ground-truth decomposition hierarchies over labeled part instances.

A hierarchy is a binary tree: adjacency nodes split their points into two
spatially separate children, symmetry nodes keep the symmetry generator
subtree as child 0 and the remaining symmetric counterparts as child 1
(plus the symmetry parameters as payload), and leaves carry one part
instance each. Construction is deterministic: symmetry groups collapse to
single units first, then units merge agglomeratively by minimum point-set
distance with fixed tie-breaking.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass

import numpy as np

from .geom import (
    GeometryError,
    PointCloud,
    SymKind,
    SymmetrySpec,
    apply_symmetry,
    canonical_direction,
    canonicalize_spec,
    min_set_distance,
    nearest_source_rows,
    symmetry_transforms,
    transform_points,
)


class HierarchyError(ValueError):
    pass


class HierarchyParseError(HierarchyError):
    """Malformed hierarchy document; message carries the location."""


class NodeKind(enum.Enum):
    ADJACENCY = "adjacency"
    SYMMETRY = "symmetry"
    LEAF = "leaf"


@dataclass(eq=False)
class HierNode:
    kind: NodeKind
    children: tuple  # () for leaves, (left, right) otherwise
    part_ids: frozenset
    point_ids: np.ndarray | None = None  # sorted orig indices, None until bound
    sym: SymmetrySpec | None = None

    @property
    def min_part_id(self) -> int:
        return min(self.part_ids)

    @property
    def is_leaf(self) -> bool:
        return self.kind is NodeKind.LEAF


@dataclass(eq=False)
class Hierarchy:
    root: HierNode
    shape_id: str = ""


def traversal_nodes(h: Hierarchy) -> list[HierNode]:
    """Nodes in the order the recursive model visits them.

    Top-down, left before right; a symmetry node descends only into its
    generator subtree (child 1 is reconstructed, never decomposed).
    """
    out: list[HierNode] = []

    def walk(n: HierNode):
        out.append(n)
        if n.kind is NodeKind.ADJACENCY:
            walk(n.children[0])
            walk(n.children[1])
        elif n.kind is NodeKind.SYMMETRY:
            walk(n.children[0])

    walk(h.root)
    return out


def all_nodes(h: Hierarchy) -> list[HierNode]:
    out: list[HierNode] = []

    def walk(n: HierNode):
        out.append(n)
        for c in n.children:
            walk(c)

    walk(h.root)
    return out


def _leaf(part_id: int, point_ids: np.ndarray) -> HierNode:
    return HierNode(NodeKind.LEAF, (), frozenset([part_id]), np.sort(point_ids))


def _merge(kind: NodeKind, left: HierNode, right: HierNode, sym=None) -> HierNode:
    pts = None
    if left.point_ids is not None and right.point_ids is not None:
        pts = np.union1d(left.point_ids, right.point_ids)
    return HierNode(kind, (left, right), left.part_ids | right.part_ids, pts, sym)


def _chain(leaves: list[HierNode]) -> HierNode:
    """Right-leaning adjacency chain; bookkeeping for symmetry counterparts."""
    if len(leaves) == 1:
        return leaves[0]
    return _merge(NodeKind.ADJACENCY, leaves[0], _chain(leaves[1:]))


# ---------------------------------------------------------------------------
# symmetry group detection (simplified, for clean part geometry)


def _congruence_signature(cloud: PointCloud):
    c = cloud.centroid()
    d = cloud.positions - c
    eig = np.sort(np.linalg.eigvalsh(d.T @ d / len(d)))
    return len(cloud), eig, float(np.linalg.norm(d, axis=1).mean())


def _match_residual(moved: np.ndarray, target: PointCloud) -> float:
    """Max distance from transformed generator points to their nearest target."""
    rows = nearest_source_rows(moved, target.positions)
    return float(np.linalg.norm(moved - target.positions[rows], axis=1).max())


def _verify_group(parts_by_id, member_ids, spec: SymmetrySpec, tol: float):
    """Each transform copy of the generator must match a distinct member."""
    gen = parts_by_id[member_ids[0]]
    remaining = list(member_ids[1:])
    for r, t in symmetry_transforms(spec)[1:]:
        moved = transform_points(gen.positions, r, t)
        best, best_id = None, None
        for pid in remaining:
            res = _match_residual(moved, parts_by_id[pid])
            if best is None or res < best:
                best, best_id = res, pid
        if best is None or best > tol:
            return False
        remaining.remove(best_id)
    return not remaining


def _try_rotational(parts_by_id, ids, tol, angle_tol_deg):
    m = len(ids)
    if m < 3:
        return None
    cents = np.array([parts_by_id[i].centroid() for i in ids])
    center = cents.mean(axis=0)
    rel = cents - center
    radii = np.linalg.norm(rel, axis=1)
    if radii.mean() < tol or np.abs(radii - radii.mean()).max() > tol:
        return None
    # axis = direction of least centroid scatter
    w, v = np.linalg.eigh(rel.T @ rel)
    axis = v[:, 0]
    if np.abs(rel @ axis).max() > tol:
        return None
    axis = canonical_direction(axis)
    u = rel[0] - np.dot(rel[0], axis) * axis
    u /= np.linalg.norm(u)
    w2 = np.cross(axis, u)
    ang = np.sort(np.arctan2(rel @ w2, rel @ u) % (2 * np.pi))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
    if np.abs(gaps - 2 * np.pi / m).max() > np.deg2rad(angle_tol_deg):
        return None
    spec = canonicalize_spec(SymmetrySpec(SymKind.ROTATIONAL, center, axis, m))
    return spec if _verify_group(parts_by_id, ids, spec, tol) else None


def _try_translational(parts_by_id, ids, tol, spacing_tol):
    m = len(ids)
    cents = np.array([parts_by_id[i].centroid() for i in ids])
    span = cents.max(axis=0) - cents.min(axis=0)
    if np.linalg.norm(span) < tol:
        return None
    d = span / np.linalg.norm(span)
    proj = cents @ d
    order = np.argsort(proj)
    # the generator convention puts the smallest part id at one end
    if order[0] != 0 and order[-1] != 0:
        return None
    if order[-1] == 0:
        order = order[::-1]
        d = -d
        proj = -proj
    line_res = np.linalg.norm(cents - (cents[order[0]] + (proj - proj[order[0]])[:, None] * d), axis=1)
    if line_res.max() > tol:
        return None
    spacing = np.diff(proj[order])
    step = float(spacing.mean())
    if step <= 0 or np.abs(spacing - step).max() > spacing_tol:
        return None
    ordered = [ids[k] for k in order]
    spec = SymmetrySpec(SymKind.TRANSLATIONAL, np.zeros(3), d, m, step)
    return (ordered, spec) if _verify_group(parts_by_id, ordered, spec, tol) else None


def _try_reflective(parts_by_id, i, j, tol):
    ci, cj = parts_by_id[i].centroid(), parts_by_id[j].centroid()
    gap = cj - ci
    if np.linalg.norm(gap) < tol:
        return None
    try:
        n = canonical_direction(gap)
    except GeometryError:
        return None
    spec = canonicalize_spec(SymmetrySpec(SymKind.REFLECTIVE, (ci + cj) / 2.0, n, 2))
    return spec if _verify_group(parts_by_id, (i, j), spec, tol) else None


def detect_symmetry_groups(
    parts: list[tuple[int, PointCloud]],
    tol: float = 0.02,
    angle_tol_deg: float = 2.0,
    spacing_tol: float = 0.02,
) -> list[tuple[tuple[int, ...], SymmetrySpec]]:
    """Group mutually congruent parts related by one symmetry pattern.

    Simplified deterministic procedure: parts are bucketed by congruence
    signature, each bucket first tries a whole-bucket rotational then
    translational fit, and leftovers are swept pairwise (reflective, then
    translational pairs). Every part joins at most one group. Nested
    group-of-group patterns are out of scope.
    """
    _check_disjoint(parts)
    parts_by_id = dict(parts)
    sigs = {pid: _congruence_signature(c) for pid, c in parts}

    def congruent(a, b):
        na, ea, ra = sigs[a]
        nb, eb, rb = sigs[b]
        return na == nb and np.abs(ea - eb).max() <= tol and abs(ra - rb) <= tol

    ids = sorted(parts_by_id)
    buckets: list[list[int]] = []
    for pid in ids:
        for b in buckets:
            if congruent(b[0], pid):
                b.append(pid)
                break
        else:
            buckets.append([pid])

    groups = []
    claimed: set[int] = set()
    for bucket in buckets:
        free = [i for i in bucket if i not in claimed]
        if len(free) >= 3:
            spec = _try_rotational(parts_by_id, free, tol, angle_tol_deg)
            if spec is not None:
                groups.append((tuple(free), spec))
                claimed.update(free)
                continue
            hit = _try_translational(parts_by_id, free, tol, spacing_tol)
            if hit is not None:
                ordered, spec = hit
                groups.append((tuple(ordered), spec))
                claimed.update(ordered)
                continue
        for i, j in itertools.combinations(free, 2):
            if i in claimed or j in claimed:
                continue
            spec = _try_reflective(parts_by_id, i, j, tol)
            if spec is not None:
                groups.append(((i, j), spec))
                claimed.update((i, j))
                continue
            hit = _try_translational(parts_by_id, [i, j], tol, spacing_tol)
            if hit is not None:
                ordered, spec = hit
                groups.append((tuple(ordered), spec))
                claimed.update((i, j))
    return sorted(groups, key=lambda g: min(g[0]))


def _check_disjoint(parts):
    if not parts:
        raise HierarchyError("empty part list")
    ids = [pid for pid, _ in parts]
    if len(set(ids)) != len(ids):
        raise HierarchyError("duplicate part ids")
    all_points = np.concatenate([c.orig_index for _, c in parts])
    if len(np.unique(all_points)) != len(all_points):
        raise HierarchyError("overlapping part point sets")


# ---------------------------------------------------------------------------
# construction


def build_hierarchy(
    parts: list[tuple[int, PointCloud]],
    groups: list[tuple[tuple[int, ...], SymmetrySpec]] | None = None,
    shape_id: str = "",
) -> Hierarchy:
    """Deterministic tree over part instances.

    Symmetry groups collapse into symmetry units (generator = smallest part
    id); units then merge agglomeratively, closest pair first, ties broken
    by the lexicographically smallest pair of unit part ids. The left child
    of every merge is the side containing the smallest part id.
    """
    _check_disjoint(parts)
    parts_by_id = dict(parts)
    groups = list(groups or [])

    grouped: set[int] = set()
    for members, _ in groups:
        for pid in members:
            if pid not in parts_by_id:
                raise HierarchyError(f"group references unknown part {pid}")
            if pid in grouped:
                raise HierarchyError(f"part {pid} is in more than one group")
            grouped.add(pid)

    units: list[tuple[HierNode, np.ndarray]] = []  # (node, covered positions)
    for members, spec in groups:
        members = tuple(sorted(members))
        gen = _leaf(members[0], parts_by_id[members[0]].orig_index)
        rest = _chain([_leaf(pid, parts_by_id[pid].orig_index) for pid in members[1:]])
        node = _merge(NodeKind.SYMMETRY, gen, rest, sym=spec)
        units.append((node, np.concatenate([parts_by_id[p].positions for p in members])))
    for pid in sorted(parts_by_id):
        if pid not in grouped:
            units.append((_leaf(pid, parts_by_id[pid].orig_index), parts_by_id[pid].positions))

    units.sort(key=lambda u: u[0].min_part_id)
    while len(units) > 1:
        best = None
        for a, b in itertools.combinations(range(len(units)), 2):
            d = _min_positions_distance(units[a][1], units[b][1])
            ia, ib = units[a][0].min_part_id, units[b][0].min_part_id
            key = (d, min(ia, ib), max(ia, ib))
            if best is None or key < best[0]:
                best = (key, a, b)
        _, a, b = best
        na, nb = units[a][0], units[b][0]
        left, right = (na, nb) if na.min_part_id < nb.min_part_id else (nb, na)
        merged = _merge(NodeKind.ADJACENCY, left, right)
        pos = np.concatenate([units[a][1], units[b][1]])
        units = [u for k, u in enumerate(units) if k not in (a, b)]
        units.append((merged, pos))
        units.sort(key=lambda u: u[0].min_part_id)
    return Hierarchy(units[0][0], shape_id)


def _min_positions_distance(a: np.ndarray, b: np.ndarray) -> float:
    ca = PointCloud(a, _unit_rows(len(a)), np.arange(len(a)))
    cb = PointCloud(b, _unit_rows(len(b)), np.arange(len(b)))
    return min_set_distance(ca, cb)


def _unit_rows(n: int) -> np.ndarray:
    # placeholder normals; set distances only look at positions
    u = np.zeros((n, 3))
    u[:, 0] = 1.0
    return u


# ---------------------------------------------------------------------------
# validation


def validate(h: Hierarchy, shape: PointCloud | None = None) -> list[str]:
    """All structural invariants; returns violation strings (empty = valid)."""
    bad: list[str] = []

    def walk(n: HierNode, path: str):
        if n.kind is NodeKind.LEAF:
            if n.children:
                bad.append(f"{path}: leaf with children")
            if len(n.part_ids) != 1:
                bad.append(f"{path}: leaf must cover exactly one part, has {sorted(n.part_ids)}")
            return
        if len(n.children) != 2:
            bad.append(f"{path}: internal node needs 2 children")
            return
        left, right = n.children
        if n.kind is NodeKind.SYMMETRY and n.sym is None:
            bad.append(f"{path}: symmetry node without parameters")
        if n.kind is NodeKind.ADJACENCY and n.sym is not None:
            bad.append(f"{path}: adjacency node carries symmetry parameters")
        if n.part_ids != left.part_ids | right.part_ids:
            bad.append(f"{path}: part_ids not the union of children")
        if left.part_ids & right.part_ids:
            bad.append(f"{path}: children share part ids")
        if left.part_ids and min(left.part_ids) != n.min_part_id:
            bad.append(f"{path}: left child must contain the smallest part id")
        if n.point_ids is not None and left.point_ids is not None and right.point_ids is not None:
            union = np.union1d(left.point_ids, right.point_ids)
            if len(left.point_ids) + len(right.point_ids) != len(union):
                bad.append(f"{path}: non-disjoint children")
            if len(union) != len(n.point_ids) or not np.array_equal(union, n.point_ids):
                bad.append(f"{path}: point_ids not the union of children")
        walk(left, path + ".children[0]")
        walk(right, path + ".children[1]")

    walk(h.root, "root")
    if shape is not None and h.root.point_ids is not None:
        want = np.sort(shape.orig_index)
        if len(want) != len(h.root.point_ids) or not np.array_equal(want, h.root.point_ids):
            bad.append("root: point_ids do not cover the shape exactly")
    return bad


def leaf_instance_labels(h: Hierarchy, n_points: int) -> np.ndarray:
    """Instance label per root point, read off the bound leaves."""
    out = np.full(n_points, -1, dtype=np.int64)
    for n in all_nodes(h):
        if n.is_leaf:
            if n.point_ids is None:
                raise HierarchyError("hierarchy is not bound to points")
            out[n.point_ids] = n.min_part_id
    if (out < 0).any():
        raise HierarchyError("leaves do not cover all points")
    return out


def expand_instances_geometric(h: Hierarchy, shape: PointCloud) -> np.ndarray:
    """Instance label per root point using the symmetry parameters.

    Counterpart points are labeled by nearest neighbor against the
    symmetry-transformed copies of the generator's labeled points, i.e. the
    same mechanism inference uses, instead of reading the stored counterpart
    leaves. With exact synthetic symmetry this reproduces the ground truth.
    """
    pos_of = {int(i): shape.positions[k] for k, i in enumerate(shape.orig_index)}
    out = np.full(int(shape.orig_index.max()) + 1, -1, dtype=np.int64)

    def label_subtree(n: HierNode) -> dict[int, int]:
        """point id -> instance id for the subtree's covered points."""
        if n.is_leaf:
            return {int(p): n.min_part_id for p in n.point_ids}
        if n.kind is NodeKind.ADJACENCY:
            got = label_subtree(n.children[0])
            got.update(label_subtree(n.children[1]))
            return got
        gen_labels = label_subtree(n.children[0])
        gen_ids = sorted(gen_labels)
        gen_pos = np.array([pos_of[p] for p in gen_ids])
        rest_ids = [int(p) for p in n.children[1].point_ids]
        rest_pos = np.array([pos_of[p] for p in rest_ids])
        copies, labels = [], []
        for r, t in symmetry_transforms(n.sym)[1:]:
            copies.append(transform_points(gen_pos, r, t))
            labels.append([gen_labels[p] for p in gen_ids])
        source = np.concatenate(copies)
        source_labels = np.concatenate(labels)
        rows = nearest_source_rows(rest_pos, source)
        got = dict(gen_labels)
        for pid, row in zip(rest_ids, rows):
            got[pid] = int(source_labels[row])
        return got

    for pid, inst in label_subtree(h.root).items():
        out[pid] = inst
    return out


# ---------------------------------------------------------------------------
# serialization (document = root node object; exact key names fixed)


def _spec_to_json(spec: SymmetrySpec) -> dict:
    return {
        "kind": spec.kind.value,
        "anchor": [float(v) for v in spec.anchor],
        "direction": [float(v) for v in spec.direction],
        "fold": spec.fold,
        "step": spec.step,
    }


def _spec_from_json(obj, path: str) -> SymmetrySpec:
    for key in ("kind", "anchor", "direction", "fold", "step"):
        if key not in obj:
            raise HierarchyParseError(f"{path}: symmetry missing key {key!r}")
    try:
        kind = SymKind(obj["kind"])
    except ValueError:
        raise HierarchyParseError(f"{path}: unknown symmetry kind {obj['kind']!r}") from None
    try:
        return SymmetrySpec(kind, obj["anchor"], obj["direction"], int(obj["fold"]), float(obj["step"]))
    except (GeometryError, TypeError, ValueError) as e:
        raise HierarchyParseError(f"{path}: {e}") from None


def _node_to_json(n: HierNode) -> dict:
    out: dict = {"kind": n.kind.value, "part_ids": sorted(int(p) for p in n.part_ids)}
    if n.sym is not None:
        out["symmetry"] = _spec_to_json(n.sym)
    if n.children:
        out["children"] = [_node_to_json(c) for c in n.children]
    return out


def _node_from_json(obj, path: str) -> HierNode:
    if not isinstance(obj, dict):
        raise HierarchyParseError(f"{path}: node must be an object")
    if "kind" not in obj:
        raise HierarchyParseError(f"{path}: missing 'kind'")
    try:
        kind = NodeKind(obj["kind"])
    except ValueError:
        raise HierarchyParseError(f"{path}: unknown kind {obj['kind']!r}") from None
    if "part_ids" not in obj or not isinstance(obj["part_ids"], list):
        raise HierarchyParseError(f"{path}: missing 'part_ids' array")
    part_ids = frozenset(int(p) for p in obj["part_ids"])
    sym = _spec_from_json(obj["symmetry"], path) if "symmetry" in obj else None
    children: tuple = ()
    if "children" in obj:
        if not isinstance(obj["children"], list) or len(obj["children"]) != 2:
            raise HierarchyParseError(f"{path}: 'children' must hold exactly 2 nodes")
        children = tuple(
            _node_from_json(c, f"{path}.children[{i}]") for i, c in enumerate(obj["children"])
        )
    if kind is NodeKind.SYMMETRY and sym is None:
        raise HierarchyParseError(f"{path}: symmetry node without 'symmetry'")
    if kind is NodeKind.LEAF and children:
        raise HierarchyParseError(f"{path}: leaf with children")
    if kind is not NodeKind.LEAF and not children:
        raise HierarchyParseError(f"{path}: internal node without children")
    return HierNode(kind, children, part_ids, None, sym)


def serialize(h: Hierarchy) -> str:
    return json.dumps(_node_to_json(h.root), indent=1)


def deserialize(text: str, shape_id: str = "") -> Hierarchy:
    if not text.strip():
        raise HierarchyParseError("empty document")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise HierarchyParseError(f"line {e.lineno} column {e.colno}: {e.msg}") from None
    return Hierarchy(_node_from_json(obj, "root"), shape_id)


def bind_points(h: Hierarchy, instance_label: np.ndarray) -> Hierarchy:
    """Attach point_ids from a per-point instance labeling (post-deserialize)."""
    label = np.asarray(instance_label)

    def walk(n: HierNode) -> HierNode:
        if n.is_leaf:
            pts = np.flatnonzero(label == n.min_part_id).astype(np.int64)
            if not len(pts):
                raise HierarchyError(f"no points labeled with part {n.min_part_id}")
            return HierNode(n.kind, (), n.part_ids, pts, n.sym)
        kids = tuple(walk(c) for c in n.children)
        return HierNode(
            n.kind, kids, n.part_ids, np.union1d(kids[0].point_ids, kids[1].point_ids), n.sym
        )

    return Hierarchy(walk(h.root), h.shape_id)


def same_tree(a: HierNode, b: HierNode, with_points: bool = True) -> bool:
    if a.kind is not b.kind or a.part_ids != b.part_ids or len(a.children) != len(b.children):
        return False
    if (a.sym is None) != (b.sym is None):
        return False
    if a.sym is not None:
        sa, sb = a.sym, b.sym
        if (
            sa.kind is not sb.kind
            or sa.fold != sb.fold
            or abs(sa.step - sb.step) > 1e-12
            or np.abs(sa.anchor - sb.anchor).max() > 1e-12
            or np.abs(sa.direction - sb.direction).max() > 1e-12
        ):
            return False
    if with_points:
        if (a.point_ids is None) != (b.point_ids is None):
            return False
        if a.point_ids is not None and not np.array_equal(a.point_ids, b.point_ids):
            return False
    return all(same_tree(x, y, with_points) for x, y in zip(a.children, b.children))
