"""The recursive engine: teacher-forced loss, training loop and inference.

Training walks the ground-truth tree top-down, scoring node classification
at every node, binary point segmentation at every internal node (child 0 vs
child 1 points; for symmetry nodes that is generator vs counterparts) and
symmetry parameters at symmetry nodes. Inference re-runs the same modules
with predicted node types, splitting point sets recursively and
reconstructing symmetric counterparts from the predicted parameters.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tape, Tensor
from .data import SEMANTIC_CLASSES, ShapeRecord, add_gaussian_noise
from .geom import (
    GeometryError,
    PointCloud,
    SymKind,
    SymmetrySpec,
    canonical_direction,
    nearest_source_rows,
    symmetry_transforms,
    transform_points,
)
from .hierarchy import Hierarchy, HierarchyError, HierNode, NodeKind, _node_to_json, validate

KIND_INDEX = {NodeKind.ADJACENCY: 0, NodeKind.SYMMETRY: 1, NodeKind.LEAF: 2}
INDEX_KIND = {v: k for k, v in KIND_INDEX.items()}
SYMKIND_INDEX = {SymKind.REFLECTIVE: 0, SymKind.TRANSLATIONAL: 1, SymKind.ROTATIONAL: 2}
INDEX_SYMKIND = {v: k for k, v in SYMKIND_INDEX.items()}

# rounding cap for predicted folds; runaway regressions must not explode copies
MAX_FOLD = 12


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    """Stopping safeguards for recursive inference (node types use argmax)."""

    max_depth: int = 12
    min_points: int = 10
    leaf_threshold: None = None
    lambda_sym: float = 1.0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ModelError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.min_points < 2:
            raise ModelError(f"min_points must be >= 2, got {self.min_points}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 10
    iterations: int = 1000
    seed: int = 0
    sigma: float = 0.01
    lambda_sym: float = 1.0
    lambda_sem: float = 1.0
    variant: str = "full"
    train_semantic: bool = True
    checkpoint_every: int = 0  # 0 = only final
    eval_every: int = 50


@dataclass
class LossBreakdown:
    """Eq-style decomposition; ``total`` excludes the semantic side loss."""

    class_mean: float
    seg_mean: float
    sym_param: float
    total: float
    n_nodes: int
    n_internal: int
    n_symmetry: int
    sem_mean: float = 0.0


@dataclass
class TeacherStats:
    class_correct: int = 0
    class_total: int = 0
    point_correct: int = 0
    point_total: int = 0
    sem_correct: int = 0
    sem_total: int = 0

    @property
    def class_accuracy(self) -> float:
        return self.class_correct / max(1, self.class_total)

    @property
    def point_accuracy(self) -> float:
        return self.point_correct / max(1, self.point_total)


def _row_lookup(cloud: PointCloud) -> np.ndarray:
    lookup = np.full(int(cloud.orig_index.max()) + 1, -1, dtype=np.int64)
    lookup[cloud.orig_index] = np.arange(len(cloud))
    return lookup


def _node_input(cloud: PointCloud, rows: np.ndarray, dtype) -> Tensor:
    x = np.concatenate([cloud.positions[rows], cloud.normals[rows]], axis=1)
    return Tensor(x.astype(dtype))


def symmetry_target(spec: SymmetrySpec, dtype=np.float32):
    """Regression target and component mask for the 8 continuous parameters.

    Only the components that are meaningful for the ground-truth kind are
    supervised: plane/axis anchor and direction for reflective, plus fold
    for rotational; direction, fold and step (anchor free) for translational.
    """
    t = np.zeros((1, 8), dtype=dtype)
    m = np.zeros((1, 8), dtype=dtype)
    t[0, 0:3] = spec.anchor
    t[0, 3:6] = spec.direction
    t[0, 6] = float(spec.fold)
    t[0, 7] = spec.step
    if spec.kind is SymKind.REFLECTIVE:
        m[0, 0:6] = 1.0
    elif spec.kind is SymKind.ROTATIONAL:
        m[0, 0:7] = 1.0
    else:
        m[0, 3:8] = 1.0
    return t, m


def decode_symmetry_spec(raw: np.ndarray, kind_index: int) -> SymmetrySpec:
    """Geometric spec from a raw 8-vector: direction normalized (canonical
    sign for planes/axes), fold rounded into [2, MAX_FOLD], step positive."""
    kind = INDEX_SYMKIND[int(kind_index)]
    anchor = np.asarray(raw[0:3], dtype=np.float64)
    d = np.asarray(raw[3:6], dtype=np.float64)
    if np.linalg.norm(d) < 1e-6:
        d = np.array([1.0, 0.0, 0.0])
    d = d / np.linalg.norm(d)
    if kind in (SymKind.REFLECTIVE, SymKind.ROTATIONAL):
        d = canonical_direction(d)
    if kind is SymKind.REFLECTIVE:
        return SymmetrySpec(kind, anchor, d, 2, 0.0)
    fold = int(np.clip(np.rint(raw[6]), 2, MAX_FOLD))
    if kind is SymKind.ROTATIONAL:
        return SymmetrySpec(kind, anchor, d, fold, 0.0)
    step = max(abs(float(raw[7])), 1e-6)
    return SymmetrySpec(kind, anchor, d, fold, step)


def semantic_targets_of(record: ShapeRecord) -> dict[int, int]:
    return {pid: SEMANTIC_CLASSES.index(cls) for pid, cls in record.parts}


# ---------------------------------------------------------------------------
# teacher-forced loss


def teacher_forced_loss(
    tape: Tape | None,
    cloud: PointCloud,
    gt: Hierarchy,
    mp: nets.ModelParams,
    wiring: nets.Wiring = nets.Wiring("full"),
    train: bool = False,
    rng: np.random.Generator | None = None,
    lambda_sym: float = 1.0,
    lambda_sem: float = 1.0,
    semantic_targets: dict[int, int] | None = None,
):
    """Loss over a ground-truth tree with teacher forcing.

    Returns ``(breakdown, objective, stats)`` where ``objective`` is the
    scalar tensor to backprop (total plus the weighted semantic term).
    """
    if gt.root.point_ids is None:
        raise ModelError("hierarchy is not bound to points")
    bad = validate(gt, cloud)
    if bad:
        raise ModelError(f"invalid hierarchy: {bad[0]}")
    lookup = _row_lookup(cloud)
    dtype = mp.dtype
    class_losses: list[Tensor] = []
    seg_losses: list[Tensor] = []
    sym_losses: list[Tensor] = []
    sem_losses: list[Tensor] = []
    stats = TeacherStats()

    def visit(node: HierNode, rcf: Tensor | None):
        rows = lookup[node.point_ids]
        if (rows < 0).any() or not len(rows):
            raise ModelError("hierarchy covers points missing from the cloud")
        x = _node_input(cloud, rows, dtype)
        psf = nets.encode_cloud(tape, x, mp, train, rng)
        feats = wiring.node_features(tape, psf if rcf is None else rcf, psf)

        target = KIND_INDEX[node.kind]
        logits = nets.classify_node(tape, feats["classifier"], mp)
        class_losses.append(ad.softmax_cross_entropy(tape, logits, [target]))
        stats.class_total += 1
        stats.class_correct += int(np.argmax(logits.data[0]) == target)

        if node.is_leaf:
            if semantic_targets is not None:
                sem = nets.predict_semantic_label(tape, feats["segmentation"], mp)
                cls = semantic_targets[node.min_part_id]
                sem_losses.append(ad.softmax_cross_entropy(tape, sem, [cls]))
                stats.sem_total += 1
                stats.sem_correct += int(np.argmax(sem.data[0]) == cls)
            return

        labels = np.isin(node.point_ids, node.children[1].point_ids).astype(np.int64)
        pf = nets.encode_points(tape, x, mp, train, rng)
        seg_logits = nets.segment_points(tape, pf, feats["segmentation"], mp, train, rng)
        seg_losses.append(ad.softmax_cross_entropy(tape, seg_logits, labels))
        stats.point_total += len(labels)
        stats.point_correct += int((seg_logits.data.argmax(axis=1) == labels).sum())

        if node.kind is NodeKind.SYMMETRY:
            kind_logits, raw = nets.predict_symmetry(tape, feats["symmetry"], mp)
            kind_target = SYMKIND_INDEX[node.sym.kind]
            kind_ce = ad.softmax_cross_entropy(tape, kind_logits, [kind_target])
            t, m = symmetry_target(node.sym, dtype)
            sym_losses.append(ad.add_n(tape, [kind_ce, ad.masked_mse(tape, raw, t, m)]))

        left_rcf = right_rcf = None
        if wiring.uses_decoder:
            left_rcf, right_rcf = nets.decode_children(tape, feats["decoder"], mp)
        visit(node.children[0], left_rcf)
        if node.kind is NodeKind.ADJACENCY:
            visit(node.children[1], right_rcf)

    visit(gt.root, None)

    class_mean = ad.scale(tape, ad.add_n(tape, class_losses), 1.0 / len(class_losses))
    terms = [class_mean]
    seg_mean = ad.zero_scalar(dtype)
    if seg_losses:
        seg_mean = ad.scale(tape, ad.add_n(tape, seg_losses), 1.0 / len(seg_losses))
        terms.append(seg_mean)
    sym_mean = ad.zero_scalar(dtype)
    if sym_losses:
        sym_mean = ad.scale(tape, ad.add_n(tape, sym_losses), 1.0 / len(sym_losses))
        terms.append(ad.scale(tape, sym_mean, lambda_sym))
    total = ad.add_n(tape, terms)
    objective = total
    sem_mean = 0.0
    if sem_losses:
        sm = ad.scale(tape, ad.add_n(tape, sem_losses), 1.0 / len(sem_losses))
        sem_mean = sm.item()
        objective = ad.add_n(tape, [total, ad.scale(tape, sm, lambda_sem)])

    breakdown = LossBreakdown(
        class_mean=class_mean.item(),
        seg_mean=seg_mean.item(),
        sym_param=sym_mean.item(),
        total=total.item(),
        n_nodes=len(class_losses),
        n_internal=len(seg_losses),
        n_symmetry=len(sym_losses),
        sem_mean=sem_mean,
    )
    return breakdown, objective, stats


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: nets.ModelParams
    adam: ad.AdamState
    curve: list = field(default_factory=list)  # (iter, class, seg, sym)
    stopped_at: int = 0


def train(
    records: list[ShapeRecord],
    hierarchies: list[Hierarchy],
    mp: nets.ModelParams,
    cfg: TrainConfig = TrainConfig(),
    out_dir=None,
    stop_check=None,
    log=None,
) -> TrainResult:
    """Adam training over shapes, gradients averaged across each batch.

    Epoch order, noise augmentation and dropout all derive from cfg.seed, so
    identical configs reproduce identical parameter trajectories. Writes
    ``curve.csv`` and checkpoints under ``out_dir`` when given. ``stop_check``
    (called every ``eval_every`` iterations with the params) may end the run
    early, which ``stopped_at`` records.
    """
    if not records:
        raise ModelError("empty dataset")
    if len(records) != len(hierarchies):
        raise ModelError("records and hierarchies differ in length")
    wiring = nets.Wiring(cfg.variant)
    master = np.random.default_rng(np.random.PCG64(cfg.seed))
    order_rng = np.random.default_rng(np.random.PCG64(int(master.integers(2**62))))
    noise_rng = np.random.default_rng(np.random.PCG64(int(master.integers(2**62))))
    drop_rng = np.random.default_rng(np.random.PCG64(int(master.integers(2**62))))
    adam = ad.AdamState(lr=cfg.lr)
    sem_targets = [semantic_targets_of(r) if cfg.train_semantic else None for r in records]

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    queue: list[int] = []
    result = TrainResult(mp, adam)
    it = 0
    for it in range(1, cfg.iterations + 1):
        batch = []
        while len(batch) < min(cfg.batch_size, len(records)):
            if not queue:
                queue = list(order_rng.permutation(len(records)))
            batch.append(queue.pop(0))

        mp.zero_grad()
        sums = np.zeros(3)
        for k in batch:
            rec = add_gaussian_noise(records[k], cfg.sigma, noise_rng)
            tape = Tape()
            br, objective, _ = teacher_forced_loss(
                tape, rec.cloud, hierarchies[k], mp, wiring,
                train=True, rng=drop_rng,
                lambda_sym=cfg.lambda_sym, lambda_sem=cfg.lambda_sem,
                semantic_targets=sem_targets[k],
            )
            ad.backward(objective, tape)
            sums += (br.class_mean, br.seg_mean, br.sym_param)
        inv = 1.0 / len(batch)
        for t in mp.tensors().values():
            if t.grad is not None:
                t.grad *= inv
        ad.adam_step(mp.tensors(), adam)
        result.curve.append((it, sums[0] * inv, sums[1] * inv, sums[2] * inv))

        if log and (it % max(1, cfg.eval_every) == 0 or it == 1):
            log(f"iter {it}: class {sums[0] * inv:.4f} seg {sums[1] * inv:.4f} "
                f"sym {sums[2] * inv:.4f}")
        if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            mp.save(out_dir / f"checkpoint_{it:06d}.bin", adam)
        if stop_check is not None and it % max(1, cfg.eval_every) == 0 and stop_check(it, mp):
            break

    result.stopped_at = it
    if out_dir is not None:
        mp.save(out_dir / "checkpoint.bin", adam)
        write_curve_csv(out_dir / "curve.csv", result.curve)
    return result


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "class_loss", "seg_loss", "sym_loss"])
        for it, c, s, y in curve:
            w.writerow([it, repr(float(c)), repr(float(s)), repr(float(y))])


# ---------------------------------------------------------------------------
# inference


@dataclass
class PredictedPart:
    part_id: int
    point_ids: np.ndarray  # orig indices, sorted
    confidence: float
    source_part: int | None = None  # generator instance a symmetry copy mirrors
    feature: np.ndarray | None = None  # leaf node feature, kept for the semantic head


@dataclass
class SegmentationResult:
    instance_id: np.ndarray  # per point, root cloud row order
    parts: list[PredictedPart]
    tree: Hierarchy


def infer_segment(
    shape: PointCloud,
    mp: nets.ModelParams,
    cfg: InferenceConfig = InferenceConfig(),
    wiring: nets.Wiring = nets.Wiring("full"),
) -> SegmentationResult:
    """Recursive decomposition of a point cloud into part instances.

    Node types come from the classifier argmax; a node becomes a leaf when
    classified so, when it is too small or deep, or when a split would leave
    one side empty. Symmetry nodes segment out the generator, recurse into
    it only, and label the counterpart points by nearest neighbor against
    the transformed labeled generator copies. Part confidence is the product
    of chosen-class probabilities along the path from the root.
    """
    if not len(shape):
        raise ModelError("empty input")
    dtype = mp.dtype
    instance = np.full(len(shape), -1, dtype=np.int64)
    parts: list[PredictedPart] = []

    def emit(rows: np.ndarray, conf: float, feature: np.ndarray,
             source: int | None = None) -> HierNode:
        pid = len(parts)
        parts.append(
            PredictedPart(pid, np.sort(shape.orig_index[rows]), float(conf), source, feature)
        )
        instance[rows] = pid
        return HierNode(NodeKind.LEAF, (), frozenset([pid]), parts[pid].point_ids)

    def chain(nodes: list[HierNode]) -> HierNode:
        if len(nodes) == 1:
            return nodes[0]
        rest = chain(nodes[1:])
        return HierNode(
            NodeKind.ADJACENCY,
            (nodes[0], rest),
            nodes[0].part_ids | rest.part_ids,
            np.union1d(nodes[0].point_ids, rest.point_ids),
        )

    def visit(rows: np.ndarray, rcf: Tensor | None, depth: int, path_prob: float) -> HierNode:
        x = _node_input(shape, rows, dtype)
        psf = nets.encode_cloud(None, x, mp)
        feats = wiring.node_features(None, psf if rcf is None else rcf, psf)
        probs = ad.softmax_probs(nets.classify_node(None, feats["classifier"], mp).data)[0]
        kind = int(np.argmax(probs))
        leaf_feature = feats["segmentation"].data.copy()

        stop = (
            kind == KIND_INDEX[NodeKind.LEAF]
            or len(rows) < cfg.min_points
            or depth >= cfg.max_depth
        )
        if not stop:
            pf = nets.encode_points(None, x, mp)
            side = nets.segment_points(None, pf, feats["segmentation"], mp).data.argmax(axis=1)
            first, second = rows[side == 0], rows[side == 1]
            if not len(first) or not len(second):
                stop = True  # degenerate split, demote to leaf
        if stop:
            return emit(rows, path_prob * probs[KIND_INDEX[NodeKind.LEAF]], leaf_feature)

        child_prob = path_prob * probs[kind]
        left_rcf = right_rcf = None
        if wiring.uses_decoder:
            left_rcf, right_rcf = nets.decode_children(None, feats["decoder"], mp)

        if kind == KIND_INDEX[NodeKind.ADJACENCY]:
            left = visit(first, left_rcf, depth + 1, child_prob)
            right = visit(second, right_rcf, depth + 1, child_prob)
            return HierNode(
                NodeKind.ADJACENCY,
                (left, right),
                left.part_ids | right.part_ids,
                np.union1d(left.point_ids, right.point_ids),
            )

        kind_logits, raw = nets.predict_symmetry(None, feats["symmetry"], mp)
        spec = decode_symmetry_spec(raw.data[0], int(np.argmax(kind_logits.data[0])))
        gen_node = visit(first, left_rcf, depth + 1, child_prob)

        # transfer generator labels onto the counterpart points via the
        # predicted transforms; every observed (copy, generator part) pair
        # becomes its own instance with the generator part's confidence
        gen_rows = np.flatnonzero(np.isin(shape.orig_index, gen_node.point_ids))
        gen_pos = shape.positions[gen_rows]
        gen_inst = instance[gen_rows]
        sources, src_tags = [], []
        for k, (r, t) in enumerate(symmetry_transforms(spec)[1:], start=1):
            sources.append(transform_points(gen_pos, r, t))
            src_tags.append(np.stack([np.full(len(gen_rows), k), gen_inst], axis=1))
        src_pos = np.concatenate(sources)
        src_tag = np.concatenate(src_tags)
        hit = src_tag[nearest_source_rows(shape.positions[second], src_pos)]

        copy_leaves = []
        conf_of = {p.part_id: p.confidence for p in parts}
        for k, src in sorted(set(map(tuple, hit.tolist()))):
            rows_k = second[(hit[:, 0] == k) & (hit[:, 1] == src)]
            copy_leaves.append(emit(rows_k, conf_of[src], None, source=int(src)))
        counterpart = chain(copy_leaves)
        return HierNode(
            NodeKind.SYMMETRY,
            (gen_node, counterpart),
            gen_node.part_ids | counterpart.part_ids,
            np.union1d(gen_node.point_ids, counterpart.point_ids),
            sym=spec,
        )

    root = visit(np.arange(len(shape)), None, 0, 1.0)
    if (instance < 0).any():
        raise ModelError("internal error: some points left unassigned")
    counts = np.bincount(instance, minlength=len(parts))
    if (counts[: len(parts)] == 0).any():
        raise ModelError("internal error: empty predicted part")
    return SegmentationResult(instance, parts, Hierarchy(root, "predicted"))


def predict_leaf_semantics(
    result: SegmentationResult, mp: nets.ModelParams, num_classes: int
) -> dict[int, int]:
    """Semantic class per predicted part; symmetry copies inherit their
    generator's label (the transfer step of inference)."""
    if num_classes != mp.cfg.num_semantic_classes:
        raise ModelError(
            f"model was built for {mp.cfg.num_semantic_classes} classes, asked for {num_classes}"
        )
    out: dict[int, int] = {}
    for p in result.parts:
        if p.feature is not None:
            logits = nets.predict_semantic_label(None, Tensor(p.feature), mp)
            out[p.part_id] = int(np.argmax(logits.data[0]))
    for p in result.parts:
        if p.part_id not in out:
            src = p.source_part
            if src is None or src not in out:
                raise ModelError(f"part {p.part_id} has no feature and no labeled source")
            out[p.part_id] = out[src]
    return out


def semantic_point_labels(result: SegmentationResult, part_classes: dict[int, int],
                          n_points: int) -> np.ndarray:
    out = np.full(n_points, -1, dtype=np.int64)
    for p in result.parts:
        out[p.point_ids] = part_classes[p.part_id]
    return out


# ---------------------------------------------------------------------------
# result serialization


def result_to_json(result: SegmentationResult) -> dict:
    return {
        "instance_id": [int(v) for v in result.instance_id],
        "parts": [
            {
                "id": p.part_id,
                "confidence": float(p.confidence),
                "point_ids": [int(v) for v in p.point_ids],
            }
            for p in result.parts
        ],
        "tree": _node_to_json(result.tree.root),
    }


def save_result(result: SegmentationResult, path) -> None:
    with open(path, "w") as f:
        json.dump(result_to_json(result), f, indent=1)
