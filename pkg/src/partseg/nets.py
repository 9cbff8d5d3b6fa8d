"""Network blocks of the recursive decomposition model.

Two PointNet-style encoders (a global one pooled to a shape/part feature and
a per-point one), the child-feature decoder, the node-type classifier, the
symmetry head, the binary point segmentation stack and the optional semantic
head. All trainable tensors live in ``ModelParams`` under stable names so
checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geom import PointCloud

VARIANTS = ("full", "no_rcf", "no_psf")

# layout of the 8 continuous symmetry parameters
SYM_ANCHOR = slice(0, 3)
SYM_DIRECTION = slice(3, 6)
SYM_FOLD = 6
SYM_STEP = 7


@dataclass(frozen=True)
class NetConfig:
    """Layer widths and structural switches.

    Defaults are the production network; ``reduced()`` gives a narrow clone
    with the same topology for finite-difference checks and fast tests.
    """

    in_channels: int = 6
    encoder_widths: tuple = (64, 128, 128, 256, 256, 128)
    point_feat_widths: tuple = (64, 64, 128, 128)
    seg_widths: tuple = (512, 256, 128, 128)
    classifier_hidden: int = 128
    sym_hidden: int = 128
    semantic_hiddens: tuple = (128, 64)
    num_semantic_classes: int = 7
    use_point_norm: bool = True
    dropout: float = 0.2

    @property
    def feat_dim(self) -> int:
        return self.encoder_widths[-1]

    @property
    def node_feat_dim(self) -> int:
        return 2 * self.feat_dim

    @classmethod
    def reduced(cls, **overrides) -> "NetConfig":
        base = cls(
            encoder_widths=(8, 10, 12),
            point_feat_widths=(8, 10),
            seg_widths=(16, 12),
            classifier_hidden=8,
            sym_hidden=8,
            semantic_hiddens=(8, 8),
        )
        return replace(base, **overrides)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class ModelParams:
    """All trainable tensors, keyed by stable names.

    Construction order (and therefore checkpoint order) is fixed by the
    config, and initialization is fully determined by the seed.
    """

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d = cfg.feat_dim

        self._stack(rng, "pn1", cfg.in_channels, cfg.encoder_widths)
        self._stack(rng, "pn2", cfg.in_channels, cfg.point_feat_widths)
        self._fc(rng, "decoder.fc0", 2 * d, 2 * d)
        self._fc(rng, "decoder.fc1", 2 * d, 2 * d)
        self._fc(rng, "classifier.fc0", 2 * d, cfg.classifier_hidden)
        self._fc(rng, "classifier.fc1", cfg.classifier_hidden, 3)
        self._fc(rng, "sym.fc0", 2 * d, cfg.sym_hidden)
        self._fc(rng, "sym.fc1", cfg.sym_hidden, 3 + 8)
        self._stack(rng, "seg", 2 * d + cfg.point_feat_widths[-1], cfg.seg_widths)
        self._fc(rng, "seg.out", cfg.seg_widths[-1], 2)
        prev = 2 * d
        for i, h in enumerate(cfg.semantic_hiddens):
            self._fc(rng, f"semantic.fc{i}", prev, h)
            prev = h
        self._fc(rng, "semantic.out", prev, cfg.num_semantic_classes)

    def _add(self, name: str, data: np.ndarray):
        self._tensors[name] = Tensor(data, requires_grad=True, name=name)

    def _fc(self, rng, name: str, fan_in: int, fan_out: int):
        self._add(name + ".w", _glorot(rng, fan_in, fan_out, self.dtype))
        self._add(name + ".b", np.zeros((1, fan_out), dtype=self.dtype))

    def _stack(self, rng, prefix: str, in_ch: int, widths: tuple):
        prev = in_ch
        for i, w in enumerate(widths):
            self._fc(rng, f"{prefix}.conv{i}", prev, w)
            if self.cfg.use_point_norm:
                self._add(f"{prefix}.norm{i}.gamma", np.ones((1, w), dtype=self.dtype))
                self._add(f"{prefix}.norm{i}.beta", np.zeros((1, w), dtype=self.dtype))
            prev = w

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def tensors(self) -> dict[str, Tensor]:
        return self._tensors

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def num_params(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def save(self, path, state: ad.AdamState | None = None):
        ad.save_checkpoint(path, self._tensors, state or ad.AdamState())

    def load(self, path) -> ad.AdamState:
        """Replace parameter values from a checkpoint; returns the Adam state."""
        arrays, state = ad.load_checkpoint(path)
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise ad.CheckpointError(
                f"checkpoint does not match model (missing {sorted(missing)[:3]}, "
                f"extra {sorted(extra)[:3]})"
            )
        for name, a in arrays.items():
            if a.shape != self._tensors[name].data.shape:
                raise ad.CheckpointError(
                    f"shape mismatch for {name}: {a.shape} vs {self._tensors[name].data.shape}"
                )
            self._tensors[name].data = a.astype(self.dtype)
        return state


def cloud_to_tensor(cloud: PointCloud, dtype=np.float32) -> Tensor:
    """N x 6 input rows (position then normal channels)."""
    x = np.concatenate([cloud.positions, cloud.normals], axis=1)
    return Tensor(x.astype(dtype))


def _run_stack(tape, x, mp: ModelParams, prefix: str, widths, train: bool, rng) -> Tensor:
    """Point-conv stack: affine, per-point normalization, relu; feature
    dropout after the activation of each of the last two layers."""
    cfg = mp.cfg
    n = len(widths)
    for i in range(n):
        x = ad.point_shared_linear(tape, x, mp[f"{prefix}.conv{i}.w"], mp[f"{prefix}.conv{i}.b"])
        if cfg.use_point_norm:
            x = ad.point_norm(tape, x, mp[f"{prefix}.norm{i}.gamma"], mp[f"{prefix}.norm{i}.beta"])
        x = ad.relu_op(tape, x)
        if train and cfg.dropout > 0 and i >= n - 2:
            x = ad.dropout(tape, x, cfg.dropout, rng, True)
    return x


def encode_cloud(tape, x: Tensor, mp: ModelParams, train: bool = False, rng=None) -> Tensor:
    """Global part/shape feature: point-conv stack then max-pool (1 x 128)."""
    if x.shape[0] < 1:
        raise ad.ShapeError("encode_cloud on empty input")
    h = _run_stack(tape, x, mp, "pn1", mp.cfg.encoder_widths, train, rng)
    pooled, _ = ad.max_pool_points(tape, h)
    return pooled


def encode_points(tape, x: Tensor, mp: ModelParams, train: bool = False, rng=None) -> Tensor:
    """Per-point features (N x 128), row order preserved."""
    return _run_stack(tape, x, mp, "pn2", mp.cfg.point_feat_widths, train, rng)


def make_root_feature(tape, shape_feat: Tensor) -> Tensor:
    """Duplicate the 128-D shape feature into the 256-D root node feature."""
    if shape_feat.shape[0] != 1:
        raise ad.ShapeError(f"shape feature must be a single row, got {shape_feat.shape}")
    return ad.concat(tape, [shape_feat, shape_feat])


def decode_children(tape, node_feat: Tensor, mp: ModelParams) -> tuple[Tensor, Tensor]:
    """Two recursive context features for the children, each in (-1, 1)."""
    d = mp.cfg.node_feat_dim
    if node_feat.shape != (1, d):
        raise ad.ShapeError(f"decode_children expects (1, {d}), got {node_feat.shape}")
    h = ad.tanh_op(tape, ad.linear(tape, node_feat, mp["decoder.fc0.w"], mp["decoder.fc0.b"]))
    out = ad.tanh_op(tape, ad.linear(tape, h, mp["decoder.fc1.w"], mp["decoder.fc1.b"]))
    half = d // 2
    return ad.slice_cols(tape, out, 0, half), ad.slice_cols(tape, out, half, d)


def classify_node(tape, node_feat: Tensor, mp: ModelParams) -> Tensor:
    """Three logits: adjacency, symmetry, leaf."""
    h = ad.tanh_op(
        tape, ad.linear(tape, node_feat, mp["classifier.fc0.w"], mp["classifier.fc0.b"])
    )
    return ad.linear(tape, h, mp["classifier.fc1.w"], mp["classifier.fc1.b"])


def predict_symmetry(tape, node_feat: Tensor, mp: ModelParams) -> tuple[Tensor, Tensor]:
    """Symmetry kind logits (1 x 3) and raw continuous parameters (1 x 8).

    The raw parameters are anchor, direction, fold, step in that order;
    geometric users normalize the direction and round the fold downstream.
    """
    h = ad.tanh_op(tape, ad.linear(tape, node_feat, mp["sym.fc0.w"], mp["sym.fc0.b"]))
    out = ad.linear(tape, h, mp["sym.fc1.w"], mp["sym.fc1.b"])
    return ad.slice_cols(tape, out, 0, 3), ad.slice_cols(tape, out, 3, 11)


def segment_points(
    tape, point_feats: Tensor, node_feat: Tensor, mp: ModelParams, train: bool = False, rng=None
) -> Tensor:
    """Binary point logits (N x 2) from per-point features + node feature."""
    want = mp.cfg.point_feat_widths[-1]
    if point_feats.shape[1] != want:
        raise ad.ShapeError(f"per-point features have {point_feats.shape[1]} channels, want {want}")
    n = point_feats.shape[0]
    tiled = ad.tile_rows(tape, node_feat, n)
    x = ad.concat(tape, [point_feats, tiled])
    h = _run_stack(tape, x, mp, "seg", mp.cfg.seg_widths, train, rng)
    return ad.linear(tape, h, mp["seg.out.w"], mp["seg.out.b"])


def predict_semantic_label(tape, node_feat: Tensor, mp: ModelParams) -> Tensor:
    """K class logits for a leaf's node feature."""
    h = node_feat
    for i in range(len(mp.cfg.semantic_hiddens)):
        h = ad.tanh_op(tape, ad.linear(tape, h, mp[f"semantic.fc{i}.w"], mp[f"semantic.fc{i}.b"]))
    return ad.linear(tape, h, mp["semantic.out.w"], mp["semantic.out.b"])


@dataclass(frozen=True)
class Wiring:
    """How the two per-node features feed each consumer, per ablation variant.

    full:    every consumer sees concat(context, part shape).
    no_rcf:  the context feature is removed everywhere; the part shape
             feature is duplicated instead, and the decoder is never run.
    no_psf:  only the classifier loses the part shape feature (context
             duplicated); segmentation and the other heads keep the full pair.
    """

    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")

    @property
    def uses_decoder(self) -> bool:
        return self.variant != "no_rcf"

    def node_features(self, tape, rcf: Tensor | None, psf: Tensor) -> dict[str, Tensor]:
        """Features for roles: classifier, segmentation, symmetry, decoder."""
        roles = ("classifier", "segmentation", "symmetry", "decoder")
        if self.variant == "no_rcf":
            f = ad.concat(tape, [psf, psf])
            return {r: f for r in roles}
        if rcf is None:
            raise ValueError("variant needs a recursive context feature")
        full = ad.concat(tape, [rcf, psf])
        feats = {r: full for r in roles}
        if self.variant == "no_psf":
            feats["classifier"] = ad.concat(tape, [rcf, rcf])
        return feats


def build_ablation(variant: str) -> Wiring:
    return Wiring(variant)
