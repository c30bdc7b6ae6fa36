"""Toy backbone plus hierarchical classification heads V1-V6 and a shared box branch.

Every level runs its own copy of the classification branch on the backbone
output::

    conv1 (3x3, SiLU) -> conv2 (3x3, SiLU) -> cls (3x3, S_l channels) [-> refine (3x3, S_l)]

A variant names the point where level ``l`` exports features (its *insertion
point*) and the point where level ``l + 1`` concatenates them (its
*concatenation point*).  Points are named after the layer whose output they
follow; ``input`` is the backbone output itself.

======  ==========  =============  ==========  ===============================
variant export      concat         refine      notes
======  ==========  =============  ==========  ===============================
V1      final       input          no          merge straight after backbone
V2      final       conv2          no          merge right before cls conv
V3      conv1       conv1          no          early insertion and merge
V4      final       cls            yes         merge between cls and refine
V5      conv2       conv2          no          V3 moved one conv deeper
V6      final       cls            yes         V4 plus level 0 -> every level
FLAT    -           -              no          independent levels (control)
======  ==========  =============  ==========  ===============================

``final`` is the level's last layer (``cls``, or ``refine`` where present).
When a level exports at the same point where it merges (V3, V5), the export
is the merged tensor, so information keeps flowing down the whole hierarchy.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DepthMismatch, ShapeMismatch
from .evalkit import DetectionPrediction
from .losses import box_distribution, expected_sides, flatten_cells, sides_to_boxes
from .taxonomy import Taxonomy
from .tensor import ConvSpec, Tensor, _sigmoid_np, batch_norm, concat_channels, conv2d, no_grad, silu

POINTS = ("input", "conv1", "conv2", "cls", "refine")
STRIDE = 8
BN_MOMENTUM = 0.03     # running-statistics update rate, as in common detector configs


@dataclass(frozen=True)
class HeadVariant:
    id: str
    export: str | None
    concat: str | None
    extra_conv: bool = False
    multi_source: bool = False

    def sources(self, level: int) -> list[int]:
        """Levels whose exports are merged into ``level``, in concatenation order."""
        if self.concat is None or level == 0:
            return []
        src = [level - 1]
        if self.multi_source and level >= 2:
            src.append(0)
        return src

    def export_point(self, level: int) -> str:
        if self.export == "final":
            return "refine" if self.extra_conv and level >= 1 else "cls"
        return self.export


VARIANTS: dict[str, HeadVariant] = {
    "V1": HeadVariant("V1", "final", "input"),
    "V2": HeadVariant("V2", "final", "conv2"),
    "V3": HeadVariant("V3", "conv1", "conv1"),
    "V4": HeadVariant("V4", "final", "cls", extra_conv=True),
    "V5": HeadVariant("V5", "conv2", "conv2"),
    "V6": HeadVariant("V6", "final", "cls", extra_conv=True, multi_source=True),
    "FLAT": HeadVariant("FLAT", None, None),
}


def get_variant(name: str | HeadVariant) -> HeadVariant:
    if isinstance(name, HeadVariant):
        return name
    try:
        return VARIANTS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None


def concat_edges(variant: str | HeadVariant, depth: int) -> set[tuple[int, str, int, str]]:
    """``(src_level, src_point, dst_level, dst_point)`` for every cross-level merge."""
    v = get_variant(variant)
    return {
        (src, v.export_point(src), level, v.concat)
        for level in range(depth)
        for src in v.sources(level)
    }


@dataclass(frozen=True)
class ModelSpec:
    width: int = 32
    head_width: int = 32
    reg_max: int = 8
    in_channels: int = 3
    residual: int = 0           # residual 3x3 convs after each of the last two backbone stages
    norm: bool = False          # batch norm between every hidden conv and its SiLU
    cls_prior: float = 0.01     # initial sigmoid score of every class logit
    init_gain: float = 6 ** 0.5  # hidden convs ~ U(-g, g) / sqrt(fan_in); sqrt(6) keeps activation scale

    def __post_init__(self):
        if self.width < 2 or self.head_width < 1 or self.reg_max < 2 or self.in_channels < 1 or self.residual < 0 \
                or not 0.0 < self.cls_prior < 1.0:
            raise ValueError(f"invalid model spec {self}")


@dataclass
class HierHeadOutput:
    level_logits: list[Tensor]
    box_map: Tensor
    reg_max: int
    stride: int = STRIDE

    @property
    def grid(self) -> tuple[int, int, int]:
        b, _, h, w = self.box_map.shape
        return b, h, w

    @property
    def image_size(self) -> tuple[int, int]:
        _, h, w = self.grid
        return h * self.stride, w * self.stride

    def anchors(self) -> np.ndarray:
        """Cell centres in pixels for every flattened cell, ``(B*H*W, 2)``."""
        b, h, w = self.grid
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        one = np.stack([(xs.ravel() + 0.5) * self.stride, (ys.ravel() + 0.5) * self.stride], axis=1)
        return np.tile(one, (b, 1)).astype(np.float64)

    def level_boxes(self, level: int) -> np.ndarray:
        """Normalized ``cx, cy, w, h`` for every cell as seen by ``level``.

        All levels read the same box branch, so this does not depend on ``level``.
        """
        if not 0 <= level < len(self.level_logits):
            raise IndexError(f"level {level} out of range")
        with no_grad():
            dist = box_distribution(self.box_map, self.reg_max)
            sides = expected_sides(dist)
            return sides_to_boxes(sides, self.anchors(), self.stride, self.image_size).data


class HierModel:
    """Parameters plus wiring; call :meth:`forward` on NCHW images."""

    def __init__(self, variant: HeadVariant, tax: Taxonomy, spec: ModelSpec, seed: int = 0):
        self.variant = variant
        self.tax = tax
        self.spec = spec
        self.seed = seed
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()   # batch-norm running statistics
        self.training = False
        self.layers: dict[str, ConvSpec] = {}
        rng = np.random.default_rng(seed)
        w, hw = spec.width, spec.head_width
        half = max(w // 2, 1)
        self._add("backbone.0", ConvSpec(spec.in_channels, half, 3, 2, 1), rng)
        self._add("backbone.1", ConvSpec(half, w, 3, 2, 1), rng)
        self._add("backbone.2", ConvSpec(w, w, 3, 2, 1), rng)
        for stage in (1, 2):
            for k in range(spec.residual):
                self._add(f"backbone.{stage}.res{k}", ConvSpec(w, w, 3, 1, 1), rng)
        self._add("box.conv1", ConvSpec(w, hw, 3, 1, 1), rng)
        self._add("box.conv2", ConvSpec(hw, hw, 3, 1, 1), rng)
        self._add("box.out", ConvSpec(hw, 4 * spec.reg_max, 3, 1, 1), rng, hidden=False)

        sizes = tax.level_sizes
        self.export_channels: list[int] = []
        for level, n_cls in enumerate(sizes):
            inc = sum(self.export_channels[s] for s in variant.sources(level))
            c = variant.concat
            p = f"head.l{level}"
            self._add(f"{p}.conv1", ConvSpec(w + (inc if c == "input" else 0), hw, 3, 1, 1), rng)
            after_conv1 = hw + (inc if c == "conv1" else 0)
            self._add(f"{p}.conv2", ConvSpec(after_conv1, hw, 3, 1, 1), rng)
            after_conv2 = hw + (inc if c == "conv2" else 0)
            self._add(f"{p}.cls", ConvSpec(after_conv2, n_cls, 3, 1, 1), rng, hidden=False)
            if variant.extra_conv and level >= 1:
                self._add(f"{p}.refine", ConvSpec(n_cls + (inc if c == "cls" else 0), n_cls, 3, 1, 1), rng,
                          hidden=False)
            final = f"{p}.refine" if variant.extra_conv and level >= 1 else f"{p}.cls"
            self.params[f"{final}.bias"].data[:] = np.log(spec.cls_prior / (1.0 - spec.cls_prior))
            point = variant.export_point(level) if variant.export else None
            self.export_channels.append(
                {"conv1": after_conv1, "conv2": after_conv2}.get(point, n_cls))

    def _add(self, name: str, spec: ConvSpec, rng: np.random.Generator, hidden: bool = True) -> None:
        """Register a conv; layers followed by SiLU use ``init_gain``, linear outputs use 1."""
        gain = self.spec.init_gain if hidden else 1.0
        bound = gain / np.sqrt(spec.in_channels * spec.kernel * spec.kernel)
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        self.layers[name] = spec
        self.params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(rng.uniform(-bound, bound, spec.out_channels), requires_grad=True)
        if hidden and self.spec.norm:
            c = spec.out_channels
            self.params[f"{name}.bn.weight"] = Tensor(np.ones(c), requires_grad=True)
            self.params[f"{name}.bn.bias"] = Tensor(np.zeros(c), requires_grad=True)
            self.buffers[f"{name}.bn.mean"] = np.zeros(c)
            self.buffers[f"{name}.bn.var"] = np.ones(c)

    # -- bookkeeping -----------------------------------------------------
    @property
    def depth(self) -> int:
        return self.tax.depth

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        """Parameters followed by batch-norm running statistics, all copied."""
        out = OrderedDict((n, t.data.copy()) for n, t in self.params.items())
        out.update((n, a.copy()) for n, a in self.buffers.items())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        known = set(self.params) | set(self.buffers)
        missing = known - set(state)
        extra = set(state) - known
        if missing or extra:
            raise ShapeMismatch(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            current = self.params[name].data if name in self.params else self.buffers[name]
            if arr.shape != current.shape:
                raise ShapeMismatch(f"{name}: checkpoint {arr.shape} vs model {current.shape}")
            if name in self.params:
                self.params[name].data = np.array(arr, dtype=np.float64)
            else:
                self.buffers[name] = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward ---------------------------------------------------------
    def _conv(self, name: str, x: Tensor) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], self.layers[name])

    def _hidden(self, name: str, x: Tensor) -> Tensor:
        """Conv, optional batch norm, SiLU.  In training mode the running statistics are updated."""
        x = self._conv(name, x)
        if self.spec.norm:
            mean_key, var_key = f"{name}.bn.mean", f"{name}.bn.var"
            stats = None if self.training else (self.buffers[mean_key], self.buffers[var_key])
            x, mu, var = batch_norm(x, self.params[f"{name}.bn.weight"], self.params[f"{name}.bn.bias"],
                                    stats=stats)
            if self.training:
                m = BN_MOMENTUM
                self.buffers[mean_key] = (1 - m) * self.buffers[mean_key] + m * mu
                self.buffers[var_key] = (1 - m) * self.buffers[var_key] + m * var
        return silu(x)

    def backbone(self, images: Tensor) -> Tensor:
        x = images
        for i in range(3):
            x = self._hidden(f"backbone.{i}", x)
            for k in range(self.spec.residual if i else 0):
                x = x + self._hidden(f"backbone.{i}.res{k}", x)
        return x

    def forward(self, images, ablate: frozenset[int] | set[int] = frozenset()) -> HierHeadOutput:
        """Run the network; exports from levels in ``ablate`` are replaced by zeros."""
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim != 4 or images.shape[1] != self.spec.in_channels:
            raise ShapeMismatch(f"expected (B, {self.spec.in_channels}, H, W) images, got {images.shape}")
        if images.shape[2] % STRIDE or images.shape[3] % STRIDE:
            raise ShapeMismatch(f"image size {images.shape[2:]} not divisible by stride {STRIDE}")
        feat = self.backbone(images)

        b = self._hidden("box.conv1", feat)
        b = self._hidden("box.conv2", b)
        box_map = self._conv("box.out", b)

        v = self.variant
        exports: dict[int, Tensor] = {}
        logits = []
        for level in range(self.depth):
            p = f"head.l{level}"
            incoming = []
            for src in v.sources(level):
                e = exports[src]
                incoming.append(Tensor(np.zeros(e.shape)) if src in ablate else e)

            def merge(x, point):
                if incoming and v.concat == point:
                    return concat_channels([x] + incoming)
                return x

            x = merge(feat, "input")
            x = merge(self._hidden(f"{p}.conv1", x), "conv1")
            if v.export == "conv1":
                exports[level] = x
            x = merge(self._hidden(f"{p}.conv2", x), "conv2")
            if v.export == "conv2":
                exports[level] = x
            x = self._conv(f"{p}.cls", x)
            if v.extra_conv and level >= 1:
                x = self._conv(f"{p}.refine", merge(x, "cls"))
            if v.export == "final":
                exports[level] = x
            logits.append(x)
        return HierHeadOutput(logits, box_map, self.spec.reg_max)

    __call__ = forward


def build_model(variant: str | HeadVariant, tax: Taxonomy, spec: ModelSpec | None = None,
                seed: int = 0, depth: int | None = None) -> HierModel:
    """Deterministically initialised model; ``depth`` (head levels) must match the taxonomy."""
    if depth is not None and depth != tax.depth:
        raise DepthMismatch(f"{depth} head levels requested for a depth-{tax.depth} taxonomy")
    return HierModel(get_variant(variant), tax, spec or ModelSpec(), seed)


def decode(output: HierHeadOutput, conf_threshold: float = 0.25, tax: Taxonomy | None = None
           ) -> list[list[DetectionPrediction]]:
    """Per-image detections for cells whose best deepest-level score reaches the threshold."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must be in [0, 1], got {conf_threshold}")
    b, h, w = output.grid
    scores = [_sigmoid_np(flatten_cells(t).data) for t in output.level_logits]
    classes = [s.argmax(axis=1) for s in scores]
    confs = [s.max(axis=1) for s in scores]
    keep = np.flatnonzero(confs[-1] >= conf_threshold)
    boxes = output.level_boxes(len(scores) - 1)[keep] if keep.size else np.zeros((0, 4))
    result: list[list[DetectionPrediction]] = [[] for _ in range(b)]
    for row, box in zip(keep, boxes):
        result[row // (h * w)].append(DetectionPrediction(
            box=tuple(float(v) for v in box),
            classes=tuple(int(c[row]) for c in classes),
            confs=tuple(float(c[row]) for c in confs),
        ))
    return result
