"""Multi-level feature merging: collapse a per-layer stack into one [B,T,D] tensor.

Five strategies: plain means over a layer range (including the deep half),
simplex-weighted sums of raw layers (layerscale), and layerscale over
per-layer alignment modules, either linear+layernorm (LLN) or a 3x3
convolution with batch norm over the token grid.

The simplex constraint on the per-layer weights is realized by optimizing
free logits and passing them through softmax, so nonnegativity and sum-to-1
hold at every optimizer step by construction. Mean merges reuse the same
uniform-weight accumulation as layerscale, making the two bitwise equal for
uniform logits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .encoder import LayerFeatures
from .params import ParameterSet
from .tensor import ShapeError, Tensor


class MergeKind(str, Enum):
    MEAN_HALF = "mean_half"
    MEAN_ALL = "mean_all"
    MEAN_RANGE = "mean_range"
    LAYERSCALE = "layerscale"
    LLN_LAYERSCALE = "lln_layerscale"
    CONV_LAYERSCALE = "conv_layerscale"


_RANGE_RE = re.compile(r"^mean_range\((\d+),\s*(\d+)\)$")


@dataclass(frozen=True)
class MergeStrategy:
    kind: MergeKind
    a: int | None = None  # 1-based inclusive, MEAN_RANGE only
    b: int | None = None

    def __post_init__(self):
        if self.kind is MergeKind.MEAN_RANGE:
            if self.a is None or self.b is None or not 1 <= self.a <= self.b:
                raise ValueError(f"mean_range needs 1 <= a <= b, got ({self.a}, {self.b})")
        elif self.a is not None or self.b is not None:
            raise ValueError(f"{self.kind.value} takes no range arguments")

    @classmethod
    def parse(cls, text: str) -> "MergeStrategy":
        m = _RANGE_RE.match(text.strip())
        if m:
            return cls(MergeKind.MEAN_RANGE, int(m.group(1)), int(m.group(2)))
        try:
            return cls(MergeKind(text.strip()))
        except ValueError:
            raise ValueError(f"unknown merge strategy: {text!r}") from None

    def label(self) -> str:
        if self.kind is MergeKind.MEAN_RANGE:
            return f"mean_range({self.a},{self.b})"
        return self.kind.value

    def selected_layers(self, n_layers: int) -> list[int]:
        """1-based layer indices this strategy consumes."""
        if self.kind is MergeKind.MEAN_HALF:
            # true mean over the last ceil(N/2) layers
            start = n_layers - (n_layers + 1) // 2 + 1
            return list(range(start, n_layers + 1))
        if self.kind is MergeKind.MEAN_RANGE:
            if self.b > n_layers:
                raise ShapeError(f"range ({self.a},{self.b}) exceeds {n_layers} layers")
            return list(range(self.a, self.b + 1))
        return list(range(1, n_layers + 1))


# ---------------------------------------------------------------------------
# alignment-module parameters
# ---------------------------------------------------------------------------


@dataclass
class LLNParams:
    """Per selected layer: LN gain/bias and a linear map, plus the apply order.

    ``shared=True`` aliases one underlying module across layers.
    """

    pset: ParameterSet
    n_layers: int
    dim: int
    order: str = "ln_linear"  # or "linear_ln"
    shared: bool = False

    def key(self, i: int) -> str:
        return "shared" if self.shared else f"l{i:02d}"


def init_lln(
    n_layers: int,
    dim: int,
    *,
    order: str = "ln_linear",
    shared: bool = False,
    prefix: str = "lln",
) -> LLNParams:
    """Identity-initialized alignment: Linear starts as the identity map."""
    if order not in ("ln_linear", "linear_ln"):
        raise ValueError(f"bad lln order: {order}")
    pset = ParameterSet()
    keys = ["shared"] if shared else [f"l{i:02d}" for i in range(n_layers)]
    for key in keys:
        pset.new(f"{prefix}/{key}/lin/w", Tensor(np.eye(dim)))
        pset.new(f"{prefix}/{key}/lin/b", Tensor(np.zeros(dim)))
        pset.new(f"{prefix}/{key}/ln/g", Tensor(np.ones(dim)))
        pset.new(f"{prefix}/{key}/ln/b", Tensor(np.zeros(dim)))
    out = LLNParams(pset, n_layers, dim, order=order, shared=shared)
    out._prefix = prefix  # type: ignore[attr-defined]
    return out


def apply_lln(x: Tensor, lln: LLNParams, i: int) -> Tensor:
    prefix = getattr(lln, "_prefix", "lln")
    key = lln.key(i)
    w = lln.pset[f"{prefix}/{key}/lin/w"].value
    b = lln.pset[f"{prefix}/{key}/lin/b"].value
    g = lln.pset[f"{prefix}/{key}/ln/g"].value
    beta = lln.pset[f"{prefix}/{key}/ln/b"].value
    if lln.order == "ln_linear":
        return T.linear(T.layer_norm(x, g, beta), w, b)
    return T.layer_norm(T.linear(x, w, b), g, beta)


@dataclass
class ConvParams:
    """Per selected layer: a 3x3 kernel plus batch-norm state over channels."""

    pset: ParameterSet
    n_layers: int
    dim: int
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]
    momentum: float = 0.1
    eps: float = 1e-5


def init_conv(n_layers: int, dim: int, *, prefix: str = "conv") -> ConvParams:
    """Center-tap identity kernels; batch norm starts as the identity affine."""
    pset = ParameterSet()
    for i in range(n_layers):
        kernel = np.zeros((dim, dim, 3, 3))
        kernel[np.arange(dim), np.arange(dim), 1, 1] = 1.0
        pset.new(f"{prefix}/l{i:02d}/k", Tensor(kernel))
        pset.new(f"{prefix}/l{i:02d}/bn/g", Tensor(np.ones(dim)))
        pset.new(f"{prefix}/l{i:02d}/bn/b", Tensor(np.zeros(dim)))
    out = ConvParams(
        pset,
        n_layers,
        dim,
        running_mean=[np.zeros(dim) for _ in range(n_layers)],
        running_var=[np.ones(dim) for _ in range(n_layers)],
    )
    out._prefix = prefix  # type: ignore[attr-defined]
    return out


def _batch_norm(x: Tensor, conv: ConvParams, i: int, mode: str) -> Tensor:
    """Channel batch norm on [B,D,H,W]; batch stats in train mode, running in eval."""
    prefix = getattr(conv, "_prefix", "conv")
    gain = conv.pset[f"{prefix}/l{i:02d}/bn/g"].value
    bias = conv.pset[f"{prefix}/l{i:02d}/bn/b"].value
    if mode == "train":
        mu = T.reduce_mean(x, axis=(0, 2, 3), keepdims=True)
        centered = T.sub(x, mu)
        var = T.reduce_mean(T.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        # running stats track the batch stats but never feed gradients
        m = conv.momentum
        conv.running_mean[i] = (1 - m) * conv.running_mean[i] + m * mu.data.reshape(-1)
        conv.running_var[i] = (1 - m) * conv.running_var[i] + m * var.data.reshape(-1)
        inv = T.div(Tensor(np.ones(var.shape)), T.sqrt(T.add(var, Tensor(np.full(var.shape, conv.eps)))))
        xhat = T.mul(centered, inv)
    elif mode == "eval":
        mu = conv.running_mean[i].reshape(1, -1, 1, 1)
        var = conv.running_var[i].reshape(1, -1, 1, 1)
        xhat = T.mul(T.sub(x, Tensor(mu)), Tensor(1.0 / np.sqrt(var + conv.eps)))
    else:
        raise ValueError(f"bad batch-norm mode: {mode}")
    g4 = T.reshape(gain, (1, -1, 1, 1))
    b4 = T.reshape(bias, (1, -1, 1, 1))
    return T.add(T.mul(xhat, g4), b4)


def apply_conv(x: Tensor, conv: ConvParams, i: int, grid: tuple[int, int], mode: str) -> Tensor:
    """[B,T,D] -> conv+bn over the token grid -> [B,T,D]."""
    b, t, d = x.shape
    rows, cols = grid
    if rows * cols != t:
        raise ShapeError(f"grid {grid} does not tile {t} tokens")
    prefix = getattr(conv, "_prefix", "conv")
    img = T.transpose(T.reshape(x, (b, rows, cols, d)), (0, 3, 1, 2))
    img = T.conv2d_3x3(img, conv.pset[f"{prefix}/l{i:02d}/k"].value)
    img = _batch_norm(img, conv, i, mode)
    return T.reshape(T.transpose(img, (0, 2, 3, 1)), (b, t, d))


# ---------------------------------------------------------------------------
# merge operations
# ---------------------------------------------------------------------------


def weights_from_logits(logits: Tensor) -> Tensor:
    """Simplex weights for the selected layers: softmax over free logits."""
    if logits.ndim != 1 or logits.size < 1:
        raise ShapeError(f"logits must be a non-empty vector, got {logits.shape}")
    return T.softmax(logits, axis=0)


def _weighted_sum(stacks: list[Tensor], weights: list[Tensor]) -> Tensor:
    out = T.mul(weights[0], stacks[0])
    for w, z in zip(weights[1:], stacks[1:]):
        out = T.add(out, T.mul(w, z))
    return out


def merge_mean(lf: LayerFeatures, a: int, b: int) -> Tensor:
    """Arithmetic mean of layers a..b (1-based, inclusive)."""
    if not 1 <= a <= b <= lf.n_layers:
        raise ShapeError(f"invalid layer range ({a},{b}) for {lf.n_layers} layers")
    k = b - a + 1
    uniform = [Tensor(np.asarray(1.0 / k)) for _ in range(k)]
    return _weighted_sum([lf.layer(i) for i in range(a, b + 1)], uniform)


def merge_layerscale(lf: LayerFeatures, logits: Tensor) -> Tensor:
    """Simplex-weighted sum of the raw layer stacks."""
    if logits.size != lf.n_layers:
        raise ShapeError(f"{logits.size} logits for {lf.n_layers} layers")
    w = weights_from_logits(logits)
    return _weighted_sum(list(lf.layers), [T.take(w, i) for i in range(lf.n_layers)])


def merge_lln_layerscale(lf: LayerFeatures, lln: LLNParams, logits: Tensor) -> Tensor:
    """Per-layer align (LN then Linear by default), then simplex-weighted sum."""
    if logits.size != lf.n_layers or lln.n_layers != lf.n_layers:
        raise ShapeError(
            f"params cover {lln.n_layers} layers / {logits.size} logits, stack has {lf.n_layers}"
        )
    w = weights_from_logits(logits)
    aligned = [apply_lln(lf.layer(i + 1), lln, i) for i in range(lf.n_layers)]
    return _weighted_sum(aligned, [T.take(w, i) for i in range(lf.n_layers)])


def merge_conv_layerscale(
    lf: LayerFeatures,
    conv: ConvParams,
    logits: Tensor,
    grid: tuple[int, int],
    mode: str = "train",
) -> Tensor:
    """Per-layer conv+bn over the token grid, then simplex-weighted sum."""
    if logits.size != lf.n_layers or conv.n_layers != lf.n_layers:
        raise ShapeError(
            f"params cover {conv.n_layers} layers / {logits.size} logits, stack has {lf.n_layers}"
        )
    w = weights_from_logits(logits)
    aligned = [apply_conv(lf.layer(i + 1), conv, i, grid, mode) for i in range(lf.n_layers)]
    return _weighted_sum(aligned, [T.take(w, i) for i in range(lf.n_layers)])


# ---------------------------------------------------------------------------
# strategy bundle: parameters + dispatch
# ---------------------------------------------------------------------------


@dataclass
class MergeModule:
    """A strategy with its parameters, applied to stacks of a fixed depth."""

    strategy: MergeStrategy
    n_layers: int
    dim: int
    grid: tuple[int, int]
    logits: "T.Parameter | None" = None
    lln: LLNParams | None = None
    conv: ConvParams | None = None
    lln_order: str = "ln_linear"
    lln_shared: bool = False

    def parameters(self) -> list:
        out = []
        if self.logits is not None:
            out.append(self.logits)
        if self.lln is not None:
            out.extend(self.lln.pset.parameters())
        if self.conv is not None:
            out.extend(self.conv.pset.parameters())
        return out

    def select(self, lf: LayerFeatures) -> LayerFeatures:
        picked = self.strategy.selected_layers(lf.n_layers)
        return LayerFeatures(tuple(lf.layer(i) for i in picked))

    def apply(self, lf: LayerFeatures, mode: str = "train") -> Tensor:
        kind = self.strategy.kind
        if kind in (MergeKind.MEAN_HALF, MergeKind.MEAN_ALL, MergeKind.MEAN_RANGE):
            picked = self.strategy.selected_layers(lf.n_layers)
            return merge_mean(lf, picked[0], picked[-1])
        if kind is MergeKind.LAYERSCALE:
            return merge_layerscale(lf, self.logits.value)
        if kind is MergeKind.LLN_LAYERSCALE:
            return merge_lln_layerscale(lf, self.lln, self.logits.value)
        return merge_conv_layerscale(lf, self.conv, self.logits.value, self.grid, mode)


def init_merge_module(
    strategy: MergeStrategy,
    n_layers: int,
    dim: int,
    grid: tuple[int, int],
    *,
    lln_order: str = "ln_linear",
    lln_shared: bool = False,
) -> MergeModule:
    """Build the parameters a strategy needs; uniform (zero) logit init."""
    from .tensor import Parameter

    mod = MergeModule(strategy, n_layers, dim, grid, lln_order=lln_order, lln_shared=lln_shared)
    kind = strategy.kind
    if kind in (MergeKind.LAYERSCALE, MergeKind.LLN_LAYERSCALE, MergeKind.CONV_LAYERSCALE):
        mod.logits = Parameter("merge/logits", Tensor(np.zeros(n_layers)))
    if kind is MergeKind.LLN_LAYERSCALE:
        mod.lln = init_lln(n_layers, dim, order=lln_order, shared=lln_shared, prefix="merge/lln")
    if kind is MergeKind.CONV_LAYERSCALE:
        mod.conv = init_conv(n_layers, dim, prefix="merge/conv")
    return mod
