"""Dual-branch fusion: merge one encoder's full stack and a second encoder's
deep stack with per-layer LLN alignment and simplex weights, pass the second
branch through an MLP projector, concatenate along features, and project to
the output dimension.

MLP block layout (``mlp_block``): LN -> Linear(D2 -> r*D2) -> GELU ->
Linear(r*D2 -> D2), no residual. ``mlp_blocks=0`` means one plain linear map.

Learnable-scalar count for ``FusionConfig``:

    per branch:  |layers| logits + per layer (D*D + D + 2D)   [LLN]
    projector:   m blocks of (2*D2 + D2*r*D2 + r*D2 + r*D2*D2 + D2)
                 or, for m=0, one linear D2*D2 + D2
    head:        (D1 + D2) * out_dim + out_dim
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import LayerFeatures
from .merge import LLNParams, apply_lln, init_lln, weights_from_logits
from .params import ParameterSet, merge_sets
from .tensor import Parameter, ShapeError, Tensor

VALIDATED_BLOCKS = (0, 1, 2, 4, 8)
VALIDATED_RATIOS = (4, 8, 16)


def default_deep_quarter(n_layers: int) -> tuple[int, ...]:
    """Last ceil(N/4) layers, mirroring a deep-quarter selection of a 24-layer stack."""
    count = (n_layers + 3) // 4
    return tuple(range(n_layers - count + 1, n_layers + 1))


@dataclass(frozen=True)
class FusionConfig:
    depth_a: int = 8
    depth_b: int = 8
    dim_a: int = 32
    dim_b: int = 32
    out_dim: int = 64
    mlp_blocks: int = 2
    mlp_ratio: int = 4
    branch_a_layers: tuple[int, ...] | None = None  # default: all of encoder A
    branch_b_layers: tuple[int, ...] | None = None  # default: deep quarter of encoder B
    lln_order: str = "ln_linear"
    lln_shared: bool = False

    def __post_init__(self):
        if self.mlp_blocks < 0 or self.mlp_ratio < 1 or self.out_dim < 1:
            raise ValueError("mlp_blocks >= 0, mlp_ratio >= 1, out_dim >= 1 required")
        for name, layers, depth in (
            ("branch_a_layers", self.layers_a, self.depth_a),
            ("branch_b_layers", self.layers_b, self.depth_b),
        ):
            if not layers:
                raise ValueError(f"{name} must be non-empty")
            if any(not 1 <= i <= depth for i in layers):
                raise ValueError(f"{name} {layers} out of 1..{depth}")
        if self.mlp_blocks not in VALIDATED_BLOCKS or self.mlp_ratio not in VALIDATED_RATIOS:
            warnings.warn(
                f"mlp config (blocks={self.mlp_blocks}, ratio={self.mlp_ratio}) is outside "
                f"the validated grid {VALIDATED_BLOCKS} x {VALIDATED_RATIOS}"
            )

    @property
    def layers_a(self) -> tuple[int, ...]:
        return self.branch_a_layers or tuple(range(1, self.depth_a + 1))

    @property
    def layers_b(self) -> tuple[int, ...]:
        return self.branch_b_layers or default_deep_quarter(self.depth_b)


@dataclass
class FusionParams:
    alpha_logits: Parameter
    beta_logits: Parameter
    lln_a: LLNParams
    lln_b: LLNParams
    mlp: ParameterSet
    proj_w: Parameter
    proj_b: Parameter

    def parameters(self) -> list[Parameter]:
        return (
            [self.alpha_logits, self.beta_logits]
            + self.lln_a.pset.parameters()
            + self.lln_b.pset.parameters()
            + self.mlp.parameters()
            + [self.proj_w, self.proj_b]
        )

    def parameter_set(self) -> ParameterSet:
        """All parameters under the serialization prefix ``fusion/``."""
        return ParameterSet(self.parameters())


def init_fusion(cfg: FusionConfig, seed: int = 0) -> FusionParams:
    rng = np.random.default_rng(seed)
    d2, r, m = cfg.dim_b, cfg.mlp_ratio, cfg.mlp_blocks
    lln_a = init_lln(
        len(cfg.layers_a), cfg.dim_a, order=cfg.lln_order, shared=cfg.lln_shared,
        prefix="fusion/a/lln",
    )
    lln_b = init_lln(
        len(cfg.layers_b), cfg.dim_b, order=cfg.lln_order, shared=cfg.lln_shared,
        prefix="fusion/b/lln",
    )
    mlp = ParameterSet()
    if m == 0:
        mlp.new("fusion/mlp/lin/w", Tensor(np.eye(d2)))
        mlp.new("fusion/mlp/lin/b", Tensor(np.zeros(d2)))
    else:
        for i in range(m):
            pre = f"fusion/mlp/b{i:02d}"
            mlp.new(f"{pre}/ln/g", Tensor(np.ones(d2)))
            mlp.new(f"{pre}/ln/b", Tensor(np.zeros(d2)))
            mlp.new(f"{pre}/w1", Tensor(rng.normal(0.0, 0.02, size=(d2, r * d2))))
            mlp.new(f"{pre}/b1", Tensor(np.zeros(r * d2)))
            mlp.new(f"{pre}/w2", Tensor(rng.normal(0.0, 0.02, size=(r * d2, d2))))
            mlp.new(f"{pre}/b2", Tensor(np.zeros(d2)))
    return FusionParams(
        alpha_logits=Parameter("fusion/alpha", Tensor(np.zeros(len(cfg.layers_a)))),
        beta_logits=Parameter("fusion/beta", Tensor(np.zeros(len(cfg.layers_b)))),
        lln_a=lln_a,
        lln_b=lln_b,
        mlp=mlp,
        proj_w=Parameter(
            "fusion/proj/w", Tensor(rng.normal(0.0, 0.02, size=(cfg.dim_a + cfg.dim_b, cfg.out_dim)))
        ),
        proj_b=Parameter("fusion/proj/b", Tensor(np.zeros(cfg.out_dim))),
    )


def branch_merge(
    lf: LayerFeatures, layer_set: tuple[int, ...], lln: LLNParams, logits: Tensor
) -> Tensor:
    """Simplex-weighted sum of aligned features restricted to `layer_set`."""
    if not layer_set:
        raise ShapeError("branch layer set is empty")
    if any(not 1 <= i <= lf.n_layers for i in layer_set):
        raise ShapeError(f"layer set {layer_set} out of 1..{lf.n_layers}")
    if logits.size != len(layer_set) or lln.n_layers != len(layer_set):
        raise ShapeError(
            f"params cover {lln.n_layers} layers / {logits.size} logits for set of {len(layer_set)}"
        )
    w = weights_from_logits(logits)
    out = None
    for pos, layer_idx in enumerate(layer_set):
        aligned = apply_lln(lf.layer(layer_idx), lln, pos)
        term = T.mul(T.take(w, pos), aligned)
        out = term if out is None else T.add(out, term)
    return out


def mlp_align(x: Tensor, m: int, r: int, mlp: ParameterSet) -> Tensor:
    """Project branch-B features: m stacked blocks, or one linear map for m=0."""
    if m < 0:
        raise ValueError("mlp_blocks must be >= 0")
    if m == 0:
        return T.linear(x, mlp["fusion/mlp/lin/w"].value, mlp["fusion/mlp/lin/b"].value)
    for i in range(m):
        pre = f"fusion/mlp/b{i:02d}"
        h = T.layer_norm(x, mlp[f"{pre}/ln/g"].value, mlp[f"{pre}/ln/b"].value)
        h = T.gelu(T.linear(h, mlp[f"{pre}/w1"].value, mlp[f"{pre}/b1"].value))
        x = T.linear(h, mlp[f"{pre}/w2"].value, mlp[f"{pre}/b2"].value)
    return x


def fuse(lf_a: LayerFeatures, lf_b: LayerFeatures, cfg: FusionConfig, params: FusionParams) -> Tensor:
    """Full pipeline: branch merges, branch-B MLP, concat, linear head."""
    ta, tb = lf_a.shape[1], lf_b.shape[1]
    if ta != tb:
        raise ShapeError(f"branch token counts differ: {ta} vs {tb}")
    if lf_a.shape[0] != lf_b.shape[0]:
        raise ShapeError(f"branch batch sizes differ: {lf_a.shape[0]} vs {lf_b.shape[0]}")
    va = branch_merge(lf_a, cfg.layers_a, params.lln_a, params.alpha_logits.value)
    vb = branch_merge(lf_b, cfg.layers_b, params.lln_b, params.beta_logits.value)
    vb = mlp_align(vb, cfg.mlp_blocks, cfg.mlp_ratio, params.mlp)
    joined = T.concat([va, vb], axis=-1)
    return T.linear(joined, params.proj_w.value, params.proj_b.value)


def count_params(cfg: FusionConfig) -> int:
    """Exact learnable-scalar count; closed form in the module docstring."""
    d1, d2, r, m = cfg.dim_a, cfg.dim_b, cfg.mlp_ratio, cfg.mlp_blocks
    na, nb = len(cfg.layers_a), len(cfg.layers_b)

    def lln_count(n, d):
        per_layer = d * d + d + 2 * d
        return per_layer if cfg.lln_shared else n * per_layer

    branches = na + nb + lln_count(na, d1) + lln_count(nb, d2)
    if m == 0:
        projector = d2 * d2 + d2
    else:
        projector = m * (2 * d2 + d2 * r * d2 + r * d2 + r * d2 * d2 + d2)
    head = (d1 + d2) * cfg.out_dim + cfg.out_dim
    return branches + projector + head
