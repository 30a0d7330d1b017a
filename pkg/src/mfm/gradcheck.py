"""Finite-difference verification suite for every differentiable operation.

Each named check builds a small random instance, computes analytic gradients
through the tape, recomputes them with central differences, and reports the
max relative error (relative to max(1, |analytic|)). Runs in the 64-bit mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, LayerFeatures, encode, init_encoder
from .fusion import FusionConfig, fuse, init_fusion, mlp_align
from .merge import (
    MergeKind,
    MergeStrategy,
    init_merge_module,
)
from .tensor import GradTape, Parameter, Tensor, backward, finite_diff_grad, precision, rel_error

FD_STEP = 1e-4


@dataclass(frozen=True)
class GradCheckRow:
    op: str
    instance: int
    target: str  # which parameter or input was differentiated
    max_rel_error: float


def _analytic(loss_fn: Callable[[], Tensor], params: list[Parameter]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    return [p.grad.copy() for p in params]


def _fd_param(loss_fn: Callable[[], Tensor], param: Parameter) -> np.ndarray:
    orig = param.value

    def f(x: Tensor) -> Tensor:
        param.value = x
        return loss_fn()

    try:
        return finite_diff_grad(f, orig, h=FD_STEP).data
    finally:
        param.value = orig


def check_params(op: str, instance: int, loss_fn, params: list[Parameter]) -> list[GradCheckRow]:
    rows = []
    analytic = _analytic(loss_fn, params)
    for p, got in zip(params, analytic):
        want = _fd_param(loss_fn, p)
        rows.append(GradCheckRow(op, instance, p.name, rel_error(got, want)))
    return rows


def check_sampled(
    op: str, instance: int, loss_fn, params: list[Parameter], n_coords: int, rng
) -> list[GradCheckRow]:
    """Spot-check n_coords coordinates sampled across the parameter vector."""
    analytic = _analytic(loss_fn, params)
    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat_idx in sorted(int(i) for i in picks):
        which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = flat_idx - offsets[which]
        p = params[which]
        base = p.value.data.reshape(-1).copy()
        orig = p.value
        try:
            for sign, store in ((+1, "hi"), (-1, "lo")):
                bumped = base.copy()
                bumped[local] += sign * FD_STEP
                p.value = Tensor(bumped.reshape(p.value.shape))
                if sign > 0:
                    hi = loss_fn().item()
                else:
                    lo = loss_fn().item()
        finally:
            p.value = orig
        fd = (hi - lo) / (2 * FD_STEP)
        got = analytic[which].reshape(-1)[local]
        worst = max(worst, rel_error(np.asarray(got), np.asarray(fd)))
    return [GradCheckRow(op, instance, f"sampled{len(picks)}", worst)]


def _projection_loss(out: Tensor, rng) -> tuple[Tensor, Tensor]:
    r = Tensor(rng.normal(size=out.shape))
    return T.reduce_sum(T.mul(out, r)), r


def _rand_lf(rng, n_layers=3, b=2, t=4, d=4) -> LayerFeatures:
    return LayerFeatures(tuple(Tensor(rng.normal(size=(b, t, d))) for _ in range(n_layers)))


def _strategy_rows(kind: MergeKind, instance: int, rng) -> list[GradCheckRow]:
    n_layers, d, grid = 3, 4, (2, 2)
    strategy = {
        MergeKind.MEAN_HALF: MergeStrategy(MergeKind.MEAN_HALF),
        MergeKind.MEAN_ALL: MergeStrategy(MergeKind.MEAN_ALL),
        MergeKind.MEAN_RANGE: MergeStrategy(MergeKind.MEAN_RANGE, 1, 2),
        MergeKind.LAYERSCALE: MergeStrategy(MergeKind.LAYERSCALE),
        MergeKind.LLN_LAYERSCALE: MergeStrategy(MergeKind.LLN_LAYERSCALE),
        MergeKind.CONV_LAYERSCALE: MergeStrategy(MergeKind.CONV_LAYERSCALE),
    }[kind]
    module = init_merge_module(strategy, n_layers, d, grid)
    # jitter away from the identity init so the check is not at a special point
    for p in module.parameters():
        p.value = Tensor(p.value.data + rng.normal(0.0, 0.05, size=p.value.shape))
    stack = _rand_lf(rng, n_layers, d=d)
    picked = strategy.selected_layers(n_layers)
    sub = LayerFeatures(tuple(stack.layer(i) for i in picked))
    proj = {}

    def loss_fn():
        out = module.apply(sub, mode="eval") if kind is MergeKind.CONV_LAYERSCALE else module.apply(sub)
        if "r" not in proj:
            proj["r"] = Tensor(rng.normal(size=out.shape))
        return T.reduce_sum(T.mul(out, proj["r"]))

    params = module.parameters()
    if params:
        return check_params(kind.value, instance, loss_fn, params)
    # mean strategies have no parameters; differentiate the input layers
    holders = [Parameter(f"input/layer{i}", t) for i, t in enumerate(sub.layers)]

    def loss_from_inputs():
        lf = LayerFeatures(tuple(h.value for h in holders))
        out = module.apply(lf)
        if "r" not in proj:
            proj["r"] = Tensor(rng.normal(size=out.shape))
        return T.reduce_sum(T.mul(out, proj["r"]))

    return check_params(kind.value, instance, loss_from_inputs, holders)


def _basic_rows(instance: int, rng) -> list[GradCheckRow]:
    rows = []
    # matmul, both operands, rank 2 and batched rank 3
    a = Parameter("a", Tensor(rng.normal(size=(2, 4))))
    b = Parameter("b", Tensor(rng.normal(size=(4, 3))))
    proj = Tensor(rng.normal(size=(2, 3)))
    rows += check_params(
        "matmul", instance, lambda: T.reduce_sum(T.mul(T.matmul(a.value, b.value), proj)), [a, b]
    )
    a3 = Parameter("a3", Tensor(rng.normal(size=(2, 3, 4))))
    proj3 = Tensor(rng.normal(size=(2, 3, 3)))
    rows += check_params(
        "matmul_batched", instance,
        lambda: T.reduce_sum(T.mul(T.matmul(a3.value, b.value), proj3)), [a3, b],
    )
    # layer_norm: input, gain, bias
    x = Parameter("x", Tensor(rng.normal(size=(3, 5)) * 2.0))
    g = Parameter("gain", Tensor(rng.normal(size=5) + 1.0))
    bb = Parameter("bias", Tensor(rng.normal(size=5)))
    pn = Tensor(rng.normal(size=(3, 5)))
    rows += check_params(
        "layer_norm", instance,
        lambda: T.reduce_sum(T.mul(T.layer_norm(x.value, g.value, bb.value), pn)), [x, g, bb],
    )
    # softmax over the last axis
    s = Parameter("logits", Tensor(rng.normal(size=(3, 5))))
    ps = Tensor(rng.normal(size=(3, 5)))
    rows += check_params(
        "softmax", instance,
        lambda: T.reduce_sum(T.mul(T.softmax(s.value, axis=-1), ps)), [s],
    )
    return rows


def _mlp_rows(instance: int, rng) -> list[GradCheckRow]:
    rows = []
    for m in (0, 2):
        cfg = FusionConfig(depth_a=3, depth_b=3, dim_a=4, dim_b=4, out_dim=5, mlp_blocks=m, mlp_ratio=4)
        params = init_fusion(cfg, seed=instance)
        for p in params.mlp.parameters():
            p.value = Tensor(p.value.data + rng.normal(0.0, 0.05, size=p.value.shape))
        x = Tensor(rng.normal(size=(2, 4, 4)))
        proj = Tensor(rng.normal(size=(2, 4, 4)))
        rows += check_params(
            f"mlp_align_m{m}", instance,
            lambda: T.reduce_sum(T.mul(mlp_align(x, m, cfg.mlp_ratio, params.mlp), proj)),
            params.mlp.parameters(),
        )
    return rows


def _fuse_rows(instance: int, rng, n_coords: int = 30) -> list[GradCheckRow]:
    cfg = FusionConfig(depth_a=3, depth_b=3, dim_a=4, dim_b=4, out_dim=5, mlp_blocks=1, mlp_ratio=4)
    params = init_fusion(cfg, seed=instance)
    for p in params.parameters():
        p.value = Tensor(p.value.data + rng.normal(0.0, 0.05, size=p.value.shape))
    lf_a = _rand_lf(rng, 3, d=4)
    lf_b = _rand_lf(rng, 3, d=4)
    proj = Tensor(rng.normal(size=(2, 4, 5)))

    def loss_fn():
        return T.reduce_sum(T.mul(fuse(lf_a, lf_b, cfg, params), proj))

    return check_sampled("fuse", instance, loss_fn, params.parameters(), n_coords, rng)


def _encode_rows(instance: int, rng, n_coords: int = 20) -> list[GradCheckRow]:
    cfg = EncoderConfig(depth=2, dim=8, heads=2, patch=3, image_size=(6, 6), seed=instance)
    pset = init_encoder(cfg)
    for p in pset:
        p.value = Tensor(p.value.data + rng.normal(0.0, 0.02, size=p.value.shape))
    images = Tensor(rng.normal(size=(2, 3, 6, 6)) * 0.5)
    proj = Tensor(rng.normal(size=(2, cfg.tokens, cfg.dim)))

    def loss_fn():
        return T.reduce_sum(T.mul(encode(images, pset, cfg).layers[-1], proj))

    return check_sampled("encode", instance, loss_fn, pset.parameters(), n_coords, rng)


def run_suite(seed: int = 0, instances: int = 10) -> list[GradCheckRow]:
    """All checks; every differentiable operation on `instances` random instances."""
    rows: list[GradCheckRow] = []
    with precision(64):
        for i in range(instances):
            rng = np.random.default_rng((seed << 16) + i)
            rows += _basic_rows(i, rng)
            for kind in MergeKind:
                rows += _strategy_rows(kind, i, rng)
            rows += _mlp_rows(i, rng)
            rows += _fuse_rows(i, rng)
            rows += _encode_rows(i, rng)
    return rows


def rows_to_csv(rows: Iterable[GradCheckRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("op,instance,target,max_rel_error\n")
        for r in rows:
            fh.write(f"{r.op},{r.instance},{r.target},{repr(r.max_rel_error)}\n")
