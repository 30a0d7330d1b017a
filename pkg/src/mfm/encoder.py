"""Toy vision transformer that exposes every layer's patch-token features.

The encoder is a standard pre-norm ViT without a CLS token: images are cut
into non-overlapping patches, linearly embedded, given learned absolute
position embeddings, and passed through `depth` blocks of multi-head
attention and a GELU feed-forward, both with residual connections. The
feature stack tapped after each block's second residual is the unit of
analysis for all merging and probing.

Parameter count for ``EncoderConfig(depth=N, dim=D, heads, patch=p,
image_size=(H, W), in_channels=C, mlp_ratio=r)`` with T = (H/p)(W/p) tokens:

    embed:      C*p*p*D + D
    positions:  T*D
    per block:  2D (ln1) + 4*(D*D + D) (q,k,v,out) + 2D (ln2)
                + D*r*D + r*D + r*D*D + D (feed-forward)
    total:      embed + positions + N * block
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .optim import Adam, batch_stream, cosine_lr, cross_entropy, mse_loss
from .params import ParameterSet
from .tensor import GradTape, ShapeError, Tensor, backward


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 8
    dim: int = 32
    heads: int = 4
    patch: int = 6
    image_size: tuple[int, int] = (36, 36)
    in_channels: int = 3
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if self.depth < 1 or self.dim < 1 or self.heads < 1 or self.patch < 1:
            raise ValueError("depth, dim, heads and patch must be positive")
        if h % self.patch or w % self.patch:
            raise ShapeError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ShapeError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch, self.image_size[1] // self.patch)

    @property
    def tokens(self) -> int:
        rows, cols = self.grid
        return rows * cols

    def param_count(self) -> int:
        """Closed-form learnable scalar count, per the module docstring."""
        c, p, d, r = self.in_channels, self.patch, self.dim, self.mlp_ratio
        embed = c * p * p * d + d
        pos = self.tokens * d
        block = 2 * d + 4 * (d * d + d) + 2 * d + d * r * d + r * d + r * d * d + d
        return embed + pos + self.depth * block


@dataclass(frozen=True)
class LayerFeatures:
    """Ordered per-layer patch-token stacks, each of shape [B, T, D]."""

    layers: tuple[Tensor, ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("LayerFeatures needs at least one layer")
        shape = self.layers[0].shape
        for i, t in enumerate(self.layers):
            if t.shape != shape:
                raise ShapeError(f"layer {i} shape {t.shape} differs from {shape}")
            if t.ndim != 3:
                raise ShapeError(f"layer features must be [B,T,D], got {t.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.layers[0].shape

    def layer(self, index_1based: int) -> Tensor:
        if not 1 <= index_1based <= self.n_layers:
            raise ShapeError(f"layer index {index_1based} out of 1..{self.n_layers}")
        return self.layers[index_1based - 1]


class PretrainObjective(str, Enum):
    GLOBAL_SUPERVISED = "global_supervised"
    GLOBAL_CONTRASTIVE = "global_contrastive"
    INSTANCE_CONTRASTIVE = "instance_contrastive"
    MASKED_RECONSTRUCTION = "masked_reconstruction"
    RANDOM = "random"


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


def patchify(images: Tensor, patch: int) -> Tensor:
    """Cut [B,C,H,W] into [B, T, C*p*p] patch vectors, row-major over the grid.

    Token t covers grid cell (t // cols, t % cols); see :func:`token_cell`.
    """
    if images.ndim != 4:
        raise ShapeError(f"patchify expects [B,C,H,W], got {images.shape}")
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image size {(h, w)} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    x = images.data.reshape(b, c, rows, patch, cols, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, rows * cols, c * patch * patch)
    return Tensor(x)


def token_cell(token: int, cols: int) -> tuple[int, int]:
    """Inverse of the patchify ordering: token index -> (row, col)."""
    return divmod(token, cols)


def cell_token(row: int, col: int, cols: int) -> int:
    return row * cols + col


# ---------------------------------------------------------------------------
# parameters and forward pass
# ---------------------------------------------------------------------------


def init_encoder(cfg: EncoderConfig) -> ParameterSet:
    """Deterministic init from cfg.seed: N(0, 0.02) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(cfg.seed)
    d, r = cfg.dim, cfg.mlp_ratio
    pset = ParameterSet()

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape))

    pset.new("embed/w", normal(cfg.in_channels * cfg.patch * cfg.patch, d))
    pset.new("embed/b", Tensor(np.zeros(d)))
    pset.new("pos", normal(cfg.tokens, d))
    for i in range(cfg.depth):
        pre = f"blk{i:02d}"
        pset.new(f"{pre}/ln1/g", Tensor(np.ones(d)))
        pset.new(f"{pre}/ln1/b", Tensor(np.zeros(d)))
        for nm in ("q", "k", "v", "o"):
            pset.new(f"{pre}/attn/{nm}/w", normal(d, d))
            pset.new(f"{pre}/attn/{nm}/b", Tensor(np.zeros(d)))
        pset.new(f"{pre}/ln2/g", Tensor(np.ones(d)))
        pset.new(f"{pre}/ln2/b", Tensor(np.zeros(d)))
        pset.new(f"{pre}/mlp/w1", normal(d, r * d))
        pset.new(f"{pre}/mlp/b1", Tensor(np.zeros(r * d)))
        pset.new(f"{pre}/mlp/w2", normal(r * d, d))
        pset.new(f"{pre}/mlp/b2", Tensor(np.zeros(d)))
    return pset


def _attention(x: Tensor, pset: ParameterSet, pre: str, cfg: EncoderConfig) -> Tensor:
    b, t, d = x.shape
    heads = cfg.heads
    hd = d // heads
    q = T.linear(x, pset[f"{pre}/q/w"].value, pset[f"{pre}/q/b"].value)
    k = T.linear(x, pset[f"{pre}/k/w"].value, pset[f"{pre}/k/b"].value)
    v = T.linear(x, pset[f"{pre}/v/w"].value, pset[f"{pre}/v/b"].value)

    def split(z):
        z = T.reshape(z, (b, t, heads, hd))
        z = T.transpose(z, (0, 2, 1, 3))
        return T.reshape(z, (b * heads, t, hd))

    q, k, v = split(q), split(k), split(v)
    scores = T.bmm(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(hd))
    attn = T.softmax(scores, axis=-1)
    mixed = T.bmm(attn, v)
    mixed = T.reshape(mixed, (b, heads, t, hd))
    mixed = T.transpose(mixed, (0, 2, 1, 3))
    mixed = T.reshape(mixed, (b, t, d))
    return T.linear(mixed, pset[f"{pre}/o/w"].value, pset[f"{pre}/o/b"].value)


def embed_tokens(images: Tensor, pset: ParameterSet, cfg: EncoderConfig) -> Tensor:
    tokens = patchify(images, cfg.patch)
    x = T.linear(tokens, pset["embed/w"].value, pset["embed/b"].value)
    return T.add(x, pset["pos"].value)


def encode(images: Tensor, pset: ParameterSet, cfg: EncoderConfig) -> LayerFeatures:
    """Forward pass returning every block's post-residual output, shallow to deep."""
    b, c, h, w = images.shape
    if (h, w) != cfg.image_size or c != cfg.in_channels:
        raise ShapeError(f"image shape {images.shape} does not match config {cfg.image_size}")
    x = embed_tokens(images, pset, cfg)
    return encode_tokens(x, pset, cfg)


def encode_tokens(x: Tensor, pset: ParameterSet, cfg: EncoderConfig) -> LayerFeatures:
    """Run the transformer blocks on already-embedded tokens."""
    taps = []
    for i in range(cfg.depth):
        pre = f"blk{i:02d}"
        normed = T.layer_norm(x, pset[f"{pre}/ln1/g"].value, pset[f"{pre}/ln1/b"].value)
        x = T.add(x, _attention(normed, pset, f"{pre}/attn", cfg))
        normed = T.layer_norm(x, pset[f"{pre}/ln2/g"].value, pset[f"{pre}/ln2/b"].value)
        h1 = T.gelu(T.linear(normed, pset[f"{pre}/mlp/w1"].value, pset[f"{pre}/mlp/b1"].value))
        x = T.add(x, T.linear(h1, pset[f"{pre}/mlp/w2"].value, pset[f"{pre}/mlp/b2"].value))
        taps.append(x)
    return LayerFeatures(tuple(taps))


def mean_pool(features: Tensor) -> Tensor:
    """Mean over the token axis: [B,T,D] -> [B,D]."""
    return T.reduce_mean(features, axis=1)


# ---------------------------------------------------------------------------
# pretraining objectives
# ---------------------------------------------------------------------------


def _l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    sq = T.reduce_sum(T.mul(x, x), axis=-1, keepdims=True)
    return T.div(x, T.sqrt(T.add(sq, Tensor(np.full(sq.shape, eps)))))


def _info_nce(za: Tensor, zb: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE between two aligned batches of embeddings."""
    za = _l2_normalize(za)
    zb = _l2_normalize(zb)
    logits = T.matmul(za, T.transpose(zb)) * (1.0 / temperature)
    labels = np.arange(za.shape[0])
    return (cross_entropy(logits, labels) + cross_entropy(T.transpose(logits), labels)) * 0.5


def _class_contrastive(emb: Tensor, table: Tensor, labels: np.ndarray, temperature: float) -> Tensor:
    """Symmetric contrastive loss between image embeddings and a class table.

    Image -> class is plain cross-entropy over classes; class -> image uses
    uniform soft targets over the images of each class present in the batch.
    """
    emb = _l2_normalize(emb)
    table = _l2_normalize(table)
    logits = T.matmul(emb, T.transpose(table)) * (1.0 / temperature)
    loss_i2c = cross_entropy(logits, labels)

    b, g = logits.shape
    targets = np.zeros((g, b))
    for cls in range(g):
        members = labels == cls
        if members.any():
            targets[cls, members] = 1.0 / members.sum()
    present = targets.sum(axis=1) > 0
    logp = T.log_softmax(T.transpose(logits), axis=-1)
    per_class = T.neg(T.reduce_sum(T.mul(logp, Tensor(targets)), axis=-1))
    mask = Tensor(present.astype(np.float64))
    loss_c2i = T.div(T.reduce_sum(T.mul(per_class, mask)), T.reduce_sum(mask))
    return (loss_i2c + loss_c2i) * 0.5


def _augment(images: np.ndarray, rng: np.random.Generator, patch: int) -> np.ndarray:
    """Random horizontal flip plus a random crop pasted back at the origin."""
    out = images.copy()
    b, _, h, w = out.shape
    flip = rng.random(b) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    max_shift = patch - 1
    for i in range(b):
        dy, dx = rng.integers(0, max_shift + 1, size=2)
        crop = out[i, :, dy:, dx:]
        canvas = np.zeros_like(out[i])
        canvas[:, : h - dy, : w - dx] = crop
        out[i] = canvas
    return out


@dataclass
class PretrainBudget:
    steps: int = 500
    lr: float = 2e-3
    batch: int = 32
    temperature: float = 0.07
    mask_ratio: float = 0.5


def pretrain(
    init: ParameterSet,
    objective: PretrainObjective,
    dataset,
    budget: PretrainBudget,
    cfg: EncoderConfig,
    seed: int = 0,
) -> ParameterSet:
    """Train a copy of `init` under the toy objective and return it frozen.

    `dataset` must expose ``images`` [n,C,H,W], ``global_labels`` [n] and
    ``train_indices``. The returned set is a detached copy; the input set is
    never mutated. History of per-step losses is attached as ``.history``.
    """
    pset = init.copy()
    history: list[float] = []
    if objective is PretrainObjective.RANDOM:
        pset.history = history  # type: ignore[attr-defined]
        return pset
    if budget.steps <= 0:
        warnings.warn(f"pretrain budget is 0 steps for {objective.value}; returning init")
        pset.history = history  # type: ignore[attr-defined]
        return pset

    rng = np.random.default_rng(seed)
    idx_pool = np.asarray(dataset.train_indices)
    images = dataset.images
    labels = dataset.global_labels
    classes = int(labels.max()) + 1
    aux = ParameterSet()
    d = cfg.dim

    if objective is PretrainObjective.GLOBAL_SUPERVISED:
        # non-zero head init so the encoder sees gradient from step one
        aux.new("head/w", Tensor(rng.normal(0.0, 0.02, size=(d, classes))))
        aux.new("head/b", Tensor(np.zeros(classes)))
    elif objective is PretrainObjective.GLOBAL_CONTRASTIVE:
        aux.new("table", Tensor(rng.normal(0.0, 0.02, size=(classes, d))))
    elif objective is PretrainObjective.INSTANCE_CONTRASTIVE:
        aux.new("proj/w", Tensor(rng.normal(0.0, 0.02, size=(d, d))))
    elif objective is PretrainObjective.MASKED_RECONSTRUCTION:
        patch_dim = cfg.in_channels * cfg.patch * cfg.patch
        aux.new("mask_token", Tensor(rng.normal(0.0, 0.02, size=(d,))))
        aux.new("dec/w", Tensor(rng.normal(0.0, 0.02, size=(d, patch_dim))))
        aux.new("dec/b", Tensor(np.zeros(patch_dim)))

    trainable = pset.parameters() + aux.parameters()
    opt = Adam(trainable, lr=budget.lr)

    for step, batch_pos in enumerate(batch_stream(len(idx_pool), budget.batch, budget.steps, rng)):
        batch_idx = idx_pool[batch_pos]
        imgs = Tensor(images[batch_idx])
        with GradTape() as tape:
            if objective is PretrainObjective.GLOBAL_SUPERVISED:
                feats = encode(imgs, pset, cfg)
                pooled = mean_pool(feats.layers[-1])
                logits = T.linear(pooled, aux["head/w"].value, aux["head/b"].value)
                loss = cross_entropy(logits, labels[batch_idx])
            elif objective is PretrainObjective.GLOBAL_CONTRASTIVE:
                feats = encode(imgs, pset, cfg)
                pooled = mean_pool(feats.layers[-1])
                loss = _class_contrastive(
                    pooled, aux["table"].value, labels[batch_idx], budget.temperature
                )
            elif objective is PretrainObjective.INSTANCE_CONTRASTIVE:
                va = Tensor(_augment(images[batch_idx], rng, cfg.patch))
                vb = Tensor(_augment(images[batch_idx], rng, cfg.patch))
                za = T.matmul(mean_pool(encode(va, pset, cfg).layers[-1]), aux["proj/w"].value)
                zb = T.matmul(mean_pool(encode(vb, pset, cfg).layers[-1]), aux["proj/w"].value)
                loss = _info_nce(za, zb, budget.temperature)
            else:  # masked reconstruction
                tokens = patchify(imgs, cfg.patch)
                b, t, _ = tokens.shape
                n_mask = max(1, int(round(budget.mask_ratio * t)))
                mask = np.zeros((b, t), dtype=bool)
                for i in range(b):
                    mask[i, rng.choice(t, size=n_mask, replace=False)] = True
                x = T.linear(tokens, pset["embed/w"].value, pset["embed/b"].value)
                keep = Tensor(np.where(mask, 0.0, 1.0)[..., None])
                fill = Tensor(mask.astype(np.float64)[..., None])
                x = T.add(T.mul(x, keep), T.mul(fill, aux["mask_token"].value))
                x = T.add(x, pset["pos"].value)
                feats = encode_tokens(x, pset, cfg)
                recon = T.linear(feats.layers[-1], aux["dec/w"].value, aux["dec/b"].value)
                diff = T.sub(recon, detached_tokens(tokens))
                sq = T.mul(diff, diff)
                masked = T.mul(sq, fill)
                loss = T.div(T.reduce_sum(masked), Tensor(float(fill.data.sum() * sq.shape[-1])))
        opt.zero_grad()
        backward(tape, loss)
        opt.step(lr=cosine_lr(budget.lr, step, budget.steps))
        history.append(loss.item())

    frozen = pset.copy()
    frozen.history = history  # type: ignore[attr-defined]
    return frozen


def detached_tokens(tokens: Tensor) -> Tensor:
    return T.detach(tokens)
