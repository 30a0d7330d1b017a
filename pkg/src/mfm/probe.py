"""Synthetic probing harness over frozen encoders.

Data: each image carries two independent cues. The global cue is a
background color class; the local cue is a small square marker sitting fully
inside one patch cell. The global label is recoverable from the image by a
documented closed-form rule (argmax over color-channel patterns, see
:func:`recover_global_label`), but each class owns an antipodal pair of
color clusters on a chroma ring, so no linear function of the mean color
separates the classes. Untrained encoders therefore probe at chance on the
global task, while encoders trained on the cue become linearly separable in
depth.

Probing: a single linear head on frozen features, trained with Adam and a
cosine-annealed learning rate. The global task classifies the color class
from mean-pooled tokens; the local task regresses the marker cell (mse, from
mean-pooled tokens) and scores every token to pick the marker cell
(cell accuracy).
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, LayerFeatures, cell_token, encode, mean_pool
from .fusion import FusionConfig, FusionParams, fuse, init_fusion
from .merge import MergeModule, MergeStrategy, init_merge_module
from .optim import Adam, batch_stream, cosine_lr, cross_entropy, mse_loss, one_hot
from .params import ParameterSet
from .seeding import split_seed
from .tensor import GradTape, NumericalError, Parameter, ShapeError, Tensor, backward

DEFAULT_TASKS: tuple[tuple[str, str], ...] = (
    ("global", "accuracy"),
    ("local", "mse"),
    ("local", "cell_acc"),
)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# orthonormal chroma plane used for the color ring
_CHROMA_U = np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0)
_CHROMA_V = np.array([1.0, 1.0, -2.0]) / math.sqrt(6.0)
_CENTER = np.array([0.5, 0.5, 0.5])


@dataclass(frozen=True)
class DatasetSpec:
    image_size: tuple[int, int] = (36, 36)
    patch: int = 6
    classes: int = 2
    marker_size: int = 4
    marker_classes: int = 2
    noise: float = 0.08
    ring_radius: float = 0.26
    jitter_frac: float = 0.3  # angular jitter around sector centers, fraction of half-width

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if not self.marker_size < self.patch:
            raise ValueError(f"marker size {self.marker_size} must be < patch {self.patch}")
        if not 2 <= self.classes <= 8:
            raise ValueError("classes must be in 2..8")
        if self.marker_classes < 1:
            raise ValueError("need at least one marker class")
        if not 0 <= self.jitter_frac < 1:
            raise ValueError("jitter_frac must be in [0, 1)")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch, self.image_size[1] // self.patch)

    @property
    def sectors(self) -> int:
        return 2 * self.classes

    def sector_class(self, sector: int) -> int:
        # k mod G over 2G sectors: each class owns an antipodal pair of color
        # clusters, so no linear function of the mean color separates classes
        return sector % self.classes

    def sector_angles(self) -> np.ndarray:
        width = 2.0 * math.pi / self.sectors
        return (np.arange(self.sectors) + 0.5) * width


@dataclass(frozen=True)
class SyntheticSample:
    image: Tensor
    global_label: int
    marker_cell: tuple[int, int]
    marker_class: int
    sample_id: int


@dataclass
class SyntheticDataset:
    images: np.ndarray  # [n, 3, H, W] float64
    global_labels: np.ndarray
    marker_cells: np.ndarray  # [n, 2] (row, col)
    marker_classes: np.ndarray
    ids: np.ndarray  # uint64, seed-derived
    spec: DatasetSpec
    seed: int

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, i: int) -> SyntheticSample:
        return SyntheticSample(
            image=Tensor(self.images[i]),
            global_label=int(self.global_labels[i]),
            marker_cell=(int(self.marker_cells[i, 0]), int(self.marker_cells[i, 1])),
            marker_class=int(self.marker_classes[i]),
            sample_id=int(self.ids[i]),
        )

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(~_eval_mask(self.ids))

    @property
    def eval_indices(self) -> np.ndarray:
        return np.flatnonzero(_eval_mask(self.ids))

    def cell_labels(self) -> np.ndarray:
        cols = self.spec.grid[1]
        return self.marker_cells[:, 0] * cols + self.marker_cells[:, 1]


def _eval_mask(ids: np.ndarray) -> np.ndarray:
    # hash-based 80/20 split, stable in the ids alone
    return ids % 5 == 0


def _sample_ids(seed: int, n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        digest = hashlib.sha256(f"{seed}:{i}".encode()).digest()
        out[i] = int.from_bytes(digest[:8], "little")
    return out


def _marker_color(marker_class: int, marker_classes: int) -> np.ndarray:
    # dark grays, well below any background patch mean, so a single linear
    # functional of the patch detects every marker class
    if marker_classes == 1:
        return np.array([0.03, 0.03, 0.03])
    level = 0.03 + 0.1 * marker_class / (marker_classes - 1)
    return np.full(3, level)


def recover_global_label(image: np.ndarray | Tensor, spec: DatasetSpec) -> int:
    """Closed-form rule: argmax over sector color patterns of the mean color.

    Project the image's mean RGB onto the chroma plane and score it against
    every sector-center direction; the winning sector's class is the label.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    mu = data.reshape(3, -1).mean(axis=1) - _CENTER
    a, b = float(mu @ _CHROMA_U), float(mu @ _CHROMA_V)
    angles = spec.sector_angles()
    scores = a * np.cos(angles) + b * np.sin(angles)
    return spec.sector_class(int(np.argmax(scores)))


def gen_dataset(seed: int, n: int, spec: DatasetSpec = DatasetSpec()) -> SyntheticDataset:
    """Deterministic dataset of n samples; global and local cues independent."""
    rng = np.random.default_rng(split_seed(seed, "dataset"))
    h, w = spec.image_size
    rows, cols = spec.grid
    width = 2.0 * math.pi / spec.sectors
    jitter = spec.jitter_frac * width / 2.0
    s = spec.marker_size

    images = np.empty((n, 3, h, w))
    labels = rng.integers(0, spec.classes, size=n)
    cells = np.column_stack(
        [rng.integers(0, rows, size=n), rng.integers(0, cols, size=n)]
    )
    marker_cls = rng.integers(0, spec.marker_classes, size=n)

    for i in range(n):
        g = int(labels[i])
        own_sectors = [k for k in range(spec.sectors) if spec.sector_class(k) == g]
        sector = own_sectors[rng.integers(0, len(own_sectors))]
        r, c = int(cells[i, 0]), int(cells[i, 1])
        oy = int(rng.integers(0, spec.patch - s + 1))
        ox = int(rng.integers(0, spec.patch - s + 1))
        color_angle = (sector + 0.5) * width + (rng.random() * 2.0 - 1.0) * jitter
        for attempt in range(20):
            ring = _CENTER + spec.ring_radius * (
                math.cos(color_angle) * _CHROMA_U + math.sin(color_angle) * _CHROMA_V
            )
            img = ring[:, None, None] + rng.normal(0.0, spec.noise, size=(3, h, w))
            y0, x0 = r * spec.patch + oy, c * spec.patch + ox
            img[:, y0 : y0 + s, x0 : x0 + s] = _marker_color(
                int(marker_cls[i]), spec.marker_classes
            )[:, None, None]
            img = np.clip(img, 0.0, 1.0)
            if recover_global_label(img, spec) == g:
                break
            # rare: noise pushed the mean over a sector edge; recenter the angle
            color_angle = (sector + 0.5) * width
        else:
            raise RuntimeError("could not realize the requested global class")
        images[i] = img

    return SyntheticDataset(
        images=images,
        global_labels=labels.astype(np.int64),
        marker_cells=cells.astype(np.int64),
        marker_classes=marker_cls.astype(np.int64),
        ids=_sample_ids(seed, n),
        spec=spec,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# correspondence maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrespondenceMap:
    values: Tensor  # [Ta, Tb] cosine similarities in [-1, 1]
    zero_a: np.ndarray  # tokens of a with zero norm (similarity forced to 0)
    zero_b: np.ndarray


def correspondence_map(feats_a: Tensor, feats_b: Tensor) -> CorrespondenceMap:
    """Cosine similarity of every token pair; zero-norm tokens map to 0 and are flagged."""
    if feats_a.ndim != 2 or feats_b.ndim != 2 or feats_a.shape[1] != feats_b.shape[1]:
        raise ShapeError(f"need [T,D] stacks with equal D, got {feats_a.shape} x {feats_b.shape}")
    a, b = feats_a.data, feats_b.data
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero_a, zero_b = na == 0.0, nb == 0.0
    sa = np.where(zero_a, 1.0, na)
    sb = np.where(zero_b, 1.0, nb)
    sims = (a / sa[:, None]) @ (b / sb[:, None]).T
    sims[zero_a, :] = 0.0
    sims[:, zero_b] = 0.0
    sims = np.clip(sims, -1.0, 1.0)
    return CorrespondenceMap(values=Tensor(sims), zero_a=zero_a, zero_b=zero_b)


def corr_to_pgm(cmap: CorrespondenceMap, path) -> None:
    """Binary 8-bit PGM; values mapped [-1, 1] -> [0, 255]."""
    v = cmap.values.data
    scaled = np.rint((v + 1.0) * 0.5 * 255.0).clip(0, 255).astype(np.uint8)
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(scaled.tobytes())


def corr_to_csv(cmap: CorrespondenceMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in cmap.values.data:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


# ---------------------------------------------------------------------------
# probe reports
# ---------------------------------------------------------------------------

REPORT_HEADER = "objective,provider,task,metric,value,seed"
_LOWER_IS_BETTER = {"mse"}


@dataclass(frozen=True)
class ProbeRow:
    objective: str
    provider: str
    task: str
    metric: str
    value: float
    seed: int

    def fields(self) -> list[str]:
        return [self.objective, self.provider, self.task, self.metric,
                repr(float(self.value)), str(self.seed)]


@dataclass
class ProbeReport:
    rows: list[ProbeRow] = field(default_factory=list)

    def extend(self, rows: Iterable[ProbeRow]) -> None:
        self.rows.extend(rows)

    def to_csv(self, path) -> None:
        # provider labels may contain commas (mean_range(a,b)); csv quotes them
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_HEADER.split(","))
            for row in self.rows:
                writer.writerow(row.fields())

    @classmethod
    def from_csv(cls, path) -> "ProbeReport":
        report = cls()
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != REPORT_HEADER.split(","):
                raise ValueError(f"bad report header: {header!r}")
            for rec in reader:
                obj, provider, task, metric, value, seed = rec
                report.rows.append(ProbeRow(obj, provider, task, metric, float(value), int(seed)))
        return report

    def select(self, **fields) -> list[ProbeRow]:
        out = self.rows
        for key, want in fields.items():
            out = [r for r in out if getattr(r, key) == want]
        return out

    def best_provider(self, task: str, metric: str, seed: int | None = None) -> ProbeRow:
        rows = self.select(task=task, metric=metric)
        if seed is not None:
            rows = [r for r in rows if r.seed == seed]
        if not rows:
            raise ValueError(f"no rows for task={task}, metric={metric}")
        if metric in _LOWER_IS_BETTER:
            return min(rows, key=lambda r: r.value)
        return max(rows, key=lambda r: r.value)


# ---------------------------------------------------------------------------
# feature providers
# ---------------------------------------------------------------------------


def _encode_stack(
    images: np.ndarray, pset: ParameterSet, cfg: EncoderConfig, batch: int = 64
) -> list[np.ndarray]:
    """Frozen forward pass over the whole dataset, cached per layer as numpy."""
    chunks: list[list[np.ndarray]] = [[] for _ in range(cfg.depth)]
    for start in range(0, len(images), batch):
        lf = encode(Tensor(images[start : start + batch]), pset, cfg)
        for li, layer in enumerate(lf.layers):
            chunks[li].append(layer.data)
    return [np.concatenate(parts, axis=0) for parts in chunks]


class LayerProvider:
    """Features of one fixed encoder layer; no trainable parameters."""

    def __init__(self, pset: ParameterSet, cfg: EncoderConfig, layer: int):
        if not 1 <= layer <= cfg.depth:
            raise ShapeError(f"layer {layer} out of 1..{cfg.depth}")
        self.pset, self.cfg, self.layer = pset, cfg, layer
        self.name = f"layer{layer:02d}"
        self.out_dim = cfg.dim
        self.grid = cfg.grid
        self._cache: np.ndarray | None = None

    def prepare(self, dataset: SyntheticDataset) -> None:
        if self._cache is None:
            self._cache = _encode_stack(dataset.images, self.pset, self.cfg)[self.layer - 1]

    def features(self, idx: np.ndarray, mode: str = "train") -> Tensor:
        return Tensor(self._cache[idx])

    def parameters(self) -> list[Parameter]:
        return []

    def encoder_sets(self) -> list[ParameterSet]:
        return [self.pset]


class MergeProvider:
    """A merge strategy over the frozen stack; strategy parameters trainable
    unless frozen."""

    def __init__(
        self,
        pset: ParameterSet,
        cfg: EncoderConfig,
        module: MergeModule,
        *,
        frozen: bool = False,
        name: str | None = None,
    ):
        self.pset, self.cfg, self.module = pset, cfg, module
        self.frozen = frozen
        self.name = name or module.strategy.label()
        self.out_dim = cfg.dim
        self.grid = cfg.grid
        self._cache: list[np.ndarray] | None = None

    def prepare(self, dataset: SyntheticDataset) -> None:
        if self._cache is None:
            self._cache = _encode_stack(dataset.images, self.pset, self.cfg)

    def features(self, idx: np.ndarray, mode: str = "train") -> Tensor:
        picked = self.module.strategy.selected_layers(self.cfg.depth)
        lf = LayerFeatures(tuple(Tensor(self._cache[i - 1][idx]) for i in picked))
        return self.module.apply(lf, mode=mode)

    def parameters(self) -> list[Parameter]:
        return [] if self.frozen else self.module.parameters()

    def encoder_sets(self) -> list[ParameterSet]:
        return [self.pset]


class FusionProvider:
    """Dual-branch fusion over two frozen stacks; fusion parameters trainable."""

    def __init__(
        self,
        pset_a: ParameterSet,
        cfg_a: EncoderConfig,
        pset_b: ParameterSet,
        cfg_b: EncoderConfig,
        fusion_cfg: FusionConfig,
        params: FusionParams | None = None,
        *,
        name: str | None = None,
        seed: int = 0,
    ):
        if cfg_a.tokens != cfg_b.tokens:
            raise ShapeError(f"branch token counts differ: {cfg_a.tokens} vs {cfg_b.tokens}")
        self.pset_a, self.cfg_a = pset_a, cfg_a
        self.pset_b, self.cfg_b = pset_b, cfg_b
        self.fusion_cfg = fusion_cfg
        self.params = params or init_fusion(fusion_cfg, seed=seed)
        self.name = name or f"fusion(m={fusion_cfg.mlp_blocks},r={fusion_cfg.mlp_ratio})"
        self.out_dim = fusion_cfg.out_dim
        self.grid = cfg_a.grid
        self._cache: tuple[list[np.ndarray], list[np.ndarray]] | None = None

    def prepare(self, dataset: SyntheticDataset) -> None:
        if self._cache is None:
            self._cache = (
                _encode_stack(dataset.images, self.pset_a, self.cfg_a),
                _encode_stack(dataset.images, self.pset_b, self.cfg_b),
            )

    def features(self, idx: np.ndarray, mode: str = "train") -> Tensor:
        stack_a, stack_b = self._cache
        lf_a = LayerFeatures(tuple(Tensor(s[idx]) for s in stack_a))
        lf_b = LayerFeatures(tuple(Tensor(s[idx]) for s in stack_b))
        return fuse(lf_a, lf_b, self.fusion_cfg, self.params)

    def parameters(self) -> list[Parameter]:
        return self.params.parameters()

    def encoder_sets(self) -> list[ParameterSet]:
        return [self.pset_a, self.pset_b]


# ---------------------------------------------------------------------------
# probe training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeBudget:
    steps: int = 500
    lr: float = 1e-3
    batch: int = 32


class ProbeHead:
    """Exactly one linear map from feature dim to task output dim."""

    def __init__(self, name: str, in_dim: int, out_dim: int):
        self.w = Parameter(f"{name}/w", Tensor(np.zeros((in_dim, out_dim))))
        self.b = Parameter(f"{name}/b", Tensor(np.zeros(out_dim)))

    def apply(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w.value, self.b.value)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


def _global_loss(head: ProbeHead, feats: Tensor, labels: np.ndarray) -> Tensor:
    return cross_entropy(head.apply(mean_pool(feats)), labels)


def _local_losses(
    cell_head: ProbeHead, coord_head: ProbeHead, feats: Tensor,
    cell_labels: np.ndarray, coords: np.ndarray,
) -> Tensor:
    scores = T.reshape(cell_head.apply(feats), feats.shape[:2])  # [B, T]
    cell = cross_entropy(scores, cell_labels)
    pred = coord_head.apply(mean_pool(feats))
    coord = mse_loss(pred, Tensor(coords))
    return T.add(cell, coord)


def _norm_coords(dataset: SyntheticDataset) -> np.ndarray:
    rows, cols = dataset.spec.grid
    denom = np.array([max(rows - 1, 1), max(cols - 1, 1)], dtype=np.float64)
    return dataset.marker_cells.astype(np.float64) / denom


def train_probe(
    provider,
    task: str,
    dataset: SyntheticDataset,
    budget: ProbeBudget,
    *,
    seed: int = 0,
    objective: str = "",
    metrics: Sequence[str] | None = None,
    step_callback: Callable | None = None,
) -> list[ProbeRow]:
    """Train linear head(s) on frozen provider features; return eval-metric rows.

    The batch schedule depends only on (task, seed), not on the provider, so
    two providers that compute identical features produce identical rows.
    Heads start at zero, so a 0-step budget reports the untrained metric
    (global accuracy sits at the frequency of class 0, about 1/G).
    """
    if task not in ("global", "local"):
        raise ValueError(f"unknown task: {task}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    provider.prepare(dataset)
    before = [s.checksum() for s in provider.encoder_sets()]

    rng = np.random.default_rng(split_seed(seed, f"probe/{task}"))
    train_idx = dataset.train_indices
    eval_idx = dataset.eval_indices
    classes = int(dataset.global_labels.max()) + 1
    coords = _norm_coords(dataset)
    cell_labels = dataset.cell_labels()

    if task == "global":
        heads = {"global": ProbeHead("head/global", provider.out_dim, classes)}
    else:
        heads = {
            "cell": ProbeHead("head/cell", provider.out_dim, 1),
            "coord": ProbeHead("head/coord", provider.out_dim, 2),
        }
    trainable = provider.parameters() + [p for h in heads.values() for p in h.parameters()]
    opt = Adam(trainable, lr=budget.lr)

    for step, batch_pos in enumerate(batch_stream(len(train_idx), budget.batch, budget.steps, rng)):
        idx = train_idx[batch_pos]
        try:
            with GradTape() as tape:
                feats = provider.features(idx, mode="train")
                if task == "global":
                    loss = _global_loss(heads["global"], feats, dataset.global_labels[idx])
                else:
                    loss = _local_losses(
                        heads["cell"], heads["coord"], feats, cell_labels[idx], coords[idx]
                    )
            opt.zero_grad()
            backward(tape, loss)
            opt.step(lr=cosine_lr(budget.lr, step, budget.steps))
        except NumericalError as err:
            raise NumericalError(
                f"non-finite loss in probe step {step} "
                f"(provider={provider.name}, task={task}, seed={seed}): {err}"
            ) from err
        if step_callback is not None:
            step_callback(step, provider, loss.item())

    feats = provider.features(eval_idx, mode="eval")
    results: dict[str, float] = {}
    if task == "global":
        logits = heads["global"].apply(mean_pool(feats)).data
        pred = logits.argmax(axis=-1)
        results["accuracy"] = float(np.mean(pred == dataset.global_labels[eval_idx]))
    else:
        scores = heads["cell"].apply(feats).data.reshape(feats.shape[0], feats.shape[1])
        results["cell_acc"] = float(np.mean(scores.argmax(axis=-1) == cell_labels[eval_idx]))
        pred = heads["coord"].apply(mean_pool(feats)).data
        results["mse"] = float(np.mean((pred - coords[eval_idx]) ** 2))

    after = [s.checksum() for s in provider.encoder_sets()]
    if before != after:
        raise RuntimeError("frozen encoder parameters were mutated during probing")

    wanted = metrics or sorted(results)
    return [
        ProbeRow(objective, provider.name, task, m, results[m], seed) for m in wanted if m in results
    ]


def _tasks_by_name(tasks: Sequence[tuple[str, str]]) -> dict[str, list[str]]:
    grouped: dict[str, list[str]] = {}
    for task, metric in tasks:
        grouped.setdefault(task, []).append(metric)
    return grouped


def layer_sweep(
    pset: ParameterSet,
    cfg: EncoderConfig,
    dataset: SyntheticDataset,
    budget: ProbeBudget,
    *,
    objective: str = "",
    tasks: Sequence[tuple[str, str]] = DEFAULT_TASKS,
    seed: int = 0,
) -> ProbeReport:
    """One probe run per layer per task; emits len(tasks) rows per layer."""
    report = ProbeReport()
    grouped = _tasks_by_name(tasks)
    for layer in range(1, cfg.depth + 1):
        provider = LayerProvider(pset, cfg, layer)
        for task, metrics in grouped.items():
            report.extend(
                train_probe(
                    provider, task, dataset, budget,
                    seed=seed, objective=objective, metrics=metrics,
                )
            )
    return report


def strategy_sweep(
    pset: ParameterSet,
    cfg: EncoderConfig,
    dataset: SyntheticDataset,
    budget: ProbeBudget,
    *,
    strategies: Sequence[MergeStrategy] = (),
    fusion_specs: Sequence[FusionConfig] = (),
    pset_b: ParameterSet | None = None,
    cfg_b: EncoderConfig | None = None,
    objective: str = "",
    tasks: Sequence[tuple[str, str]] = DEFAULT_TASKS,
    seed: int = 0,
    lln_order: str = "ln_linear",
    lln_shared: bool = False,
) -> ProbeReport:
    """One row per (strategy or fusion config, task metric)."""
    report = ProbeReport()
    grouped = _tasks_by_name(tasks)
    for strategy in strategies:
        module = init_merge_module(
            strategy, cfg.depth, cfg.dim, cfg.grid, lln_order=lln_order, lln_shared=lln_shared
        )
        provider = MergeProvider(pset, cfg, module)
        for task, metrics in grouped.items():
            report.extend(
                train_probe(
                    provider, task, dataset, budget,
                    seed=seed, objective=objective, metrics=metrics,
                )
            )
    for fusion_cfg in fusion_specs:
        if pset_b is None or cfg_b is None:
            raise ValueError("fusion sweeps need a second frozen encoder")
        provider = FusionProvider(
            pset, cfg, pset_b, cfg_b, fusion_cfg, seed=split_seed(seed, f"fusion/{fusion_cfg.mlp_blocks}/{fusion_cfg.mlp_ratio}")
        )
        for task, metrics in grouped.items():
            report.extend(
                train_probe(
                    provider, task, dataset, budget,
                    seed=seed, objective=objective, metrics=metrics,
                )
            )
    return report


def mlp_ablation_grid(
    blocks: Sequence[int] = (0, 1, 2, 4, 8),
    extra_ratios: Sequence[int] = (8, 16),
    base_ratio: int = 4,
    base_blocks: int = 1,
) -> list[tuple[int, int]]:
    """The projector grid: blocks vary at the base ratio, ratios vary at one block."""
    grid = [(m, base_ratio) for m in blocks]
    grid += [(base_blocks, r) for r in extra_ratios]
    return grid
