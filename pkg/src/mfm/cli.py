"""Config-driven experiment runner.

``mfm run config.json [--out DIR] [--seed S] [--precision 32|64] [--resume]``
executes one experiment mode and writes every artifact (CSV reports, PGM
heatmaps, serialized parameters, a frozen copy of the resolved config) under
the run directory, atomically, finishing with a ``manifest.csv`` of path and
SHA-256 per artifact. ``mfm report DIR`` prints a human-readable summary.

Exit codes: 0 success, 2 invalid config, 3 numerical failure, 4 I/O failure.
Unknown config keys are errors. ``MFM_THREADS`` caps how many sweep seeds run
in parallel (default 1).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck
from .encoder import (
    EncoderConfig,
    PretrainBudget,
    PretrainObjective,
    encode,
    init_encoder,
    pretrain,
)
from .fusion import FusionConfig
from .merge import MergeStrategy
from .params import ParameterSet
from .probe import (
    DEFAULT_TASKS,
    DatasetSpec,
    FusionProvider,
    ProbeBudget,
    ProbeReport,
    corr_to_csv,
    corr_to_pgm,
    correspondence_map,
    gen_dataset,
    layer_sweep,
    mlp_ablation_grid,
    strategy_sweep,
    train_probe,
)
from .seeding import split_seed
from .tensor import NumericalError, ShapeError, Tensor, set_precision


class ConfigError(ValueError):
    pass


MODES = ("layer_sweep", "strategy_sweep", "fuse_eval", "mlp_ablation", "corr_map", "grad_check")

# schema: key -> (default, nested schema or None)
_ENCODER_SCHEMA = {
    "depth": 8, "dim": 32, "heads": 4, "patch": 6, "image_size": [36, 36],
    "in_channels": 3, "mlp_ratio": 4, "seed": 0,
}
_PRETRAIN_SCHEMA = {
    "objective": "global_supervised", "steps": 500, "lr": 2e-3, "batch": 32,
    "temperature": 0.07, "mask_ratio": 0.5,
}
_DATASET_SCHEMA = {
    "n": 320, "image_size": [36, 36], "patch": 6, "classes": 2, "marker_size": 4,
    "marker_classes": 2, "noise": 0.08, "ring_radius": 0.26, "jitter_frac": 0.3,
}
_PROBE_SCHEMA = {"steps": 500, "lr": 1e-3, "batch": 32}
_FUSION_SCHEMA = {
    "mlp_blocks": 2, "mlp_ratio": 4, "out_dim": 64,
    "branch_a_layers": None, "branch_b_layers": None,
    "lln_order": "ln_linear", "lln_shared": False,
}
_SCHEMA = {
    "run_name": "run",
    "seed": 0,
    "mode": None,
    "out_dir": None,
    "precision": 32,
    "seeds": [0, 1, 2],
    "tasks": ["global:accuracy", "local:mse", "local:cell_acc"],
    "encoder": _ENCODER_SCHEMA,
    "encoder_b": _ENCODER_SCHEMA,
    "pretrain": _PRETRAIN_SCHEMA,
    "pretrain_b": _PRETRAIN_SCHEMA,
    "dataset": _DATASET_SCHEMA,
    "probe": _PROBE_SCHEMA,
    "strategies": ["mean_half", "mean_all", "layerscale", "lln_layerscale", "conv_layerscale"],
    "fusion": _FUSION_SCHEMA,
    "ablation": {"blocks": [0, 1, 2, 4, 8], "extra_ratios": [8, 16], "base_ratio": 4, "base_blocks": 1},
    "corr": {"layers": [1, 8], "samples": 2},
    "grad_check": {"instances": 10},
}


def _resolve(config: dict, schema: dict, path: str = "") -> dict:
    if not isinstance(config, dict):
        raise ConfigError(f"expected an object at {path or 'top level'}")
    out = {}
    for key, value in config.items():
        if key not in schema:
            where = f" in {path}" if path else ""
            raise ConfigError(f"unknown key{where}: {key}")
        default = schema[key]
        if isinstance(default, dict):
            out[key] = _resolve(value, default, f"{path}.{key}" if path else key)
        else:
            out[key] = value
    for key, default in schema.items():
        if key not in out:
            out[key] = {k: v for k, v in default.items()} if isinstance(default, dict) else default
    return out


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    resolved = _resolve(raw, _SCHEMA)
    if resolved["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {resolved['mode']!r}")
    if resolved["precision"] not in (32, 64):
        raise ConfigError(f"precision must be 32 or 64, got {resolved['precision']!r}")
    return resolved


def _encoder_cfg(section: dict) -> EncoderConfig:
    try:
        return EncoderConfig(
            depth=section["depth"], dim=section["dim"], heads=section["heads"],
            patch=section["patch"], image_size=tuple(section["image_size"]),
            in_channels=section["in_channels"], mlp_ratio=section["mlp_ratio"],
            seed=section["seed"],
        )
    except (ValueError, ShapeError) as err:
        raise ConfigError(f"bad encoder config: {err}") from err


def _dataset_spec(section: dict) -> DatasetSpec:
    try:
        return DatasetSpec(
            image_size=tuple(section["image_size"]), patch=section["patch"],
            classes=section["classes"], marker_size=section["marker_size"],
            marker_classes=section["marker_classes"], noise=section["noise"],
            ring_radius=section["ring_radius"], jitter_frac=section["jitter_frac"],
        )
    except ValueError as err:
        raise ConfigError(f"bad dataset config: {err}") from err


def _tasks(config: dict) -> tuple[tuple[str, str], ...]:
    out = []
    for item in config["tasks"]:
        task, _, metric = str(item).partition(":")
        if (task, metric) not in DEFAULT_TASKS:
            raise ConfigError(f"unknown task spec: {item!r}")
        out.append((task, metric))
    return tuple(out)


def _objective(name: str) -> PretrainObjective:
    try:
        return PretrainObjective(name)
    except ValueError:
        raise ConfigError(f"unknown pretrain objective: {name!r}") from None


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _atomic_via(writer, payload, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(payload, tmp)
    os.replace(tmp, path)


class RunDir:
    """Tracks artifacts and completed stages; everything stays inside root.

    The manifest lists the files of every stage this run executed or adopted
    (a resumed stage is adopted only if all its files still match their
    recorded checksums).
    """

    def __init__(self, root: Path, resume: bool):
        self.root = root
        self.resume = resume
        self.stages: dict[str, dict[str, str]] = {}
        self._active: set[str] = set()
        self.root.mkdir(parents=True, exist_ok=True)
        state = self.root / "stages.json"
        if resume and state.exists():
            self.stages = json.loads(state.read_text())

    def rel(self, name: str) -> Path:
        path = (self.root / name).resolve()
        if self.root.resolve() not in path.parents and path != self.root.resolve():
            raise ValueError(f"artifact escapes run dir: {name}")
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def stage_done(self, name: str) -> bool:
        if not self.resume or name not in self.stages:
            return False
        for rel_name, digest in self.stages[name].items():
            path = self.root / rel_name
            if not path.exists() or _sha256(path) != digest:
                return False
        return True

    def adopt_stage(self, name: str) -> None:
        self._active.add(name)

    def finish_stage(self, name: str, files: list[str]) -> None:
        self.stages[name] = {f: _sha256(self.root / f) for f in files}
        self._active.add(name)
        _atomic_write(self.root / "stages.json", json.dumps(self.stages, indent=2, sort_keys=True).encode())

    def write_manifest(self) -> Path:
        names = sorted({f for stage in self._active for f in self.stages[stage]})
        lines = ["path,sha256"]
        for name in names:
            lines.append(f"{name},{_sha256(self.root / name)}")
        path = self.root / "manifest.csv"
        _atomic_write(path, ("\n".join(lines) + "\n").encode())
        return path


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _stage_config(run: RunDir, config: dict) -> None:
    name = "config"
    if run.stage_done(name):
        run.adopt_stage(name)
        return
    blob = json.dumps(config, indent=2, sort_keys=True).encode() + b"\n"
    _atomic_write(run.rel("config.json"), blob)
    run.finish_stage(name, ["config.json"])


def _pretrained_encoder(
    run: RunDir, config: dict, which: str, seed: int, dataset
) -> tuple[ParameterSet, EncoderConfig]:
    """Pretrain (or reload) one frozen encoder; canonical values come from the
    serialized file so fresh and resumed runs see identical parameters."""
    enc_key = "encoder" if which == "a" else "encoder_b"
    pre_key = "pretrain" if which == "a" else "pretrain_b"
    cfg = _encoder_cfg(config[enc_key])
    objective = _objective(config[pre_key]["objective"])
    fname = f"params/encoder_{which}_s{seed}.bin"
    stage = f"pretrain_{which}_s{seed}"
    if run.stage_done(stage):
        run.adopt_stage(stage)
    else:
        budget = PretrainBudget(
            steps=config[pre_key]["steps"], lr=config[pre_key]["lr"],
            batch=config[pre_key]["batch"], temperature=config[pre_key]["temperature"],
            mask_ratio=config[pre_key]["mask_ratio"],
        )
        frozen = pretrain(
            init_encoder(cfg), objective, dataset, budget, cfg,
            seed=split_seed(config["seed"], f"pretrain/{which}/s{seed}"),
        )
        _atomic_write(run.rel(fname), frozen.to_bytes())
        run.finish_stage(stage, [fname])
    return ParameterSet.load(run.root / fname), cfg


def _sweep_seed_worker(args):
    config, run, seed, dataset, mode = args
    tasks = _tasks(config)
    budget = ProbeBudget(**config["probe"])
    objective_name = config["pretrain"]["objective"]
    pset, cfg = _pretrained_encoder(run, config, "a", seed, dataset)
    if mode == "layer_sweep":
        return layer_sweep(
            pset, cfg, dataset, budget, objective=objective_name, tasks=tasks, seed=seed
        ).rows
    if mode == "strategy_sweep":
        strategies = [MergeStrategy.parse(s) for s in config["strategies"]]
        return strategy_sweep(
            pset, cfg, dataset, budget, strategies=strategies,
            objective=objective_name, tasks=tasks, seed=seed,
            lln_order=config["fusion"]["lln_order"], lln_shared=config["fusion"]["lln_shared"],
        ).rows
    raise ValueError(mode)


def _fusion_cfg(config: dict, cfg_a: EncoderConfig, cfg_b: EncoderConfig, m=None, r=None) -> FusionConfig:
    section = config["fusion"]
    try:
        return FusionConfig(
            depth_a=cfg_a.depth, depth_b=cfg_b.depth, dim_a=cfg_a.dim, dim_b=cfg_b.dim,
            out_dim=section["out_dim"],
            mlp_blocks=section["mlp_blocks"] if m is None else m,
            mlp_ratio=section["mlp_ratio"] if r is None else r,
            branch_a_layers=tuple(section["branch_a_layers"]) if section["branch_a_layers"] else None,
            branch_b_layers=tuple(section["branch_b_layers"]) if section["branch_b_layers"] else None,
            lln_order=section["lln_order"], lln_shared=section["lln_shared"],
        )
    except ValueError as err:
        raise ConfigError(f"bad fusion config: {err}") from err


def _run_sweeps(run: RunDir, config: dict, dataset, mode: str) -> None:
    stage = "sweep"
    seeds = list(config["seeds"])
    branches = ("a",) if mode in ("layer_sweep", "strategy_sweep") else ("a", "b")
    deps = [f"pretrain_{w}_s{k}" for w in branches for k in seeds]
    if run.stage_done(stage) and all(run.stage_done(d) for d in deps):
        for name in deps + [stage]:
            run.adopt_stage(name)
        return
    workers = max(1, int(os.environ.get("MFM_THREADS", "1")))
    report = ProbeReport()
    extra_files: list[str] = []
    if mode in ("layer_sweep", "strategy_sweep"):
        jobs = [(config, run, seed, dataset, mode) for seed in seeds]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for rows in pool.map(_sweep_seed_worker, jobs):
                    report.extend(rows)
        else:
            for job in jobs:
                report.extend(_sweep_seed_worker(job))
    elif mode in ("fuse_eval", "mlp_ablation"):
        tasks = _tasks(config)
        budget = ProbeBudget(**config["probe"])
        grouped: dict[str, list[str]] = {}
        for task, metric in tasks:
            grouped.setdefault(task, []).append(metric)
        objective_name = f"{config['pretrain']['objective']}+{config['pretrain_b']['objective']}"
        for seed in seeds:
            pset_a, cfg_a = _pretrained_encoder(run, config, "a", seed, dataset)
            pset_b, cfg_b = _pretrained_encoder(run, config, "b", seed, dataset)
            if mode == "fuse_eval":
                grid = [(None, None)]
            else:
                ab = config["ablation"]
                grid = mlp_ablation_grid(
                    blocks=ab["blocks"], extra_ratios=ab["extra_ratios"],
                    base_ratio=ab["base_ratio"], base_blocks=ab["base_blocks"],
                )
            for m, r in grid:
                fcfg = _fusion_cfg(config, cfg_a, cfg_b, m, r)
                provider = FusionProvider(
                    pset_a, cfg_a, pset_b, cfg_b, fcfg,
                    seed=split_seed(config["seed"], f"fusion/m{fcfg.mlp_blocks}/r{fcfg.mlp_ratio}"),
                )
                for task, metrics in grouped.items():
                    report.extend(
                        train_probe(
                            provider, task, dataset, budget,
                            seed=seed, objective=objective_name, metrics=metrics,
                        )
                    )
                if mode == "fuse_eval":
                    fname = f"params/fusion_s{seed}.bin"
                    _atomic_write(run.rel(fname), provider.params.parameter_set().to_bytes())
                    extra_files.append(fname)
    _atomic_via(lambda rep, p: rep.to_csv(p), report, run.rel("report.csv"))
    run.finish_stage(stage, ["report.csv"] + extra_files)


def _run_corr(run: RunDir, config: dict, dataset) -> None:
    stage = "corr"
    dep = f"pretrain_a_s{config['seeds'][0]}"
    if run.stage_done(stage) and run.stage_done(dep):
        run.adopt_stage(dep)
        run.adopt_stage(stage)
        return
    pset, cfg = _pretrained_encoder(run, config, "a", config["seeds"][0], dataset)
    layers = list(config["corr"]["layers"])
    n_samples = int(config["corr"]["samples"])
    files: list[str] = []
    for s in range(min(n_samples, len(dataset))):
        lf = encode(Tensor(dataset.images[s : s + 1]), pset, cfg)
        feats = {L: Tensor(lf.layers[L - 1].data[0]) for L in layers}
        for L in layers:
            cmap = correspondence_map(feats[L], feats[L])
            for ext, writer in (("pgm", corr_to_pgm), ("csv", corr_to_csv)):
                name = f"corr/sample{s}_self_l{L}.{ext}"
                _atomic_via(writer, cmap, run.rel(name))
                files.append(name)
        for i, la in enumerate(layers):
            for lb in layers[i + 1 :]:
                cmap = correspondence_map(feats[la], feats[lb])
                for ext, writer in (("pgm", corr_to_pgm), ("csv", corr_to_csv)):
                    name = f"corr/sample{s}_l{la}_l{lb}.{ext}"
                    _atomic_via(writer, cmap, run.rel(name))
                    files.append(name)
    run.finish_stage(stage, files)


def _run_gradcheck(run: RunDir, config: dict) -> None:
    stage = "gradcheck"
    if run.stage_done(stage):
        run.adopt_stage(stage)
        return
    rows = gradcheck.run_suite(seed=config["seed"], instances=config["grad_check"]["instances"])
    _atomic_via(gradcheck.rows_to_csv, rows, run.rel("grad_check.csv"))
    run.finish_stage(stage, ["grad_check.csv"])
    worst = max(r.max_rel_error for r in rows)
    if worst > 1e-4:
        raise NumericalError(f"gradient check failed: worst relative error {worst:.3e}")


def run_experiment(config_path, out=None, seed=None, precision=None, resume=False) -> Path:
    """Execute one config; returns the manifest path."""
    config = load_config(config_path)
    if seed is not None:
        config["seed"] = int(seed)
    if precision is not None:
        config["precision"] = int(precision)
    # the output location is not experiment content: the frozen config keeps
    # the file's own value so reruns into different directories stay identical
    out_dir = str(out) if out is not None else config["out_dir"]
    if out_dir is None:
        out_dir = f"runs/{config['run_name']}"
    set_precision(config["precision"])

    run = RunDir(Path(out_dir), resume)
    _stage_config(run, config)
    mode = config["mode"]
    if mode == "grad_check":
        _run_gradcheck(run, config)
    else:
        dataset = gen_dataset(
            split_seed(config["seed"], "dataset"), config["dataset"]["n"], _dataset_spec(config["dataset"])
        )
        if mode == "corr_map":
            _run_corr(run, config, dataset)
        else:
            _run_sweeps(run, config, dataset, mode)
    return run.write_manifest()


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _read_csv_rows(path: Path) -> list[dict[str, str]]:
    import csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return [dict(zip(header, rec)) for rec in reader if rec]


def report_run(run_dir) -> int:
    root = Path(run_dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        print(f"error: no manifest in {root}", file=sys.stderr)
        return 1
    report_path = root / "report.csv"
    grad_path = root / "grad_check.csv"
    if grad_path.exists():
        rows = _read_csv_rows(grad_path)
        worst = max(float(r["max_rel_error"]) for r in rows)
        status = "pass" if worst <= 1e-4 else "FAIL"
        print(f"grad check: {len(rows)} checks, worst rel error {worst!r} [{status}]")
    if report_path.exists():
        rows = _read_csv_rows(report_path)
        if not rows:
            print("no rows")
            return 0
        seeds = sorted({r["seed"] for r in rows}, key=int)
        combos = sorted({(r["task"], r["metric"]) for r in rows})
        lower_better = {"mse"}
        for task, metric in combos:
            for s in seeds:
                sub = [r for r in rows if r["task"] == task and r["metric"] == metric and r["seed"] == s]
                if not sub:
                    continue
                key = (lambda r: float(r["value"])) if metric in lower_better else (lambda r: -float(r["value"]))
                best = min(sub, key=key)
                print(f"task={task} metric={metric} seed={s} best={best['provider']} value={best['value']}")
        providers = {r["provider"] for r in rows}
        layer_names = sorted(p for p in providers if p.startswith("layer"))
        if layer_names:
            votes = []
            for s in seeds:
                def argbest(task, metric):
                    sub = [r for r in rows if r["task"] == task and r["metric"] == metric
                           and r["seed"] == s and r["provider"].startswith("layer")]
                    sub.sort(key=lambda r: r["provider"])
                    vals = [float(r["value"]) for r in sub]
                    return int(np.argmax(vals)) + 1 if vals else None
                local = argbest("local", "cell_acc")
                glob = argbest("global", "accuracy")
                if local is not None and glob is not None:
                    votes.append(local <= glob)
            if votes:
                ok = sum(votes)
                verdict = "pass" if ok * 2 >= len(votes) else "FAIL"
                print(f"layer-bias ordering (local <= global argmax): {ok}/{len(votes)} seeds [{verdict}]")
        fusion_rows = [r for r in rows if r["provider"].startswith("fusion(")]
        if fusion_rows:
            print("ablation grid:")
            for name in sorted({r["provider"] for r in fusion_rows}):
                cells = [r for r in fusion_rows if r["provider"] == name]
                summary = " ".join(
                    f"{r['task']}/{r['metric']}={r['value']}" for r in cells if r["seed"] == seeds[0]
                )
                print(f"  {name}: {summary}")
    elif not grad_path.exists():
        print("no rows")
    return 0


def _error(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mfm", description="multi-level feature merging experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p_run.add_argument("--resume", action="store_true")
    p_rep = sub.add_parser("report", help="summarize a finished run directory")
    p_rep.add_argument("run_dir")
    args = parser.parse_args(argv)

    if args.command == "report":
        return report_run(args.run_dir)
    try:
        manifest = run_experiment(
            args.config, out=args.out, seed=args.seed, precision=args.precision, resume=args.resume
        )
    except ConfigError as err:
        return _error("config", 2, str(err))
    except (NumericalError, ShapeError) as err:
        return _error("numerical", 3, str(err))
    except OSError as err:
        return _error("io", 4, str(err))
    print(f"manifest: {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
