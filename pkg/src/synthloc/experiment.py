"""Experiment orchestration: configuration loading with strict key checking,
the five pipeline commands (worldgen, variants, train, evaluate, ablate), and
the consolidated ablation report."""

from __future__ import annotations

import dataclasses
import json
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import storage
from .embed import EmbeddingModel, TrainConfig, average_models, train
from .errors import ConfigError, DataError, SynthlocError
from .geometry import MatchParams, score_world_variants
from .index import build_index, retrieve, train_codebook
from .localize import (
    AccuracyThresholds,
    RansacParams,
    ewb_pose,
    localization_rate,
    pose_error,
    sfm_localize,
)
from .variants import VariantStore, default_prompt_set, generate_all_variants, shift_queries
from .worldgen import RenderNoise, World, WorldConfig, derive_seed, generate_world


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    match: MatchParams = field(default_factory=MatchParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: RansacParams = field(default_factory=RansacParams)
    world_seed: int = 7
    prompt_seed: int = 0
    variant_seed: int = 0
    c_tau: float = 0.2
    threshold_mode: str = "relative"
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    backend: str = "global_cosine"
    codebook_size: int = 64
    codebook_iters: int = 10
    codebook_seed: int = 0
    asmk_alpha: float = 3.0
    asmk_sel_threshold: float = 0.0
    eval_ks: list[int] = field(default_factory=lambda: [1, 5])
    query_conditions: list[str] = field(default_factory=lambda: ["at night"])
    # accuracy buckets: {level: [max translation m, max rotation deg]}
    thresholds: dict = field(
        default_factory=lambda: {"high": [0.25, 2.0], "mid": [0.5, 5.0], "low": [5.0, 10.0]}
    )

    def accuracy_thresholds(self) -> AccuracyThresholds:
        if sorted(self.thresholds) != ["high", "low", "mid"]:
            raise ConfigError("thresholds must define exactly high, mid and low")
        return AccuracyThresholds(
            levels=[
                (name, float(self.thresholds[name][0]), float(self.thresholds[name][1]))
                for name in ("high", "mid", "low")
            ]
        )


_NESTED = {
    "world": WorldConfig,
    "match": MatchParams,
    "train": TrainConfig,
    "ransac": RansacParams,
    "noise": RenderNoise,
}


def _build_dataclass(cls, data: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {path}{key}")
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _build_dataclass(_NESTED[key], value, f"{path}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {path or 'root'}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build_dataclass(ExperimentConfig, data, "")


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object: {path}")
    return config_from_dict(data)


def _reference_lines(cls, path: str) -> list[str]:
    lines = []
    for f in dataclasses.fields(cls):
        if f.name.startswith("_"):
            continue
        if f.name in _NESTED and f.name != "noise":
            lines.append(f"[{path}{f.name}]")
            lines.extend(_reference_lines(_NESTED[f.name], f"{path}{f.name}."))
            continue
        if f.name == "noise":
            lines.append(f"[{path}noise]")
            lines.extend(_reference_lines(RenderNoise, f"{path}noise."))
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            default = f.default_factory()  # type: ignore[misc]
        else:
            default = ""
        lines.append(f"{path}{f.name} = {default!r}")
    return lines


def write_config_reference(out_dir: str | Path) -> None:
    """Every configurable key with its default, for copy-paste into a JSON
    config (sections map to nested objects)."""
    lines = ["# configuration keys and defaults"]
    lines.extend(_reference_lines(ExperimentConfig, ""))
    storage._write_lines(Path(out_dir) / "config.reference", lines)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_worldgen(config: ExperimentConfig, out_dir: str | Path, seed: int | None = None) -> World:
    world = generate_world(config.world, config.world_seed if seed is None else seed)
    storage.save_world(world, out_dir)
    write_config_reference(out_dir)
    return world


def cmd_variants(world_dir: str | Path, config: ExperimentConfig, out_dir: str | Path) -> None:
    world = storage.load_world(world_dir)
    d = world.landmarks[0].base_descriptor.shape[0]
    prompts = default_prompt_set(d, config.prompt_seed)
    variants = generate_all_variants(world, prompts, config.variant_seed)
    storage.save_prompts(prompts, out_dir)
    storage.save_variants(variants, out_dir)
    scores = score_world_variants(world, variants, config.match)
    storage.save_scores(scores, config.c_tau, config.threshold_mode, out_dir)
    write_config_reference(out_dir)


def cmd_train(
    world_dir: str | Path,
    variants_dir: str | Path | None,
    config: ExperimentConfig,
    out_dir: str | Path,
) -> EmbeddingModel:
    world = storage.load_world(world_dir)
    out = Path(out_dir)
    variants = None
    scores = None
    if config.train.mode != "baseline":
        if variants_dir is None:
            raise DataError("training mode needs a variants directory")
        prompts = storage.load_prompts(variants_dir)
        variants = VariantStore.from_mapping(storage.load_variants(variants_dir, world, prompts))
        scores = storage.load_scores(variants_dir)

    models = []
    for seed in config.seeds:
        tc = replace(
            config.train, seed=seed, c_tau=config.c_tau, threshold_mode=config.threshold_mode
        )
        model, trace = train(world, variants, scores, tc)
        storage.save_model(model, out / f"model_{seed}.csv")
        storage.save_trace(trace, out / f"trace_{seed}.csv")
        models.append(model)
    averaged = average_models(models)
    storage.save_model(averaged, out / "model_avg.csv")
    write_config_reference(out_dir)
    return averaged


def cmd_evaluate(
    world_dir: str | Path,
    model_path: str | Path,
    config: ExperimentConfig,
    out_dir: str | Path,
) -> list[dict]:
    world = storage.load_world(world_dir)
    model = storage.load_model(model_path)
    out = Path(out_dir)
    d = world.landmarks[0].base_descriptor.shape[0]
    prompts = default_prompt_set(d, config.prompt_seed)
    for cond in config.query_conditions:
        if cond not in prompts.names():
            raise ConfigError(f"unknown query condition {cond!r}")
    queries = shift_queries(world, prompts, config.query_conditions, config.variant_seed)

    local_vectors = np.concatenate(
        [v.descriptors() @ model.projection.T for v in world.map_views]
    )
    cb_size = min(config.codebook_size, local_vectors.shape[0])
    codebook = train_codebook(
        local_vectors, cb_size, config.codebook_iters, config.codebook_seed
    )
    index = build_index(world.map_views, model, codebook)
    map_poses = {v.id: v.pose for v in world.map_views}
    map_views = {v.id: v for v in world.map_views}

    k_max = max(config.eval_ks)
    rankings = {}
    for q in queries:
        rankings[q.id] = retrieve(
            q, index, model, config.backend, k_max, config.asmk_alpha, config.asmk_sel_threshold
        )
    storage.save_rankings(rankings, out / "rankings.csv")

    rows = []
    errors: dict[tuple[str, int, str], list] = {}
    for q in queries:
        ranked = rankings[q.id]
        for k in config.eval_ks:
            est = ewb_pose(ranked, map_poses, k)
            err = pose_error(est, q.pose)
            rows.append(
                {
                    "query_id": q.id,
                    "protocol": "ewb",
                    "k": k,
                    "tx_err": err.translation,
                    "rot_err": err.rotation,
                    "status": "ok",
                }
            )
            errors.setdefault(("ewb", k, q.condition), []).append(err)

            rp = replace(config.ransac, seed=derive_seed(world.seed, q.id))
            try:
                est = sfm_localize(
                    q, ranked, map_views, world.landmarks, model, k, config.match, rp
                )
                err = pose_error(est, q.pose)
                rows.append(
                    {
                        "query_id": q.id,
                        "protocol": "sfm",
                        "k": k,
                        "tx_err": err.translation,
                        "rot_err": err.rotation,
                        "status": "ok",
                    }
                )
                errors.setdefault(("sfm", k, q.condition), []).append(err)
            except SynthlocError as exc:
                rows.append(
                    {"query_id": q.id, "protocol": "sfm", "k": k, "status": str(exc)}
                )
                errors.setdefault(("sfm", k, q.condition), []).append(None)
    storage.save_localization(rows, out / "localization.csv")

    thresholds = config.accuracy_thresholds()
    conditions = ["all"] + ["original"] + [c for c in config.query_conditions]
    summary = []
    for protocol in ("ewb", "sfm"):
        for k in config.eval_ks:
            for cond in conditions:
                if cond == "all":
                    errs = sum(
                        (errors.get((protocol, k, c), []) for c in ["original"] + config.query_conditions),
                        [],
                    )
                else:
                    errs = errors.get((protocol, k, cond), [])
                rates = localization_rate(errs, thresholds)
                summary.append(
                    {
                        "protocol": protocol,
                        "k": k,
                        "condition": cond,
                        "high": rates["high"],
                        "mid": rates["mid"],
                        "low": rates["low"],
                    }
                )
    storage.save_summary(summary, out / "summary.csv")
    write_config_reference(out_dir)
    return summary


ABLATION_METHODS = ("baseline", "synth_uniform", "synth_filtered", "synth_geometry")


def _method_train_config(config: ExperimentConfig, method: str, seed: int) -> tuple[TrainConfig, float]:
    synth_mode = config.train.mode if config.train.mode != "baseline" else "swap_pi"
    if method == "baseline":
        tc = replace(config.train, mode="baseline", seed=seed)
        return tc, config.c_tau
    if method == "synth_uniform":
        return replace(config.train, mode=synth_mode, sampling="uniform", c_tau=0.0, seed=seed), 0.0
    if method == "synth_filtered":
        tc = replace(config.train, mode=synth_mode, sampling="uniform", c_tau=config.c_tau, seed=seed)
        return tc, config.c_tau
    if method == "synth_geometry":
        tc = replace(
            config.train, mode=synth_mode, sampling="geometry_aware", c_tau=config.c_tau, seed=seed
        )
        return tc, config.c_tau
    raise ConfigError(f"unknown ablation method {method!r}")


def cmd_ablate(
    config: ExperimentConfig,
    out_dir: str | Path,
    methods: tuple[str, ...] = ABLATION_METHODS,
) -> list[dict]:
    """Run the method grid over all seeds, evaluating each trained model, and
    tabulate per-condition medians with min/max across seeds. Completed runs
    (marked by a `done` file) are reused."""
    out = Path(out_dir)
    world_dir = out / "world"
    variants_dir = out / "variants"
    if not (world_dir / "meta.csv").exists():
        cmd_worldgen(config, world_dir)
    world = storage.load_world(world_dir)
    needs_variants = any(m != "baseline" for m in methods)
    if needs_variants and not (variants_dir / "consistency.csv").exists():
        cmd_variants(world_dir, config, variants_dir)

    prompts = None
    variants = None
    if needs_variants:
        prompts = storage.load_prompts(variants_dir)
        variants = VariantStore.from_mapping(storage.load_variants(variants_dir, world, prompts))
    scores = storage.load_scores(variants_dir) if needs_variants else None

    raw_rows = []
    for method in methods:
        for seed in config.seeds:
            run_dir = out / "runs" / method / f"seed_{seed}"
            done = run_dir / "done"
            if not done.exists():
                tc, c_tau = _method_train_config(config, method, seed)
                use_variants = variants if tc.mode != "baseline" else None
                use_scores = scores if tc.mode != "baseline" else None
                model, trace = train(world, use_variants, use_scores, tc)
                storage.save_model(model, run_dir / "model.csv")
                storage.save_trace(trace, run_dir / "trace.csv")
                run_cfg = replace(config, seeds=[seed])
                cmd_evaluate(world_dir, run_dir / "model.csv", run_cfg, run_dir)
                storage._write_lines(done, ["ok"])
            for row in storage.load_summary(run_dir / "summary.csv"):
                raw_rows.append({"method": method, "seed": seed, **row})

    lines = ["method,seed,protocol,k,condition,pct_high,pct_mid,pct_low"]
    for r in raw_rows:
        lines.append(
            f"{r['method']},{r['seed']},{r['protocol']},{r['k']},{r['condition']},"
            f"{r['high']:.2f},{r['mid']:.2f},{r['low']:.2f}"
        )
    storage._write_lines(out / "ablation_raw.csv", lines)

    report = []
    keys = sorted(
        {(r["method"], r["protocol"], r["k"], r["condition"]) for r in raw_rows},
        key=lambda t: (methods.index(t[0]), t[1], t[2], t[3]),
    )
    for method, protocol, k, condition in keys:
        group = [
            r
            for r in raw_rows
            if (r["method"], r["protocol"], r["k"], r["condition"])
            == (method, protocol, k, condition)
        ]
        entry = {"method": method, "protocol": protocol, "k": k, "condition": condition}
        for level in ("high", "mid", "low"):
            vals = [g[level] for g in group]
            entry[f"{level}_median"] = statistics.median(vals)
            entry[f"{level}_min"] = min(vals)
            entry[f"{level}_max"] = max(vals)
        report.append(entry)

    lines = [
        "method,protocol,k,condition,"
        "high_median,high_min,high_max,mid_median,mid_min,mid_max,low_median,low_min,low_max"
    ]
    for r in report:
        lines.append(
            f"{r['method']},{r['protocol']},{r['k']},{r['condition']},"
            + ",".join(
                f"{r[f'{level}_{stat}']:.2f}"
                for level in ("high", "mid", "low")
                for stat in ("median", "min", "max")
            )
        )
    storage._write_lines(out / "ablation.csv", lines)
    return report
