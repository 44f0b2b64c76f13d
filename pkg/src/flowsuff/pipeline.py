"""End-to-end orchestration: files in, ranked report out.

A run loads a pool of embedding containers, trains the pairwise flows
(with disk-cached checkpoints so an interrupted run resumes), scores and
ranks the models, then executes whichever analyses the config enables.
Every random draw descends from the run seed, so a rerun with the same
config and inputs reproduces report.json byte for byte; wall-clock timing
is segregated into timing.json.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis as ana
from .baselines import uniformity_score
from .data import EmbeddingSet, check_pool_alignment, read_embeddings
from .diagnostics import (
    BoundInputs,
    bound_report,
    estimate_d_eff,
    estimate_sigma_bar,
    layer_direction_stats,
    layer_displacement_and_amplification,
    render_bound_table,
    total_amplification,
)
from .errors import ConfigError, DataError
from .flow import FlowConfig
from .flow_io import load_flow, save_flow
from .numcore import RngStream
from .sufficiency import (
    AGGREGATION_METHODS,
    PairwiseResult,
    PoolSettings,
    aggregate_scores,
    pairwise_is_matrix,
    rank_models,
)
from .training import TrainConfig, TrainRecord

ARTIFACT_VERSION = "flowsuff-0.1.0"

SHUFFLE_GRID = (0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)
SUBSAMPLE_GRID = (0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)
PERTURB_GRID = (0.01, 0.02, 0.05, 0.10, 0.20)


@dataclass
class AnalysisToggles:
    correlations: bool = True
    bootstrap: bool = False
    shuffle: bool = False
    shuffle_grid: tuple = SHUFFLE_GRID
    subsample: bool = False
    subsample_grid: tuple = SUBSAMPLE_GRID
    subsample_repeats: int = 20
    aggregation: bool = False
    cond_only: bool = False
    perturbation: bool = False
    perturbation_grid: tuple = PERTURB_GRID
    perturbation_draws: int = 3
    diagnostics: bool = False
    diagnostics_points: int = 3
    bounds: bool = False
    uniformity: bool = False


@dataclass
class RunConfig:
    pool_paths: list[str] = field(default_factory=list)
    gt_path: str | None = None
    out_dir: str = "flowsuff-out"
    seed: int = 0
    jobs: int = 1
    val_ratio: float = 0.9
    aggregation_method: str = "median"
    trim_frac: float = 0.10
    flow: FlowConfig = field(default_factory=FlowConfig)
    marginal: TrainConfig = field(default_factory=TrainConfig.marginal)
    conditional: TrainConfig = field(default_factory=TrainConfig.conditional)
    analysis: AnalysisToggles = field(default_factory=AnalysisToggles)

    def __post_init__(self):
        if self.aggregation_method not in AGGREGATION_METHODS:
            raise ConfigError(f"aggregation must be one of {AGGREGATION_METHODS}")
        if not 0 < self.val_ratio < 1:
            raise ConfigError("val_ratio must lie in (0, 1)")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


# ---------------------------------------------------------------------------
# Config file parsing (INI sections, unknown keys rejected)
# ---------------------------------------------------------------------------

_RUN_KEYS = {
    "pool": str, "ground_truth": str, "out_dir": str, "seed": int, "jobs": int,
    "val_ratio": float, "aggregation": str, "trim_frac": float,
}
_FLOW_KEYS = {
    "n_blocks": int, "n_bins": int, "tail_bound": float, "hidden_width": int,
    "n_hidden": int, "min_bin_frac": float, "min_derivative": float, "cond_rank": int,
}
_TRAIN_KEYS = {
    "lr": float, "weight_decay": float, "ema_decay": float, "batch_size": int,
    "accum_steps": int, "max_epochs": int, "patience": int, "lr_floor_frac": float,
}
_ANALYSIS_KEYS = {
    "correlations": bool, "bootstrap": bool, "shuffle": bool, "subsample": bool,
    "subsample_repeats": int, "aggregation": bool, "cond_only": bool,
    "perturbation": bool, "perturbation_draws": int, "diagnostics": bool,
    "diagnostics_points": int, "bounds": bool, "uniformity": bool,
    "shuffle_grid": str, "subsample_grid": str, "perturbation_grid": str,
}


def _convert(section: str, key: str, value: str, schema: dict):
    if key not in schema:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    typ = schema[key]
    try:
        if typ is bool:
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        return typ(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r} in [{section}]: {value!r}") from e


def _grid(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as e:
        raise ConfigError(f"bad grid specification {text!r}") from e


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse an INI config file into a RunConfig; FLOWSUFF_SEED and explicit
    overrides (seed/out_dir/jobs) take precedence over the file."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} not found or empty")
    known_sections = {"run", "flow", "train.marginal", "train.conditional", "analysis"}
    unknown = set(parser.sections()) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    cfg = RunConfig()
    if parser.has_section("run"):
        for key, value in parser.items("run"):
            parsed = _convert("run", key, value, _RUN_KEYS)
            if key == "pool":
                cfg.pool_paths = value.split()
            elif key == "ground_truth":
                cfg.gt_path = parsed
            elif key == "aggregation":
                cfg.aggregation_method = parsed
            else:
                setattr(cfg, key, parsed)
    if parser.has_section("flow"):
        kwargs = {k: _convert("flow", k, v, _FLOW_KEYS) for k, v in parser.items("flow")}
        cfg.flow = replace(cfg.flow, **kwargs)
    for section, attr in (("train.marginal", "marginal"), ("train.conditional", "conditional")):
        if parser.has_section(section):
            kwargs = {k: _convert(section, k, v, _TRAIN_KEYS) for k, v in parser.items(section)}
            setattr(cfg, attr, replace(getattr(cfg, attr), **kwargs))
    if parser.has_section("analysis"):
        for key, value in parser.items("analysis"):
            parsed = _convert("analysis", key, value, _ANALYSIS_KEYS)
            if key.endswith("_grid"):
                setattr(cfg.analysis, key, _grid(value))
            else:
                setattr(cfg.analysis, key, parsed)

    env_seed = os.environ.get("FLOWSUFF_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"FLOWSUFF_SEED={env_seed!r} is not an integer") from e
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.__post_init__()
    return cfg


# ---------------------------------------------------------------------------
# Checkpoint cache
# ---------------------------------------------------------------------------


class DiskFlowCache:
    """Flow checkpoints + training records keyed per job.

    The key hash covers only what that job consumes (seed, split geometry,
    flow/train configs, and the involved models' identities), never the
    whole pool roster, so adding a model to a cached pool retrains O(K) new
    jobs while every old pair reloads. An interrupted pipeline resumes from
    whatever finished; a changed config or corpus changes the hashes.
    """

    def __init__(self, root: Path, base_payload: dict, model_meta: dict[str, list]):
        self.root = Path(root)
        self.base_payload = base_payload
        self.model_meta = model_meta
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0

    def _job_hash(self, kind: str, key: str) -> str:
        ids = key.split("->") if "->" in key else [key]
        payload = {
            "base": self.base_payload,
            "kind": kind,
            "models": [self.model_meta[i] for i in ids],
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]

    def _paths(self, kind: str, key: str):
        safe = key.replace("->", "__to__").replace("/", "_")
        stem = f"{kind}_{safe}_{self._job_hash(kind, key)}"
        return self.root / f"{stem}.flsf", self.root / f"{stem}.json"

    def load(self, kind: str, key: str):
        fpath, jpath = self._paths(kind, key)
        if not (fpath.exists() and jpath.exists()):
            return None
        try:
            model = load_flow(fpath)
            rec = json.loads(jpath.read_text())
            record = TrainRecord(**rec)
        except (DataError, KeyError, TypeError, json.JSONDecodeError):
            return None
        self.hits += 1
        return model, record

    def store(self, kind: str, key: str, model, record: TrainRecord) -> None:
        fpath, jpath = self._paths(kind, key)
        save_flow(model, fpath)
        jpath.write_text(json.dumps(record.to_dict() | {"wall_time_s": record.wall_time_s},
                                    sort_keys=True))


def _run_hash(cfg: RunConfig, pool: list[EmbeddingSet]) -> str:
    payload = {
        "seed": cfg.seed,
        "val_ratio": cfg.val_ratio,
        "flow": asdict(cfg.flow),
        "marginal": asdict(cfg.marginal),
        "conditional": asdict(cfg.conditional),
        "pool": [[e.model_id, e.n, e.d, e.corpus_hash] for e in pool],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _jsonsafe(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonsafe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonsafe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _jsonsafe(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


@dataclass
class RunReport:
    report: dict
    timing: dict
    curves: dict[str, str]  # csv name -> contents
    job_records: dict = field(default_factory=dict)  # includes wall times

    @property
    def exit_code(self) -> int:
        return self.report["status"]["exit_code"]


def load_ground_truth(path) -> ana.GroundTruth:
    """Ground truth JSON: {"task": ..., "scores": {model_id: value}}."""
    try:
        payload = json.loads(Path(path).read_text())
        scores = payload["scores"]
        ids = sorted(scores)
        return ana.GroundTruth(ids=ids, scores=[float(scores[m]) for m in ids],
                               task=str(payload.get("task", "classification")))
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise DataError(f"cannot load ground truth from {path}: {e}") from e


def _diag_points(result: PairwiseResult, a_id: str, b_id: str, count: int, seed: int):
    v_val = result.val_values(b_id)
    u_val = result.val_values(a_id)
    idx = RngStream(seed, ("diagpoints",)).choice(v_val.shape[0], min(count, v_val.shape[0]))
    return v_val[idx], u_val[idx]


def run_pipeline(config: RunConfig, pool: list[EmbeddingSet] | None = None) -> RunReport:
    """Execute splits, trainings, scoring, and enabled analyses.

    Individual pair failures are flagged and the pipeline continues; it is
    fatal only when fewer than two models end up scored.
    """
    t_start = time.perf_counter()
    timing: dict = {}
    if pool is None:
        pool = [read_embeddings(p) for p in config.pool_paths]
    if len(pool) < 2:
        raise DataError("pipeline needs at least two pool models")
    check_pool_alignment(pool)
    gt = load_ground_truth(config.gt_path) if config.gt_path else None
    if gt is not None and set(gt.ids) != {e.model_id for e in pool}:
        raise DataError("ground truth ids do not match the pool")

    run_hash = _run_hash(config, pool)
    base_payload = {
        "seed": config.seed,
        "val_ratio": config.val_ratio,
        "n": pool[0].n,
        "flow": asdict(config.flow),
        "marginal": asdict(config.marginal),
        "conditional": asdict(config.conditional),
    }
    model_meta = {e.model_id: [e.model_id, e.n, e.d, e.corpus_hash] for e in pool}
    cache = DiskFlowCache(Path(config.out_dir) / "cache", base_payload, model_meta)
    settings = PoolSettings(
        seed=config.seed, val_ratio=config.val_ratio, flow=config.flow,
        marginal=config.marginal, conditional=config.conditional,
    )
    t0 = time.perf_counter()
    result = pairwise_is_matrix(pool, settings, cache=cache, jobs=config.jobs)
    timing["pairwise_s"] = time.perf_counter() - t0

    scores = aggregate_scores(result.matrix, config.aggregation_method, config.trim_frac)
    scored = [s for s in scores if s.score is not None]
    n_pairs_expected = len(pool) * (len(pool) - 1)
    status = {
        "flagged_pairs": len(result.matrix.flags),
        "expected_pairs": n_pairs_expected,
        "scored_models": len(scored),
        "cache_hits": cache.hits,
    }
    job_records = {k: r.to_dict(include_timing=True) for k, r in sorted(result.records.items())}
    if len(scored) < 2:
        status["exit_code"] = 4
        report = {"status": status, "provenance": _provenance(config, pool, run_hash)}
        return RunReport(report=_jsonsafe(report), timing=timing, curves={},
                         job_records=job_records)
    status["exit_code"] = 5 if result.matrix.flags else 0

    ranking = rank_models(scores)
    report: dict = {
        "provenance": _provenance(config, pool, run_hash),
        "status": status,
        "is_matrix": result.matrix.to_dict(),
        "scores": [vars(s) for s in scores],
        "ranking": [vars(s) for s in ranking],
        "records": {k: r.to_dict(include_timing=False) for k, r in sorted(result.records.items())},
    }
    curves: dict[str, str] = {}
    toggles = config.analysis
    pred = {s.model_id: s.score for s in scored}

    if gt is not None and toggles.correlations and len(pred) >= 3:
        gt_map = gt.as_dict()
        ids = sorted(pred)
        corr = ana.rank_correlations([pred[m] for m in ids], [gt_map[m] for m in ids])
        report["correlation"] = corr.to_dict()
        report["top3_overlap"] = ana.top3_overlap(gt_map, pred)
        report["pairwise_preference"] = ana.pairwise_preference_test(pred, gt).to_dict()

    if gt is not None and toggles.bootstrap and result.matrix.k >= 4:
        t0 = time.perf_counter()
        report["bootstrap"] = ana.loo_bootstrap(
            result.matrix, gt, config.aggregation_method, config.trim_frac
        ).to_dict()
        timing["bootstrap_s"] = time.perf_counter() - t0

    if toggles.shuffle:
        t0 = time.perf_counter()
        curve = ana.shuffle_ablation(result, toggles.shuffle_grid, seed=config.seed, gt=gt,
                                     method=config.aggregation_method, trim_frac=config.trim_frac)
        report["shuffle"] = curve.to_dict()
        curves["shuffle.csv"] = curve.to_csv()
        timing["shuffle_s"] = time.perf_counter() - t0

    if toggles.subsample:
        t0 = time.perf_counter()
        curve = ana.subsample_stability(
            result, toggles.subsample_grid, toggles.subsample_repeats,
            seed=config.seed, gt=gt, method=config.aggregation_method,
            trim_frac=config.trim_frac,
        )
        report["subsample"] = curve.to_dict()
        curves["subsample.csv"] = curve.to_csv()
        timing["subsample_s"] = time.perf_counter() - t0

    if toggles.aggregation:
        agg = {}
        for method in AGGREGATION_METHODS:
            m_scores = aggregate_scores(result.matrix, method, config.trim_frac)
            entry = {"scores": [vars(s) for s in m_scores]}
            if gt is not None:
                rho = ana._scores_vs_gt(m_scores, gt)
                entry["spearman_vs_gt"] = rho
            agg[method] = entry
        report["aggregation_ablation"] = agg

    if toggles.cond_only:
        c_scores = ana.cond_only_pool_scores(result, config.aggregation_method, config.trim_frac)
        entry = {"scores": [vars(s) for s in c_scores]}
        if gt is not None:
            entry["spearman_vs_gt"] = ana._scores_vs_gt(c_scores, gt)
        report["cond_only"] = entry

    if toggles.uniformity:
        uni = {e.model_id: -uniformity_score(e) for e in pool}
        entry = {"scores": uni}
        if gt is not None and len(uni) >= 3:
            gt_map = gt.as_dict()
            ids = sorted(uni)
            rep = ana.rank_correlations([uni[m] for m in ids], [gt_map[m] for m in ids])
            entry["spearman_vs_gt"] = rep.spearman
        report["uniformity"] = entry

    diag_pair = _first_pair(result)
    if toggles.perturbation and diag_pair is not None:
        t0 = time.perf_counter()
        a_id, b_id = diag_pair
        rows = ana.weight_perturbation_sweep(
            result.conditionals[diag_pair], toggles.perturbation_grid,
            toggles.perturbation_draws, result.val_values(b_id),
            result.val_values(a_id), seed=config.seed,
        )
        report["perturbation"] = {"pair": list(diag_pair), "rows": [r.to_dict() for r in rows]}
        curves["perturbation.csv"] = _perturbation_csv(rows, config.seed)
        timing["perturbation_s"] = time.perf_counter() - t0

    if toggles.diagnostics and diag_pair is not None:
        t0 = time.perf_counter()
        a_id, b_id = diag_pair
        model = result.conditionals[diag_pair]
        points, u_points = _diag_points(result, a_id, b_id, toggles.diagnostics_points,
                                        config.seed)
        rng = RngStream(config.seed, ("diagnostics",))
        diag = {"pair": list(diag_pair)}
        if len(model.couplings) >= 2 and model.d >= 2:
            diag["directions"] = layer_direction_stats(
                model, points, u_points, rng=rng.child("dirs")).to_dict()
        diag["displacement"] = layer_displacement_and_amplification(
            model, points, u_points, rng=rng.child("disp")).to_dict()
        diag["total_amplification"] = total_amplification(
            model, points, u_points, rng=rng.child("amp")).to_dict()
        report["diagnostics"] = diag
        timing["diagnostics_s"] = time.perf_counter() - t0

    if toggles.bounds:
        t0 = time.perf_counter()
        bounds = {}
        rng = RngStream(config.seed, ("bounds",))
        for (a_id, b_id), cond in sorted(result.conditionals.items()):
            marg = result.marginals[b_id]
            mrec = result.records[f"marginal:{b_id}"]
            crec = result.records[f"conditional:{a_id}->{b_id}"]
            points, u_points = _diag_points(result, a_id, b_id,
                                            toggles.diagnostics_points, config.seed)
            d_eff = estimate_d_eff(result.val_values(b_id))
            sigma_m = estimate_sigma_bar(marg, points, rng=rng.child("sm", a_id, b_id))
            sigma_c = estimate_sigma_bar(cond, points, u_points,
                                         rng=rng.child("sc", a_id, b_id))
            common = dict(d_eff=d_eff, m=result.split.m, m_val=result.split.m_val)
            rep = bound_report(
                mrec,
                BoundInputs(depth=marg.n_atomic, sigma_bar=sigma_m,
                            m_train_bound=mrec.m_train, m_val_bound=mrec.m_val, **common),
                crec,
                BoundInputs(depth=cond.n_atomic, sigma_bar=sigma_c,
                            m_train_bound=crec.m_train, m_val_bound=crec.m_val, **common),
            )
            bounds[f"{a_id}->{b_id}"] = rep
        report["bounds"] = {k: v.to_dict() for k, v in sorted(bounds.items())}
        report["bounds_table"] = render_bound_table(bounds)
        timing["bounds_s"] = time.perf_counter() - t0

    timing["total_s"] = time.perf_counter() - t_start
    return RunReport(report=_jsonsafe(report), timing=timing, curves=curves,
                     job_records=job_records)


def _first_pair(result: PairwiseResult):
    keys = sorted(result.conditionals.keys())
    return keys[0] if keys else None


def _perturbation_csv(rows, seed: int) -> str:
    lines = ["control,statistic,repeat,seed"]
    for r in rows:
        lines.append(f"{r.sigma:g},{r.median:.8g},0,{seed}")
    return "\n".join(lines) + "\n"


def _provenance(config: RunConfig, pool: list[EmbeddingSet], run_hash: str) -> dict:
    return {
        "artifact_version": ARTIFACT_VERSION,
        "seed": config.seed,
        "config_hash": run_hash,
        "aggregation_method": config.aggregation_method,
        "trim_frac": config.trim_frac,
        "val_ratio": config.val_ratio,
        "pool": [
            {"model_id": e.model_id, "n": e.n, "d": e.d, "corpus_hash": e.corpus_hash}
            for e in pool
        ],
    }


def write_report(run: RunReport, out_dir) -> list[str]:
    """Write report.json, CSV side files and timing.json with stable layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(relpath: str, text: str):
        path = out / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        try:
            tmp.write_text(text)
            tmp.replace(path)
        except OSError:
            if tmp.exists():
                tmp.unlink()
            raise
        written.append(relpath)

    emit("report.json", json.dumps(run.report, indent=2, sort_keys=True, allow_nan=False) + "\n")
    # wall-clock data lives outside the deterministic report surface
    emit("jobs/timing.json", json.dumps(_jsonsafe(run.timing), indent=2, sort_keys=True) + "\n")
    if run.job_records:
        emit("jobs/records.json",
             json.dumps(_jsonsafe(run.job_records), indent=2, sort_keys=True) + "\n")
    if "is_matrix" in run.report:
        emit("is_matrix.csv", _matrix_csv(run.report["is_matrix"]))
    if "scores" in run.report:
        emit("scores.csv", _scores_csv(run.report["ranking"]))
    if "bounds" in run.report:
        emit("bounds.csv", _bounds_csv(run.report["bounds"]))
    for name, text in sorted(run.curves.items()):
        emit(f"curves/{name}", text)
    return written


def _matrix_csv(matrix: dict) -> str:
    ids = matrix["ids"]
    lines = ["source," + ",".join(ids)]
    for i, a in enumerate(ids):
        cells = []
        for j in range(len(ids)):
            v = matrix["normalized"][i][j]
            cells.append("" if v is None else f"{v:.6g}")
        lines.append(a + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def _scores_csv(ranking: list[dict]) -> str:
    lines = ["model_id,score,rank,method"]
    for s in ranking:
        lines.append(f"{s['model_id']},{s['score']:.8g},{s['rank']},{s['method']}")
    return "\n".join(lines) + "\n"


def _bounds_csv(bounds: dict) -> str:
    lines = ["pair,rademacher,hoeffding_val,hoeffding_train,delta_theo,delta_emp,ratio,rademacher_share_pct"]
    for pair, rep in sorted(bounds.items()):
        total_rad = rep["marginal_terms"]["rademacher"]
        total_hv = rep["marginal_terms"]["hoeffding_val"]
        total_ht = rep["marginal_terms"]["hoeffding_train"]
        if rep["conditional_terms"]:
            total_rad += rep["conditional_terms"]["rademacher"]
            total_hv += rep["conditional_terms"]["hoeffding_val"]
            total_ht += rep["conditional_terms"]["hoeffding_train"]
        ratio = "" if rep["ratio"] is None else f"{rep['ratio']:.6g}"
        lines.append(
            f"{pair},{total_rad:.6g},{total_hv:.6g},{total_ht:.6g},"
            f"{rep['delta_theo']:.6g},{rep['delta_emp']:.6g},{ratio},"
            f"{rep['rademacher_share_pct']:.4g}"
        )
    return "\n".join(lines) + "\n"


def validate_report(report: dict) -> None:
    """Validate a report dict against the shipped JSON schema."""
    import jsonschema

    schema_path = Path(__file__).parent / "schemas" / "report.schema.json"
    schema = json.loads(schema_path.read_text())
    jsonschema.validate(report, schema)
