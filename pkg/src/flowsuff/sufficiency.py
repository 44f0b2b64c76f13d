"""Directional information sufficiency and pool-wide scoring.

The score of a directed pair (a -> b) is the drop in the target's mean
validation NLL once the source is observed: IS = H(V) - H(V|U), in nats,
reported unclamped (estimation error can make it slightly negative). Pool
scores normalize each entry by the target dimension and aggregate a
source's row with the median by default (mean and trimmed mean are the
ablation variants).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import EmbeddingSet, check_pool_alignment
from .errors import ContractViolation, DataError, TrainingFailure
from .flow import FlowConfig, FlowModel
from .numcore import derive_seed
from .training import SplitSpec, TrainConfig, TrainRecord, split_dataset, train_conditional, train_marginal

AGGREGATION_METHODS = ("median", "mean", "trimmed")


@dataclass
class EntropyEstimates:
    h_v: float
    h_v_given_u: float
    is_value: float
    n_rows: int


def information_sufficiency(
    marginal: FlowModel, conditional: FlowModel, u_val: np.ndarray, v_val: np.ndarray
) -> EntropyEstimates:
    """IS(U -> V) from validation-mean NLLs of the two trained flows."""
    u_val = np.asarray(getattr(u_val, "values", u_val))
    v_val = np.asarray(getattr(v_val, "values", v_val))
    if u_val.shape[0] != v_val.shape[0]:
        raise DataError("U and V validation sets are misaligned")
    h_v = float(-marginal.log_prob(v_val).mean())
    h_v_given_u = float(-conditional.log_prob(v_val, u_val).mean())
    return EntropyEstimates(
        h_v=h_v,
        h_v_given_u=h_v_given_u,
        is_value=h_v - h_v_given_u,
        n_rows=v_val.shape[0],
    )


@dataclass
class ModelScore:
    model_id: str
    method: str
    score: float | None
    rank: int | None = None
    tied: bool = False


@dataclass
class ISMatrix:
    ids: list[str]
    dims: list[int]
    raw: np.ndarray
    normalized: np.ndarray
    flags: list[dict] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.ids)

    def index(self, model_id: str) -> int:
        return self.ids.index(model_id)

    def is_flagged(self, a: int, b: int) -> bool:
        return any(f["a"] == self.ids[a] and f["b"] == self.ids[b] for f in self.flags)

    def to_dict(self) -> dict:
        def cell(v):
            return None if not math.isfinite(v) else float(v)

        return {
            "ids": list(self.ids),
            "dims": [int(d) for d in self.dims],
            "raw": [[cell(v) for v in row] for row in self.raw],
            "normalized": [[cell(v) for v in row] for row in self.normalized],
            "flags": list(self.flags),
        }

    def to_csv(self) -> str:
        lines = ["source," + ",".join(self.ids)]
        for i, a in enumerate(self.ids):
            cells = []
            for j in range(self.k):
                v = self.normalized[i, j]
                cells.append("" if not math.isfinite(v) else f"{v:.6g}")
            lines.append(a + "," + ",".join(cells))
        return "\n".join(lines) + "\n"


@dataclass
class PoolSettings:
    """Training settings for one pairwise pool run.

    Per-job seeds are derived from (seed, job kind, model ids) so results
    are independent of job scheduling order.
    """

    seed: int = 0
    val_ratio: float = 0.9
    flow: FlowConfig = field(default_factory=FlowConfig)
    marginal: TrainConfig = field(default_factory=TrainConfig.marginal)
    conditional: TrainConfig = field(default_factory=TrainConfig.conditional)

    def marginal_config(self, b_id: str) -> TrainConfig:
        return replace(self.marginal, seed=derive_seed(self.seed, "marginal", b_id))

    def conditional_config(self, a_id: str, b_id: str) -> TrainConfig:
        return replace(self.conditional, seed=derive_seed(self.seed, "conditional", a_id, b_id))


@dataclass
class PairwiseResult:
    """Trained flows, records and the IS matrix for one pool run."""

    pool: list[EmbeddingSet]
    split: SplitSpec
    matrix: ISMatrix
    marginals: dict[str, FlowModel]
    conditionals: dict[tuple[str, str], FlowModel]
    records: dict[str, TrainRecord]
    _marg_rows: dict = field(default_factory=dict, repr=False)
    _cond_rows: dict = field(default_factory=dict, repr=False)

    def val_values(self, model_id: str) -> np.ndarray:
        emb = next(e for e in self.pool if e.model_id == model_id)
        return emb.values[self.split.val_idx]

    def marginal_row_nll(self, b_id: str) -> np.ndarray:
        """Per-validation-row NLL of the marginal flow for target b (cached)."""
        if b_id not in self._marg_rows:
            self._marg_rows[b_id] = -self.marginals[b_id].log_prob(self.val_values(b_id))
        return self._marg_rows[b_id]

    def conditional_row_nll(self, a_id: str, b_id: str) -> np.ndarray:
        key = (a_id, b_id)
        if key not in self._cond_rows:
            self._cond_rows[key] = -self.conditionals[key].log_prob(
                self.val_values(b_id), self.val_values(a_id)
            )
        return self._cond_rows[key]


def _marginal_job(args):
    emb, split, cfg, flow_cfg = args
    return train_marginal(emb, split, cfg, flow_cfg)


def _conditional_job(args):
    emb_u, emb_v, marginal, split, cfg = args
    try:
        return train_conditional(emb_u, emb_v, marginal, split, cfg)
    except TrainingFailure as e:
        return ("failed", str(e))


def pairwise_is_matrix(
    pool: list[EmbeddingSet],
    settings: PoolSettings,
    cache=None,
    jobs: int = 1,
) -> PairwiseResult:
    """Train one marginal per target (cached) plus one conditional per
    ordered pair, and fill the per-dimension-normalized IS matrix.

    Marginal flows are keyed by target, so adding a model to a cached pool
    costs O(K) new trainings rather than O(K^2). Individual training
    failures flag the matrix entry instead of aborting; aggregation later
    skips flagged entries. `cache`, when given, must provide
    load(kind, key) -> (model, record) | None and store(kind, key, model,
    record); `jobs` > 1 runs trainings in worker processes (results are
    merged by pair key, and per-job seeds make the outcome order-invariant).
    """
    if len(pool) < 2:
        raise ContractViolation("pool needs at least two models")
    check_pool_alignment(pool)
    ids = [e.model_id for e in pool]
    dims = [e.d for e in pool]
    k = len(ids)
    split = split_dataset(pool[0].n, settings.val_ratio, seed=settings.seed)
    by_id = {e.model_id: e for e in pool}

    def run_jobs(job_fn, pending):
        if jobs > 1 and len(pending) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as pool_exec:
                return dict(zip(pending.keys(), pool_exec.map(job_fn, pending.values())))
        return {key: job_fn(args) for key, args in pending.items()}

    marginals: dict[str, FlowModel] = {}
    records: dict[str, TrainRecord] = {}
    flags: list[dict] = []
    pending = {}
    for b_id in ids:
        cached = cache.load("marginal", b_id) if cache is not None else None
        if cached is not None:
            marginals[b_id], records[f"marginal:{b_id}"] = cached
            continue
        pending[b_id] = (by_id[b_id], split, settings.marginal_config(b_id), settings.flow)
    for b_id, (model, record) in run_jobs(_marginal_job, pending).items():
        marginals[b_id] = model
        records[f"marginal:{b_id}"] = record
        if cache is not None:
            cache.store("marginal", b_id, model, record)

    pending = {}
    conditionals: dict[tuple[str, str], FlowModel] = {}
    for b_id in ids:
        for a_id in ids:
            if a_id == b_id:
                continue
            key = (a_id, b_id)
            cached = cache.load("conditional", f"{a_id}->{b_id}") if cache is not None else None
            if cached is not None:
                conditionals[key], records[f"conditional:{a_id}->{b_id}"] = cached
                continue
            pending[key] = (by_id[a_id], by_id[b_id], marginals[b_id], split,
                            settings.conditional_config(a_id, b_id))
    for (a_id, b_id), outcome in run_jobs(_conditional_job, pending).items():
        if isinstance(outcome, tuple) and outcome and outcome[0] == "failed":
            flags.append({"a": a_id, "b": b_id, "reason": outcome[1]})
            continue
        cond, crec = outcome
        conditionals[(a_id, b_id)] = cond
        records[f"conditional:{a_id}->{b_id}"] = crec
        if cache is not None:
            cache.store("conditional", f"{a_id}->{b_id}", cond, crec)

    result = PairwiseResult(
        pool=pool, split=split, matrix=None, marginals=marginals,
        conditionals=conditionals, records=records,
    )
    raw = np.full((k, k), np.nan)
    for b, b_id in enumerate(ids):
        h_v = float(result.marginal_row_nll(b_id).mean())
        for a, a_id in enumerate(ids):
            if a == b or (a_id, b_id) not in conditionals:
                continue
            h_cond = float(result.conditional_row_nll(a_id, b_id).mean())
            raw[a, b] = h_v - h_cond

    normalized = raw / np.asarray(dims, dtype=np.float64)[None, :]
    result.matrix = ISMatrix(ids=ids, dims=dims, raw=raw, normalized=normalized, flags=flags)
    return result


def matrix_from_row_nll(result: PairwiseResult, val_rows: np.ndarray | None = None) -> ISMatrix:
    """Rebuild the IS matrix from cached per-row NLLs on a row subset.

    Used by the evaluation-time ablations: no retraining, just new means.
    """
    m = result.matrix
    raw = np.full((m.k, m.k), np.nan)
    for b, b_id in enumerate(m.ids):
        mrow = result.marginal_row_nll(b_id)
        h_v = float(mrow.mean() if val_rows is None else mrow[val_rows].mean())
        for a, a_id in enumerate(m.ids):
            if a == b or (a_id, b_id) not in result.conditionals:
                continue
            crow = result.conditional_row_nll(a_id, b_id)
            h_c = float(crow.mean() if val_rows is None else crow[val_rows].mean())
            raw[a, b] = h_v - h_c
    normalized = raw / np.asarray(m.dims, dtype=np.float64)[None, :]
    return ISMatrix(ids=list(m.ids), dims=list(m.dims), raw=raw,
                    normalized=normalized, flags=list(m.flags))


def _aggregate_row(values: np.ndarray, method: str, trim_frac: float) -> float:
    if method == "median":
        return float(np.median(values))
    if method == "mean":
        return float(np.mean(values))
    if method == "trimmed":
        k = int(math.floor(trim_frac * len(values)))
        trimmed = np.sort(values)[k : len(values) - k] if k else np.sort(values)
        return float(np.mean(trimmed))
    raise ContractViolation(f"unknown aggregation method {method!r}")


def aggregate_scores(
    matrix: ISMatrix, method: str = "median", trim_frac: float = 0.10
) -> list[ModelScore]:
    """Aggregate each source row of normalized IS entries into one score.

    Flagged or failed entries are skipped; a model with no valid entries is
    left unscored. Median of an even count is the midpoint average;
    trimmed drops floor(f*(K-1)) entries from each end.
    """
    if method not in AGGREGATION_METHODS:
        raise ContractViolation(f"method must be one of {AGGREGATION_METHODS}")
    if method == "trimmed" and not 0.0 < trim_frac < 0.5:
        raise ContractViolation("trim fraction must lie in (0, 0.5)")
    label = f"trimmed({trim_frac:g})" if method == "trimmed" else method
    scores = []
    for a, a_id in enumerate(matrix.ids):
        row = [
            matrix.normalized[a, b]
            for b in range(matrix.k)
            if b != a and math.isfinite(matrix.normalized[a, b])
        ]
        score = _aggregate_row(np.asarray(row), method, trim_frac) if row else None
        scores.append(ModelScore(model_id=a_id, method=label, score=score))
    return scores


def rank_models(scores: list[ModelScore]) -> list[ModelScore]:
    """Descending-score ranking; ties broken lexicographically and noted."""
    scored = [s for s in scores if s.score is not None]
    if len(scored) < 2:
        raise ContractViolation("need at least two scored models to rank")
    ordered = sorted(scored, key=lambda s: (-s.score, s.model_id))
    by_score: dict[float, int] = {}
    for s in ordered:
        by_score[s.score] = by_score.get(s.score, 0) + 1
    out = []
    for rank, s in enumerate(ordered, start=1):
        out.append(
            ModelScore(
                model_id=s.model_id,
                method=s.method,
                score=s.score,
                rank=rank,
                tied=by_score[s.score] > 1,
            )
        )
    return out
