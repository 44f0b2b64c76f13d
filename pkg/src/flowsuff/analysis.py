"""Ranking validation and stress suites.

Everything here is a pure function of trained flows plus data: rank
correlations against supervised ground truth, top-3 overlap, leave-one-out
bootstrap over the model pool, evaluation-time subsample stability and
shuffle ablations (no retraining), the conditional-only score variant,
weight-perturbation robustness, and an exact binomial pairwise-preference
test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import beta as _beta_dist

from .errors import ContractViolation, DataError
from .flow import FlowModel
from .numcore import RngStream
from .sufficiency import (
    ISMatrix,
    ModelScore,
    PairwiseResult,
    aggregate_scores,
    matrix_from_row_nll,
    rank_models,
)


@dataclass
class GroundTruth:
    """Externally supplied supervised scores; never computed here."""

    ids: list[str]
    scores: list[float]
    task: str = "classification"

    def __post_init__(self):
        if len(self.ids) != len(self.scores):
            raise DataError("ground truth ids and scores differ in length")
        if not all(math.isfinite(s) for s in self.scores):
            raise DataError("ground truth scores must be finite")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.ids, self.scores))


@dataclass
class CorrelationReport:
    spearman: float | None
    pearson: float | None
    n: int

    def to_dict(self) -> dict:
        return {"spearman": self.spearman, "pearson": self.pearson, "n": self.n}


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Fractional (average) ranks, 1-based; ties share their mean rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return None
    return float(xc @ yc) / denom


def rank_correlations(x, y) -> CorrelationReport:
    """Spearman (average-rank ties, then Pearson on ranks) and Pearson.

    Zero variance in either vector leaves the affected coefficient
    undefined (None) rather than raising.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractViolation("inputs must be equal-length vectors")
    if len(x) < 3:
        raise ContractViolation("need at least 3 points")
    spearman = _pearson(_average_ranks(x), _average_ranks(y))
    pearson = _pearson(x, y)
    return CorrelationReport(spearman=spearman, pearson=pearson, n=len(x))


def _top_k(scores: dict[str, float], k: int) -> set[str]:
    ordered = sorted(scores, key=lambda m: (-scores[m], m))  # lexicographic ties
    return set(ordered[:k])


def top3_overlap(gt_scores: dict[str, float], predicted_scores: dict[str, float]) -> int:
    """Size of the intersection of the two unordered top-3 sets (0..3)."""
    if len(gt_scores) < 3 or len(predicted_scores) < 3:
        raise ContractViolation("need at least 3 models")
    if set(gt_scores) != set(predicted_scores):
        raise DataError("score dictionaries cover different models")
    return len(_top_k(gt_scores, 3) & _top_k(predicted_scores, 3))


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapReport:
    rho_full: float | None
    rho_min: float | None
    rho_max: float | None
    replicates: list[dict]

    def to_dict(self) -> dict:
        return {
            "rho_full": self.rho_full,
            "rho_min": self.rho_min,
            "rho_max": self.rho_max,
            "replicates": self.replicates,
        }


def _scores_vs_gt(scores: list[ModelScore], gt: GroundTruth) -> float | None:
    by_id = {s.model_id: s.score for s in scores if s.score is not None}
    ids = [m for m in gt.ids if m in by_id]
    if len(ids) < 3:
        return None
    gt_map = gt.as_dict()
    rep = rank_correlations([by_id[m] for m in ids], [gt_map[m] for m in ids])
    return rep.spearman


def loo_bootstrap(matrix: ISMatrix, gt: GroundTruth,
                  method: str = "median", trim_frac: float = 0.10) -> BootstrapReport:
    """Leave-one-out bootstrap over the model pool.

    For each dropped model the remaining sources are re-aggregated over the
    surviving K-2 targets and Spearman's rho is recomputed on K-1 models.
    Degenerate replicates (undefined rho) are flagged and skipped from the
    range.
    """
    if matrix.k < 4:
        raise ContractViolation("bootstrap needs a pool of at least 4 models")
    rho_full = _scores_vs_gt(aggregate_scores(matrix, method, trim_frac), gt)
    replicates = []
    rhos = []
    for drop in matrix.ids:
        keep = [i for i, m in enumerate(matrix.ids) if m != drop]
        sub = ISMatrix(
            ids=[matrix.ids[i] for i in keep],
            dims=[matrix.dims[i] for i in keep],
            raw=matrix.raw[np.ix_(keep, keep)],
            normalized=matrix.normalized[np.ix_(keep, keep)],
            flags=[f for f in matrix.flags if f["a"] != drop and f["b"] != drop],
        )
        sub_gt = GroundTruth(
            ids=[m for m in gt.ids if m != drop],
            scores=[s for m, s in zip(gt.ids, gt.scores) if m != drop],
            task=gt.task,
        )
        rho = _scores_vs_gt(aggregate_scores(sub, method, trim_frac), sub_gt)
        replicates.append({"dropped": drop, "rho": rho, "flagged": rho is None})
        if rho is not None:
            rhos.append(rho)
    return BootstrapReport(
        rho_full=rho_full,
        rho_min=min(rhos) if rhos else None,
        rho_max=max(rhos) if rhos else None,
        replicates=replicates,
    )


# ---------------------------------------------------------------------------
# Evaluation-time ablations (reuse trained flows, never retrain)
# ---------------------------------------------------------------------------


@dataclass
class AblationCurve:
    control: str  # "alpha" or "p"
    values: list[float]
    statistic: list[float]  # mean over repeats, per control value
    rows: list[dict] = field(default_factory=list)  # per (value, repeat)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "control": self.control,
            "values": [float(v) for v in self.values],
            "statistic": [None if s is None or not math.isfinite(s) else float(s)
                          for s in self.statistic],
            "rows": self.rows,
            "seed": self.seed,
        }

    def to_csv(self) -> str:
        lines = ["control,statistic,repeat,seed"]
        for r in self.rows:
            lines.append(f"{r['control']:g},{r['statistic']:.8g},{r['repeat']},{r['seed']}")
        return "\n".join(lines) + "\n"


def subsample_stability(
    result: PairwiseResult,
    alphas,
    repeats: int = 20,
    seed: int = 0,
    gt: GroundTruth | None = None,
    method: str = "median",
    trim_frac: float = 0.10,
) -> AblationCurve:
    """Ranking deviation under validation subsampling, no retraining.

    For each ratio alpha, rows are drawn without replacement, scores are
    recomputed from the cached per-row NLLs, and rho(alpha) is the Spearman
    correlation between the subsample ranking and the full-data ranking, so
    Delta_rho(1.0) = 0 by definition. Subsamples smaller than 10 rows are
    skipped with a flag. When ground truth is supplied, rho vs. gt is also
    recorded per repeat.
    """
    alphas = [float(a) for a in alphas]
    if any(a <= 0 or a > 1 for a in alphas):
        raise ContractViolation("alphas must lie in (0, 1]")
    if repeats < 1:
        raise ContractViolation("repeats must be >= 1")
    m_val = len(result.split.val_idx)
    full_scores = aggregate_scores(result.matrix, method, trim_frac)
    full_vec = {s.model_id: s.score for s in full_scores if s.score is not None}
    ids = sorted(full_vec)
    gt_map = gt.as_dict() if gt is not None else None

    curve = AblationCurve(control="alpha", values=alphas, statistic=[], seed=seed)
    for a_i, alpha in enumerate(alphas):
        size = int(math.floor(alpha * m_val))
        if size < 10:
            curve.statistic.append(None)
            curve.rows.append({"control": alpha, "statistic": float("nan"),
                               "repeat": -1, "seed": seed, "skipped": True})
            continue
        deltas = []
        for rep in range(repeats):
            rng = RngStream(seed, ("subsample", f"{alpha:g}", str(rep)))
            rows = rng.choice(m_val, size, replace=False)
            sub_matrix = matrix_from_row_nll(result, val_rows=rows)
            sub_scores = aggregate_scores(sub_matrix, method, trim_frac)
            sub_vec = {s.model_id: s.score for s in sub_scores if s.score is not None}
            rep_corr = rank_correlations(
                [sub_vec[m] for m in ids], [full_vec[m] for m in ids]
            )
            rho = rep_corr.spearman if rep_corr.spearman is not None else 0.0
            delta = abs(rho - 1.0)
            deltas.append(delta)
            row = {"control": alpha, "statistic": delta, "repeat": rep, "seed": seed}
            if gt_map is not None:
                gt_rep = rank_correlations(
                    [sub_vec[m] for m in ids], [gt_map[m] for m in ids]
                )
                row["rho_gt"] = gt_rep.spearman
            curve.rows.append(row)
        curve.statistic.append(float(np.mean(deltas)))
    return curve


def _shuffled_rows(n: int, p: float, rng: RngStream) -> np.ndarray:
    """Row permutation that shuffles a uniform p-fraction, fixing the rest."""
    perm = np.arange(n)
    size = int(math.floor(p * n))
    if size >= 2:
        chosen = np.sort(rng.child("rows").choice(n, size, replace=False))
        perm[chosen] = chosen[rng.child("perm").permutation(size)]
    return perm


def shuffle_is_curve(
    marginal: FlowModel,
    conditional: FlowModel,
    u_val: np.ndarray,
    v_val: np.ndarray,
    p_list,
    rng: RngStream,
) -> list[float]:
    """IS of one pair after shuffling a p-fraction of the correspondence.

    The marginal term is invariant under row permutation; only the
    conditional NLL is re-evaluated against the permuted pairing.
    """
    u_val = np.asarray(u_val)
    v_val = np.asarray(v_val)
    h_v = float(-marginal.log_prob(v_val).mean())
    out = []
    for p in p_list:
        if not 0.0 <= p <= 1.0:
            raise ContractViolation("p must lie in [0, 1]")
        perm = _shuffled_rows(v_val.shape[0], p, rng.child("p", f"{p:g}"))
        h_c = float(-conditional.log_prob(v_val[perm], u_val).mean())
        out.append(h_v - h_c)
    return out


def shuffle_ablation(
    result: PairwiseResult,
    p_list,
    seed: int = 0,
    gt: GroundTruth | None = None,
    method: str = "median",
    trim_frac: float = 0.10,
) -> AblationCurve:
    """Pool-wide shuffle ablation: per p, permute a p-fraction of the U-V
    correspondence (per pair, derived seeds), rescore, and correlate the
    shuffled ranking with ground truth (when given) or with the unshuffled
    ranking otherwise. p=0 reproduces the unshuffled scores exactly.
    """
    p_list = [float(p) for p in p_list]
    m = result.matrix
    m_val = len(result.split.val_idx)
    full_scores = aggregate_scores(m, method, trim_frac)
    full_vec = {s.model_id: s.score for s in full_scores if s.score is not None}
    ids = sorted(full_vec)
    ref = gt.as_dict() if gt is not None else full_vec

    curve = AblationCurve(control="p", values=p_list, statistic=[], seed=seed)
    for p in p_list:
        raw = np.full((m.k, m.k), np.nan)
        for b, b_id in enumerate(m.ids):
            v_val = result.val_values(b_id)
            h_v = float(result.marginal_row_nll(b_id).mean())
            for a, a_id in enumerate(m.ids):
                if a == b or (a_id, b_id) not in result.conditionals:
                    continue
                rng = RngStream(seed, ("shuffle", f"{p:g}", a_id, b_id))
                perm = _shuffled_rows(m_val, p, rng)
                if p == 0.0:
                    h_c = float(result.conditional_row_nll(a_id, b_id).mean())
                else:
                    u_val = result.val_values(a_id)
                    h_c = float(
                        -result.conditionals[(a_id, b_id)]
                        .log_prob(v_val[perm], u_val)
                        .mean()
                    )
                raw[a, b] = h_v - h_c
        normalized = raw / np.asarray(m.dims, dtype=np.float64)[None, :]
        shuffled = ISMatrix(ids=list(m.ids), dims=list(m.dims), raw=raw,
                            normalized=normalized, flags=list(m.flags))
        scores = aggregate_scores(shuffled, method, trim_frac)
        svec = {s.model_id: s.score for s in scores if s.score is not None}
        rep = rank_correlations([svec[i] for i in ids], [ref[i] for i in ids])
        rho = rep.spearman
        curve.statistic.append(rho if rho is not None else float("nan"))
        curve.rows.append({
            "control": p,
            "statistic": float("nan") if rho is None else rho,
            "repeat": 0,
            "seed": seed,
            "mean_is": float(np.nanmean(raw)),
        })
    return curve


def cond_only_score(conditional: FlowModel, u_val, v_val) -> float:
    """Mean validation log p(v|u); the marginal-free ablation variant."""
    u_val = np.asarray(getattr(u_val, "values", u_val))
    v_val = np.asarray(getattr(v_val, "values", v_val))
    return float(conditional.log_prob(v_val, u_val).mean())


def cond_only_pool_scores(result: PairwiseResult, method: str = "median",
                          trim_frac: float = 0.10) -> list[ModelScore]:
    """Pool scores from the conditional term alone, per-dim normalized and
    aggregated exactly like the full score."""
    m = result.matrix
    raw = np.full((m.k, m.k), np.nan)
    for b, b_id in enumerate(m.ids):
        for a, a_id in enumerate(m.ids):
            if a == b or (a_id, b_id) not in result.conditionals:
                continue
            raw[a, b] = -float(result.conditional_row_nll(a_id, b_id).mean())
    normalized = raw / np.asarray(m.dims, dtype=np.float64)[None, :]
    matrix = ISMatrix(ids=list(m.ids), dims=list(m.dims), raw=raw,
                      normalized=normalized, flags=list(m.flags))
    return aggregate_scores(matrix, method, trim_frac)


# ---------------------------------------------------------------------------
# Weight perturbation
# ---------------------------------------------------------------------------


@dataclass
class PerturbationRow:
    sigma: float
    median: float
    mean: float
    std: float
    max: float
    n_divergent: int

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma, "median": self.median, "mean": self.mean,
            "std": self.std, "max": self.max, "n_divergent": self.n_divergent,
        }


def weight_perturbation_sweep(
    model: FlowModel,
    sigmas,
    draws: int,
    v_val,
    u_val=None,
    seed: int = 0,
) -> list[PerturbationRow]:
    """Relative validation-NLL change under parameter noise.

    Each tensor W receives N(0, (sigma*mean|W|)^2) noise, so zero tensors
    (e.g. the conditioning projection at init) stay untouched. Draws whose
    perturbed NLL is non-finite are recorded as divergent and excluded from
    the statistics.
    """
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 or s > 0.5 for s in sigmas):
        raise ContractViolation("sigmas must lie in [0, 0.5]")
    if draws < 1:
        raise ContractViolation("draws must be >= 1")
    v_val = np.asarray(getattr(v_val, "values", v_val))
    u_val = None if u_val is None else np.asarray(getattr(u_val, "values", u_val))
    clean = model.nll(v_val, u_val)
    rows = []
    for sigma in sigmas:
        rels = []
        divergent = 0
        for draw in range(draws):
            rng = RngStream(seed, ("perturb", f"{sigma:g}", str(draw)))
            probe = model.clone()
            for p in probe.params():
                if p.values.size == 0:
                    continue
                scale = sigma * float(np.abs(p.values).mean())
                if scale > 0.0:
                    p.values += (scale * rng.child(p.name).normal(p.values.shape)).astype(
                        p.values.dtype
                    )
            try:
                nll = probe.nll(v_val, u_val)
            except Exception:
                nll = float("nan")
            if not math.isfinite(nll):
                divergent += 1
                continue
            rels.append((nll - clean) / abs(clean))
        if rels:
            arr = np.asarray(rels)
            rows.append(PerturbationRow(
                sigma=sigma, median=float(np.median(arr)), mean=float(arr.mean()),
                std=float(arr.std()), max=float(arr.max()), n_divergent=divergent,
            ))
        else:
            rows.append(PerturbationRow(sigma=sigma, median=float("nan"),
                                        mean=float("nan"), std=float("nan"),
                                        max=float("nan"), n_divergent=divergent))
    return rows


# ---------------------------------------------------------------------------
# Pairwise preference test
# ---------------------------------------------------------------------------


@dataclass
class PreferenceReport:
    n_pairs: int
    n_agree: int
    p_value: float
    ci_lower_95: float

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs, "n_agree": self.n_agree,
            "p_value": self.p_value, "ci_lower_95": self.ci_lower_95,
        }


def pairwise_preference_test(pred_scores: dict[str, float], gt: GroundTruth) -> PreferenceReport:
    """Exact binomial tail for agreement of pairwise orderings vs chance.

    Ties on either side are excluded from the pair count. The confidence
    bound is the one-sided 95% Clopper-Pearson lower limit.
    """
    gt_map = gt.as_dict()
    ids = sorted(m for m in gt_map if m in pred_scores)
    agree = total = 0
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            dg = gt_map[ids[i]] - gt_map[ids[j]]
            dp = pred_scores[ids[i]] - pred_scores[ids[j]]
            if dg == 0 or dp == 0:
                continue
            total += 1
            agree += int((dg > 0) == (dp > 0))
    if total == 0:
        raise DataError("no decidable pairs")
    p_value = sum(math.comb(total, k) for k in range(agree, total + 1)) * 0.5**total
    ci_lower = float(_beta_dist.ppf(0.05, agree, total - agree + 1)) if agree else 0.0
    return PreferenceReport(n_pairs=total, n_agree=agree, p_value=float(p_value),
                            ci_lower_95=ci_lower)
