"""Assumption probes and the finite-sample generalization bound.

Jacobian probing is finite-difference based: each atomic transform is
linearized at probe points drawn from validation data, dominant singular
directions come from power iteration, and the per-layer deviation norms
feed the bound's spectral term. Permutation layers are orthogonal
reindexings; their deviation is measured in the permuted frame, where they
are exactly the identity, so they contribute zero to sigma_bar while still
counting toward the depth L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataError
from .flow import ActNorm, Coupling, FlowModel, Permutation
from .numcore import RngStream, spectral_norm_probe
from .training import TrainRecord

DEFAULT_C_RAD = 6.0 * math.sqrt(math.pi)  # absorbs the manifold constants


# ---------------------------------------------------------------------------
# Low-level probes
# ---------------------------------------------------------------------------


def jacobian_jvp(transform, point: np.ndarray, direction: np.ndarray,
                 eps: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian-vector product (f(y+eps*u)-f(y-eps*u))/2eps."""
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    out = (transform(point + eps * direction) - transform(point - eps * direction)) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise DataError("non-finite JVP probe")
    return out


def _layer_batch_apply(layer, cond_row: np.ndarray | None):
    """Batched x -> layer(x) map with the conditioning row held fixed."""

    def apply(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if isinstance(layer, Coupling):
            c = None
            if cond_row is not None:
                c = np.broadcast_to(cond_row, (x.shape[0], cond_row.shape[-1]))
            y, _ = layer.forward(x, cond=c)
        else:
            y, _ = layer.forward(x)
        return y

    return apply


def materialize_jacobian(apply_batch, point: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Full Jacobian at a point from batched central differences."""
    d = point.shape[-1]
    eye = np.eye(d)
    plus = apply_batch(point[None, :] + eps * eye)
    minus = apply_batch(point[None, :] - eps * eye)
    return (plus - minus).T / (2.0 * eps)


def layer_inputs(model: FlowModel, v: np.ndarray, u: np.ndarray | None = None):
    """Inputs to each atomic transform for the given data points.

    Returns (inputs, cond) where inputs[i] is the (n, d) input to
    model.layers[i] in standardized space.
    """
    v = np.asarray(v, dtype=np.float64)
    x, _ = model.standardizer.forward(v)
    cond = None
    if model.is_conditional:
        cond = model.conditioner.embed(np.asarray(u, dtype=np.float64))
    inputs = []
    for layer in model.layers:
        inputs.append(x)
        if isinstance(layer, Coupling):
            x, _ = layer.forward(x, cond=cond)
        else:
            x, _ = layer.forward(x)
    return inputs, cond


def probe_deviation_norm(apply_batch, point: np.ndarray, eps: float = 1e-4,
                         iters: int = 30, rng: RngStream | None = None) -> float:
    """Spectral norm of (J - I) at a point, via power iteration."""
    jac = materialize_jacobian(apply_batch, point, eps)
    delta = jac - np.eye(jac.shape[0])
    sigma, _ = spectral_norm_probe(lambda w: delta @ w, delta.shape[0],
                                   iters=iters, rng=rng)
    return sigma


# ---------------------------------------------------------------------------
# Direction alignment (Experiment 1)
# ---------------------------------------------------------------------------


@dataclass
class DirectionStats:
    mean_abs_cos: float
    max_abs_cos: float
    baseline: float  # 1/sqrt(d)
    ratio_to_baseline: float
    stderr: float
    n_pairs: int
    principal_angles_deg: list[list[float]]  # adjacent coupling pairs
    flagged_layers: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean_abs_cos": self.mean_abs_cos,
            "max_abs_cos": self.max_abs_cos,
            "baseline": self.baseline,
            "ratio_to_baseline": self.ratio_to_baseline,
            "stderr": self.stderr,
            "n_pairs": self.n_pairs,
            "principal_angles_deg": self.principal_angles_deg,
            "flagged_layers": self.flagged_layers,
        }


def _dominant_direction(jac: np.ndarray, rng: RngStream, iters: int = 60,
                        rel_tol: float = 1e-3) -> tuple[np.ndarray, bool]:
    """Dominant right singular vector of a materialized Jacobian.

    Returns (unit direction, converged flag); convergence means the
    singular-value estimate moved less than rel_tol over the final sweep.
    """
    sigma_half, _ = spectral_norm_probe(lambda w: jac @ w, jac.shape[0],
                                        iters=max(iters // 2, 1), rng=rng.child("half"))
    sigma, vec = spectral_norm_probe(lambda w: jac @ w, jac.shape[0],
                                     iters=iters, rng=rng.child("half"))
    converged = sigma == 0.0 or abs(sigma - sigma_half) <= rel_tol * max(sigma, 1e-12)
    nrm = np.linalg.norm(vec)
    return (vec / nrm if nrm else vec), converged


def _top_subspace(jac: np.ndarray, k: int, iters: int = 40,
                  rng: RngStream | None = None) -> np.ndarray:
    """Top-k right singular subspace via orthogonalized block power iteration."""
    rng = rng or RngStream(0, ("subspace",))
    v = rng.normal((jac.shape[1], k))
    v, _ = np.linalg.qr(v)
    for _ in range(iters):
        v, _ = np.linalg.qr(jac.T @ (jac @ v))
    return v


def principal_angles_deg(s1: np.ndarray, s2: np.ndarray) -> list[float]:
    """Principal angles (degrees, ascending) between two orthonormal bases."""
    cos = np.linalg.svd(s1.T @ s2, compute_uv=False)
    cos = np.clip(cos, -1.0, 1.0)
    return sorted(float(math.degrees(math.acos(c))) for c in cos)


def alignment_stats(directions: list[np.ndarray], d: int) -> tuple[float, float, float, int]:
    """(mean |cos|, max |cos|, stderr, n_pairs) over all direction pairs."""
    vals = []
    for i in range(len(directions)):
        for j in range(i + 1, len(directions)):
            vals.append(abs(float(directions[i] @ directions[j])))
    arr = np.asarray(vals)
    if arr.size == 0:
        raise ContractViolation("need at least two directions")
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else float("inf")
    return float(arr.mean()), float(arr.max()), se, arr.size


def layer_direction_stats(model: FlowModel, points: np.ndarray,
                          u_points: np.ndarray | None = None,
                          rng: RngStream | None = None,
                          eps: float = 1e-4, subspace_k: int = 3) -> DirectionStats:
    """Alignment of dominant Jacobian directions across coupling layers.

    Dominant vectors are probed per coupling layer at each point; |cos|
    is collected over all layer pairs within a point. The random-direction
    baseline 1/sqrt(d) is reported alongside. Adjacent layers additionally
    get principal angles between their top-3 singular subspaces.
    """
    rng = rng or RngStream(0, ("dirstats",))
    couplings = [(i, l) for i, l in enumerate(model.layers)
                 if isinstance(l, Coupling) and l.n_tr > 0]
    if len(couplings) < 2:
        raise ContractViolation("need at least two active coupling layers")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = model.d
    all_cos: list[float] = []
    max_cos = 0.0
    flagged: set[int] = set()
    angle_acc: list[list[list[float]]] = [[] for _ in range(len(couplings) - 1)]
    for p_idx in range(points.shape[0]):
        v = points[p_idx : p_idx + 1]
        u = None if u_points is None else np.atleast_2d(u_points)[p_idx : p_idx + 1]
        inputs, cond = layer_inputs(model, v, u)
        cond_row = None if cond is None else cond[0]
        jacs = []
        for li, (layer_idx, layer) in enumerate(couplings):
            apply = _layer_batch_apply(layer, cond_row)
            jacs.append(materialize_jacobian(apply, inputs[layer_idx][0], eps))
        dirs = []
        for li, jac in enumerate(jacs):
            vec, converged = _dominant_direction(jac, rng.child("dom", p_idx, li))
            if not converged:
                flagged.add(couplings[li][0])
            dirs.append(vec)
        mean_c, max_c, _, _ = alignment_stats(dirs, d)
        for i in range(len(dirs)):
            for j in range(i + 1, len(dirs)):
                all_cos.append(abs(float(dirs[i] @ dirs[j])))
        max_cos = max(max_cos, max_c)
        for li in range(len(jacs) - 1):
            k = min(subspace_k, d)
            s1 = _top_subspace(jacs[li], k, rng=rng.child("sub", p_idx, li))
            s2 = _top_subspace(jacs[li + 1], k, rng=rng.child("sub", p_idx, li + 1))
            angle_acc[li].append(principal_angles_deg(s1, s2))
    arr = np.asarray(all_cos)
    baseline = 1.0 / math.sqrt(d)
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else float("inf")
    angles = [list(np.mean(np.asarray(a), axis=0)) if a else [] for a in angle_acc]
    return DirectionStats(
        mean_abs_cos=float(arr.mean()),
        max_abs_cos=float(max_cos),
        baseline=baseline,
        ratio_to_baseline=float(arr.mean() / baseline),
        stderr=se,
        n_pairs=int(arr.size),
        principal_angles_deg=angles,
        flagged_layers=sorted(flagged),
    )


# ---------------------------------------------------------------------------
# Displacement and amplification (Experiments 2-3)
# ---------------------------------------------------------------------------


@dataclass
class DisplacementStats:
    mean_displacement: float
    median_displacement: float
    max_displacement: float
    amplification_geo_mean: float
    n_probes: int

    def to_dict(self) -> dict:
        return {
            "mean_displacement": self.mean_displacement,
            "median_displacement": self.median_displacement,
            "max_displacement": self.max_displacement,
            "amplification_geo_mean": self.amplification_geo_mean,
            "n_probes": self.n_probes,
        }


def layer_displacement_and_amplification(
    model: FlowModel, points: np.ndarray, u_points: np.ndarray | None = None,
    rng: RngStream | None = None, eps: float = 0.01, n_directions: int = 3,
) -> DisplacementStats:
    """Per-coupling relative displacement ||f(y)-y||/||y|| plus the
    random-direction amplification factor ||f(y+eps*u)-f(y)||/eps.

    Displacement is a coupling-layer statistic; the amplification geometric
    mean runs over every atomic transform (permutations contribute exactly
    1) so that compounding it over the atomic count stays consistent with
    the end-to-end measurement.
    """
    rng = rng or RngStream(0, ("displacement",))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    displacements: list[float] = []
    log_amps: list[float] = []
    for p_idx in range(points.shape[0]):
        v = points[p_idx : p_idx + 1]
        u = None if u_points is None else np.atleast_2d(u_points)[p_idx : p_idx + 1]
        inputs, cond = layer_inputs(model, v, u)
        cond_row = None if cond is None else cond[0]
        for layer_idx, layer in enumerate(model.layers):
            is_coupling = isinstance(layer, Coupling) and layer.n_tr > 0
            apply = _layer_batch_apply(layer, cond_row)
            y = inputs[layer_idx][0]
            fy = apply(y[None, :])[0]
            if is_coupling:
                ny = float(np.linalg.norm(y))
                if ny > 0:
                    displacements.append(float(np.linalg.norm(fy - y)) / ny)
            if isinstance(layer, Permutation):
                log_amps.extend([0.0] * n_directions)
                continue
            for k in range(n_directions):
                direction = rng.child("dir", p_idx, layer_idx, k).normal(model.d)
                direction /= np.linalg.norm(direction)
                amp = float(np.linalg.norm(apply((y + eps * direction)[None, :])[0] - fy)) / eps
                log_amps.append(math.log(max(amp, 1e-12)))
    if not displacements:
        raise ContractViolation("no usable probe points")
    darr = np.asarray(displacements)
    return DisplacementStats(
        mean_displacement=float(darr.mean()),
        median_displacement=float(np.median(darr)),
        max_displacement=float(darr.max()),
        amplification_geo_mean=float(math.exp(np.mean(log_amps))),
        n_probes=len(displacements),
    )


@dataclass
class AmplificationStats:
    mean: float
    std: float
    min: float
    max: float
    n_probes: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "min": self.min,
                "max": self.max, "n_probes": self.n_probes}


def _atomic_chain_apply(model: FlowModel, cond_row: np.ndarray | None):
    def apply(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for layer in model.layers:
            if isinstance(layer, Coupling):
                c = None
                if cond_row is not None:
                    c = np.broadcast_to(cond_row, (x.shape[0], cond_row.shape[-1]))
                x, _ = layer.forward(x, cond=c)
            else:
                x, _ = layer.forward(x)
        return x

    return apply


def total_amplification(
    model: FlowModel, points: np.ndarray, u_points: np.ndarray | None = None,
    eps: float = 0.01, rng: RngStream | None = None, n_directions: int = 3,
) -> AmplificationStats:
    """End-to-end perturbation amplification through all atomic transforms.

    Measured in standardized space (the standardizer's fixed affine scaling
    is excluded so an identity-initialized flow reports exactly 1.0).
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    rng = rng or RngStream(0, ("amplification",))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    amps = []
    for p_idx in range(points.shape[0]):
        v = points[p_idx : p_idx + 1]
        u = None if u_points is None else np.atleast_2d(u_points)[p_idx : p_idx + 1]
        y, _ = model.standardizer.forward(v)
        cond_row = None
        if model.is_conditional:
            cond_row = model.conditioner.embed(np.asarray(u, dtype=np.float64))[0]
        apply = _atomic_chain_apply(model, cond_row)
        fy = apply(y)[0]
        for k in range(n_directions):
            direction = rng.child("dir", p_idx, k).normal(model.d)
            direction /= np.linalg.norm(direction)
            fyp = apply(y + eps * direction)[0]
            amps.append(float(np.linalg.norm(fyp - fy)) / eps)
    arr = np.asarray(amps)
    return AmplificationStats(mean=float(arr.mean()), std=float(arr.std()),
                              min=float(arr.min()), max=float(arr.max()),
                              n_probes=arr.size)


def compound_amplification(per_layer: float, n_layers: int) -> float:
    """Hypothetical total amplification of n stacked layers at a fixed rate."""
    return float(per_layer**n_layers)


def estimate_sigma_bar(model: FlowModel, points: np.ndarray,
                       u_points: np.ndarray | None = None,
                       rng: RngStream | None = None, eps: float = 1e-4) -> float:
    """Mean over atomic transforms of the probed spectral norm of (J - I).

    Couplings and ActNorm layers are probed at each point; permutations are
    orthogonal reindexings measured in their own frame (deviation zero) but
    still count in the denominator, matching the depth L used by the bound.
    """
    rng = rng or RngStream(0, ("sigmabar",))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    per_layer = np.zeros(model.n_atomic)
    counts = np.zeros(model.n_atomic)
    for p_idx in range(points.shape[0]):
        v = points[p_idx : p_idx + 1]
        u = None if u_points is None else np.atleast_2d(u_points)[p_idx : p_idx + 1]
        inputs, cond = layer_inputs(model, v, u)
        cond_row = None if cond is None else cond[0]
        for layer_idx, layer in enumerate(model.layers):
            if isinstance(layer, Permutation):
                counts[layer_idx] += 1
                continue
            apply = _layer_batch_apply(layer, cond_row)
            sigma = probe_deviation_norm(apply, inputs[layer_idx][0], eps=eps,
                                         rng=rng.child("dev", p_idx, layer_idx))
            per_layer[layer_idx] += sigma
            counts[layer_idx] += 1
    return float(np.mean(per_layer / np.maximum(counts, 1)))


def estimate_d_eff(emb, variance_threshold: float = 0.95) -> int:
    """Smallest k whose top-k PCA eigenvalues explain the threshold variance."""
    if not 0.0 < variance_threshold < 1.0:
        raise ContractViolation("variance threshold must lie in (0, 1)")
    x = np.asarray(getattr(emb, "values", emb), dtype=np.float64)
    cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov)
    eig = np.linalg.eigvalsh(cov)[::-1]
    eig = np.maximum(eig, 1e-12)
    cum = np.cumsum(eig) / eig.sum()
    return int(np.searchsorted(cum, variance_threshold) + 1)


# ---------------------------------------------------------------------------
# Finite-sample bound
# ---------------------------------------------------------------------------


@dataclass
class BoundInputs:
    depth: int  # atomic transform count L
    sigma_bar: float
    d_eff: int
    m: int
    m_val: int
    m_train_bound: float  # loss bound on the training split
    m_val_bound: float
    delta: float = 0.05
    c_rad: float = DEFAULT_C_RAD

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ContractViolation("delta must lie in (0, 1)")
        for name in ("depth", "d_eff", "m", "m_val"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.sigma_bar < 0 or self.m_train_bound < 0 or self.m_val_bound < 0:
            raise ContractViolation("sigma_bar and loss bounds must be nonnegative")


@dataclass
class BoundTerms:
    rademacher: float
    hoeffding_val: float
    hoeffding_train: float

    @property
    def total(self) -> float:
        return self.rademacher + self.hoeffding_val + self.hoeffding_train

    def to_dict(self) -> dict:
        return {
            "rademacher": self.rademacher,
            "hoeffding_val": self.hoeffding_val,
            "hoeffding_train": self.hoeffding_train,
            "total": self.total,
        }


def generalization_bound(b: BoundInputs) -> BoundTerms:
    """Evaluate the three bound terms for one flow.

    rademacher    = 2 * c_rad * L * sigma_bar * sqrt(d_eff) / sqrt(m)
    hoeffding_val = M_val * sqrt(log(2/delta) / (2 m_val))
    hoeffding_train = 3 * M_train * sqrt(log(2/delta) / (2 m))
    """
    log_term = math.log(2.0 / b.delta)
    return BoundTerms(
        rademacher=2.0 * b.c_rad * b.depth * b.sigma_bar * math.sqrt(b.d_eff) / math.sqrt(b.m),
        hoeffding_val=b.m_val_bound * math.sqrt(log_term / (2.0 * b.m_val)),
        hoeffding_train=3.0 * b.m_train_bound * math.sqrt(log_term / (2.0 * b.m)),
    )


@dataclass
class BoundReport:
    """All bound terms plus the empirical gaps, for one (marginal,
    conditional) flow pair; the totals bound the IS estimation error."""

    marginal_terms: BoundTerms
    conditional_terms: BoundTerms | None
    delta_theo: float
    delta_emp: float
    ratio: float
    ratio_flagged: bool
    rademacher_share_pct: float

    def to_dict(self) -> dict:
        return {
            "marginal_terms": self.marginal_terms.to_dict(),
            "conditional_terms": (
                None if self.conditional_terms is None else self.conditional_terms.to_dict()
            ),
            "delta_theo": self.delta_theo,
            "delta_emp": self.delta_emp,
            "ratio": None if math.isinf(self.ratio) else self.ratio,
            "ratio_flagged": self.ratio_flagged,
            "rademacher_share_pct": self.rademacher_share_pct,
        }


def bound_report(
    marginal_record: TrainRecord,
    marginal_inputs: BoundInputs,
    conditional_record: TrainRecord | None = None,
    conditional_inputs: BoundInputs | None = None,
) -> BoundReport:
    """Combine per-flow bounds with the observed train/val NLL gaps.

    delta_emp sums |train - val| over the flows; delta_theo sums the bound
    totals; a zero empirical gap yields an infinite ratio, flagged.
    """
    if (conditional_record is None) != (conditional_inputs is None):
        raise ContractViolation("conditional record and inputs must come together")
    marg_terms = generalization_bound(marginal_inputs)
    cond_terms = None
    delta_emp = marginal_record.gap
    delta_theo = marg_terms.total
    rad = marg_terms.rademacher
    if conditional_record is not None:
        cond_terms = generalization_bound(conditional_inputs)
        delta_emp += conditional_record.gap
        delta_theo += cond_terms.total
        rad += cond_terms.rademacher
    flagged = delta_emp == 0.0
    ratio = float("inf") if flagged else delta_theo / delta_emp
    share = 100.0 * rad / delta_theo if delta_theo > 0 else 0.0
    return BoundReport(
        marginal_terms=marg_terms,
        conditional_terms=cond_terms,
        delta_theo=delta_theo,
        delta_emp=delta_emp,
        ratio=ratio,
        ratio_flagged=flagged,
        rademacher_share_pct=share,
    )


def render_bound_table(reports: dict[str, BoundReport]) -> str:
    """Plain-text table of bound ratios and Rademacher shares per pair."""
    lines = [f"{'pair':<28} {'bound ratio':>12} {'rademacher %':>14}"]
    ratios, shares = [], []
    for name, rep in sorted(reports.items()):
        ratio = "inf" if math.isinf(rep.ratio) else f"{rep.ratio:.1f}x"
        lines.append(f"{name:<28} {ratio:>12} {rep.rademacher_share_pct:>13.1f}%")
        if not math.isinf(rep.ratio):
            ratios.append(rep.ratio)
        shares.append(rep.rademacher_share_pct)
    if ratios:
        lines.append(
            f"{'average':<28} {np.mean(ratios):>11.1f}x {np.mean(shares):>13.1f}%"
        )
    return "\n".join(lines) + "\n"
