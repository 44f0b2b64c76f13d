"""Uniformity baseline, Gaussian information oracles, synthetic generators.

The generators make every end-to-end check self-contained: correlated
Gaussian pairs have closed-form mutual information, and the synthetic pool
is built as noisy linear views of one shared latent draw, so its
ground-truth quality ordering (descending noise) is known by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingSet, corpus_hash_for
from .errors import ContractViolation, DataError
from .numcore import RngStream


def uniformity_score(emb, t: float = 2.0, block: int = 1024) -> float:
    """log mean pairwise Gaussian potential of L2-normalized rows.

    Lower values mean a more uniform spread on the hypersphere. For use as
    a ranking score, negate (higher = more uniform).
    """
    if t <= 0:
        raise ContractViolation("t must be positive")
    x = np.asarray(getattr(emb, "values", emb), dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise DataError("uniformity needs at least two rows")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms == 0, 1.0, norms)
    sq = np.sum(x * x, axis=1)
    total = 0.0
    for start in range(0, n, block):
        xb = x[start : start + block]
        d2 = sq[start : start + block, None] + sq[None, :] - 2.0 * (xb @ x.T)
        total += float(np.exp(-t * np.maximum(d2, 0.0)).sum())
    total -= n  # drop the diagonal (exp(0) per row)
    return math.log(total / (n * (n - 1)))


def gaussian_mi_closed_form(u: np.ndarray, v: np.ndarray, ridge: float = 1e-8):
    """Gaussian MI estimate 0.5*log(det S_u * det S_v / det S_joint), nats.

    Returns (mi, flagged); a singular joint covariance is ridge-regularized
    and flagged rather than raised.
    """
    u = np.asarray(getattr(u, "values", u), dtype=np.float64)
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    if u.shape[0] != v.shape[0]:
        raise DataError("U and V row counts differ")
    joint = np.concatenate([u, v], axis=1)
    cov = np.cov(joint, rowvar=False)
    cov = np.atleast_2d(cov)
    du = u.shape[1]
    flagged = False
    sign, logdet_joint = np.linalg.slogdet(cov)
    if sign <= 0 or not np.isfinite(logdet_joint):
        flagged = True
        cov = cov + ridge * np.eye(cov.shape[0])
        _, logdet_joint = np.linalg.slogdet(cov)
    _, logdet_u = np.linalg.slogdet(cov[:du, :du])
    _, logdet_v = np.linalg.slogdet(cov[du:, du:])
    mi = 0.5 * (logdet_u + logdet_v - logdet_joint)
    return float(mi), flagged


def gen_correlated_gaussians(
    n: int, d_u: int, d_v: int, rho: float, rng: RngStream
) -> tuple[np.ndarray, np.ndarray, float]:
    """Jointly Gaussian (U, V) with per-coordinate cross-correlation rho.

    true MI = -(min(d_u, d_v)/2) * ln(1 - rho^2) nats.
    """
    if not -1.0 < rho < 1.0:
        raise ContractViolation("|rho| must be < 1")
    u = rng.child("u").normal((n, d_u))
    eps = rng.child("eps").normal((n, d_v))
    v = eps.copy()
    shared = min(d_u, d_v)
    v[:, :shared] = rho * u[:, :shared] + math.sqrt(1.0 - rho * rho) * eps[:, :shared]
    true_mi = -(shared / 2.0) * math.log(1.0 - rho * rho)
    return u.astype(np.float32), v.astype(np.float32), true_mi


@dataclass
class SyntheticPoolSpec:
    latent_dim: int
    output_dims: list[int]
    noise_levels: list[float]
    n: int
    seed: int = 0
    corpus_tag: str = "synthetic-pool"

    def __post_init__(self):
        if len(self.output_dims) != len(self.noise_levels):
            raise ContractViolation("one noise level per model is required")
        if len(self.output_dims) < 2:
            raise ContractViolation("pool needs at least two models")


def gen_synthetic_pool(spec: SyntheticPoolSpec) -> tuple[list[EmbeddingSet], dict[str, float]]:
    """Pool of noisy linear views of one shared latent draw.

    Model i is latent @ M_i^T + noise_i; its ground-truth quality score is
    -noise_i, so the true ranking follows ascending noise. Equal noise
    levels leave the ground truth tied (callers should skip correlation
    tests on such pools).
    """
    rng = RngStream(spec.seed, ("synth-pool",))
    latent = rng.child("latent").normal((spec.n, spec.latent_dim))
    corpus_hash = corpus_hash_for(f"{spec.corpus_tag}:{spec.seed}", spec.n)
    pool = []
    gt: dict[str, float] = {}
    for i, (d_out, noise) in enumerate(zip(spec.output_dims, spec.noise_levels)):
        mix = rng.child("mix", i).normal((d_out, spec.latent_dim)) / math.sqrt(spec.latent_dim)
        x = latent @ mix.T + noise * rng.child("noise", i).normal((spec.n, d_out))
        model_id = f"model_{i:02d}"
        pool.append(EmbeddingSet(model_id=model_id, values=x.astype(np.float32),
                                 corpus_hash=corpus_hash))
        gt[model_id] = -float(noise)
    return pool, gt
