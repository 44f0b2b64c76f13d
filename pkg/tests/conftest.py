"""Shared fixtures: trained flows are expensive, so the correlated-Gaussian
pair and the synthetic pool run are built once per session and reused by
the sufficiency, analysis, diagnostics, and acceptance suites."""

import math

import numpy as np
import pytest

from flowsuff.baselines import SyntheticPoolSpec, gen_correlated_gaussians, gen_synthetic_pool
from flowsuff.flow import FlowConfig
from flowsuff.numcore import RngStream
from flowsuff.sufficiency import PoolSettings, pairwise_is_matrix
from flowsuff.training import TrainConfig, split_dataset, train_conditional, train_marginal

# shared desk-scale recipe: large batches keep numpy efficient, EMA horizon
# matches the step counts, cosine decay from a moderate lr; the conditional
# stage needs patience that outlasts its warm-start plateau
MARGINAL_FAST = dict(lr=1e-2, batch_size=512, accum_steps=1, max_epochs=60,
                     patience=15, ema_decay=0.99)
CONDITIONAL_FAST = dict(lr=1e-2, batch_size=256, accum_steps=1, max_epochs=200,
                        patience=60, ema_decay=0.98)
FLOW_SMALL = FlowConfig(hidden_width=48)


@pytest.fixture(scope="session")
def gauss_pair_09():
    """Trained (marginal, conditional) on a rho=0.9 1-D Gaussian pair."""
    n, rho = 6000, 0.9
    u, v, true_mi = gen_correlated_gaussians(n, 1, 1, rho, RngStream(11, ("fixture",)))
    split = split_dataset(n, 0.9, seed=5)
    marg, mrec = train_marginal(v, split, TrainConfig.marginal(seed=5, **MARGINAL_FAST),
                                FLOW_SMALL)
    cond, crec = train_conditional(u, v, marg, split,
                                   TrainConfig.conditional(seed=5, **CONDITIONAL_FAST))
    return {
        "u": u, "v": v, "rho": rho, "true_mi": true_mi, "split": split,
        "marginal": marg, "marginal_record": mrec,
        "conditional": cond, "conditional_record": crec,
        "u_val": u[split.val_idx], "v_val": v[split.val_idx],
    }


@pytest.fixture(scope="session")
def pool_run():
    """Pairwise result over a 4-model noise-ladder pool (known ranking)."""
    spec = SyntheticPoolSpec(latent_dim=3, output_dims=[5, 5, 5, 5],
                             noise_levels=[0.05, 0.35, 1.2, 4.0], n=2200, seed=21)
    pool, gt = gen_synthetic_pool(spec)
    settings = PoolSettings(
        seed=21, val_ratio=0.9, flow=FLOW_SMALL,
        marginal=TrainConfig.marginal(lr=1e-2, batch_size=512, accum_steps=1,
                                      max_epochs=35, patience=12, ema_decay=0.98),
        conditional=TrainConfig.conditional(lr=1e-2, batch_size=256, accum_steps=1,
                                            max_epochs=120, patience=40, ema_decay=0.98),
    )
    result = pairwise_is_matrix(pool, settings)
    return {"pool": pool, "gt": gt, "result": result}


@pytest.fixture(scope="session")
def trained_2d():
    """Marginal flow trained on a correlated 2-D Gaussian (cov off-diag 0.9)."""
    n = 4000
    rng = RngStream(7, ("fixture2d",))
    z = rng.child("z").normal((n, 2))
    chol = np.linalg.cholesky(np.array([[1.0, 0.9], [0.9, 1.0]]))
    v = (z @ chol.T).astype(np.float32)
    split = split_dataset(n, 0.9, seed=7)
    model, record = train_marginal(v, split, TrainConfig.marginal(seed=7, **MARGINAL_FAST),
                                   FLOW_SMALL)
    return {"v": v, "split": split, "model": model, "record": record,
            "true_entropy": math.log(2 * math.pi * math.e) + 0.5 * math.log(1 - 0.81)}
