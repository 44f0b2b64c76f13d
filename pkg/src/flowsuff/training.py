"""Two-stage flow training: marginal fit, then conditional warm start.

Stage defaults follow the shared optimization recipe (AdamW, weight decay
1e-3, EMA decay 0.999; marginal lr 2e-2 / batch 256 / accumulation 2 /
at most 1000 epochs; conditional lr 1e-1 / batch 64 / accumulation 4 /
at most 500 epochs), all overridable. The reported model is the EMA
weights at the best validation epoch; the epoch-0 (untrained) model is a
valid candidate, so a conditional run can never end worse than its warm
start.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, DataError, DensityError, DivergenceError, TrainingFailure
from .flow import FlowConfig, FlowModel, build_flow, clone_to_conditional
from .numcore import AdamW, EmaState, RngStream

_STAGE_DEFAULTS = {
    "marginal": dict(lr=2e-2, batch_size=256, accum_steps=2, max_epochs=1000),
    "conditional": dict(lr=1e-1, batch_size=64, accum_steps=4, max_epochs=500),
}


@dataclass
class TrainConfig:
    stage: str = "marginal"
    lr: float | None = None
    weight_decay: float = 1e-3
    ema_decay: float = 0.999
    batch_size: int | None = None
    accum_steps: int | None = None
    max_epochs: int | None = None
    patience: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # cosine decay from lr down to lr * lr_floor_frac over max_epochs
    lr_floor_frac: float = 1e-4

    def __post_init__(self):
        if self.stage not in _STAGE_DEFAULTS:
            raise ContractViolation(f"unknown stage {self.stage!r}")

    def _default(self, key):
        return _STAGE_DEFAULTS[self.stage][key]

    @property
    def resolved_lr(self) -> float:
        return self.lr if self.lr is not None else self._default("lr")

    @property
    def resolved_batch_size(self) -> int:
        return self.batch_size if self.batch_size is not None else self._default("batch_size")

    @property
    def resolved_accum_steps(self) -> int:
        return self.accum_steps if self.accum_steps is not None else self._default("accum_steps")

    @property
    def resolved_max_epochs(self) -> int:
        return self.max_epochs if self.max_epochs is not None else self._default("max_epochs")

    @classmethod
    def marginal(cls, **overrides) -> "TrainConfig":
        return cls(stage="marginal", **overrides)

    @classmethod
    def conditional(cls, **overrides) -> "TrainConfig":
        return cls(stage="conditional", **overrides)


@dataclass
class TrainRecord:
    stage: str
    train_nll: list[float]
    val_nll: list[float]
    best_epoch: int
    l_train: float
    l_val: float
    m_train: float
    m_val: float
    n_epochs_run: int
    skipped_steps: int
    wall_time_s: float

    @property
    def gap(self) -> float:
        return abs(self.l_train - self.l_val)

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "stage": self.stage,
            "train_nll": [float(v) for v in self.train_nll],
            "val_nll": [float(v) for v in self.val_nll],
            "best_epoch": int(self.best_epoch),
            "l_train": float(self.l_train),
            "l_val": float(self.l_val),
            "m_train": float(self.m_train),
            "m_val": float(self.m_val),
            "n_epochs_run": int(self.n_epochs_run),
            "skipped_steps": int(self.skipped_steps),
        }
        if include_timing:
            out["wall_time_s"] = float(self.wall_time_s)
        return out


@dataclass
class SplitSpec:
    train_idx: np.ndarray
    val_idx: np.ndarray
    ratio: float
    seed: int

    @property
    def m(self) -> int:
        return len(self.train_idx)

    @property
    def m_val(self) -> int:
        return len(self.val_idx)


def split_dataset(emb, ratio: float = 0.9, seed: int = 0) -> SplitSpec:
    """Deterministic shuffled split; same seed yields identical index lists."""
    n = int(getattr(emb, "n", emb))
    if not 0.0 < ratio < 1.0:
        raise ContractViolation("ratio must lie in (0, 1)")
    n_train = int(math.floor(n * ratio))
    if n_train < 1 or n - n_train < 1:
        raise DataError(f"n={n} too small for a {ratio:.2f} split with both sides nonempty")
    perm = RngStream(seed, ("split",)).permutation(n)
    return SplitSpec(
        train_idx=np.sort(perm[:n_train]),
        val_idx=np.sort(perm[n_train:]),
        ratio=ratio,
        seed=seed,
    )


def _as_matrix(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x))


def _cosine_lr(base: float, epoch: int, max_epochs: int, floor_frac: float) -> float:
    lo = base * floor_frac
    t = min(epoch, max_epochs) / max(max_epochs, 1)
    return lo + 0.5 * (base - lo) * (1.0 + math.cos(math.pi * t))


def _run_training(model: FlowModel, cfg: TrainConfig,
                  x_train, x_val, u_train=None, u_val=None) -> TrainRecord:
    t0 = time.perf_counter()
    dtype = model.dtype
    x_train = np.ascontiguousarray(x_train, dtype=dtype)
    x_val = np.ascontiguousarray(x_val, dtype=dtype)
    if u_train is not None:
        u_train = np.ascontiguousarray(u_train, dtype=dtype)
        u_val = np.ascontiguousarray(u_val, dtype=dtype)

    n = x_train.shape[0]
    batch = min(cfg.resolved_batch_size, n)
    accum = cfg.resolved_accum_steps
    max_epochs = cfg.resolved_max_epochs
    rng = RngStream(cfg.seed, ("train", cfg.stage))

    model.init_actnorm(x_train[: min(n, 4096)],
                       None if u_train is None else u_train[: min(n, 4096)])
    params = model.params()
    opt = AdamW(params, lr=cfg.resolved_lr, weight_decay=cfg.weight_decay,
                beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, accum_steps=accum)
    ema = EmaState(params, cfg.ema_decay)

    def eval_nll(x, u):
        lp = model.log_prob(x, u)
        return float(-lp.mean())

    val0 = eval_nll(x_val, u_val)
    train0 = eval_nll(x_train, u_train)
    if not math.isfinite(val0):
        raise TrainingFailure("initial validation NLL is non-finite",
                              {"stage": cfg.stage, "val_nll": val0})
    train_curve = [train0]
    val_curve = [val0]
    best_epoch, best_val = 0, val0
    best_weights = ema.snapshot()
    diverge_level = 10.0 * max(abs(val0), 1.0)
    diverge_streak = 0
    pending = 0

    epoch = 0
    for epoch in range(1, max_epochs + 1):
        opt.lr = _cosine_lr(cfg.resolved_lr, epoch, max_epochs, cfg.lr_floor_frac)
        order = rng.permutation(n)
        epoch_losses = []
        try:
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                loss = model.loss_backward(
                    x_train[idx], None if u_train is None else u_train[idx]
                )
                epoch_losses.append(loss)
                pending += 1
                if pending == accum:
                    if opt.step():
                        ema.update()
                    pending = 0
        except (DivergenceError, DensityError) as e:
            raise TrainingFailure(
                f"forward pass diverged during epoch {epoch}: {e}",
                {"stage": cfg.stage, "epoch": epoch, "val_nll_tail": val_curve[-5:]},
            ) from e
        train_curve.append(float(np.mean(epoch_losses)))
        with ema.applied():
            val = eval_nll(x_val, u_val)
        val_curve.append(val)
        if math.isnan(val):
            raise TrainingFailure(
                "validation NLL became NaN",
                {"stage": cfg.stage, "epoch": epoch, "val_nll_tail": val_curve[-5:]},
            )
        if val > diverge_level:
            diverge_streak += 1
            if diverge_streak >= 20:
                raise TrainingFailure(
                    "validation NLL exceeded 10x its initial value for 20 epochs",
                    {"stage": cfg.stage, "epoch": epoch, "val_nll_tail": val_curve[-5:]},
                )
        else:
            diverge_streak = 0
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_weights = ema.snapshot()
        if epoch - best_epoch >= cfg.patience:
            break

    for p, w in zip(params, best_weights):
        p.values[...] = w
    model._clear_caches()

    lp_train = model.log_prob(x_train, u_train)
    lp_val = model.log_prob(x_val, u_val)
    return TrainRecord(
        stage=cfg.stage,
        train_nll=train_curve,
        val_nll=val_curve,
        best_epoch=best_epoch,
        l_train=float(-lp_train.mean()),
        l_val=float(-lp_val.mean()),
        m_train=float(np.max(np.abs(lp_train))),
        m_val=float(np.max(np.abs(lp_val))),
        n_epochs_run=epoch,
        skipped_steps=opt.skipped_steps,
        wall_time_s=time.perf_counter() - t0,
    )


def train_marginal(V, split: SplitSpec, config: TrainConfig,
                   flow_config: FlowConfig | None = None) -> tuple[FlowModel, TrainRecord]:
    """Fit a marginal flow on the training split of the target embeddings."""
    if config.stage != "marginal":
        raise ContractViolation("train_marginal requires a marginal-stage config")
    v = _as_matrix(V)
    x_train, x_val = v[split.train_idx], v[split.val_idx]
    model = build_flow(v.shape[1], flow_config, rng=RngStream(config.seed, ("build",)))
    model.standardizer.fit(x_train.astype(np.float64))
    record = _run_training(model, config, x_train, x_val)
    return model, record


def train_conditional(U, V, marginal: FlowModel, split: SplitSpec,
                      config: TrainConfig, r: int | None = None) -> tuple[FlowModel, TrainRecord]:
    """Clone the marginal flow, attach the conditioning branch, and train."""
    if config.stage != "conditional":
        raise ContractViolation("train_conditional requires a conditional-stage config")
    u, v = _as_matrix(U), _as_matrix(V)
    if u.shape[0] != v.shape[0]:
        raise DataError(f"U has {u.shape[0]} rows but V has {v.shape[0]}; corpora misaligned")
    model = clone_to_conditional(marginal, d_u=u.shape[1], r=r,
                                 rng=RngStream(config.seed, ("clone",)))
    record = _run_training(
        model, config,
        v[split.train_idx], v[split.val_idx],
        u[split.train_idx], u[split.val_idx],
    )
    return model, record
