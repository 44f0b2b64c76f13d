"""Minimal differentiable-compute kernel.

Parameter tensors with explicit gradients, small MLPs with hand-written
backward passes, AdamW with gradient accumulation, EMA shadowing, a
counter-based splittable RNG, and a spectral-norm probe. Everything above
this module (flows, training, diagnostics) is built from these pieces;
there is no general-purpose autodiff.

Values default to float32 with 64-bit accumulators for reductions.
Verification tests that need finite-difference accuracy switch to float64
via `use_dtype`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, DivergenceError

_ACTIVATIONS = ("tanh", "relu", "identity")

_REAL = {"dtype": np.float32}


def real_dtype() -> type:
    """The dtype used for newly created parameter tensors."""
    return _REAL["dtype"]


class use_dtype:
    """Context manager switching the construction dtype (e.g. to float64)."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        self._prev = _REAL["dtype"]
        _REAL["dtype"] = self.dtype
        return self

    def __exit__(self, *exc):
        _REAL["dtype"] = self._prev
        return False


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------


class RngStream:
    """Counter-based, splittable random stream (Philox backend).

    The same (seed, path) pair yields a bit-identical draw sequence across
    runs and platforms. `child` derives an independent stream whose output
    does not depend on how many draws the parent has made, so per-job
    streams are order-invariant.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        material = f"{self.seed}|" + "/".join(self.path)
        key = hashlib.sha256(material.encode("utf-8")).digest()[:16]
        self._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(key, "little"))
        )

    def child(self, *tags) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(str(t) for t in tags))

    def normal(self, shape=None, dtype=None) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        return out if dtype is None else np.asarray(out, dtype=dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0, dtype=None):
        out = self._gen.uniform(low, high, shape)
        return out if dtype is None else np.asarray(out, dtype=dtype)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def seeded_rng(seed: int) -> RngStream:
    """Deterministic stream supporting uniform, normal, and permutation draws."""
    return RngStream(seed)


def derive_seed(seed: int, *tags) -> int:
    """Stable 63-bit seed derived from a base seed and string tags.

    Used to give per-pair training jobs independent, order-invariant seeds.
    """
    material = f"{int(seed)}:" + ":".join(str(t) for t in tags)
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamTensor:
    """A named value array with a gradient buffer of the same shape."""

    name: str
    values: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise ContractViolation(
                f"{self.name}: grad shape {self.grad.shape} != values shape {self.values.shape}"
            )

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


# ---------------------------------------------------------------------------
# MLP with manual backward
# ---------------------------------------------------------------------------


class Mlp:
    """Fully connected network with hand-written forward/backward.

    Layer dims chain as given in `dims`; hidden layers use `activation`,
    the final layer uses `final_activation`. `forward` caches what the
    matching `backward` needs; parameter gradients are *accumulated* (summed
    over the batch) into each ParamTensor's grad buffer.

    The first hidden pre-activation optionally receives an additive
    injection (used by conditional coupling layers); `backward` then also
    returns the gradient w.r.t. that injection.
    """

    def __init__(
        self,
        dims: Sequence[int],
        rng: RngStream,
        name: str = "mlp",
        activation: str = "tanh",
        final_activation: str = "identity",
        zero_init_final: bool = False,
    ):
        if len(dims) < 2:
            raise ContractViolation("Mlp needs at least input and output dims")
        if activation not in _ACTIVATIONS or final_activation not in _ACTIVATIONS:
            raise ContractViolation(f"activation must be one of {_ACTIVATIONS}")
        self.name = name
        self.dims = [int(d) for d in dims]
        self.input_dim = self.dims[0]
        self.output_dim = self.dims[-1]
        dtype = real_dtype()
        self.layers: list[tuple[ParamTensor, ParamTensor, str]] = []
        n_layers = len(self.dims) - 1
        for i in range(n_layers):
            fan_in, fan_out = self.dims[i], self.dims[i + 1]
            last = i == n_layers - 1
            if last and zero_init_final:
                w = np.zeros((fan_out, fan_in), dtype=dtype)
                b = np.zeros(fan_out, dtype=dtype)
            else:
                scale = 1.0 / math.sqrt(max(fan_in, 1))
                w = rng.child("w", i).normal((fan_out, fan_in)).astype(dtype) * dtype(scale)
                # random hidden biases keep activations (and their grads)
                # alive even when the input half is empty
                b = rng.child("b", i).normal(fan_out).astype(dtype) * dtype(0.5)
            act = final_activation if last else activation
            self.layers.append(
                (
                    ParamTensor(f"{name}.w{i}", w),
                    ParamTensor(f"{name}.b{i}", b),
                    act,
                )
            )
        self._cache = None

    def params(self) -> list[ParamTensor]:
        out = []
        for w, b, _ in self.layers:
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray, inject: np.ndarray | None = None) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[1] != self.input_dim:
            raise ContractViolation(
                f"{self.name}: input dim {x.shape[1]} != {self.input_dim}"
            )
        caches = []
        h = x
        for i, (w, b, act) in enumerate(self.layers):
            pre = h @ w.values.T + b.values
            if i == 0 and inject is not None:
                pre = pre + inject
            if act == "tanh":
                out = np.tanh(pre)
                caches.append((h, out, act))
            elif act == "relu":
                out = np.maximum(pre, 0.0)
                caches.append((h, pre, act))
            else:
                out = pre
                caches.append((h, None, act))
            if not np.all(np.isfinite(out)):
                raise DivergenceError(f"{self.name}: non-finite activation at layer {i}")
            h = out
        self._cache = (caches, inject is not None)
        return h

    def backward(self, g_out: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        if self._cache is None:
            raise ContractViolation(f"{self.name}: backward before forward")
        caches, had_inject = self._cache
        g = np.atleast_2d(g_out)
        if g.shape[1] != self.output_dim:
            raise ContractViolation(
                f"{self.name}: upstream grad dim {g.shape[1]} != {self.output_dim}"
            )
        g_inject = None
        for i in range(len(self.layers) - 1, -1, -1):
            w, b, act = self.layers[i]
            h_in, stash, _ = caches[i]
            if act == "tanh":
                g = g * (1.0 - stash * stash)
            elif act == "relu":
                g = g * (stash > 0)
            if i == 0 and had_inject:
                g_inject = g
            w.grad += g.T @ h_in
            b.grad += g.sum(axis=0)
            g = g @ w.values
        return g, g_inject


def mlp_forward_backward(
    net: Mlp, x: np.ndarray, upstream_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Single-vector forward plus backward; returns (output, input gradient)."""
    out = net.forward(np.asarray(x)[None, :])
    g_in, _ = net.backward(np.asarray(upstream_grad)[None, :])
    return out[0], g_in[0]


# ---------------------------------------------------------------------------
# AdamW with gradient accumulation
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    Gradient accumulation is literal: callers accumulate raw grad sums over
    `accum_steps` micro-batches, then `step()` divides by the accumulation
    count before updating. Non-finite grads skip the step (flagged) and the
    grads are cleared either way.
    """

    def __init__(
        self,
        params: Sequence[ParamTensor],
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        accum_steps: int = 1,
    ):
        if accum_steps < 1:
            raise ContractViolation("accum_steps must be >= 1")
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.accum_steps = int(accum_steps)
        self.step_count = 0
        self.skipped_steps = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, accumulated: int | None = None) -> bool:
        """Apply one update; returns False if skipped on non-finite grads."""
        n_accum = self.accum_steps if accumulated is None else int(accumulated)
        grads = [p.grad / n_accum for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped_steps += 1
            self.zero_grad()
            return False
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p.values -= p.values.dtype.type(self.lr * self.weight_decay) * p.values
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.zero_grad()
        return True


def adamw_step(state: AdamW, params: Sequence[ParamTensor] | None = None) -> bool:
    """Functional alias for AdamW.step over the optimizer's parameter list."""
    if params is not None and list(params) != state.params:
        raise ContractViolation("params do not match the optimizer state")
    return state.step()


# ---------------------------------------------------------------------------
# EMA shadowing
# ---------------------------------------------------------------------------


class EmaState:
    """Exponential moving average of parameter values (shadow weights)."""

    def __init__(self, params: Sequence[ParamTensor], decay: float):
        if not 0.0 < decay < 1.0:
            raise ContractViolation("EMA decay must lie in (0, 1)")
        self.decay = float(decay)
        self.params = list(params)
        self.shadow = [p.values.copy() for p in self.params]

    def update(self, params: Sequence[ParamTensor] | None = None) -> None:
        ps = self.params if params is None else list(params)
        d = self.decay
        for s, p in zip(self.shadow, ps):
            s *= d
            s += (1.0 - d) * p.values

    def snapshot(self) -> list[np.ndarray]:
        return [s.copy() for s in self.shadow]

    class _Swapped:
        def __init__(self, ema, values):
            self.ema, self.values = ema, values

        def __enter__(self):
            self.backup = [p.values.copy() for p in self.ema.params]
            for p, s in zip(self.ema.params, self.values):
                p.values[...] = s
            return self

        def __exit__(self, *exc):
            for p, b in zip(self.ema.params, self.backup):
                p.values[...] = b
            return False

    def applied(self, values: list[np.ndarray] | None = None) -> "_Swapped":
        """Context manager that temporarily loads shadow (or given) weights."""
        return EmaState._Swapped(self, self.shadow if values is None else values)


def ema_update(ema: EmaState, params: Sequence[ParamTensor]) -> EmaState:
    """Functional alias: shadow <- decay*shadow + (1-decay)*params."""
    ema.update(params)
    return ema


# ---------------------------------------------------------------------------
# Spectral probing
# ---------------------------------------------------------------------------


def spectral_norm_probe(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iters: int = 50,
    rng: RngStream | None = None,
    apply_batch: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[float, np.ndarray]:
    """Power-iteration estimate of the operator 2-norm of a linear(ized) map.

    The map is materialized by applying it to the canonical basis (this also
    linearizes a finite-difference JVP callable), then power iteration runs
    on M^T M so the estimate converges to the largest singular value; the
    returned unit direction is the dominant right singular vector. A zero
    map returns (0.0, zero vector).
    """
    if iters < 1:
        raise ContractViolation("iters must be >= 1")
    rng = rng or RngStream(0, ("spectral",))
    eye = np.eye(dim)
    if apply_batch is not None:
        mat = np.asarray(apply_batch(eye), dtype=np.float64).T
    else:
        mat = np.stack([np.asarray(apply(eye[i]), dtype=np.float64) for i in range(dim)], axis=1)
    if not np.any(mat):
        return 0.0, np.zeros(dim)
    v = rng.normal(dim)
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = mat @ v
        v_next = mat.T @ w
        nrm = np.linalg.norm(v_next)
        if nrm == 0.0:
            break
        v = v_next / nrm
    sigma = float(np.linalg.norm(mat @ v))
    return sigma, v
