"""Composite invertible transform with exact log-density.

Blocks are (rational-quadratic spline coupling, ActNorm, fixed random
permutation); the base density is standard normal, and a per-dimension
affine standardizer fitted on training data is counted as one extra affine
bijection in the log-determinant. A conditional model carries a shared
low-rank projection of the source embedding whose per-coupling output
projection starts at zero, so the conditional density initially equals the
marginal one exactly.

All forward passes cache what the matching hand-written backward needs;
log_prob and inverse evaluate in float64 regardless of parameter dtype.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractViolation, DensityError, InvertibilityError
from .numcore import Mlp, ParamTensor, RngStream

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FlowConfig:
    n_blocks: int = 6
    n_bins: int = 8
    tail_bound: float = 3.0
    hidden_width: int | None = None  # None -> max(64, d)
    n_hidden: int = 2
    min_bin_frac: float = 1e-3
    min_derivative: float = 1e-3
    cond_rank: int = 64

    def width_for(self, d: int) -> int:
        return self.hidden_width if self.hidden_width is not None else max(64, d)


# ---------------------------------------------------------------------------
# Rational-quadratic spline kernel
# ---------------------------------------------------------------------------


def _gather(a: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def _scatter(shape, idx, val) -> np.ndarray:
    out = np.zeros(shape, dtype=val.dtype)
    np.put_along_axis(out, idx[..., None], val[..., None], axis=-1)
    return out


def _knots(lengths: np.ndarray, tail_bound: float) -> np.ndarray:
    """Knot positions in [-B, B] from bin lengths summing to 2B."""
    left = np.full(lengths.shape[:-1] + (1,), -tail_bound, dtype=lengths.dtype)
    return np.concatenate([left, -tail_bound + np.cumsum(lengths, axis=-1)], axis=-1)


def _bin_index(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    # count of interior knots <= x; clips naturally to [0, K-1]
    return np.sum(x[..., None] >= knots[..., 1:-1], axis=-1)


def rqs_forward(
    x: np.ndarray,
    widths: np.ndarray,
    heights: np.ndarray,
    derivs_interior: np.ndarray,
    tail_bound: float,
    want_cache: bool = False,
):
    """Elementwise monotone RQS transform with log-derivative.

    x: (..., ), widths/heights: (..., K) summing to 2*tail_bound,
    derivs_interior: (..., K-1) positive; boundary derivatives are pinned
    to 1 so the transform continues as the identity outside [-B, B].
    Returns (y, logdet) of x's shape, plus a cache when requested.
    """
    B = float(tail_bound)
    ones = np.ones(derivs_interior.shape[:-1] + (1,), dtype=derivs_interior.dtype)
    derivs = np.concatenate([ones, derivs_interior, ones], axis=-1)
    kx = _knots(widths, B)
    ky = _knots(heights, B)
    inside = np.abs(x) <= B
    b = _bin_index(x, kx)

    w_b = _gather(widths, b)
    h_b = _gather(heights, b)
    kx_b = _gather(kx, b)
    ky_b = _gather(ky, b)
    d0 = _gather(derivs, b)
    d1 = _gather(derivs[..., 1:], b)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        theta = (x - kx_b) / w_b
        s = theta * (1.0 - theta)
        delta = h_b / w_b
        P = d0 + d1 - 2.0 * delta
        N = delta * theta * theta + d0 * s
        D = delta + P * s
        R = d1 * theta * theta + 2.0 * delta * s + d0 * (1.0 - theta) ** 2
        y_in = ky_b + h_b * N / D
        ld_in = 2.0 * np.log(delta) + np.log(R) - 2.0 * np.log(D)

    y = np.where(inside, y_in, x)
    ld = np.where(inside, ld_in, 0.0)
    cache = None
    if want_cache:
        cache = dict(
            inside=inside, b=b, theta=theta, s=s, delta=delta, P=P, N=N, D=D,
            R=R, d0=d0, d1=d1, w_b=w_b, h_b=h_b, g_y=None,
            K=widths.shape[-1], shape=widths.shape,
        )
    return y, ld, cache


def rqs_backward(cache: dict, g_y: np.ndarray, g_ld: np.ndarray):
    """Gradients of (y, logdet) w.r.t. x and the normalized spline params.

    Returns (g_x, g_widths, g_heights, g_derivs_interior) matching the
    shapes passed to rqs_forward. Out-of-range elements pass g_y through
    to x and contribute nothing to the parameters.
    """
    inside = cache["inside"]
    theta, s, delta = cache["theta"], cache["s"], cache["delta"]
    P, N, D, R = cache["P"], cache["N"], cache["D"], cache["R"]
    d0, d1, w_b, h_b = cache["d0"], cache["d1"], cache["w_b"], cache["h_b"]
    b, K = cache["b"], cache["K"]

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        D2 = D * D
        sp = 1.0 - 2.0 * theta
        dN_dt = 2.0 * delta * theta + d0 * sp
        dD_dt = P * sp
        dy_dt = h_b * (dN_dt * D - N * dD_dt) / D2
        dy_ddelta = h_b * (theta * theta * D - N * (1.0 - 2.0 * s)) / D2
        dy_dd0 = h_b * s * (D - N) / D2
        dy_dd1 = -h_b * N * s / D2

        dR_dt = 2.0 * d1 * theta + 2.0 * delta * sp - 2.0 * d0 * (1.0 - theta)
        dl_dt = dR_dt / R - 2.0 * dD_dt / D
        dl_ddelta = 2.0 / delta + 2.0 * s / R - 2.0 * (1.0 - 2.0 * s) / D
        dl_dd0 = (1.0 - theta) ** 2 / R - 2.0 * s / D
        dl_dd1 = theta * theta / R - 2.0 * s / D

        G_t = g_y * dy_dt + g_ld * dl_dt
        G_delta = g_y * dy_ddelta + g_ld * dl_ddelta
        G_d0 = g_y * dy_dd0 + g_ld * dl_dd0
        G_d1 = g_y * dy_dd1 + g_ld * dl_dd1
        G_h = g_y * (N / D) + G_delta / w_b
        G_w = -(G_t * theta + G_delta * delta) / w_b
        G_kx = -G_t / w_b
        g_x_in = G_t / w_b

    zero = np.zeros_like(g_y)
    G_t = np.where(inside, G_t, zero)
    G_d0 = np.where(inside, G_d0, zero)
    G_d1 = np.where(inside, G_d1, zero)
    G_h = np.where(inside, G_h, zero)
    G_w = np.where(inside, G_w, zero)
    G_kx = np.where(inside, G_kx, zero)
    G_ky = np.where(inside, g_y, zero)
    g_x = np.where(inside, g_x_in, g_y)

    pshape = cache["shape"]
    g_widths = _scatter(pshape, b, G_w)
    g_heights = _scatter(pshape, b, G_h)

    # knot positions are cumulative sums of the bins to their left, so the
    # gradient on knot b flows to every earlier bin (strict suffix sum)
    z_kx = _scatter(pshape, b, G_kx)
    z_ky = _scatter(pshape, b, G_ky)
    for z, g in ((z_kx, g_widths), (z_ky, g_heights)):
        suffix = np.flip(np.cumsum(np.flip(z, axis=-1), axis=-1), axis=-1) - z
        g += suffix

    dshape = pshape[:-1] + (K + 1,)
    zd = _scatter(dshape, b, G_d0) + _scatter(dshape, b + 1, G_d1)
    g_derivs_interior = zd[..., 1:K]
    return g_x, g_widths, g_heights, g_derivs_interior


def rqs_inverse(
    y: np.ndarray,
    widths: np.ndarray,
    heights: np.ndarray,
    derivs_interior: np.ndarray,
    tail_bound: float,
) -> np.ndarray:
    """Analytic inverse of rqs_forward (solves the per-bin quadratic)."""
    B = float(tail_bound)
    ones = np.ones(derivs_interior.shape[:-1] + (1,), dtype=derivs_interior.dtype)
    derivs = np.concatenate([ones, derivs_interior, ones], axis=-1)
    kx = _knots(widths, B)
    ky = _knots(heights, B)
    inside = np.abs(y) <= B
    b = _bin_index(y, ky)

    w_b = _gather(widths, b)
    h_b = _gather(heights, b)
    kx_b = _gather(kx, b)
    ky_b = _gather(ky, b)
    d0 = _gather(derivs, b)
    d1 = _gather(derivs[..., 1:], b)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        delta = h_b / w_b
        P = d0 + d1 - 2.0 * delta
        dy = y - ky_b
        qa = h_b * (delta - d0) + dy * P
        qb = h_b * d0 - dy * P
        qc = -delta * dy
        disc = np.maximum(qb * qb - 4.0 * qa * qc, 0.0)
        theta = 2.0 * qc / (-qb - np.sqrt(disc))
        x_in = theta * w_b + kx_b
    return np.where(inside, x_in, y)


def rqs_transform(x, widths, heights, derivatives, tail_bound: float):
    """Scalar/1-D convenience wrapper over rqs_forward with validation."""
    w = np.asarray(widths, dtype=np.float64)
    h = np.asarray(heights, dtype=np.float64)
    d = np.asarray(derivatives, dtype=np.float64)
    if w.shape[-1] < 2:
        raise ContractViolation("spline needs K >= 2 bins")
    if d.shape[-1] != w.shape[-1] - 1:
        raise ContractViolation("need K-1 interior derivatives")
    if np.any(d <= 0):
        raise ContractViolation("derivatives must be positive")
    for name, arr in (("widths", w), ("heights", h)):
        if not np.allclose(arr.sum(axis=-1), 2.0 * tail_bound, rtol=1e-6):
            raise ContractViolation(f"{name} must sum to 2*tail_bound")
    xs = np.asarray(x, dtype=np.float64)
    scalar = xs.ndim == 0
    xs = np.atleast_1d(xs)
    if w.ndim == 1:
        w = np.broadcast_to(w, xs.shape + w.shape)
        h = np.broadcast_to(h, xs.shape + h.shape)
        d = np.broadcast_to(d, xs.shape + d.shape)
    y, ld, _ = rqs_forward(xs, w, h, d, tail_bound)
    if scalar:
        return float(y[0]), float(ld[0])
    return y, ld


# ---------------------------------------------------------------------------
# Atomic transforms
# ---------------------------------------------------------------------------


class Standardizer:
    """Per-dimension affine bijection fitted on the training split."""

    def __init__(self, d: int, dtype=np.float32):
        self.mean = np.zeros(d, dtype=dtype)
        self.std = np.ones(d, dtype=dtype)
        self.fitted = False

    def fit(self, x: np.ndarray, floor: float = 1e-6) -> None:
        self.mean = x.mean(axis=0, dtype=np.float64).astype(self.mean.dtype)
        std = x.std(axis=0, dtype=np.float64)
        self.std = np.maximum(std, floor).astype(self.std.dtype)
        self.fitted = True

    def forward(self, x: np.ndarray):
        y = (x - self.mean) / self.std
        ld = np.full(x.shape[0], -np.sum(np.log(self.std), dtype=np.float64), dtype=x.dtype)
        return y, ld

    def backward(self, g_y: np.ndarray, g_ld: np.ndarray) -> np.ndarray:
        return g_y / self.std

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y * self.std + self.mean


class ActNorm:
    """Per-dimension scale/shift with data-dependent initialization."""

    def __init__(self, d: int, name: str, dtype=np.float32):
        self.log_scale = ParamTensor(f"{name}.log_scale", np.zeros(d, dtype=dtype))
        self.shift = ParamTensor(f"{name}.shift", np.zeros(d, dtype=dtype))
        self.initialized = False
        self._cache = None

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.values)

    def params(self) -> list[ParamTensor]:
        return [self.log_scale, self.shift]

    def data_init(self, x: np.ndarray, floor: float = 1e-6) -> None:
        std = np.maximum(x.std(axis=0, dtype=np.float64), floor)
        mean = x.mean(axis=0, dtype=np.float64)
        self.log_scale.values[...] = (-np.log(std)).astype(self.log_scale.values.dtype)
        self.shift.values[...] = (-mean / std).astype(self.shift.values.dtype)
        self.initialized = True

    def forward(self, x: np.ndarray, cache: bool = False):
        # overflow here surfaces as a non-finite check downstream
        with np.errstate(over="ignore"):
            s = np.exp(self.log_scale.values)
            y = x * s + self.shift.values
        ld = np.full(x.shape[0], np.sum(self.log_scale.values, dtype=np.float64), dtype=x.dtype)
        if cache:
            self._cache = (x, s)
        return y, ld

    def backward(self, g_y: np.ndarray, g_ld: np.ndarray) -> np.ndarray:
        x, s = self._cache
        self.log_scale.grad += (g_y * x).sum(axis=0) * s + g_ld.sum()
        self.shift.grad += g_y.sum(axis=0)
        return g_y * s

    def inverse(self, y: np.ndarray) -> np.ndarray:
        # divide by the exact scale the forward used (exp(-ls) would not be
        # its exact reciprocal in float32)
        return (y - self.shift.values) / np.exp(self.log_scale.values)


class Permutation:
    """Fixed random reindexing of dimensions; volume preserving."""

    def __init__(self, perm: np.ndarray, name: str):
        self.name = name
        self.perm = np.asarray(perm, dtype=np.int64)
        self.inv = np.argsort(self.perm)

    def params(self) -> list[ParamTensor]:
        return []

    def forward(self, x: np.ndarray, cache: bool = False):
        return x[:, self.perm], np.zeros(x.shape[0], dtype=x.dtype)

    def backward(self, g_y: np.ndarray, g_ld: np.ndarray) -> np.ndarray:
        return g_y[:, self.inv]

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y[:, self.inv]


class Coupling:
    """RQS coupling: half the dims transformed, parametrized by the rest.

    The conditioner net maps the identity half to K widths, K heights and
    K-1 interior derivatives per transformed dim. Its final layer is
    zero-initialized, which (with the derivative offset below) makes the
    layer start as the identity map. A conditional model adds
    cond_proj @ (shared source projection) to the first hidden
    pre-activation; cond_proj starts at zero.
    """

    def __init__(
        self,
        d: int,
        block_index: int,
        config: FlowConfig,
        rng: RngStream,
        name: str,
    ):
        self.name = name
        self.d = d
        self.K = config.n_bins
        self.tail_bound = config.tail_bound
        self.min_frac = config.min_bin_frac
        self.min_deriv = config.min_derivative
        # raw derivative offset making zero conditioner output an exact
        # identity spline (derivative 1 at every interior knot)
        self._deriv_offset = math.log(math.expm1(1.0 - self.min_deriv))
        parity = block_index % 2
        idx = np.arange(d)
        self.id_idx = idx[idx % 2 == parity]
        self.tr_idx = idx[idx % 2 != parity]
        self.n_tr = len(self.tr_idx)
        if self.n_tr == 0:
            self.net = None
        else:
            width = config.width_for(d)
            dims = [len(self.id_idx)] + [width] * config.n_hidden + [self.n_tr * (3 * self.K - 1)]
            self.net = Mlp(dims, rng, name=f"{name}.net", zero_init_final=True)
        self.cond_proj: ParamTensor | None = None
        self._cache = None

    @property
    def hidden_width(self) -> int | None:
        return None if self.net is None else self.net.dims[1]

    def params(self) -> list[ParamTensor]:
        out = [] if self.net is None else self.net.params()
        if self.cond_proj is not None:
            out.append(self.cond_proj)
        return out

    def _spline_params(self, x_id: np.ndarray, cond: np.ndarray | None, cache: bool):
        n = x_id.shape[0]
        inject = None
        if self.cond_proj is not None and cond is not None:
            inject = cond @ self.cond_proj.values.T
        raw = self.net.forward(x_id, inject=inject)
        raw = raw.reshape(n, self.n_tr, 3 * self.K - 1)
        rw = raw[..., : self.K]
        rh = raw[..., self.K : 2 * self.K]
        rd = raw[..., 2 * self.K :]
        w, sw = _norm_bins(rw, self.min_frac, self.tail_bound)
        h, sh = _norm_bins(rh, self.min_frac, self.tail_bound)
        z = rd + rd.dtype.type(self._deriv_offset)
        sig = _sigmoid(z)
        dint = self.min_deriv + _softplus(z)
        extras = (sw, sh, sig, cond, inject) if cache else None
        return w, h, dint, extras

    def forward(self, x: np.ndarray, cond: np.ndarray | None = None, cache: bool = False):
        if self.n_tr == 0:
            self._cache = ("noop",)
            return x, np.zeros(x.shape[0], dtype=x.dtype)
        x_id = x[:, self.id_idx]
        x_tr = x[:, self.tr_idx]
        w, h, dint, extras = self._spline_params(x_id, cond, cache)
        y_tr, ld_e, spcache = rqs_forward(x_tr, w, h, dint, self.tail_bound, want_cache=cache)
        y = x.copy()
        y[:, self.tr_idx] = y_tr
        ld = ld_e.sum(axis=-1)
        if cache:
            self._cache = ("full", spcache, extras)
        return y, ld

    def backward(self, g_y: np.ndarray, g_ld: np.ndarray):
        """Returns (g_x, g_cond or None); accumulates parameter grads."""
        if self._cache is None:
            raise ContractViolation(f"{self.name}: backward before forward")
        if self._cache[0] == "noop":
            return g_y, None
        _, spcache, (sw, sh, sig, cond, _inject) = self._cache
        g_ytr = g_y[:, self.tr_idx]
        g_ld_e = g_ld[:, None]
        g_xtr, g_w, g_h, g_dint = rqs_backward(spcache, g_ytr, g_ld_e)

        g_rw = _norm_bins_backward(g_w, sw, self.min_frac, self.tail_bound)
        g_rh = _norm_bins_backward(g_h, sh, self.min_frac, self.tail_bound)
        g_rd = g_dint * sig
        g_raw = np.concatenate([g_rw, g_rh, g_rd], axis=-1)
        g_raw = g_raw.reshape(g_raw.shape[0], -1)
        g_xid_net, g_inject = self.net.backward(g_raw)

        g_x = np.empty_like(g_y)
        g_x[:, self.tr_idx] = g_xtr
        g_x[:, self.id_idx] = g_y[:, self.id_idx] + g_xid_net
        g_cond = None
        if g_inject is not None and self.cond_proj is not None and cond is not None:
            self.cond_proj.grad += g_inject.T @ cond
            g_cond = g_inject @ self.cond_proj.values
        return g_x, g_cond

    def inverse(self, y: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
        if self.n_tr == 0:
            return y
        y_id = y[:, self.id_idx]
        w, h, dint, _ = self._spline_params(y_id, cond, cache=False)
        x = y.copy()
        x[:, self.tr_idx] = rqs_inverse(y[:, self.tr_idx], w, h, dint, self.tail_bound)
        return x


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _norm_bins(raw: np.ndarray, min_frac: float, tail_bound: float):
    """Softmax with a per-bin floor, scaled to total length 2*tail_bound."""
    K = raw.shape[-1]
    shifted = raw - raw.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    sm = e / e.sum(axis=-1, keepdims=True)
    lengths = 2.0 * tail_bound * (min_frac + (1.0 - min_frac * K) * sm)
    return lengths, sm


def _norm_bins_backward(g_lengths, sm, min_frac: float, tail_bound: float):
    K = sm.shape[-1]
    g_sm = g_lengths * (2.0 * tail_bound * (1.0 - min_frac * K))
    dot = np.sum(g_sm * sm, axis=-1, keepdims=True)
    return sm * (g_sm - dot)


class LowRankConditioner:
    """Shared low-rank projection of the source embedding (one per model)."""

    def __init__(self, d_u: int, rank: int, rng: RngStream, dtype=np.float32):
        self.d_u = int(d_u)
        self.rank = int(rank)
        scale = 1.0 / math.sqrt(max(d_u, 1))
        a = rng.normal((self.rank, self.d_u)).astype(dtype) * dtype(scale)
        self.a_proj = ParamTensor("conditioner.a_proj", a)
        self._u = None

    def params(self) -> list[ParamTensor]:
        return [self.a_proj]

    def embed(self, u: np.ndarray, cache: bool = False) -> np.ndarray:
        if u.shape[1] != self.d_u:
            raise ContractViolation(f"conditioner expects d_u={self.d_u}, got {u.shape[1]}")
        if cache:
            self._u = u
        return u @ self.a_proj.values.T

    def backward(self, g_embed: np.ndarray) -> None:
        self.a_proj.grad += g_embed.T @ self._u


# ---------------------------------------------------------------------------
# Composite model
# ---------------------------------------------------------------------------


class FlowModel:
    """L blocks of (coupling, ActNorm, permutation) over a standard-normal base."""

    def __init__(self, d: int, config: FlowConfig, seed: int, dtype=np.float32):
        self.d = int(d)
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(dtype).type
        self.standardizer = Standardizer(d, dtype=self.dtype)
        self.layers: list = []
        self.conditioner: LowRankConditioner | None = None

    # -- structure ----------------------------------------------------------

    @property
    def n_atomic(self) -> int:
        return len(self.layers)

    @property
    def couplings(self) -> list[Coupling]:
        return [l for l in self.layers if isinstance(l, Coupling)]

    @property
    def is_conditional(self) -> bool:
        return self.conditioner is not None

    def params(self) -> list[ParamTensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        if self.conditioner is not None:
            out.extend(self.conditioner.params())
        return out

    def clone(self) -> "FlowModel":
        self._clear_caches()
        return copy.deepcopy(self)

    def _clear_caches(self) -> None:
        for layer in self.layers:
            if isinstance(layer, Coupling):
                layer._cache = None
                if layer.net is not None:
                    layer.net._cache = None
            elif isinstance(layer, ActNorm):
                layer._cache = None
        if self.conditioner is not None:
            self.conditioner._u = None

    # -- evaluation ---------------------------------------------------------

    def _check_inputs(self, v: np.ndarray, u: np.ndarray | None):
        if v.ndim != 2 or v.shape[1] != self.d:
            raise ContractViolation(f"expected (n, {self.d}) inputs, got {v.shape}")
        if self.is_conditional and u is None:
            raise ContractViolation("conditional model requires u")
        if not self.is_conditional and u is not None:
            raise ContractViolation("marginal model does not accept u")
        if u is not None and u.shape[0] != v.shape[0]:
            raise ContractViolation("u and v row counts differ")

    def forward_transform(self, v: np.ndarray, u: np.ndarray | None = None, cache: bool = False):
        """Push v through standardizer and all atomic transforms.

        Returns (z, logdet) where logdet includes the standardizer term.
        """
        self._check_inputs(v, u)
        x, ld = self.standardizer.forward(v)
        total = ld.astype(np.float64)
        cond = None
        if self.is_conditional:
            cond = self.conditioner.embed(u, cache=cache)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Coupling):
                x, ld = layer.forward(x, cond=cond, cache=cache)
            else:
                x, ld = layer.forward(x, cache=cache)
            if not np.all(np.isfinite(x)):
                raise DensityError("non-finite intermediate", layer_index=i)
            total += ld
        return x, total

    def log_prob(self, v: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        """Exact log-density in nats, evaluated in float64."""
        v64 = np.asarray(v, dtype=np.float64)
        u64 = None if u is None else np.asarray(u, dtype=np.float64)
        z, ld = self.forward_transform(v64, u64, cache=False)
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.d * LOG_2PI + ld

    def nll(self, v: np.ndarray, u: np.ndarray | None = None) -> float:
        return float(-np.mean(self.log_prob(v, u)))

    def loss_backward(self, v: np.ndarray, u: np.ndarray | None = None) -> float:
        """Mean NLL over the batch plus gradient accumulation into params."""
        v = np.asarray(v, dtype=self.dtype)
        u = None if u is None else np.asarray(u, dtype=self.dtype)
        n = v.shape[0]
        z, ld = self.forward_transform(v, u, cache=True)
        loss = float(0.5 * np.sum(z.astype(np.float64) ** 2) / n + 0.5 * self.d * LOG_2PI
                     - np.sum(ld, dtype=np.float64) / n)
        g = (z / n).astype(self.dtype)
        g_ld = np.full(n, -1.0 / n, dtype=self.dtype)
        g_cond_total = None
        for layer in reversed(self.layers):
            if isinstance(layer, Coupling):
                g, g_cond = layer.backward(g, g_ld)
                if g_cond is not None:
                    g_cond_total = g_cond if g_cond_total is None else g_cond_total + g_cond
            else:
                g = layer.backward(g, g_ld)
        self.standardizer.backward(g, g_ld)
        if g_cond_total is not None:
            self.conditioner.backward(g_cond_total)
        return loss

    def inverse(self, z: np.ndarray, u: np.ndarray | None = None,
                verify: bool = True, tol: float = 1e-5) -> np.ndarray:
        """Map base-space points back through the flow (float64)."""
        z64 = np.asarray(z, dtype=np.float64)
        u64 = None if u is None else np.asarray(u, dtype=np.float64)
        self._check_inputs(z64, u64)
        cond = None
        if self.is_conditional:
            cond = self.conditioner.embed(u64)
        x = z64
        for layer in reversed(self.layers):
            x = layer.inverse(x, cond) if isinstance(layer, Coupling) else layer.inverse(x)
        v = self.standardizer.inverse(x)
        if verify:
            z_back, _ = self.forward_transform(v, u64, cache=False)
            resid = float(np.max(np.abs(z_back - z64)))
            if resid > tol:
                raise InvertibilityError(f"round-trip residual {resid:.3e} > {tol:g}")
        return v

    def init_actnorm(self, v: np.ndarray, u: np.ndarray | None = None) -> None:
        """Data-dependent init of any uninitialized ActNorm layers, in order."""
        v = np.asarray(v, dtype=self.dtype)
        x, _ = self.standardizer.forward(v)
        cond = None
        if self.is_conditional:
            cond = self.conditioner.embed(np.asarray(u, dtype=self.dtype))
        for layer in self.layers:
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.data_init(x)
            if isinstance(layer, Coupling):
                x, _ = layer.forward(x, cond=cond)
            else:
                x, _ = layer.forward(x)


def build_flow(d: int, config: FlowConfig | None = None,
               rng: RngStream | int = 0, dtype=None) -> FlowModel:
    """Construct an identity-initialized flow; permutations fixed from rng."""
    from .numcore import real_dtype

    config = config or FlowConfig()
    if isinstance(rng, RngStream):
        stream, seed = rng, rng.seed
    else:
        seed = int(rng)
        stream = RngStream(seed, ("build",))
    dtype = dtype or real_dtype()
    model = FlowModel(d, config, seed, dtype=dtype)
    for i in range(config.n_blocks):
        coupling = Coupling(d, i, config, stream.child("coupling", i), name=f"block{i}.coupling")
        actnorm = ActNorm(d, name=f"block{i}.actnorm", dtype=model.dtype)
        perm = Permutation(stream.child("perm", i).permutation(d), name=f"block{i}.perm")
        model.layers.extend([coupling, actnorm, perm])
    return model


def clone_to_conditional(marginal: FlowModel, d_u: int, r: int | None = None,
                         rng: RngStream | int = 0) -> FlowModel:
    """Copy every backbone weight and attach a zero-initialized conditioner.

    With the per-coupling output projections at zero, log p(v|u) equals the
    marginal log p(v) exactly until the first conditional training step.
    """
    if isinstance(rng, RngStream):
        stream = rng
    else:
        stream = RngStream(int(rng), ("clone",))
    r = r if r is not None else marginal.config.cond_rank
    if d_u < 1 or r < 1:
        raise ConfigError("d_u and r must be >= 1")
    r_eff = min(r, d_u)  # rank beyond the source dim buys nothing
    widths = [c.hidden_width for c in marginal.couplings if c.hidden_width is not None]
    if widths and r_eff > min(widths):
        raise ConfigError(f"rank {r_eff} exceeds conditioner feature width {min(widths)}")
    model = marginal.clone()
    model.conditioner = LowRankConditioner(d_u, r_eff, stream.child("a_proj"), dtype=model.dtype)
    for i, coupling in enumerate(model.couplings):
        if coupling.net is None:
            continue
        coupling.cond_proj = ParamTensor(
            f"{coupling.name}.cond_proj",
            np.zeros((coupling.hidden_width, r_eff), dtype=model.dtype),
        )
    return model
