"""Nested dropout over the channel axis.

For every sample a kept count ``k`` is drawn and channels ``k+1..n`` are
zeroed (units are 1-indexed, ``k`` counts kept units). The first ``s`` units
have been swept: they are always kept, and the draw covers only the
``m = n - s`` remaining ones, from a geometric law truncated to ``{1..m}``::

    P(k = s + j) = rho * (1 - rho)**(j - 1) / (1 - (1 - rho)**m)

Kept channels are never rescaled unless ``scale=True`` is requested, so a
truncated evaluation sees the magnitudes the network was trained with.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidParameterError,
    InvalidShapeError,
    NoRemainingUnitsError,
    ProtocolError,
)

TRAIN = "train"
EVAL_FULL = "eval_full"
EVAL_TRUNCATE = "eval_truncate"


def _check_rho(rho):
    if not (0.0 < rho <= 1.0) or math.isnan(rho):
        raise InvalidParameterError(f"rho must lie in (0, 1], got {rho}")


def truncated_geometric_pmf(rho, m):
    """Probabilities of ``j = 1..m``; entry ``j-1`` holds ``P(j)``."""
    _check_rho(rho)
    if m < 1:
        raise NoRemainingUnitsError("no remaining units to draw from")
    j = np.arange(1, m + 1, dtype=np.float64)
    q = 1.0 - rho
    z = -math.expm1(m * math.log1p(-rho)) if rho < 1.0 else 1.0
    return rho * q ** (j - 1) / z


def _draw_offsets(rho, m, u):
    """Inverse CDF of the truncated geometric for uniforms ``u`` in [0, 1)."""
    if rho >= 1.0 or m == 1:
        return np.ones(np.shape(u), dtype=np.int64)
    log_q = math.log1p(-rho)
    z = -math.expm1(m * log_q)
    # F(j) = (1 - q**j) / z  =>  j = ceil(log(1 - u z) / log q)
    j = np.ceil(np.log1p(-u * z) / log_q)
    return np.clip(j, 1, m).astype(np.int64)


def sample_kept_count(rho, s, n, rng, size=None):
    """Draw the number of kept units ``k`` (``s+1 <= k <= n``).

    ``size`` draws a vector of independent counts; ``None`` returns an int.
    """
    _check_rho(rho)
    if s >= n:
        raise NoRemainingUnitsError(f"sweep index {s} leaves no units out of {n}")
    if s < 0:
        raise InvalidParameterError(f"sweep index must be >= 0, got {s}")
    u = rng.random(size)
    k = s + _draw_offsets(rho, n - s, u)
    return int(k) if size is None else k


def keep_probability(i, rho, s, n):
    """Exact probability that unit ``i`` (1-indexed) survives a draw."""
    if not 1 <= i <= n:
        raise InvalidParameterError(f"unit index {i} outside [1, {n}]")
    _check_rho(rho)
    if i <= s + 1:
        return 1.0
    pmf = truncated_geometric_pmf(rho, n - s)
    return float(pmf[i - s - 1 :].sum())


def build_mask(n, draws, dtype=np.float32):
    """Prefix masks ``[B, n]`` with ``mask[b, i] = 1`` iff ``i < draws[b]`` (0-based i)."""
    draws = np.asarray(draws, dtype=np.int64).reshape(-1)
    if draws.size and (draws.min() < 1 or draws.max() > n):
        raise InvalidParameterError(f"kept counts must lie in [1, {n}]")
    return (np.arange(n)[None, :] < draws[:, None]).astype(dtype)


def _apply(x, mask):
    if x.ndim == 4:
        return x * mask[:, :, None, None]
    return x * mask


@dataclass
class NestedDropoutState:
    n: int
    s: int = 0
    rho: float = 0.1
    scale: bool = False
    last_draws: np.ndarray | None = field(default=None, repr=False)
    last_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        _check_rho(self.rho)
        if self.n < 1 or not 0 <= self.s <= self.n:
            raise InvalidParameterError(f"need 0 <= s <= n, n >= 1; got s={self.s}, n={self.n}")

    @property
    def saturated(self):
        return self.s >= self.n

    def keep_probabilities(self):
        return np.array([keep_probability(i, self.rho, self.s, self.n) for i in range(1, self.n + 1)])


def nd_forward(x, state: NestedDropoutState, mode=TRAIN, rng=None, k=None, draws=None):
    """Apply nested dropout to ``x`` of shape ``[B, n, H, W]`` or ``[B, n]``.

    ``mode`` is ``"train"``, ``"eval_full"`` or ``"eval_truncate"`` (the
    latter keeps channels ``1..k`` for every sample). In train mode ``draws``
    may inject the per-sample counts instead of sampling from ``rng``.
    """
    x = np.asarray(x)
    if x.ndim not in (2, 4) or x.shape[1] != state.n:
        raise InvalidShapeError(f"expected channel dimension {state.n}, got input {x.shape}")
    B = x.shape[0]
    if mode == EVAL_FULL:
        return x.copy()
    if mode == EVAL_TRUNCATE:
        if k is None or not 1 <= k <= state.n:
            raise InvalidParameterError(f"truncation k must lie in [1, {state.n}], got {k}")
        return _apply(x, build_mask(state.n, np.full(B, k), x.dtype))
    if mode != TRAIN:
        raise InvalidParameterError(f"unknown nested dropout mode {mode!r}")

    if draws is not None:
        draws = np.asarray(draws, dtype=np.int64).reshape(-1)
        if draws.shape != (B,):
            raise InvalidShapeError(f"need {B} injected draws, got {draws.shape}")
    elif state.saturated:
        draws = np.full(B, state.n, dtype=np.int64)
    else:
        if rng is None:
            raise InvalidParameterError("train mode needs an rng")
        draws = sample_kept_count(state.rho, state.s, state.n, rng, size=B)
    mask = build_mask(state.n, draws, x.dtype)
    if state.scale and not state.saturated:
        probs = state.keep_probabilities().astype(x.dtype)
        mask = mask / probs
    state.last_draws = draws
    state.last_mask = mask
    return _apply(x, mask)


def nd_backward(grad_out, state: NestedDropoutState):
    if state.last_mask is None:
        raise ProtocolError("nd_backward called without a preceding train-mode nd_forward")
    mask = state.last_mask
    if grad_out.shape[:2] != mask.shape:
        raise InvalidShapeError(f"grad_out {grad_out.shape} does not match stored mask {mask.shape}")
    return _apply(grad_out, mask)
