"""Noise-injection capacity gates.

A gated unit transmits a variance-preserving mix of its feature and Gaussian
noise scaled to the feature's own standard deviation. The mixing weight is a
learnable capacity fraction: the more noise, the less a downstream estimator
can recover, so shrinking capacity is a smooth, differentiable operation.

Two modes live here:

* ``per_unit`` (:func:`gate_per_unit`), used by layers and experiments. Each
  unit has its own signal fraction ``lam[n]``; ``lam = 1`` is full capacity.
* ``ordered_K`` (:func:`gate_eq1`), the single-boundary form where a
  continuous dimensionality ``K`` keeps the first ``floor(K) - 1`` elements,
  mixes element ``floor(K)`` with noise weighted by the *noise* fraction
  ``K - floor(K)`` and zeroes the tail.

Note the opposite orientation of the two fractions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RngStream

LAMBDA_MAX = 1.0 - 1e-3
SIGMA_MOMENTUM = 0.99
SIGMA_FLOOR = 1e-6
GATE_GRAD_CLIP = 1e3

__all__ = [
    "LAMBDA_MAX",
    "GateState",
    "OrderedKState",
    "gate_eq1",
    "gate_per_unit",
    "wiener_estimate",
    "mc_normalized_error",
    "lambda_penalty",
    "update_sigma_ema",
    "clamp_lambdas",
]


@dataclass
class GateState:
    """Learnable capacity of one gated layer plus its noise scale.

    In ``per_unit`` mode ``lambdas`` is a trainable vector of ``width``
    signal fractions. In ``ordered_K`` mode it is a single trainable layer
    fraction ``c`` in ``[lambda_min, 1]``: with ``K = c * width`` the units
    below ``floor(K)`` pass, unit ``floor(K)`` carries the fractional part
    and later units are silent (see :meth:`unit_fractions`).
    ``sigma_ema`` tracks the per-unit feature std used to scale noise.
    """

    width: int
    lambda_min: float = 0.0625
    lambda_max: float = LAMBDA_MAX
    mode: str = "per_unit"
    lambdas: Tensor = field(init=False)
    sigma_ema: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"gate width must be positive, got {self.width}")
        if not 0.0 < self.lambda_min < self.lambda_max < 1.0:
            raise ValueError(
                f"need 0 < lambda_min < lambda_max < 1, got {self.lambda_min}, {self.lambda_max}"
            )
        if self.mode == "per_unit":
            init = np.full(self.width, self.lambda_max)
        elif self.mode == "ordered_K":
            init = np.ones(1)
        else:
            raise ValueError(f"unknown gate mode {self.mode!r}")
        self.lambdas = Tensor(init, requires_grad=True, name="lambda")
        self.sigma_ema = np.ones(self.width)

    @property
    def upper(self) -> float:
        return self.lambda_max if self.mode == "per_unit" else 1.0

    @property
    def values(self) -> np.ndarray:
        """Per-unit signal fractions as a plain array."""
        if self.mode == "per_unit":
            return self.lambdas.data
        return _ordered_fractions(self.lambdas.data[0] * self.width, self.width, self.lambda_max)

    def unit_fractions(self) -> Tensor:
        """Per-unit signal fractions as a recorded tensor."""
        if self.mode == "per_unit":
            return self.lambdas
        k = ad.mul(Tensor(np.full(self.width, float(self.width))), self.lambdas)
        return ad.clamp(ad.sub(k, Tensor(np.arange(self.width, dtype=np.float64))), 0.0, self.lambda_max)

    def active_mask(self) -> np.ndarray:
        """Units that carry any signal; silent units are zeroed by the gate."""
        return self.values > 0.0

    def set_lambdas(self, values) -> None:
        """Overwrite the trainable fractions (no projection; see :func:`clamp_lambdas`)."""
        arr = np.asarray(values, dtype=np.float64).reshape(self.lambdas.shape)
        if np.any(arr < 0) or np.any(arr > self.upper):
            raise ValueError(f"capacity fractions must lie in [0, {self.upper}]")
        self.lambdas.assign(arr)


def _ordered_fractions(k: float, width: int, cap: float) -> np.ndarray:
    return np.clip(k - np.arange(width, dtype=np.float64), 0.0, cap)


@dataclass
class OrderedKState:
    """Continuous dimensionality ``K`` in ``[n_min, n_max]``."""

    n_min: int
    n_max: int
    K: Tensor = field(init=False)

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        self.K = Tensor(float(self.n_max), requires_grad=True, name="K")

    def set_K(self, value: float) -> None:
        self.K.assign(float(value))


def _normal_draws(noise, shape) -> np.ndarray:
    if isinstance(noise, RngStream):
        return noise.normal(shape)
    arr = np.broadcast_to(np.asarray(noise, dtype=np.float64), shape)
    return np.array(arr)


def gate_eq1(x: Tensor, state: OrderedKState, noise, sigma) -> Tensor:
    """Ordered truncation with one noisy boundary element.

    ``noise`` is an :class:`RngStream` or a frozen standard-normal draw for
    the boundary element. ``sigma`` is a scalar or per-element std. The
    output is differentiable in ``state.K``; ``floor(K)`` is held constant.
    """
    n = x.shape[-1]
    if x.data.ndim != 1 or n != state.n_max:
        raise ad.ShapeError(f"gate_eq1 expects a vector of length {state.n_max}, got {x.shape}")
    k_val = state.K.item()
    if not state.n_min <= k_val <= state.n_max:
        raise ValueError(f"K={k_val} outside [{state.n_min}, {state.n_max}]")
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")

    k = int(math.floor(k_val))
    idx = k - 1  # boundary element, zero-based
    keep = np.zeros(n)
    keep[:idx] = 1.0
    onehot = np.zeros(n)
    onehot[idx] = 1.0

    nu = _normal_draws(noise, (1,))
    x_k = ad.matmul(x, Tensor(onehot[:, None]))  # shape (1,)
    # signal weight 1 - (K - floor(K)), kept as a (1,) vector for gate_mix
    signal_frac = ad.sub(Tensor([k + 1.0]), state.K)
    eta = ad.gate_mix(x_k, signal_frac, sig[idx] * nu, grad_clip=GATE_GRAD_CLIP)
    return ad.add(ad.mul(x, Tensor(keep)), ad.mul(Tensor(onehot), eta))


def gate_per_unit(x: Tensor, state: GateState, noise=None, training: bool = False) -> Tensor:
    """Per-unit capacity gate on the last axis of ``x``.

    Training: ``sqrt(lam) * x + sqrt(1 - lam) * sigma_ema * nu`` with ``nu``
    drawn from ``noise`` (an :class:`RngStream`, or a frozen array).
    Evaluation: the noise-free signal path ``sqrt(lam) * x``. In
    ``ordered_K`` mode the fractions come from the layer capacity and units
    with zero fraction output exactly zero.
    """
    if x.shape[-1] != state.width:
        raise ad.ShapeError(f"gate width {state.width} does not match input shape {x.shape}")
    lam = state.unit_fractions()
    if training and noise is None:
        raise ValueError("training-mode gate needs a noise source")
    scaled = None
    if training:
        scaled = _normal_draws(noise, x.shape) * state.sigma_ema
        if state.mode == "ordered_K":
            scaled = scaled * state.active_mask()
    return ad.gate_mix(x, lam, scaled, grad_clip=GATE_GRAD_CLIP)


def wiener_estimate(eta, lam):
    """Linear MMSE estimate of the clean element from its noisy mix."""
    return eta * np.sqrt(1.0 - lam)


def mc_normalized_error(lam: float, n_samples: int = 1_000_000, seed: int = 0, sigma: float = 1.0) -> float:
    """Monte Carlo ``E[(xi - xi_hat)^2] / sigma^2`` for the ordered-form mix."""
    if n_samples < 10_000:
        raise ValueError(f"n_samples must be at least 1e4, got {n_samples}")
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"noise fraction must lie in [0, 1), got {lam}")
    rng = RngStream(seed).child("mmse")
    xi = sigma * rng.child("xi").normal(n_samples)
    nu = rng.child("nu").normal(n_samples)
    eta = math.sqrt(1.0 - lam) * xi + math.sqrt(lam) * sigma * nu
    err = xi - wiener_estimate(eta, lam)
    return float(np.mean(err * err) / sigma**2)


def lambda_penalty(state: GateState, beta: float) -> Tensor:
    """``beta / N * sum(lam**2)`` over the trainable fractions, as a recorded scalar.

    In ``ordered_K`` mode the single layer fraction gives ``beta * c**2``.
    """
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    return ad.scale(ad.sum(ad.square(state.lambdas)), beta / state.lambdas.size)


def update_sigma_ema(state: GateState, batch_features) -> GateState:
    """Fold the batch's per-unit std into ``sigma_ema`` (no gradient)."""
    feats = batch_features.data if isinstance(batch_features, Tensor) else np.asarray(batch_features)
    feats = feats.reshape(-1, state.width)
    std = feats.std(axis=0)
    state.sigma_ema = np.maximum(SIGMA_MOMENTUM * state.sigma_ema + (1.0 - SIGMA_MOMENTUM) * std, SIGMA_FLOOR)
    return state


def clamp_lambdas(state: GateState) -> GateState:
    state.lambdas.assign(np.clip(state.lambdas.data, state.lambda_min, state.upper))
    return state
