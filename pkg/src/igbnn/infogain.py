"""Predictive entropy, information gain (BALD) and the IG-penalised objective.

For per-particle predictive distributions ``p_j(y|x)``,

    IG(x) = H[mean_j p_j] - mean_j H[p_j]

(natural log). The training objective is

    L_IG = mean_j CE(f(x_adv; θ_j), y) + λ · mean_b |IG(x_b) - IG(x_adv_b)|
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import network
from . import tensor as T
from .network import NetworkShape
from .tensor import Tensor

__all__ = [
    "IGConfig",
    "entropy",
    "information_gain",
    "information_gain_batch",
    "ig_penalty",
    "ig_graph",
    "LIGTerms",
    "l_ig",
]

_TINY = 1e-300


@dataclass(frozen=True)
class IGConfig:
    lam: float = 5.0
    entropy_floor: float = 1e-12
    penalty: str = "per_instance"  # per_instance | batch_mean
    allow_negative: bool = False

    def __post_init__(self):
        if self.lam < 0 and not self.allow_negative:
            raise ValueError("negative lambda is only allowed in the inversion diagnostic")
        if not 0 <= self.entropy_floor <= 1e-6:
            raise ValueError("entropy_floor must lie in [0, 1e-6]")
        if self.penalty not in ("per_instance", "batch_mean"):
            raise ValueError(f"unknown penalty mode {self.penalty!r}")


def _check_dist(p: np.ndarray) -> None:
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("probabilities must sum to 1")


def entropy(p, floor: float = 1e-12) -> np.ndarray:
    """``-Σ p ln p`` over the last axis with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    _check_dist(p)
    logp = np.log(np.maximum(p, max(floor, _TINY)))
    return -np.sum(np.where(p > 0, p * logp, 0.0), axis=-1)


def information_gain(per_particle, floor: float = 1e-12) -> float:
    """IG for one input; ``per_particle`` is ``(n, K)``."""
    p = np.atleast_2d(np.asarray(per_particle, dtype=np.float64))
    return float(entropy(p.mean(axis=0), floor) - entropy(p, floor).mean())


def information_gain_batch(probs, floor: float = 1e-12) -> np.ndarray:
    """IG per input for stacked probabilities ``(n, B, K)``; returns ``(B,)``."""
    probs = np.asarray(probs, dtype=np.float64)
    return entropy(probs.mean(axis=0), floor) - entropy(probs, floor).mean(axis=0)


def ig_penalty(per_particle_clean, per_particle_adv, floor: float = 1e-12, mode: str = "per_instance") -> float:
    clean = np.asarray(per_particle_clean, dtype=np.float64)
    adv = np.asarray(per_particle_adv, dtype=np.float64)
    if clean.shape != adv.shape:
        raise ValueError(f"clean {clean.shape} and adversarial {adv.shape} predictions differ in shape")
    if clean.ndim == 2:
        clean, adv = clean[:, None, :], adv[:, None, :]
    ig_c = information_gain_batch(clean, floor)
    ig_a = information_gain_batch(adv, floor)
    if mode == "batch_mean":
        return float(abs(ig_c.mean() - ig_a.mean()))
    return float(np.mean(np.abs(ig_c - ig_a)))


def ig_graph(logits, floor: float = 1e-12) -> Tensor:
    """Recorded IG per input from stacked logits ``(n, B, K)``; returns ``(B,)``."""
    logp = network.log_softmax(logits)
    p = T.exp(logp)
    mean_particle_entropy = T.mean(-T.sum_(p * logp, axis=-1), axis=0)
    pbar = T.mean(p, axis=0)
    h_mean = -T.sum_(pbar * T.log(T.clamp(pbar, lo=max(floor, _TINY))), axis=-1)
    return h_mean - mean_particle_entropy


class LIGTerms(NamedTuple):
    total: Tensor
    ce: Tensor
    penalty: Tensor


def l_ig(shape: NetworkShape, params, x, x_adv, y, config: IGConfig) -> LIGTerms:
    """Objective terms for stacked ``params`` ``(n, P)`` (array or recorded leaf).

    With ``lam == 0`` the penalty is evaluated but kept out of the graph.
    """
    params = T.as_tensor(params)
    if params.ndim == 1:
        params = T.reshape(params, (1, params.shape[0]))
    adv_logits = network.forward(shape, params, x_adv)
    ce = network.cross_entropy(adv_logits, y)
    if config.lam == 0:
        clean_logits = network.forward(shape, T.stop_gradient(params), x)
        adv_const = T.stop_gradient(adv_logits)
    else:
        clean_logits = network.forward(shape, params, x)
        adv_const = adv_logits
    ig_clean = ig_graph(clean_logits, config.entropy_floor)
    ig_adv = ig_graph(adv_const, config.entropy_floor)
    if config.penalty == "batch_mean":
        penalty = T.abs_(T.mean(ig_clean) - T.mean(ig_adv))
    else:
        penalty = T.mean(T.abs_(ig_clean - ig_adv))
    total = ce if config.lam == 0 else ce + config.lam * penalty
    return LIGTerms(total, ce, penalty)
