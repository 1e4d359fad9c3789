"""Adversarial example generation within ℓ∞ / ℓ2 balls.

White-box attacks differentiate the particle-averaged cross-entropy with
respect to the input only; model parameters enter the graph as constants.
Every returned batch is checked against the ball and input-bound
constraints before it leaves this module.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import network
from .network import NetworkShape
from .svgd import ParticleEnsemble
from .tensor import NonFiniteError, Recording

__all__ = [
    "AttackConfig",
    "AdversarialBatch",
    "AttackInvariantError",
    "OracleError",
    "project",
    "input_gradient",
    "fgsm",
    "pgd",
    "eot_pgd",
    "square_attack",
    "margin_loss",
    "ensemble_oracle",
]

FEASIBILITY_TOL = 1e-9


class AttackInvariantError(AssertionError):
    pass


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    eps: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 20
    random_start: bool = False
    bounds: tuple[float, float] = (0.0, 1.0)
    query_budget: int = 1000
    square_init_fraction: float = 0.5

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.query_budget < 0:
            raise ValueError("query_budget must be >= 0")
        if not 0 < self.square_init_fraction <= 1:
            raise ValueError("square_init_fraction must lie in (0, 1]")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError("input bounds need lo < hi")
        object.__setattr__(self, "bounds", (float(lo), float(hi)))

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    provenance: dict
    info: dict = field(default_factory=dict)


def _row_norms(d: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(d.reshape(d.shape[0], -1) ** 2, axis=1))


def project(x_candidate, x_origin, config: AttackConfig) -> np.ndarray:
    """Project onto the ε-ball around ``x_origin``, then onto the input bounds."""
    x_candidate = np.asarray(x_candidate, dtype=np.float64)
    x_origin = np.asarray(x_origin, dtype=np.float64)
    if x_candidate.shape != x_origin.shape:
        raise ValueError("candidate and origin differ in shape")
    eps = config.eps
    if config.norm == "linf":
        out = np.clip(x_candidate, x_origin - eps, x_origin + eps)
    else:
        delta = np.atleast_2d(x_candidate - x_origin)
        norms = _row_norms(delta)
        factor = np.ones_like(norms)
        over = norms > eps
        factor[over] = eps / norms[over]
        delta = delta * factor.reshape((-1,) + (1,) * (delta.ndim - 1))
        out = x_origin + delta.reshape(x_origin.shape)
    return np.clip(out, *config.bounds)


def _check_feasible(x_adv: np.ndarray, x: np.ndarray, config: AttackConfig) -> None:
    lo, hi = config.bounds
    if np.any(x_adv < lo) or np.any(x_adv > hi):
        raise AttackInvariantError("adversarial input escapes the input bounds")
    d = np.atleast_2d(x_adv - x)
    if config.norm == "linf":
        dist = np.max(np.abs(d)) if d.size else 0.0
    else:
        dist = np.max(_row_norms(d)) if d.size else 0.0
    if dist > config.eps + FEASIBILITY_TOL:
        raise AttackInvariantError(f"perturbation {dist} exceeds budget {config.eps}")


def input_gradient(shape: NetworkShape, particles: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean over particles of ∇_x of the batch-mean cross-entropy."""
    rec = Recording()
    xt = rec.leaf(x)
    loss = network.cross_entropy(network.forward(shape, np.atleast_2d(particles), xt), y)
    (g,) = rec.grad(loss, [xt])
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite input gradient")
    return g


def _ascent_direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    gn = _row_norms(g).reshape((-1,) + (1,) * (g.ndim - 1))
    return np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)


def _random_start(x: np.ndarray, config: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if config.norm == "linf":
        noise = rng.uniform(-config.eps, config.eps, size=x.shape)
    else:
        direction = rng.normal(size=x.shape)
        direction /= np.maximum(_row_norms(direction), 1e-300)[:, None]
        radius = config.eps * rng.uniform(size=(x.shape[0], 1)) ** (1.0 / x.shape[1])
        noise = direction * radius
    return project(x + noise, x, config)


def _gradient_attack(kind: str, shape: NetworkShape, particles: np.ndarray, x, y,
                     config: AttackConfig, rng=None, callback=None, provenance_extra=None) -> AdversarialBatch:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    x_adv = x.copy()
    if config.random_start and config.eps > 0:
        x_adv = _random_start(x, config, np.random.default_rng(rng))
    for t in range(config.steps):
        g = input_gradient(shape, particles, x_adv, y)
        x_adv = project(x_adv + config.alpha * _ascent_direction(g, config.norm), x, config)
        if callback is not None:
            callback(t, x_adv)
    _check_feasible(x_adv, x, config)
    prov = {"attack": kind, "config": config.digest(), "n_particles": int(np.atleast_2d(particles).shape[0])}
    prov.update(provenance_extra or {})
    return AdversarialBatch(x_adv, prov)


def pgd(shape: NetworkShape, params, x, y, config: AttackConfig, rng=None, callback=None,
        particle_index: int | None = None) -> AdversarialBatch:
    """Projected sign-gradient ascent against a single parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1:
        raise ValueError("pgd attacks a single parameter vector; use eot_pgd for ensembles")
    extra = {} if particle_index is None else {"source_particle": int(particle_index)}
    return _gradient_attack("pgd", shape, params[None, :], x, y, config, rng, callback, extra)


def eot_pgd(ensemble: ParticleEnsemble, x, y, config: AttackConfig, rng=None, callback=None) -> AdversarialBatch:
    """PGD whose step follows the sign of the gradient averaged over all particles."""
    if ensemble.shape is None:
        raise ValueError("ensemble has no network shape")
    return _gradient_attack("eot_pgd", ensemble.shape, ensemble.particles, x, y, config, rng, callback)


def fgsm(shape: NetworkShape, particles, x, y, config: AttackConfig) -> AdversarialBatch:
    """One full-budget step along the (particle-averaged) gradient sign."""
    x = np.asarray(x, dtype=np.float64)
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    if config.eps == 0:
        x_adv = x.copy()
    else:
        g = input_gradient(shape, particles, x, y)
        x_adv = project(x + config.eps * _ascent_direction(g, config.norm), x, config)
    _check_feasible(x_adv, x, config)
    return AdversarialBatch(x_adv, {"attack": "fgsm", "config": config.digest(), "n_particles": particles.shape[0]})


def margin_loss(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Largest wrong-class probability minus the true-class probability."""
    rows = np.arange(probs.shape[0])
    true = probs[rows, y]
    other = probs.copy()
    other[rows, y] = -np.inf
    return other.max(axis=1) - true


def _validate_oracle(probs, batch: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != batch:
        raise OracleError(f"oracle returned shape {probs.shape} for a batch of {batch}")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-6):
        raise OracleError("oracle output is not a probability distribution")
    return probs


def square_attack(predict_fn: Callable[[np.ndarray], np.ndarray], x, y, config: AttackConfig,
                  rng=None) -> AdversarialBatch:
    """Query-limited random search over axis-aligned ±ε patches (ℓ∞ only).

    Features are treated as a 1-D signal; a patch is a contiguous window of
    ``side`` coordinates set to ``x ± ε`` with one random sign. ``side`` starts at
    ``square_init_fraction * dim`` and halves every quarter of the budget.
    A proposal is kept when it does not lower the margin loss. Each example
    uses at most ``query_budget`` oracle evaluations and stops once fooled.
    """
    if config.norm != "linf":
        raise ValueError("square_attack supports the linf norm only")
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    batch, dim = x.shape
    x_adv = x.copy()
    queries = np.zeros(batch, dtype=np.int64)
    budget = config.query_budget
    trace: list[np.ndarray] = []
    if budget == 0 or batch == 0:
        _check_feasible(x_adv, x, config)
        return AdversarialBatch(x_adv, {"attack": "square", "config": config.digest()},
                                {"queries": queries, "loss_trace": trace})
    loss = margin_loss(_validate_oracle(predict_fn(x_adv), batch), y)
    queries += 1
    trace.append(loss.copy())
    side0 = max(1, int(round(config.square_init_fraction * dim)))
    for it in range(1, budget):
        active = np.flatnonzero(loss <= 0)
        if active.size == 0:
            break
        side = max(1, side0 >> (4 * it // budget))
        starts = rng.integers(0, dim - side + 1, size=active.size)
        signs = rng.choice(np.array([-1.0, 1.0]), size=active.size)
        cand = x_adv[active].copy()
        cols = starts[:, None] + np.arange(side)[None, :]
        rows = np.repeat(np.arange(active.size), side).reshape(active.size, side)
        cand[rows, cols] = x[active][rows, cols] + signs[:, None] * config.eps
        cand = project(cand, x[active], config)
        new_loss = margin_loss(_validate_oracle(predict_fn(cand), active.size), y[active])
        queries[active] += 1
        accept = new_loss >= loss[active]
        x_adv[active[accept]] = cand[accept]
        loss[active[accept]] = new_loss[accept]
        trace.append(loss.copy())
    _check_feasible(x_adv, x, config)
    return AdversarialBatch(x_adv, {"attack": "square", "config": config.digest()},
                            {"queries": queries, "loss_trace": trace})


def ensemble_oracle(ensemble: ParticleEnsemble) -> Callable[[np.ndarray], np.ndarray]:
    """Black-box view of an ensemble: inputs in, mean predictive probabilities out."""

    def predict_fn(x: np.ndarray) -> np.ndarray:
        logits = network.forward(ensemble.shape, ensemble.particles, x).data
        return network.softmax_np(logits).mean(axis=0)

    return predict_fn
