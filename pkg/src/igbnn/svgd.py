"""Stein variational gradient descent over flat parameter particles.

The update direction for particle ``θ_i`` is

    φ(θ_i) = Σ_j [ k(θ_j, θ_i) g_j  -  (γ / n) ∇_{θ_j} k(θ_j, θ_i) ]

with ``g_j`` the objective gradient at particle ``j`` and an RBF kernel
whose bandwidth is the median pairwise particle distance. Particles move
as ``θ_i ← θ_i - ε φ(θ_i)``. Note the driving term is not averaged over
``n`` and ``γ`` scales only the repulsion.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .network import NetworkShape

__all__ = [
    "ParticleEnsemble",
    "SVGDConfig",
    "AdaptiveState",
    "rbf_kernel",
    "rbf_kernel_grad",
    "pairwise_sq_dists",
    "median_bandwidth",
    "svgd_direction",
    "step",
    "run",
]

BANDWIDTH_FALLBACK = 1.0


@dataclass(frozen=True)
class ParticleEnsemble:
    particles: np.ndarray  # (n, P)
    shape: NetworkShape | None = None

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("an ensemble needs at least one particle")
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("non-finite particle values")
        if self.shape is not None and p.shape[1] != self.shape.n_params:
            raise ValueError(f"particles of length {p.shape[1]} do not fit {self.shape}")
        object.__setattr__(self, "particles", p)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i) -> np.ndarray:
        return self.particles[i]

    def subset(self, idx) -> "ParticleEnsemble":
        return replace(self, particles=self.particles[np.atleast_1d(idx)])


@dataclass(frozen=True)
class SVGDConfig:
    gamma: float = 0.01
    step_size: float = 0.05
    step_mode: str = "constant"  # constant | adaptive
    bandwidth: float | None = None
    adaptive_init: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.step_mode not in ("constant", "adaptive"):
            raise ValueError(f"unknown step_mode {self.step_mode!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth override must be > 0")
        if not self.adaptive_init > 0:
            raise ValueError("adaptive_init must be > 0")


@dataclass
class AdaptiveState:
    """Accumulated squared directions for adaptive stepping."""

    accumulator: np.ndarray | None = None
    steps: int = field(default=0)


def _check_h(h: float) -> None:
    if not h > 0:
        raise ValueError(f"bandwidth must be > 0, got {h}")


def rbf_kernel(a, b, h: float) -> float:
    _check_h(h)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("kernel arguments differ in length")
    d = a - b
    return float(np.exp(-np.dot(d.ravel(), d.ravel()) / (2.0 * h * h)))


def rbf_kernel_grad(a, b, h: float) -> np.ndarray:
    """∇_a k(a, b) = k(a, b) (b - a) / h²."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return rbf_kernel(a, b, h) * (b - a) / (h * h)


def pairwise_sq_dists(particles: np.ndarray) -> np.ndarray:
    # explicit differences: exact zeros on the diagonal and for coincident particles
    diff = particles[:, None, :] - particles[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(ensemble) -> float:
    """Median of the n(n-1)/2 pairwise Euclidean distances (1.0 if that is 0)."""
    particles = ensemble.particles if isinstance(ensemble, ParticleEnsemble) else np.atleast_2d(ensemble)
    n = particles.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least two particles; supply a bandwidth override")
    iu = np.triu_indices(n, k=1)
    h = float(np.median(np.sqrt(pairwise_sq_dists(particles)[iu])))
    return h if h > 0 else BANDWIDTH_FALLBACK


def _bandwidth(particles: np.ndarray, config: SVGDConfig) -> float:
    if config.bandwidth is not None:
        return config.bandwidth
    if particles.shape[0] < 2:
        # the kernel is identically 1 for a single particle
        return BANDWIDTH_FALLBACK
    return median_bandwidth(particles)


def svgd_direction(ensemble, loss_grads, config: SVGDConfig) -> np.ndarray:
    """Per-particle update directions, shape ``(n, P)``."""
    particles = ensemble.particles if isinstance(ensemble, ParticleEnsemble) else np.atleast_2d(ensemble)
    grads = np.atleast_2d(np.asarray(loss_grads, dtype=np.float64))
    if grads.shape != particles.shape:
        raise ValueError(f"gradients {grads.shape} do not match particles {particles.shape}")
    n = particles.shape[0]
    h = _bandwidth(particles, config)
    K = np.exp(-pairwise_sq_dists(particles) / (2.0 * h * h))  # symmetric, K[j, i] = k(θ_j, θ_i)
    drive = K.T @ grads
    # Σ_j ∇_{θ_j} k(θ_j, θ_i) = Σ_j K_ji (θ_i - θ_j) / h²
    kernel_grad_sum = (K.sum(axis=0)[:, None] * particles - K.T @ particles) / (h * h)
    return drive - (config.gamma / n) * kernel_grad_sum


def step(ensemble: ParticleEnsemble, directions, config: SVGDConfig,
         state: AdaptiveState | None = None, scale: float = 1.0) -> ParticleEnsemble:
    """Apply ``θ_i ← θ_i - ε φ_i``.

    Adaptive mode divides elementwise by the square root of the running sum of
    squared past directions (seeded with ``adaptive_init``), so its first step
    matches constant mode when ``adaptive_init == 1``. ``scale`` multiplies the
    step size (schedules).
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if directions.shape != ensemble.particles.shape:
        raise ValueError("directions do not match the ensemble")
    lr = config.step_size * scale
    if config.step_mode == "constant":
        update = lr * directions
    else:
        if state is None:
            raise ValueError("adaptive stepping needs an AdaptiveState")
        if state.accumulator is None:
            state.accumulator = np.full(directions.shape, config.adaptive_init)
        update = lr * directions / np.sqrt(state.accumulator)
        state.accumulator = state.accumulator + directions * directions
        state.steps += 1
    return replace(ensemble, particles=ensemble.particles - update)


def run(particles, grad_fn, config: SVGDConfig, steps: int, state: AdaptiveState | None = None) -> np.ndarray:
    """Iterate SVGD on raw particles ``(n, d)``; ``grad_fn`` maps particles to objective gradients."""
    ens = ParticleEnsemble(np.array(particles, dtype=np.float64))
    state = state if state is not None else AdaptiveState()
    for _ in range(steps):
        ens = step(ens, svgd_direction(ens, grad_fn(ens.particles), config), config, state)
    return ens.particles
