"""Robustness metrics, empirical risks and the risk-gap upper bound.

Risks are expected misclassification under each particle's predictive
distribution, averaged over particles and instances:

    R     = mean_{θ, (x, y)} [1 - p(y | x, θ)]
    R_adv = same on x_adv (EoT-PGD)

The gap ``|R_adv - R|`` is bounded by

    1 - mean_x exp( mean_θ r_θ(x, x_adv) - λ |IG(x) - IG(x_adv)| ),
    r_θ = Σ_c p(c | x, θ) ln p(c | x_adv, θ)
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np

from . import attacks, network
from .attacks import AttackConfig
from .data import LabeledDataset
from .infogain import information_gain_batch
from .svgd import ParticleEnsemble

__all__ = [
    "MetricsRecord",
    "TransferMatrix",
    "BoundValue",
    "RiskReport",
    "ensemble_probs",
    "accuracy",
    "empirical_risk",
    "adversarial_risk",
    "risk_gap",
    "bound_rhs",
    "risk_report",
    "transfer_matrix",
    "robustness_curve",
    "evaluate_epoch",
    "eps_grid",
    "write_curve_csv",
    "read_curve_csv",
    "write_transfer_csv",
    "read_transfer_csv",
    "CURVE_HEADER",
]

CURVE_HEADER = ["epsilon", "accuracy"]
PROB_FLOOR = 1e-12


def _xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, LabeledDataset):
        return data.features, data.labels
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def ensemble_probs(ensemble: ParticleEnsemble, x) -> np.ndarray:
    """Per-particle predictive probabilities, ``(n, B, K)``."""
    return network.softmax_np(network.forward(ensemble.shape, ensemble.particles, x).data)


def accuracy(ensemble: ParticleEnsemble, data) -> float:
    """Accuracy of the argmax of the particle-mean predictive distribution."""
    x, y = _xy(data)
    pred = network.predict(ensemble_probs(ensemble, x).mean(axis=0))
    return float(np.mean(pred == y))


def _risk_from_probs(probs: np.ndarray, y: np.ndarray, estimator: str = "smooth") -> float:
    rows = np.arange(y.shape[0])
    if estimator == "smooth":
        return float(np.mean(1.0 - probs[:, rows, y]))
    if estimator == "argmax":
        return float(np.mean(network.predict(probs) != y[None, :]))
    raise ValueError(f"unknown risk estimator {estimator!r}")


def empirical_risk(ensemble: ParticleEnsemble, data, estimator: str = "smooth") -> float:
    x, y = _xy(data)
    return _risk_from_probs(ensemble_probs(ensemble, x), y, estimator)


def _eot_adversarials(ensemble, x, y, config: AttackConfig, rng=None) -> np.ndarray:
    if config.eps == 0 or config.steps == 0:
        return x.copy()
    return attacks.eot_pgd(ensemble, x, y, config, rng=rng).x_adv


def adversarial_risk(ensemble: ParticleEnsemble, data, config: AttackConfig, estimator: str = "smooth",
                     rng=None) -> float:
    x, y = _xy(data)
    x_adv = _eot_adversarials(ensemble, x, y, config, rng)
    return _risk_from_probs(ensemble_probs(ensemble, x_adv), y, estimator)


def risk_gap(ensemble: ParticleEnsemble, data, config: AttackConfig, rng=None) -> float:
    return abs(adversarial_risk(ensemble, data, config, rng=rng) - empirical_risk(ensemble, data))


class BoundValue(NamedTuple):
    value: float
    linearized: float


def _bound_from_probs(p_clean: np.ndarray, p_adv: np.ndarray, lam: float) -> BoundValue:
    r = np.sum(p_clean * np.log(np.maximum(p_adv, PROB_FLOOR)), axis=-1)  # (n, B)
    ig_gap = np.abs(information_gain_batch(p_clean) - information_gain_batch(p_adv))
    arg = r.mean(axis=0) - lam * ig_gap
    return BoundValue(float(1.0 - np.mean(np.exp(arg))), float(np.mean(-arg)))


def bound_rhs(ensemble: ParticleEnsemble, data, config: AttackConfig, lam: float, rng=None,
              x_adv: np.ndarray | None = None) -> BoundValue:
    """Upper bound on the risk gap, plus its exp-free surrogate ``mean(-arg)``."""
    if lam < 0:
        raise ValueError("the bound needs lambda >= 0")
    x, y = _xy(data)
    if x_adv is None:
        x_adv = _eot_adversarials(ensemble, x, y, config, rng)
    return _bound_from_probs(ensemble_probs(ensemble, x), ensemble_probs(ensemble, x_adv), lam)


@dataclass
class RiskReport:
    R: float
    R_adv: float
    gap: float
    bound_rhs: float
    bound_rhs_linearized: float
    R_argmax: float
    R_adv_argmax: float
    mean_ig_clean: float
    mean_ig_adv: float
    clean_accuracy: float
    robust_accuracy: float

    def bound_holds(self, tol: float = 1e-6) -> bool:
        return self.bound_rhs >= self.gap - tol


def risk_report(ensemble: ParticleEnsemble, data, config: AttackConfig, lam: float, rng=None) -> RiskReport:
    """All risk quantities from a single shared set of EoT-PGD adversarials."""
    x, y = _xy(data)
    x_adv = _eot_adversarials(ensemble, x, y, config, rng)
    p_clean = ensemble_probs(ensemble, x)
    p_adv = ensemble_probs(ensemble, x_adv)
    R = _risk_from_probs(p_clean, y)
    R_adv = _risk_from_probs(p_adv, y)
    bound = _bound_from_probs(p_clean, p_adv, lam)
    return RiskReport(
        R=R, R_adv=R_adv, gap=abs(R_adv - R),
        bound_rhs=bound.value, bound_rhs_linearized=bound.linearized,
        R_argmax=_risk_from_probs(p_clean, y, "argmax"),
        R_adv_argmax=_risk_from_probs(p_adv, y, "argmax"),
        mean_ig_clean=float(information_gain_batch(p_clean).mean()),
        mean_ig_adv=float(information_gain_batch(p_adv).mean()),
        clean_accuracy=float(np.mean(network.predict(p_clean.mean(axis=0)) == y)),
        robust_accuracy=float(np.mean(network.predict(p_adv.mean(axis=0)) == y)),
    )


@dataclass
class TransferMatrix:
    """Entry ``(s, t)``: accuracy of particle ``t`` on adversarials crafted against ``s``."""

    values: np.ndarray
    eps: float
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("transfer matrix must be square")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("transfer matrix entries must lie in [0, 1]")
        self.values = v

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def diagonal_is_row_min(self) -> np.ndarray:
        return np.diag(self.values) <= self.values.min(axis=1)


def transfer_matrix(ensemble: ParticleEnsemble, data, config: AttackConfig, threads: int = 1,
                    rng=None) -> TransferMatrix:
    """Cross-particle transfer of single-particle PGD adversarials."""
    if ensemble.n < 2:
        raise ValueError("a transfer matrix needs at least two particles")
    x, y = _xy(data)
    seeds = np.random.SeedSequence(rng if isinstance(rng, int) else None).spawn(ensemble.n) \
        if config.random_start else [None] * ensemble.n

    def row(s: int):
        batch = attacks.pgd(ensemble.shape, ensemble.particles[s], x, y, config,
                            rng=seeds[s], particle_index=s)
        if batch.provenance.get("attack") != "pgd" or batch.provenance.get("n_particles") != 1:
            raise AssertionError("transfer rows must come from single-particle PGD")
        probs = ensemble_probs(ensemble, batch.x_adv)
        return np.mean(network.predict(probs) == y[None, :], axis=1), batch.provenance

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(ensemble.n)))
    else:
        rows = [row(s) for s in range(ensemble.n)]
    return TransferMatrix(np.stack([r[0] for r in rows]), config.eps, [r[1] for r in rows])


def robustness_curve(ensemble: ParticleEnsemble, data, eps_list: Sequence[float], config: AttackConfig,
                     nested: bool = True, threads: int = 1, rng=None) -> list[tuple[float, float]]:
    """Ensemble accuracy under EoT-PGD at each budget.

    With ``nested`` an input counts as robust at ε only if it survived every
    smaller budget in the list too; any smaller-ball adversarial is feasible
    at ε, so the curve is non-increasing.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("epsilon list must be sorted ascending")
    x, y = _xy(data)

    def correct_at(eps: float) -> np.ndarray:
        cfg = _with_eps(config, eps)
        x_adv = _eot_adversarials(ensemble, x, y, cfg, rng)
        return network.predict(ensemble_probs(ensemble, x_adv).mean(axis=0)) == y

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            correct = list(pool.map(correct_at, eps_list))
    else:
        correct = [correct_at(e) for e in eps_list]
    out = []
    alive = np.ones(y.shape[0], dtype=bool)
    for eps, c in zip(eps_list, correct):
        alive = alive & c if nested else c
        out.append((eps, float(np.mean(alive))))
    return out


def _with_eps(config: AttackConfig, eps: float) -> AttackConfig:
    return replace(config, eps=eps)


def eps_grid(spec: str) -> list[float]:
    """Parse ``start:stop:step`` (inclusive) or a comma list into budgets.

    Grid points are ``start + k * step`` computed in exact rationals.
    """
    spec = spec.strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError(f"bad epsilon grid {spec!r}")
        start, stop, step = (Fraction(p.strip()) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"bad epsilon grid {spec!r}")
        count = int((stop - start) // step) + 1
        return [float(start + k * step) for k in range(count)]
    values = [float(Fraction(v.strip())) for v in spec.split(",") if v.strip()]
    if not values:
        raise ValueError("empty epsilon list")
    return values


_RECORD_UNIT = ("clean_accuracy", "robust_accuracy", "R", "R_adv", "R_argmax", "R_adv_argmax")


@dataclass
class MetricsRecord:
    tag: str
    epoch: int | None = None
    eps: float | None = None
    clean_accuracy: float | None = None
    robust_accuracy: float | None = None
    R: float | None = None
    R_adv: float | None = None
    gap: float | None = None
    bound_rhs: float | None = None
    bound_rhs_linearized: float | None = None
    R_argmax: float | None = None
    R_adv_argmax: float | None = None
    mean_ig_clean: float | None = None
    mean_ig_adv: float | None = None
    loss_total: float | None = None
    loss_ce: float | None = None
    loss_penalty: float | None = None
    robust_curve: list | None = None

    def __post_init__(self):
        for name in _RECORD_UNIT:
            v = getattr(self, name)
            if v is not None and not -1e-12 <= v <= 1 + 1e-12:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.gap is not None and self.gap < 0:
            raise ValueError("gap must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        raw = json.loads(line)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown metrics fields {sorted(unknown)}")
        return cls(**raw)

    def with_report(self, rep: RiskReport) -> "MetricsRecord":
        for k, v in asdict(rep).items():
            setattr(self, k, v)
        return self


def evaluate_epoch(ensemble: ParticleEnsemble, data, config: AttackConfig, lam: float = 0.0,
                   epoch: int | None = None, eps_list: Sequence[float] | None = None, rng=None) -> MetricsRecord:
    rec = MetricsRecord(tag="epoch" if epoch is not None else "eval", epoch=epoch, eps=config.eps)
    rec.with_report(risk_report(ensemble, data, config, max(lam, 0.0), rng=rng))
    if eps_list:
        rec.robust_curve = [list(p) for p in robustness_curve(ensemble, data, eps_list, config, rng=rng)]
    return rec


def write_curve_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for eps, acc in curve:
            w.writerow([repr(float(eps)), repr(float(acc))])


def read_curve_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != CURVE_HEADER:
        raise ValueError(f"unexpected curve header {rows[0]}")
    return [(float(a), float(b)) for a, b in rows[1:]]


def write_transfer_csv(tm: TransferMatrix, path) -> None:
    if np.any(tm.values < 0) or np.any(tm.values > 1):
        raise ValueError("transfer matrix entries must lie in [0, 1]")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source"] + [f"p{t}" for t in range(tm.n)])
        for s in range(tm.n):
            w.writerow([f"p{s}"] + [repr(float(v)) for v in tm.values[s]])


def read_transfer_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    n = len(rows) - 1
    if rows[0] != ["source"] + [f"p{t}" for t in range(n)]:
        raise ValueError(f"unexpected transfer header {rows[0]}")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])
