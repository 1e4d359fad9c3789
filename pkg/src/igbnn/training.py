"""Adversarial SVGD training of particle ensembles with the IG penalty.

Each mini-batch: craft EoT-PGD adversarials against the current ensemble,
differentiate L_IG with respect to every particle (adversarials are treated
as data), then take one SVGD step.

Modes:
    ig_bnn     L_IG with the configured λ
    svgd_only  λ = 0
    plain_adv  one particle, λ = 0, γ = 0 (standard adversarial training)
    invert_ig  L_IG with -|λ| (the IG mismatch is maximised)
"""

from __future__ import annotations

import math
import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import attacks, evaluation, network, svgd
from .attacks import AttackConfig
from .data import LabeledDataset, batches
from .evaluation import MetricsRecord
from .infogain import IGConfig, l_ig
from .network import NetworkShape
from .svgd import AdaptiveState, ParticleEnsemble, SVGDConfig
from .tensor import NonFiniteError, Recording

__all__ = [
    "MODES",
    "TrainConfig",
    "TrainReport",
    "TrainingAborted",
    "CheckpointError",
    "Checkpoint",
    "derive_seed",
    "init_ensemble",
    "train",
    "checkpoint",
    "restore",
]

MODES = ("ig_bnn", "svgd_only", "plain_adv", "invert_ig")
SEED_LABELS = {"data": 1, "init": 2, "attack": 3, "shuffle": 4, "split": 5, "eval": 6}
ACCOUNTING_TOL = 1e-10


def derive_seed(root: int, label: str) -> int:
    """Independent child seed of ``root`` for a named randomness consumer."""
    ss = np.random.SeedSequence([int(root), SEED_LABELS[label]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 100
    n_particles: int = 10
    hidden: tuple[int, ...] = (16, 16)
    svgd: SVGDConfig = field(default_factory=SVGDConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=10))
    eval_attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=20))
    ig: IGConfig = field(default_factory=IGConfig)
    seed: int = 0
    eval_every: int = 0
    mode: str = "ig_bnn"
    schedule: str = "constant"  # constant | cosine
    prior_weight: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be >= 0")
        if self.ig.lam < 0 and self.mode != "invert_ig":
            raise ValueError("negative lambda requires mode invert_ig")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def effective(self) -> "TrainConfig":
        """Config with the mode's fixed settings applied."""
        if self.mode == "plain_adv":
            return replace(self, n_particles=1, ig=replace(self.ig, lam=0.0),
                           svgd=replace(self.svgd, gamma=0.0))
        if self.mode == "svgd_only":
            return replace(self, ig=replace(self.ig, lam=0.0))
        if self.mode == "invert_ig":
            return replace(self, ig=replace(self.ig, lam=-abs(self.ig.lam), allow_negative=True))
        return self

    def network_shape(self, dim: int, n_classes: int) -> NetworkShape:
        return NetworkShape((dim, *self.hidden, n_classes), self.activation)


@dataclass
class TrainReport:
    records: list[MetricsRecord] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


def init_ensemble(shape: NetworkShape, n: int, seed: int) -> ParticleEnsemble:
    """``n`` He-initialised particles with distinct derived seeds."""
    particles = [network.init_params(shape, np.random.SeedSequence([seed, i])) for i in range(n)]
    return ParticleEnsemble(np.stack(particles), shape)


def _lr_scale(schedule: str, epoch: int, epochs: int) -> float:
    if schedule == "cosine" and epochs > 0:
        return 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    return 1.0


@dataclass
class Checkpoint:
    ensemble: ParticleEnsemble
    epoch: int = 0
    accumulator: np.ndarray | None = None


StepHook = Callable[[int, int, ParticleEnsemble, np.ndarray, object], None]


def train(dataset: LabeledDataset, config: TrainConfig, val: LabeledDataset | None = None,
          resume: Checkpoint | None = None, on_step: StepHook | None = None,
          on_epoch: Callable[[MetricsRecord, "Checkpoint"], None] | None = None,
          ) -> tuple[TrainReport, ParticleEnsemble]:
    """Run the training loop; returns the per-epoch report and final ensemble.

    ``on_step(epoch, batch_index, ensemble_before, x_adv, terms)`` is called
    after each batch's objective is evaluated and before the particle update.
    """
    cfg = config.effective()
    shape = cfg.network_shape(dataset.dim, dataset.n_classes)
    if resume is not None:
        ensemble, start_epoch = resume.ensemble, resume.epoch
        if ensemble.shape != shape:
            raise ValueError(f"checkpoint shape {ensemble.shape} does not match {shape}")
        state = AdaptiveState(None if resume.accumulator is None else resume.accumulator.copy())
    else:
        ensemble = init_ensemble(shape, cfg.n_particles, derive_seed(cfg.seed, "init"))
        start_epoch = 0
        state = AdaptiveState()
    if ensemble.n != cfg.n_particles:
        raise ValueError(f"ensemble has {ensemble.n} particles, config wants {cfg.n_particles}")
    report = TrainReport()
    shuffle_seed = derive_seed(cfg.seed, "shuffle")
    attack_seq = np.random.SeedSequence(derive_seed(cfg.seed, "attack"))
    lam = cfg.ig.lam
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        scale = _lr_scale(cfg.schedule, epoch, cfg.epochs)
        attack_rng = np.random.default_rng([attack_seq.entropy, epoch])
        sums = np.zeros(3)
        seen = 0
        for b, (xb, yb) in enumerate(batches(dataset, cfg.batch_size, shuffle_seed, epoch)):
            try:
                x_adv = attacks.eot_pgd(ensemble, xb, yb, cfg.attack, rng=attack_rng).x_adv
                rec = Recording()
                theta = rec.leaf(ensemble.particles)
                terms = l_ig(shape, theta, xb, x_adv, yb, cfg.ig)
                (grad,) = rec.grad(terms.total, [theta])
                # per-particle objective gradient: the CE part becomes ∇ℓ_j, undivided by n
                grad = ensemble.n * grad
            except NonFiniteError as exc:
                raise TrainingAborted(str(exc), {"error": "non_finite", "epoch": epoch, "batch": b,
                                                 "detail": str(exc)}) from exc
            total, ce, pen = terms.total.item(), terms.ce.item(), terms.penalty.item()
            if abs(total - (ce + lam * pen)) > ACCOUNTING_TOL * max(1.0, abs(total)):
                raise AssertionError("loss accounting mismatch")
            if on_step is not None:
                on_step(epoch, b, ensemble, x_adv, terms)
            if cfg.prior_weight:
                grad = grad + cfg.prior_weight * ensemble.particles
            directions = svgd.svgd_direction(ensemble, grad, cfg.svgd)
            ensemble = svgd.step(ensemble, directions, cfg.svgd, state, scale)
            if not np.all(np.isfinite(ensemble.particles)):
                raise TrainingAborted("non-finite particles", {"error": "non_finite", "epoch": epoch, "batch": b})
            sums += len(yb) * np.array([total, ce, pen])
            seen += len(yb)
        loss = sums / seen
        record = MetricsRecord(tag="epoch", epoch=epoch, loss_total=float(loss[0]), loss_ce=float(loss[1]),
                               loss_penalty=float(loss[2]))
        if val is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            rep = evaluation.risk_report(ensemble, val, cfg.eval_attack, max(lam, 0.0))
            record.with_report(rep)
            record.eps = cfg.eval_attack.eps
        report.records.append(record)
        report.wall_clock.append(time.perf_counter() - t0)
        if on_epoch is not None:
            acc = None if state.accumulator is None else state.accumulator.copy()
            on_epoch(record, Checkpoint(ensemble, epoch + 1, acc))
    return report, ensemble


# Checkpoint layout (little-endian):
#   magic   4s  b"IGCK"
#   version u16 1
#   flags   u16 bit 0: adaptive accumulator present
#   epoch   u32 next epoch to run
#   length  u32 total file length including the trailing CRC
#   snapshot (network snapshot format)
#   accumulator f64 * n * P   (if flagged)
#   crc32   u32 over all preceding bytes
_CK_MAGIC = b"IGCK"
_CK_HEAD = struct.Struct("<4sHHII")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(ck: Checkpoint) -> bytes:
    ens = ck.ensemble
    snap = network.encode_snapshot(ens.shape, ens.particles)
    acc = b""
    if ck.accumulator is not None:
        acc = np.asarray(ck.accumulator, dtype="<f8").reshape(ens.particles.shape).tobytes()
    length = _CK_HEAD.size + len(snap) + len(acc) + 4
    body = _CK_HEAD.pack(_CK_MAGIC, 1, 1 if acc else 0, ck.epoch, length) + snap + acc
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _CK_HEAD.size + 4:
        raise CheckpointError("corrupt checkpoint: truncated header")
    magic, version, flags, epoch, length = _CK_HEAD.unpack_from(buf)
    if magic != _CK_MAGIC or version != 1:
        raise CheckpointError("corrupt checkpoint: bad magic or version")
    if len(buf) != length:
        raise CheckpointError(f"corrupt checkpoint: expected {length} bytes, found {len(buf)}")
    (crc,) = struct.unpack_from("<I", buf, length - 4)
    if zlib.crc32(buf[:length - 4]) != crc:
        raise CheckpointError("corrupt checkpoint: checksum mismatch")
    try:
        shape, particles, off = network.decode_snapshot(buf, _CK_HEAD.size)
    except network.SnapshotError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    acc = None
    if flags & 1:
        acc = np.frombuffer(buf, dtype="<f8", count=particles.size, offset=off).astype(np.float64)
        acc = acc.reshape(particles.shape)
    return Checkpoint(ParticleEnsemble(particles, shape), epoch, acc)


def checkpoint(ensemble: ParticleEnsemble, path, epoch: int = 0, accumulator: np.ndarray | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(Checkpoint(ensemble, epoch, accumulator)))


def restore(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
