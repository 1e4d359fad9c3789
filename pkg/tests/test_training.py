import struct

import numpy as np
import pytest

from igbnn import attacks, data, network, training
from igbnn.attacks import AttackConfig
from igbnn.infogain import IGConfig
from igbnn.svgd import ParticleEnsemble, SVGDConfig
from igbnn.tensor import Recording
from igbnn.training import Checkpoint, CheckpointError, TrainConfig


def small_config(**kw):
    base = dict(epochs=2, batch_size=25, n_particles=3, hidden=(6,),
                svgd=SVGDConfig(gamma=0.5, step_size=0.05),
                attack=AttackConfig(eps=0.1, alpha=0.025, steps=3),
                eval_attack=AttackConfig(eps=0.1, alpha=0.025, steps=3),
                ig=IGConfig(lam=5.0), seed=11)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def moons():
    return data.gen_two_moons(100, 0.1, 4)


class TestSeeds:
    def test_labels_independent(self):
        seeds = {training.derive_seed(0, k) for k in training.SEED_LABELS}
        assert len(seeds) == len(training.SEED_LABELS)
        assert training.derive_seed(0, "init") != training.derive_seed(1, "init")
        assert training.derive_seed(5, "attack") == training.derive_seed(5, "attack")


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.n_particles, cfg.epochs, cfg.ig.lam) == (10, 300, 5.0)

    def test_effective_modes(self):
        cfg = small_config()
        assert cfg.effective() == cfg
        so = small_config(mode="svgd_only").effective()
        assert so.ig.lam == 0.0 and so.n_particles == 3
        pa = small_config(mode="plain_adv").effective()
        assert (pa.n_particles, pa.ig.lam, pa.svgd.gamma) == (1, 0.0, 0.0)
        inv = small_config(mode="invert_ig").effective()
        assert inv.ig.lam == -5.0

    @pytest.mark.parametrize("kw", [dict(epochs=-1), dict(batch_size=0), dict(n_particles=0),
                                    dict(mode="bogus"), dict(schedule="step"), dict(prior_weight=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_config(**kw)

    def test_negative_lambda_needs_invert(self):
        with pytest.raises(ValueError):
            small_config(ig=IGConfig(lam=-1.0, allow_negative=True))


class TestTrain:
    def test_zero_epochs_returns_init(self, moons):
        cfg = small_config(epochs=0)
        report, ens = training.train(moons, cfg)
        assert report.records == []
        shape = cfg.network_shape(2, 2)
        init = training.init_ensemble(shape, 3, training.derive_seed(11, "init"))
        np.testing.assert_array_equal(ens.particles, init.particles)

    def test_init_particles_distinct(self):
        ens = training.init_ensemble(network.NetworkShape((2, 4, 2)), 4, 0)
        assert len({p.tobytes() for p in ens.particles}) == 4

    def test_deterministic(self, moons):
        cfg = small_config()
        r1, e1 = training.train(moons, cfg)
        r2, e2 = training.train(moons, cfg)
        assert e1.particles.tobytes() == e2.particles.tobytes()
        assert [r.to_json() for r in r1.records] == [r.to_json() for r in r2.records]

    def test_seed_matters(self, moons):
        _, e1 = training.train(moons, small_config(epochs=1))
        _, e2 = training.train(moons, small_config(epochs=1, seed=12))
        assert not np.array_equal(e1.particles, e2.particles)

    def test_loss_accounting(self, moons):
        seen = []

        def hook(epoch, b, ens, x_adv, terms):
            seen.append((terms.total.item(), terms.ce.item(), terms.penalty.item()))

        report, _ = training.train(moons, small_config(epochs=1), on_step=hook)
        assert len(seen) == 4
        for total, ce, pen in seen:
            assert total == pytest.approx(ce + 5.0 * pen, abs=1e-10)
        rec = report.records[0]
        assert rec.loss_total == pytest.approx(rec.loss_ce + 5.0 * rec.loss_penalty, abs=1e-10)

    def test_adversarials_feasible(self, moons):
        def hook(epoch, b, ens, x_adv, terms):
            assert np.all(x_adv >= 0) and np.all(x_adv <= 1)

        training.train(moons, small_config(epochs=1), on_step=hook)

    def test_svgd_only_has_no_penalty_contribution(self, moons):
        report, _ = training.train(moons, small_config(epochs=1, mode="svgd_only"))
        assert report.records[0].loss_total == pytest.approx(report.records[0].loss_ce, abs=1e-12)

    def test_plain_adv_matches_reference_loop(self, moons):
        cfg = small_config(mode="plain_adv", epochs=2)
        _, ens = training.train(moons, cfg)
        eff = cfg.effective()
        shape = eff.network_shape(2, 2)
        theta = training.init_ensemble(shape, 1, training.derive_seed(cfg.seed, "init")).particles[0]
        shuffle = training.derive_seed(cfg.seed, "shuffle")
        attack_seq = np.random.SeedSequence(training.derive_seed(cfg.seed, "attack"))
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([attack_seq.entropy, epoch])
            for xb, yb in data.batches(moons, cfg.batch_size, shuffle, epoch):
                x_adv = attacks.pgd(shape, theta, xb, yb, cfg.attack, rng=rng).x_adv
                rec = Recording()
                leaf = rec.leaf(theta)
                (g,) = rec.grad(network.cross_entropy(network.forward(shape, leaf, x_adv), yb), [leaf])
                theta = theta - cfg.svgd.step_size * g
        assert ens.particles[0].tobytes() == theta.tobytes()

    def test_cosine_schedule_differs(self, moons):
        _, a = training.train(moons, small_config(epochs=2))
        _, b = training.train(moons, small_config(epochs=2, schedule="cosine"))
        assert not np.array_equal(a.particles, b.particles)

    def test_eval_every_fills_metrics(self, moons):
        report, _ = training.train(moons, small_config(epochs=2, eval_every=1), val=moons)
        for r in report.records:
            assert r.robust_accuracy is not None and r.bound_rhs >= r.gap - 1e-9

    def test_resume_equivalent(self, moons):
        for mode in ("constant", "adaptive"):
            cfg = small_config(epochs=3, svgd=SVGDConfig(gamma=0.5, step_size=0.05, step_mode=mode))
            _, full = training.train(moons, cfg)
            saved = []
            training.train(moons, small_config(epochs=3, svgd=cfg.svgd),
                           on_epoch=lambda rec, ck: saved.append(training.encode_checkpoint(ck)))
            ck = training.decode_checkpoint(saved[0])
            assert ck.epoch == 1
            _, resumed = training.train(moons, cfg, resume=ck)
            assert resumed.particles.tobytes() == full.particles.tobytes()

    def test_resume_shape_mismatch(self, moons):
        ens = training.init_ensemble(network.NetworkShape((2, 9, 2)), 3, 0)
        with pytest.raises(ValueError):
            training.train(moons, small_config(), resume=Checkpoint(ens, 0))

    def test_non_finite_aborts(self, moons):
        cfg = small_config(epochs=1, svgd=SVGDConfig(gamma=0.5, step_size=1e300))
        with pytest.raises(training.TrainingAborted) as info:
            training.train(moons, cfg)
        assert info.value.record["error"] == "non_finite"


class TestCheckpoint:
    def _ck(self, acc=True):
        shape = network.NetworkShape((2, 4, 3))
        parts = np.random.default_rng(0).normal(size=(2, shape.n_params))
        return Checkpoint(ParticleEnsemble(parts, shape), 7, np.abs(parts) + 1 if acc else None)

    @pytest.mark.parametrize("acc", [True, False])
    def test_round_trip(self, acc):
        ck = self._ck(acc)
        buf = training.encode_checkpoint(ck)
        back = training.decode_checkpoint(buf)
        assert back.epoch == 7 and back.ensemble.shape == ck.ensemble.shape
        assert back.ensemble.particles.tobytes() == ck.ensemble.particles.tobytes()
        if acc:
            assert back.accumulator.tobytes() == ck.accumulator.tobytes()
        else:
            assert back.accumulator is None
        assert training.encode_checkpoint(back) == buf

    def test_file_helpers(self, tmp_path):
        ck = self._ck()
        training.checkpoint(ck.ensemble, tmp_path / "c.igck", 3, ck.accumulator)
        assert training.restore(tmp_path / "c.igck").epoch == 3

    def test_header(self):
        buf = training.encode_checkpoint(self._ck())
        magic, version, flags, epoch, length = struct.unpack_from("<4sHHII", buf)
        assert (magic, version, flags, epoch, length) == (b"IGCK", 1, 1, 7, len(buf))

    @pytest.mark.parametrize("mutate", ["magic", "flip", "truncate", "extend"])
    def test_corruption(self, mutate):
        buf = bytearray(training.encode_checkpoint(self._ck()))
        if mutate == "magic":
            buf[:4] = b"NOPE"
        elif mutate == "flip":
            buf[40] ^= 0x01
        elif mutate == "truncate":
            buf = buf[:-9]
        else:
            buf += b"\0"
        with pytest.raises(CheckpointError, match="corrupt checkpoint"):
            training.decode_checkpoint(bytes(buf))
