"""Command-line front end.

Commands: train, curve, attack, transfer, riskgap, gradcheck, gen-data.

Exit codes: 0 success, 1 check failed (gradcheck, bound violation),
2 invalid config or arguments, 3 numeric abort, 4 I/O or corrupt file.
On failure stderr carries exactly one JSON object ``{"error", "message", "exit"}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks, data, evaluation, gradcheck, network, training
from . import config as config_mod
from .config import ConfigError, ExperimentConfig
from .data import DatasetError
from .network import SnapshotError
from .tensor import NonFiniteError
from .training import CheckpointError, TrainingAborted, derive_seed

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
BOUND_TOL = 1e-6


class CommandError(Exception):
    def __init__(self, code: int, kind: str, message: str, extra: dict | None = None):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra or {}


def _load_config(args) -> ExperimentConfig:
    text = ""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise CommandError(EXIT_IO, "io", f"cannot read config: {exc}") from exc
    return config_mod.parse(text, args.set)


def _load_checkpoint(path) -> training.Checkpoint:
    try:
        return training.restore(path)
    except OSError as exc:
        raise CommandError(EXIT_IO, "io", f"cannot read checkpoint: {exc}") from exc


def _eval_setup(args):
    cfg = _load_config(args)
    ck = _load_checkpoint(args.checkpoint)
    _, test = config_mod.build_datasets(cfg)
    shape = ck.ensemble.shape
    if shape.input_dim != test.dim or shape.n_classes != test.n_classes:
        raise CommandError(EXIT_CONFIG, "shape_mismatch",
                           f"checkpoint expects {shape.input_dim} inputs / {shape.n_classes} classes, "
                           f"data has {test.dim} / {test.n_classes}")
    return cfg, ck.ensemble, test


def _prepare_out_dir(out: Path, overwrite: bool) -> None:
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise CommandError(EXIT_IO, "out_dir_not_empty", f"{out} is not empty (pass --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    for name in ("metrics.jsonl", "checkpoint.igck", "config.echo"):
        (out / name).unlink(missing_ok=True)


def _write_text(path: Path, text: str, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise CommandError(EXIT_IO, "exists", f"{path} exists (pass --overwrite)")
    path.write_text(text)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    resume = _load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    _prepare_out_dir(out, args.overwrite)
    (out / "config.echo").write_text(config_mod.echo(cfg))
    train_ds, test_ds = config_mod.build_datasets(cfg)
    metrics = out / "metrics.jsonl"
    metrics.touch()
    ck_path = out / "checkpoint.igck"
    tc = cfg.train.effective()
    init = training.init_ensemble(tc.network_shape(train_ds.dim, train_ds.n_classes), tc.n_particles,
                                  derive_seed(tc.seed, "init"))
    training.checkpoint(init, ck_path, 0)

    def on_epoch(record, ck):
        with open(metrics, "a") as fh:
            fh.write(record.to_json() + "\n")
        training.checkpoint(ck.ensemble, ck_path, ck.epoch, ck.accumulator)

    _, ensemble = training.train(train_ds, cfg.train, val=test_ds, resume=resume, on_epoch=on_epoch)
    final = evaluation.evaluate_epoch(ensemble, test_ds, cfg.eval_attack, tc.ig.lam,
                                      rng=derive_seed(tc.seed, "eval"))
    final.tag = "final"
    with open(metrics, "a") as fh:
        fh.write(final.to_json() + "\n")
    print(json.dumps({"out": str(out), "epochs": tc.epochs, "clean_accuracy": final.clean_accuracy,
                      "robust_accuracy": final.robust_accuracy}, sort_keys=True))
    return EXIT_OK


def _eps_list(args, cfg: ExperimentConfig) -> list[float]:
    return evaluation.eps_grid(args.eps) if args.eps else cfg.eps_list


def cmd_curve(args) -> int:
    cfg, ens, test = _eval_setup(args)
    eps_list = _eps_list(args, cfg)
    curve = evaluation.robustness_curve(ens, test, eps_list, cfg.eval_attack, threads=args.threads)
    if args.out:
        if Path(args.out).exists() and not args.overwrite:
            raise CommandError(EXIT_IO, "exists", f"{args.out} exists (pass --overwrite)")
        evaluation.write_curve_csv(curve, args.out)
    else:
        sys.stdout.write(",".join(evaluation.CURVE_HEADER) + "\n")
        for e, a in curve:
            sys.stdout.write(f"{e!r},{a!r}\n")
    if args.dump_adv:
        _dump_adversarials(ens, test, replace(cfg.eval_attack, eps=eps_list[-1]), args.dump_adv, args.overwrite)
    return EXIT_OK


def _dump_adversarials(ens, test, attack_cfg, path, overwrite) -> None:
    if Path(path).exists() and not overwrite:
        raise CommandError(EXIT_IO, "exists", f"{path} exists (pass --overwrite)")
    x_adv = attacks.eot_pgd(ens, test.features, test.labels, attack_cfg).x_adv
    adv = replace(test, features=x_adv, split="adversarial")
    data.save_dataset(adv, path)


def cmd_attack(args) -> int:
    cfg, ens, test = _eval_setup(args)
    eps = float(evaluation.eps_grid(args.eps)[0]) if args.eps else cfg.eval.eps
    acfg = replace(cfg.eval_attack, eps=eps)
    x, y = test.features, test.labels
    if args.method == "eot_pgd":
        x_adv = attacks.eot_pgd(ens, x, y, acfg).x_adv
    elif args.method == "fgsm":
        x_adv = attacks.fgsm(ens.shape, ens.particles, x, y, acfg).x_adv
    else:
        rng = np.random.default_rng(derive_seed(cfg.train.seed, "eval"))
        x_adv = attacks.square_attack(attacks.ensemble_oracle(ens), x, y, acfg, rng).x_adv
    acc = float(np.mean(network.predict(evaluation.ensemble_probs(ens, x_adv).mean(axis=0)) == y))
    record = {"method": args.method, "eps": eps, "robust_accuracy": acc,
              "clean_accuracy": evaluation.accuracy(ens, test), "config_digest": config_mod.digest(cfg)}
    print(json.dumps(record, sort_keys=True))
    if args.dump_adv:
        if Path(args.dump_adv).exists() and not args.overwrite:
            raise CommandError(EXIT_IO, "exists", f"{args.dump_adv} exists (pass --overwrite)")
        data.save_dataset(replace(test, features=x_adv, split="adversarial"), args.dump_adv)
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg, ens, test = _eval_setup(args)
    if ens.n < 2:
        raise CommandError(EXIT_CONFIG, "too_few_particles", "transfer needs at least two particles")
    eps = float(evaluation.eps_grid(args.eps)[0]) if args.eps else cfg.eval.transfer_eps
    tm = evaluation.transfer_matrix(ens, test, replace(cfg.eval_attack, eps=eps), threads=args.threads)
    if args.out:
        if Path(args.out).exists() and not args.overwrite:
            raise CommandError(EXIT_IO, "exists", f"{args.out} exists (pass --overwrite)")
        evaluation.write_transfer_csv(tm, args.out)
    else:
        sys.stdout.write(",".join(["source"] + [f"p{t}" for t in range(tm.n)]) + "\n")
        for s in range(tm.n):
            sys.stdout.write(",".join([f"p{s}"] + [repr(float(v)) for v in tm.values[s]]) + "\n")
    return EXIT_OK


def cmd_riskgap(args) -> int:
    cfg, ens, test = _eval_setup(args)
    eps = float(evaluation.eps_grid(args.eps)[0]) if args.eps else cfg.eval.eps
    lam = max(cfg.train.effective().ig.lam, 0.0)
    rep = evaluation.risk_report(ens, test, replace(cfg.eval_attack, eps=eps), lam)
    record = {"eps": eps, "lambda": lam, "R": rep.R, "R_adv": rep.R_adv, "gap": rep.gap,
              "bound_rhs": rep.bound_rhs, "bound_rhs_linearized": rep.bound_rhs_linearized,
              "mean_ig_clean": rep.mean_ig_clean, "mean_ig_adv": rep.mean_ig_adv,
              "R_argmax": rep.R_argmax, "R_adv_argmax": rep.R_adv_argmax,
              "clean_accuracy": rep.clean_accuracy, "robust_accuracy": rep.robust_accuracy,
              "config_digest": config_mod.digest(cfg), "bound_holds": rep.bound_holds(BOUND_TOL)}
    if not record["bound_holds"]:
        raise CommandError(EXIT_CHECK, "bound_violated",
                           f"bound_rhs {rep.bound_rhs} < gap {rep.gap} - {BOUND_TOL}", record)
    text = json.dumps(record, sort_keys=True)
    if args.out:
        _write_text(Path(args.out), text + "\n", args.overwrite)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(args.seed, inject=args.inject)
    for line in report.lines():
        print(line)
    if not report.passed:
        raise CommandError(EXIT_CHECK, "gradcheck_failed", f"failing ops: {', '.join(report.failed)}",
                           {"failed": report.failed})
    print("gradcheck: PASS")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        if args.kind == "two_moons":
            ds = data.gen_two_moons(args.count, args.noise, args.seed)
        else:
            ds = data.gen_gaussian_blobs(args.count, args.classes, args.spread, args.seed)
    except DatasetError as exc:
        # bad generator arguments, not a corrupt file
        raise CommandError(EXIT_CONFIG, "invalid", str(exc)) from exc
    out = Path(args.out)
    if out.exists() and not args.overwrite:
        raise CommandError(EXIT_IO, "exists", f"{out} exists (pass --overwrite)")
    if out.suffix == ".csv":
        data.save_csv(ds, out)
    else:
        data.save_dataset(ds, out)
    print(json.dumps({"out": str(out), "count": len(ds), "dim": ds.dim, "classes": ds.n_classes}))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError(EXIT_CONFIG, "usage", f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="igbnn", description="IG-regularised SVGD adversarial training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_checkpoint=True):
        sp.add_argument("--config", help="INI experiment config (defaults used when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads; 1 is deterministic")
        sp.add_argument("--overwrite", action="store_true")
        if needs_checkpoint:
            sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("train", help="train an ensemble")
    common(sp, needs_checkpoint=False)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("curve", help="robust accuracy over an epsilon grid")
    common(sp)
    sp.add_argument("--eps", help="start:stop:step or comma list (default: eval.eps_grid)")
    sp.add_argument("--out", help="CSV path (stdout when omitted)")
    sp.add_argument("--dump-adv", help="write adversarials at the largest epsilon as IGDS")
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("attack", help="robust accuracy under one attack")
    common(sp)
    sp.add_argument("--method", choices=("eot_pgd", "fgsm", "square"), default="eot_pgd")
    sp.add_argument("--eps")
    sp.add_argument("--dump-adv")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("transfer", help="cross-particle transfer matrix")
    common(sp)
    sp.add_argument("--eps")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("riskgap", help="risks, gap and bound as JSON")
    common(sp)
    sp.add_argument("--eps")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_riskgap)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--inject", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset (.igds or .csv)")
    sp.add_argument("--kind", choices=("two_moons", "blobs"), default="two_moons")
    sp.add_argument("--count", type=int, default=800)
    sp.add_argument("--noise", type=float, default=0.15)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--spread", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_gen_data)
    return p


def _fail(code: int, kind: str, message: str, extra: dict | None = None) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit": code, **(extra or {})},
                                sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CommandError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    if getattr(args, "threads", 1) < 1:
        return _fail(EXIT_CONFIG, "usage", "--threads must be >= 1")
    try:
        return args.func(args)
    except CommandError as exc:
        return _fail(exc.code, exc.kind, str(exc), exc.extra)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except TrainingAborted as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc), {"record": exc.record})
    except (NonFiniteError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (CheckpointError, SnapshotError, DatasetError) as exc:
        return _fail(EXIT_IO, "corrupt_input", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "invalid", str(exc))


if __name__ == "__main__":
    sys.exit(main())
