"""Experiment configuration: INI sections, validation and canonical echo.

Every key has a default, so an empty file is a valid config. Numbers accept
fractions (``eps = 8/255``). ``echo`` writes every key in a fixed order with
round-trippable floats; ``parse(echo(cfg)) == cfg``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from . import data as data_mod
from .attacks import AttackConfig
from .data import LabeledDataset
from .evaluation import eps_grid
from .infogain import IGConfig
from .svgd import SVGDConfig
from .training import TrainConfig, derive_seed

__all__ = ["ConfigError", "DataSpec", "EvalSpec", "ExperimentConfig", "SCHEMA", "parse", "parse_file", "echo",
           "digest", "apply_overrides", "build_datasets"]


class ConfigError(ValueError):
    pass


def _num(s: str) -> float:
    return float(Fraction(s.strip()))


def _int(s: str) -> int:
    v = Fraction(s.strip())
    if v.denominator != 1:
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(_int(p) for p in s.split(",") if p.strip())


def _str(s: str) -> str:
    return s.strip()


def _bandwidth(s: str):
    return None if s.strip().lower() == "median" else _num(s)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "median"
    return str(v)


# section -> key -> parser; order here is the canonical echo order
SCHEMA: dict[str, dict] = {
    "data": {"source": _str, "path": _str, "train_count": _int, "test_count": _int, "noise": _num,
             "classes": _int, "spread": _num, "test_fraction": _num},
    "network": {"hidden": _ints, "activation": _str},
    "svgd": {"n_particles": _int, "gamma": _num, "step_size": _num, "step_mode": _str, "bandwidth": _bandwidth,
             "adaptive_init": _num},
    "attack": {"norm": _str, "eps": _num, "alpha": _num, "steps": _int, "random_start": _bool},
    "ig": {"lam": _num, "entropy_floor": _num, "penalty": _str},
    "train": {"epochs": _int, "batch_size": _int, "seed": _int, "mode": _str, "schedule": _str,
              "prior_weight": _num, "eval_every": _int},
    "eval": {"eps": _num, "alpha": _num, "steps": _int, "eps_grid": _str, "query_budget": _int,
             "transfer_eps": _num, "threads": _int},
}


@dataclass(frozen=True)
class DataSpec:
    source: str = "two_moons"  # two_moons | blobs | file
    path: str = ""
    train_count: int = 800
    test_count: int = 1000
    noise: float = 0.15
    classes: int = 3
    spread: float = 0.1
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.source not in ("two_moons", "blobs", "file"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "file" and not self.path:
            raise ValueError("data.path is required for source = file")
        if self.train_count < 2 or self.test_count < 1:
            raise ValueError("train_count must be >= 2 and test_count >= 1")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class EvalSpec:
    eps: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 20
    eps_grid: str = "0:0.07:0.005"
    query_budget: int = 1000
    transfer_eps: float = 0.015
    threads: int = 1

    def __post_init__(self):
        eps_grid(self.eps_grid)
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.transfer_eps < 0:
            raise ValueError("transfer_eps must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)

    @property
    def eval_attack(self) -> AttackConfig:
        return self.train.eval_attack

    @property
    def eps_list(self) -> list[float]:
        return eps_grid(self.eval.eps_grid)

    def values(self) -> dict[str, dict]:
        t, s, a, g = self.train, self.train.svgd, self.train.attack, self.train.ig
        d, e = self.data, self.eval
        return {
            "data": {k: getattr(d, k) for k in SCHEMA["data"]},
            "network": {"hidden": t.hidden, "activation": t.activation},
            "svgd": {"n_particles": t.n_particles, "gamma": s.gamma, "step_size": s.step_size,
                     "step_mode": s.step_mode, "bandwidth": s.bandwidth, "adaptive_init": s.adaptive_init},
            "attack": {"norm": a.norm, "eps": a.eps, "alpha": a.alpha, "steps": a.steps,
                       "random_start": a.random_start},
            "ig": {"lam": g.lam, "entropy_floor": g.entropy_floor, "penalty": g.penalty},
            "train": {"epochs": t.epochs, "batch_size": t.batch_size, "seed": t.seed, "mode": t.mode,
                      "schedule": t.schedule, "prior_weight": t.prior_weight, "eval_every": t.eval_every},
            "eval": {k: getattr(e, k) for k in SCHEMA["eval"]},
        }


def _build(v: dict[str, dict]) -> ExperimentConfig:
    n, s, a, g, t, e = (v[k] for k in ("network", "svgd", "attack", "ig", "train", "eval"))
    svgd = SVGDConfig(gamma=s["gamma"], step_size=s["step_size"], step_mode=s["step_mode"],
                      bandwidth=s["bandwidth"], adaptive_init=s["adaptive_init"])
    attack = AttackConfig(norm=a["norm"], eps=a["eps"], alpha=a["alpha"], steps=a["steps"],
                          random_start=a["random_start"])
    eval_attack = replace(attack, eps=e["eps"], alpha=e["alpha"], steps=e["steps"], query_budget=e["query_budget"])
    ig = IGConfig(lam=g["lam"], entropy_floor=g["entropy_floor"], penalty=g["penalty"],
                  allow_negative=t["mode"] == "invert_ig")
    train = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], n_particles=s["n_particles"],
                        hidden=n["hidden"], svgd=svgd, attack=attack, eval_attack=eval_attack, ig=ig,
                        seed=t["seed"], eval_every=t["eval_every"], mode=t["mode"], schedule=t["schedule"],
                        prior_weight=t["prior_weight"], activation=n["activation"])
    return ExperimentConfig(DataSpec(**v["data"]), train, EvalSpec(**e))


DEFAULTS = ExperimentConfig().values()


def apply_overrides(raw: dict[str, dict[str, str]], overrides) -> None:
    """Apply ``section.key=value`` strings in place."""
    for item in overrides or ():
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        raw.setdefault(section, {})[key] = value


def parse(text: str, overrides=None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=(";",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    raw = {sec: dict(cp[sec]) for sec in cp.sections()}
    apply_overrides(raw, overrides)
    values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
    for sec, keys in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, text_value in keys.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            try:
                values[sec][key] = SCHEMA[sec][key](text_value)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {text_value!r} ({exc})") from exc
    try:
        return _build(values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_file(path, overrides=None) -> ExperimentConfig:
    return parse(Path(path).read_text(), overrides)


def echo(cfg: ExperimentConfig) -> str:
    lines = []
    for sec, keys in cfg.values().items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in keys.items())
        lines.append("")
    return "\n".join(lines)


def digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(echo(cfg).encode()).hexdigest()[:16]


def build_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) from the data section; generators draw from the data seed."""
    d = cfg.data
    seed = derive_seed(cfg.train.seed, "data")
    if d.source == "two_moons":
        return (data_mod.gen_two_moons(d.train_count, d.noise, [seed, 0]),
                replace(data_mod.gen_two_moons(d.test_count, d.noise, [seed, 1]), split="test"))
    if d.source == "blobs":
        return (data_mod.gen_gaussian_blobs(d.train_count, d.classes, d.spread, [seed, 0]),
                replace(data_mod.gen_gaussian_blobs(d.test_count, d.classes, d.spread, [seed, 1]), split="test"))
    path = Path(d.path)
    full = data_mod.load_csv(path) if path.suffix == ".csv" else data_mod.load_dataset(path)
    parts = data_mod.split(full, {"train": 1 - d.test_fraction, "test": d.test_fraction},
                           derive_seed(cfg.train.seed, "split"))
    return parts["train"], parts["test"]
