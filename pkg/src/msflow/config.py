"""Run configuration files.

Plain INI text with sections ``[run]``, ``[schedule]``, ``[model]``,
``[train]``, optional per-stage overrides ``[train.stageK]`` and
``[sampler]``. Intervals are written finest stage first as
``start:end`` pairs, e.g. ``intervals = 0.6:1.0, 0.0:1.0``.
"""

import configparser
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .inference import SamplerConfig
from .model import Architecture
from .schedule import new_schedule
from .training import TrainConfig

__all__ = ["RunConfig", "parse_intervals", "stage_seed"]

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name not in ("betas", "seed")}
COARSE_GRAD_CLIP = 0.01


def parse_intervals(text):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        start, sep, end = item.partition(":")
        if not sep:
            raise ValueError(f"interval {item!r} is not of the form start:end")
        out.append((float(start), float(end)))
    return out


def stage_seed(seed, stage):
    """Independent integer seed for one stage, derived from the run seed."""
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


def _convert(value, kind):
    if value.strip().lower() in ("none", ""):
        return None
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value.strip()


@dataclass
class RunConfig:
    n_stages: int = 2
    ratio: int = 4
    intervals: list = field(default_factory=lambda: [(0.6, 1.0), (0.0, 1.0)])
    n_points: int = 2048
    arch: Architecture = field(default_factory=Architecture)
    train: dict = field(default_factory=dict)
    stage_train: dict = field(default_factory=dict)
    nfe: tuple = (400, 1000)
    prior_variance: str = "scaled"
    seed: int = 0
    store: str = "store"

    def __post_init__(self):
        self.schedule = new_schedule(self.n_stages, self.ratio, self.intervals, self.n_points)
        self.sampler()

    def train_config(self, stage):
        """Training settings for ``stage``: defaults, ``[train]``, then ``[train.stageK]``."""
        kw = {}
        if stage == self.schedule.coarsest and self.n_stages > 1:
            kw["grad_clip"] = COARSE_GRAD_CLIP
        kw.update(self.train)
        kw.update(self.stage_train.get(stage, {}))
        kw["seed"] = stage_seed(self.seed, stage)
        return TrainConfig(**kw)

    def sampler(self, nfe=None):
        return SamplerConfig(nfe_per_stage=tuple(nfe or self.nfe), prior_variance=self.prior_variance,
                             seed=stage_seed(self.seed, -1 % 2**31))

    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kw = {}
        if cp.has_section("run"):
            run = cp["run"]
            if "seed" in run:
                kw["seed"] = run.getint("seed")
            if "store" in run:
                kw["store"] = run["store"]
        if cp.has_section("schedule"):
            sch = cp["schedule"]
            for key in ("stages", "ratio", "n_points"):
                if key in sch:
                    kw["n_stages" if key == "stages" else key] = sch.getint(key)
            if "intervals" in sch:
                kw["intervals"] = parse_intervals(sch["intervals"])
        if cp.has_section("model"):
            m = cp["model"]
            kw["arch"] = Architecture(
                hidden=m.getint("hidden", 64),
                time_dim=m.getint("time_dim", 32),
                n_classes=m.getint("n_classes", 0),
                max_freq=m.getfloat("max_freq", 100.0),
            )
        kw["train"] = cls._train_section(cp, "train")
        stage_train = {}
        for section in cp.sections():
            if section.startswith("train.stage"):
                stage_train[int(section[len("train.stage"):])] = cls._train_section(cp, section)
        kw["stage_train"] = stage_train
        if cp.has_section("sampler"):
            s = cp["sampler"]
            if "nfe" in s:
                kw["nfe"] = tuple(int(v) for v in s["nfe"].split(","))
            if "prior_variance" in s:
                kw["prior_variance"] = s["prior_variance"].strip()
        return cls(**kw)

    @staticmethod
    def _train_section(cp, name):
        if not cp.has_section(name):
            return {}
        out = {}
        for key, value in cp[name].items():
            if key not in _TRAIN_KEYS:
                raise ValueError(f"unknown key {key!r} in [{name}]")
            out[key] = _convert(value, _TRAIN_KEYS[key])
        return out

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def with_intervals(self, intervals):
        return replace(self, intervals=list(intervals))

    def to_text(self):
        """Fully resolved configuration, including defaults, in the file format."""
        lines = ["[run]", f"seed = {self.seed}", f"store = {self.store}", "",
                 "[schedule]", f"stages = {self.n_stages}", f"ratio = {self.ratio}",
                 "intervals = " + ", ".join(f"{s:g}:{e:g}" for s, e in self.schedule.intervals),
                 f"n_points = {self.n_points}", "",
                 "[model]", f"hidden = {self.arch.hidden}", f"time_dim = {self.arch.time_dim}",
                 f"n_classes = {self.arch.n_classes}", f"max_freq = {self.arch.max_freq:g}", ""]
        for k in range(self.n_stages):
            tc = self.train_config(k)
            lines.append(f"[train.stage{k}]")
            for key in _TRAIN_KEYS:
                value = getattr(tc, key)
                lines.append(f"{key} = {'none' if value is None else value}")
            lines.append("")
        lines += ["[sampler]", "nfe = " + ", ".join(map(str, self.nfe)),
                  f"prior_variance = {self.prior_variance}"]
        return "\n".join(lines) + "\n"
