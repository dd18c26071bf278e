"""Flat ``key = value`` run configuration with dotted keys.

Every key has a typed default. Values are resolved in this order: built-in
defaults, the selected profile, a config file, then command-line overrides.
Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .adaptation import MixupConfig
from .data import BenchmarkSpec, DomainShiftSpec, SyntheticDomain
from .encoder import EncoderConfig
from .losses import LossWeights, MMDConfig, ScheduleConfig
from .trainer import ConfigError, ExperimentSpec, TrainConfig

PROFILES = ("desk", "paper")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str_list(text: str) -> list:
    return [p.strip() for p in text.split(",") if p.strip()]


def _float_list(text: str) -> list:
    return [float(p) for p in _str_list(text)]


def _int_list(text: str) -> list:
    return [int(p) for p in _str_list(text)]


def _rotation(text: str) -> tuple:
    """``lo:hi;lo:hi;lo:hi`` in degrees for the x, y and z axes."""
    parts = text.split(";")
    if len(parts) != 3:
        raise ValueError("rotation bias needs three 'lo:hi' ranges separated by ';'")
    return tuple(tuple(float(v) for v in p.split(":")) for p in parts)


@dataclass
class Key:
    name: str
    parse: object
    default: str
    help: str


def _shift_keys(domain: str, keep="1", jitter="0", occl="0", rot="0:0;0:0;0:0") -> list:
    return [
        Key(f"shift.{domain}.density_keep_fraction", float, keep, f"fraction of points kept ({domain})"),
        Key(f"shift.{domain}.jitter_sigma", float, jitter, f"Gaussian jitter std ({domain})"),
        Key(f"shift.{domain}.occlusion_fraction", float, occl, f"fraction removed by a planar cut ({domain})"),
        Key(f"shift.{domain}.rotation_bias", _rotation, rot, f"x;y;z rotation ranges in degrees ({domain})"),
    ]


KEYS = [
    Key("seed", int, "0", "master seed for data generation and training"),
    Key("out", str, "runs", "output directory"),
    Key("data.root", str, "data", "dataset root directory"),
    Key("data.source", str, "clean", "labelled source domain"),
    Key("data.targets", _str_list, "noisy,sparse", "unlabelled target domains, in order"),
    Key("data.classes", _str_list, "box,cylinder,cone,torus", "synthetic classes (primitive names)"),
    Key("data.per_class", int, "200", "training samples per class when generating"),
    Key("data.test_per_class", int, "50", "test samples per class when generating"),
    Key("data.stored_points", int, "1024", "points per cloud written to disk"),
    Key("data.num_points", int, "128", "points per cloud fed to the encoder"),
    *_shift_keys("clean"),
    *_shift_keys("noisy", jitter="0.03", rot="20:50;0:0;0:360"),
    *_shift_keys("sparse", keep="0.3", occl="0.4"),
    Key("train.learning_rate", float, "0.001", "AdamW learning rate"),
    Key("train.weight_decay", float, "0.0005", "decoupled weight decay"),
    Key("train.beta1", float, "0.9", "first-moment decay"),
    Key("train.beta2", float, "0.999", "second-moment decay"),
    Key("train.epochs", int, "30", "training epochs per fold"),
    Key("train.batch_size", int, "32", "samples per domain per step"),
    Key("train.precision", str, "32", "32 or 64 bit floats"),
    Key("train.augment_jitter", float, "0", "training-time jitter std (0 disables)"),
    Key("train.augment_rotate_z", _bool, "false", "random rotation about the gravity axis while training"),
    Key("train.eval_batch_size", int, "256", "batch size for evaluation"),
    Key("experiment.mode", str, "mtda", "mtda | stda | no_adaptation | supervised"),
    Key("experiment.folds", int, "3", "class-stratified folds of the training data"),
    Key("experiment.loss_terms", _str_list, "dc,mmd,mix", "active adversarial terms"),
    Key("experiment.grl_mu", float, "1", "gradient reversal coefficient"),
    Key("mixup.strategy", str, "MEnsA", "None | Sep | MEnsA | Factor | Concat | Inter"),
    Key("mixup.alpha", float, "2", "Beta(alpha, alpha) parameter of the mixing ratio"),
    Key("loss.lambda1", float, "5", "weight of the MMD term"),
    Key("loss.lambda2", float, "5", "weight of the domain-confusion term"),
    Key("loss.lambda3", float, "1.2", "weight of the mixup term"),
    Key("loss.zeta", float, "1", "weight of the combined adversarial term"),
    Key("loss.gamma", float, "1", "sharpness of the log-sum-exp aggregator"),
    Key("loss.aggregator", str, "lse", "lse (smooth max over the batch) or sum (batch mean)"),
    Key("schedule.s", float, "0.1", "eta at the first epoch"),
    Key("schedule.f", float, "0.9", "eta at the last epoch"),
    Key("mmd.bandwidths", _float_list, "", "fixed RBF bandwidths (empty: median heuristic)"),
    Key("mmd.median_factors", _float_list, "0.25,0.5,1,2,4", "multipliers of the median distance"),
    Key("encoder.point_mlp_widths", _int_list, "64,128,256", "per-point layer widths"),
    Key("encoder.embed_dim", int, "256", "embedding size d"),
    Key("encoder.attention_nodes", int, "4", "node-attention queries (0 disables)"),
    Key("encoder.feature_scale", float, "4", "embedding norm (0 leaves it free)"),
]
KEY_INDEX = {k.name: k for k in KEYS}

PROFILE_VALUES = {
    "desk": {"train.epochs": "30", "train.batch_size": "32", "data.num_points": "128"},
    "paper": {"train.epochs": "100", "train.batch_size": "64", "data.num_points": "1024"},
}


def parse_text(text: str, origin: str = "<config>") -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        entries[key] = value
    return entries


@dataclass
class RunConfig:
    """Resolved configuration; ``raw`` holds the string form of every key."""

    raw: dict = field(default_factory=lambda: {k.name: k.default for k in KEYS})

    @classmethod
    def build(cls, profile: str = "desk", files=(), overrides: dict | None = None) -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
        cfg = cls()
        cfg.update(PROFILE_VALUES[profile])
        for path in files:
            cfg.update(parse_text(Path(path).read_text(), str(path)))
        cfg.update(overrides or {})
        cfg.validate()
        return cfg

    def update(self, entries: dict):
        unknown = sorted(k for k in entries if k not in KEY_INDEX)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for k, v in entries.items():
            self.raw[k] = str(v)

    def __getitem__(self, key: str):
        k = KEY_INDEX[key]
        try:
            return k.parse(self.raw[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    def dump(self) -> str:
        lines = []
        for k in KEYS:
            lines.append(f"{k.name} = {self.raw[k.name]}")
        return "\n".join(lines) + "\n"

    def validate(self):
        """Parse every key and build every component, collecting all problems."""
        problems = []
        for k in KEYS:
            try:
                k.parse(self.raw[k.name])
            except ValueError as exc:
                problems.append(f"{k.name}: {exc}")
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))
        for name in ("clean", "noisy", "sparse"):
            try:
                self.shift(name).validate()
            except ValueError as exc:
                problems.append(f"shift.{name}: {exc}")
        for build in (self.train_config, self.experiment_spec):
            try:
                build()
            except ValueError as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))

    # -- component builders ------------------------------------------------

    def shift(self, domain: str, seed: int | None = None) -> DomainShiftSpec:
        p = f"shift.{domain}."
        return DomainShiftSpec(density_keep_fraction=self[p + "density_keep_fraction"],
                               jitter_sigma=self[p + "jitter_sigma"],
                               occlusion_fraction=self[p + "occlusion_fraction"],
                               rotation_bias=self[p + "rotation_bias"],
                               seed=0 if seed is None else seed)

    def benchmark(self) -> BenchmarkSpec:
        """The three-domain synthetic benchmark; domain d uses seed 3*seed + d."""
        s = self["seed"]
        domains = [SyntheticDomain(name, self.shift(name, s * 3 + d))
                   for d, name in enumerate(("clean", "noisy", "sparse"))]
        return BenchmarkSpec(classes=self["data.classes"], domains=domains, per_class=self["data.per_class"],
                             test_per_class=self["data.test_per_class"], n_points=self["data.stored_points"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self["train.learning_rate"], weight_decay=self["train.weight_decay"],
                           beta1=self["train.beta1"], beta2=self["train.beta2"], epochs=self["train.epochs"],
                           batch_size=self["train.batch_size"], seed=self["seed"],
                           precision=self["train.precision"], augment_jitter=self["train.augment_jitter"],
                           augment_rotate_z=self["train.augment_rotate_z"],
                           eval_batch_size=self["train.eval_batch_size"])

    def experiment_spec(self) -> ExperimentSpec:
        targets = self["data.targets"]
        mode = self["experiment.mode"]
        bw = self["mmd.bandwidths"]
        try:
            loss = LossWeights(lambda1=self["loss.lambda1"], lambda2=self["loss.lambda2"],
                               lambda3=self["loss.lambda3"], zeta=self["loss.zeta"], gamma=self["loss.gamma"],
                               aggregator=self["loss.aggregator"], eta=self["schedule.s"])
            return ExperimentSpec(
                source=self["data.source"],
                targets=targets,
                mixup=MixupConfig(self["mixup.strategy"], self["mixup.alpha"], max(len(targets), 1)),
                loss=loss,
                schedule=ScheduleConfig(s=self["schedule.s"], f=self["schedule.f"], N_e=self["train.epochs"]),
                mmd=MMDConfig(bandwidths=tuple(bw) if bw else None,
                              median_factors=tuple(self["mmd.median_factors"])),
                encoder=EncoderConfig(point_mlp_widths=tuple(self["encoder.point_mlp_widths"]),
                                      embed_dim=self["encoder.embed_dim"],
                                      attention_nodes=self["encoder.attention_nodes"],
                                      feature_scale=self["encoder.feature_scale"]),
                loss_terms=tuple(self["experiment.loss_terms"]),
                grl_mu=self["experiment.grl_mu"],
                folds=self["experiment.folds"],
                mode=mode,
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def format_key_table() -> str:
    """Every key with its default, for ``--help``."""
    width = max(len(k.name) for k in KEYS)
    lines = ["config keys (default; 'desk' profile values shown):"]
    desk = PROFILE_VALUES["desk"]
    for k in KEYS:
        default = desk.get(k.name, k.default)
        lines.append(f"  {k.name:<{width}} = {default or '(empty)':<16} {k.help}")
    return "\n".join(lines)
