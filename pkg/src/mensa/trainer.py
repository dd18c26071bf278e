"""Multi-target adaptation training loop, evaluation protocol and ablation grid."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .adaptation import Heads, MixupConfig, Strategy, build_mixed, classify_domain, classify_object, sample_lambda
from .data import DomainDataset, augment_batch, make_folds
from .encoder import EncoderConfig, NumericError, PointEncoder
from .losses import (
    LossBreakdown,
    LossWeights,
    MMDConfig,
    ScheduleConfig,
    adv_loss,
    ce_class_per_sample,
    domain_confusion_loss,
    eta_schedule,
    mixup_loss,
    mmd_over_targets,
    total_loss,
)

log = logging.getLogger(__name__)

MODES = ("mtda", "stda", "no_adaptation", "supervised")
LOSS_TERMS = ("dc", "mmd", "mix")
CSV_COLUMNS = ("epoch", "loss_cls", "loss_dc", "loss_mmd", "loss_mixup", "loss_total", "eta")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    precision: str = "32"
    augment_jitter: float = 0.0
    augment_rotate_z: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "eval_batch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("train.beta1 and train.beta2 must lie in (0, 1)")
        if self.precision not in ("32", "64"):
            raise ConfigError("train.precision must be 32 or 64")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "64" else torch.float32


@dataclass
class ExperimentSpec:
    source: str
    targets: list
    mixup: MixupConfig = field(default_factory=MixupConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    mmd: MMDConfig = field(default_factory=MMDConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss_terms: tuple = LOSS_TERMS
    grl_mu: float = 1.0
    folds: int = 3
    mode: str = "mtda"

    def __post_init__(self):
        self.targets = list(self.targets)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.targets and self.mode != "supervised":
            raise ConfigError("at least one target domain is required")
        if self.source in self.targets:
            raise ConfigError(f"source {self.source!r} is also listed as a target")
        unknown = sorted(set(self.loss_terms) - set(LOSS_TERMS))
        if unknown:
            raise ConfigError(f"unknown loss terms {unknown}; choose from {LOSS_TERMS}")
        self.loss_terms = tuple(t for t in LOSS_TERMS if t in set(self.loss_terms))
        if not self.loss_terms:
            raise ConfigError("loss_terms must contain at least one of dc, mmd, mix")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.grl_mu < 0:
            raise ConfigError("grl_mu must be >= 0")

    @property
    def adapts(self) -> bool:
        return self.mode in ("mtda", "stda")

    @property
    def method_name(self) -> str:
        if self.mode == "no_adaptation":
            return "No adaptation"
        if self.mode == "supervised":
            return "Supervised"
        return self.mixup.strategy.value


@dataclass
class MetricsReport:
    source: str
    targets: list
    method: str
    per_target: dict
    average: float
    source_accuracy: dict
    per_class: dict
    epochs: list
    class_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


# ---------------------------------------------------------------------------
# model and state


class MTDAModel(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig, num_classes: int, n_targets: int, concat: bool = False):
        super().__init__()
        self.encoder = PointEncoder(encoder_cfg)
        self.heads = Heads(encoder_cfg.embed_dim, num_classes, n_targets, concat)
        self.num_classes = num_classes
        self.n_targets = n_targets

    def forward(self, points):
        return classify_object(self.encoder(points), self.heads)


@dataclass
class TrainState:
    model: MTDAModel
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    seed: int
    epoch: int = 0
    step: int = 0
    fold: int = 0


def build_state(spec: ExperimentSpec, cfg: TrainConfig, num_classes: int, seed: int | None = None,
                fold: int = 0) -> TrainState:
    seed = cfg.seed if seed is None else seed
    torch.manual_seed(seed)
    n = max(len(spec.targets), 1)
    model = MTDAModel(spec.encoder, num_classes, n, concat=spec.mixup.strategy is Strategy.CONCAT)
    model.to(cfg.dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)
    return TrainState(model, opt, cfg, seed, fold=fold)


def _stream(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def batch_indices(n_items: int, batch_size: int, seed: int, domain: int, epoch: int, step: int) -> np.ndarray:
    """Indices of one domain's batch, a pure function of (seed, domain, epoch, step).

    Each epoch walks a fresh permutation; domains smaller than the step count
    demands continue into further permutations (cycling).
    """
    start = step * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        cycle, offset = divmod(pos, n_items)
        perm = _stream(seed, 0, domain, epoch, cycle).permutation(n_items)
        take = min(batch_size - len(out), n_items - offset)
        out.extend(perm[offset:offset + take])
        pos += take
    return np.asarray(out)


def steps_per_epoch(n_source: int, batch_size: int) -> int:
    return math.ceil(n_source / batch_size)


def _finite(name: str, value: torch.Tensor):
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite loss term '{name}'")


def current_eta(spec: ExperimentSpec, cfg: TrainConfig, epoch: int) -> float:
    return eta_schedule(ScheduleConfig(spec.schedule.s, spec.schedule.f, cfg.epochs, min(epoch, cfg.epochs)))


def compute_losses(state: TrainState, source_batch, target_batches, spec: ExperimentSpec, epoch: int,
                   lam_rng: np.random.Generator | None = None):
    """Forward pass and every loss term for one step.

    ``source_batch`` is (points, labels); ``target_batches`` holds points, or
    (points, labels) pairs in supervised mode.
    """
    model, cfg = state.model, state.cfg
    dtype = cfg.dtype
    w = spec.loss
    eta = current_eta(spec, cfg, epoch)
    src_pts, src_labels = source_batch
    src_labels = torch.as_tensor(src_labels, dtype=torch.long)
    zero = torch.zeros((), dtype=dtype)

    if spec.mode == "no_adaptation":
        F_s = model.encoder(torch.as_tensor(src_pts, dtype=dtype))
        cls_ps = ce_class_per_sample(classify_object(F_s, model.heads), src_labels)
        dc = mmd = mix = zero
    elif spec.mode == "supervised":
        pts = [src_pts] + [t[0] for t in target_batches]
        labels = torch.cat([src_labels] + [torch.as_tensor(t[1], dtype=torch.long) for t in target_batches])
        F = model.encoder(torch.as_tensor(np.concatenate(pts), dtype=dtype))
        cls_ps = ce_class_per_sample(classify_object(F, model.heads), labels)
        dc = mmd = mix = zero
    else:
        B = len(src_pts)
        allpts = np.concatenate([src_pts] + list(target_batches))
        F = model.encoder(torch.as_tensor(allpts, dtype=dtype))
        F_s, F_ts = F[:B], list(torch.split(F[B:], B))
        cls_ps = ce_class_per_sample(classify_object(F_s, model.heads), src_labels)
        mu = spec.grl_mu
        dc = mmd = mix = zero
        if "dc" in spec.loss_terms:
            dc = domain_confusion_loss(classify_domain(F_s, model.heads, mu),
                                       [classify_domain(F_t, model.heads, mu) for F_t in F_ts])
        if "mmd" in spec.loss_terms:
            mmd = mmd_over_targets(F_s, F_ts, spec.mmd)
        strategy = spec.mixup.strategy
        if "mix" in spec.loss_terms and strategy is not Strategy.NONE:
            lam_rng = lam_rng or _stream(state.seed, 2, epoch, state.step)
            lam = sample_lambda(spec.mixup, lam_rng)
            inter_lams = None
            if strategy is Strategy.INTER and len(F_ts) > 2:
                inter_lams = [lam] + [sample_lambda(spec.mixup, lam_rng)
                                      for _ in range(len(F_ts) * (len(F_ts) - 1) // 2 - 1)]
            mixed = build_mixed(strategy, F_s, F_ts, lam, inter_lams)
            scores = [classify_domain(m.features, model.heads, mu) for m in mixed]
            mix = mixup_loss(scores, [m.soft_labels for m in mixed], strategy).to(dtype)
    for name, value in (("cls", cls_ps), ("dc", dc), ("mmd", mmd), ("mixup", mix)):
        _finite(name, value)
    adv = adv_loss(mmd, dc, mix, w)
    total = total_loss(cls_ps, dc, adv, w, eta)
    _finite("total", total)
    vals = [float(v.detach()) for v in (cls_ps.mean(), dc, mmd, mix, adv, total)]
    breakdown = LossBreakdown(*vals, eta)
    return total, breakdown


def train_step(state: TrainState, source_batch, target_batches, spec: ExperimentSpec, epoch: int) -> LossBreakdown:
    """One optimization step; gradients from the domain head reach the encoder
    through the reversal layer."""
    state.model.train()
    total, breakdown = compute_losses(state, source_batch, target_batches, spec, epoch)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    return breakdown


def _domain_batch(ds: DomainDataset, idx, state: TrainState, domain: int, epoch: int, step: int):
    pts = ds.points[idx]
    cfg = state.cfg
    if cfg.augment_jitter > 0 or cfg.augment_rotate_z:
        pts = augment_batch(pts, cfg.augment_jitter, cfg.augment_rotate_z, _stream(state.seed, 1, domain, epoch, step))
    return pts, ds.labels[idx]


def run_epoch(state: TrainState, source: DomainDataset, targets: Sequence[DomainDataset],
              spec: ExperimentSpec) -> LossBreakdown:
    """Train one epoch and return the step-averaged loss breakdown."""
    epoch = state.epoch
    B = state.cfg.batch_size
    n_steps = steps_per_epoch(len(source), B)
    sums = None
    for k in range(n_steps):
        idx = batch_indices(len(source), B, state.seed, 0, epoch, k)
        src = _domain_batch(source, idx, state, 0, epoch, k)
        tgts = []
        for d, ds in enumerate(targets, start=1):
            tb = _domain_batch(ds, batch_indices(len(ds), B, state.seed, d, epoch, k), state, d, epoch, k)
            tgts.append(tb if spec.mode == "supervised" else tb[0])
        bd = train_step(state, src, tgts, spec, epoch).as_dict()
        sums = bd if sums is None else {key: sums[key] + bd[key] for key in sums}
    state.epoch += 1
    return LossBreakdown(**{key: v / n_steps for key, v in sums.items()})


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(model: MTDAModel, ds: DomainDataset, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    model.eval()
    dtype = model.heads.object_classifier.weight.dtype
    preds = []
    for i in range(0, len(ds), batch_size):
        probs = model(torch.as_tensor(ds.points[i:i + batch_size], dtype=dtype)).cpu().numpy()
        preds.append(np.argmax(probs, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def top1_from_predictions(preds: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return 100.0 * float(np.sum(preds == labels)) / len(labels)


def evaluate_top1(model: MTDAModel, ds: DomainDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return top1_from_predictions(predict(model, ds, batch_size), ds.labels)


def per_class_accuracy(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> list:
    out = []
    for c in range(num_classes):
        mask = labels == c
        out.append(100.0 * float(np.mean(preds[mask] == c)) if mask.any() else float("nan"))
    return out


# ---------------------------------------------------------------------------
# full protocol


@dataclass
class DomainData:
    train: DomainDataset
    test: DomainDataset


def _check_datasets(spec: ExperimentSpec, datasets: dict):
    needed = [spec.source] + list(spec.targets)
    missing = [d for d in needed if d not in datasets]
    if missing:
        raise ConfigError(f"no dataset for domain(s) {missing}; available: {sorted(datasets)}")
    names = {tuple(datasets[d].train.class_names) for d in needed}
    if len(names) != 1:
        raise ConfigError(f"domains disagree on class names: {sorted(names)}")


def train_fold(spec: ExperimentSpec, cfg: TrainConfig, datasets: dict, fold: int, targets: list,
               seed: int, epoch_log: list | None = None) -> TrainState:
    """Train a fresh model on all folds except ``fold`` of each domain."""
    src_full = datasets[spec.source].train
    train_sets = []
    for d, name in enumerate([spec.source] + targets):
        full = datasets[name].train
        folds = make_folds(full, spec.folds, seed * 1000 + d)
        train_sets.append(full.subset(folds.train_indices(fold)))
    sub = ExperimentSpec(**{**spec.__dict__, "targets": targets})
    state = build_state(sub, cfg, src_full.num_classes, seed=seed, fold=fold)
    for _ in range(cfg.epochs):
        bd = run_epoch(state, train_sets[0], train_sets[1:], sub)
        log.info("fold %d epoch %d %s", fold, state.epoch, bd)
        if epoch_log is not None:
            epoch_log.append(bd)
    return state


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0] % (2 ** 31))


def train_mtda(spec: ExperimentSpec, cfg: TrainConfig, datasets: dict, out_dir=None):
    """Run every fold, evaluate on the fixed test splits, aggregate a report.

    ``datasets`` maps domain name to :class:`DomainData`. Returns the final
    fold's state(s) and the :class:`MetricsReport`; with ``out_dir`` the
    checkpoint, per-epoch CSV and JSON report are written there.
    """
    _check_datasets(spec, datasets)
    class_names = datasets[spec.source].train.class_names
    K = len(class_names)
    runs = [list(spec.targets)] if spec.mode != "stda" else [[t] for t in spec.targets]
    acc = {t: [] for t in spec.targets}
    src_acc = []
    per_class = {t: [] for t in spec.targets}
    fold_logs = []
    last_states = []
    for fold in range(spec.folds):
        seed = _fold_seed(cfg.seed, fold)
        fold_log: list = []
        states = []
        for r, targets in enumerate(runs):
            epoch_log = fold_log if r == 0 else None
            states.append((targets, train_fold(spec, cfg, datasets, fold, targets, seed, epoch_log)))
        fold_logs.append(fold_log)
        for targets, st in states:
            for t in targets:
                test = datasets[t].test
                preds = predict(st.model, test, cfg.eval_batch_size)
                acc[t].append(top1_from_predictions(preds, test.labels))
                per_class[t].append(per_class_accuracy(preds, test.labels, K))
        src_acc.append(evaluate_top1(states[0][1].model, datasets[spec.source].test, cfg.eval_batch_size))
        last_states = states
    per_target = {t: {"mean": float(np.mean(v)), "std": float(np.std(v)), "folds": v} for t, v in acc.items()}
    average = float(np.mean([per_target[t]["mean"] for t in spec.targets])) if spec.targets else float("nan")
    epochs = []
    for e in range(cfg.epochs):
        rows = [fl[e].as_dict() for fl in fold_logs]
        epochs.append({"epoch": e + 1, **{k: float(np.mean([r[k] for r in rows])) for k in rows[0]}})
    report = MetricsReport(
        source=spec.source,
        targets=list(spec.targets),
        method=spec.method_name,
        per_target=per_target,
        average=average,
        source_accuracy={"mean": float(np.mean(src_acc)), "std": float(np.std(src_acc)), "folds": src_acc},
        per_class={t: [float(np.nanmean([f[c] for f in per_class[t]])) for c in range(K)] for t in spec.targets},
        epochs=epochs,
        class_names=list(class_names),
        meta={"mode": spec.mode, "strategy": spec.mixup.strategy.value, "loss_terms": list(spec.loss_terms),
              "aggregator": spec.loss.aggregator, "seed": cfg.seed, "folds": spec.folds,
              "target_order": list(spec.targets), "epochs": cfg.epochs,
              "schedule": {"s": spec.schedule.s, "f": spec.schedule.f}},
    )
    if out_dir is not None:
        write_run(out_dir, report, last_states, spec, cfg)
    return last_states, report


def write_metrics_csv(path, epochs: list):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in epochs:
            w.writerow([row["epoch"], repr(row["cls"]), repr(row["dc"]), repr(row["mmd"]), repr(row["mixup"]),
                        repr(row["total"]), repr(row["eta"])])
    os.replace(tmp, path)


def read_metrics_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no epochs recorded")
    return {col: [float(r[col]) for r in rows] for col in CSV_COLUMNS}


def write_report(path, report: MetricsReport):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    os.replace(tmp, path)


def read_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


def checkpoint_header(state: TrainState, spec: ExperimentSpec, targets: list) -> dict:
    return {
        "encoder": spec.encoder.to_dict(),
        "num_classes": state.model.num_classes,
        "n_targets": state.model.n_targets,
        "concat": state.model.heads.concat_classifier is not None,
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.seed,
        "fold": state.fold,
        "targets": list(targets),
        "train": asdict(state.cfg),
    }


def save_checkpoint(state: TrainState, path, spec: ExperimentSpec | None = None, targets: list | None = None):
    spec = spec or ExperimentSpec("source", ["target"], encoder=state.model.encoder.cfg)
    ckpt.save_arrays(path, checkpoint_header(state, spec, targets or spec.targets),
                     ckpt.model_arrays(state.model, state.optimizer))


def load_checkpoint(path, encoder_cfg: EncoderConfig | None = None) -> TrainState:
    """Rebuild model, optimizer and counters from a checkpoint.

    With ``encoder_cfg`` given, the stored arrays must fit that configuration;
    a mismatch raises :class:`~mensa.checkpoint.CheckpointShapeError` naming
    the parameter.
    """
    header, arrays = ckpt.load_arrays(path)
    cfg = TrainConfig(**header["train"])
    enc = encoder_cfg or EncoderConfig(**header["encoder"])
    torch.manual_seed(0)
    model = MTDAModel(enc, header["num_classes"], header["n_targets"], header["concat"]).to(cfg.dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)
    ckpt.restore_model(model, arrays, opt)
    return TrainState(model, opt, cfg, header["seed"], header["epoch"], header["step"], header["fold"])


def write_run(out_dir, report: MetricsReport, states, spec: ExperimentSpec, cfg: TrainConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (targets, st) in enumerate(states):
        name = "model.ckpt" if len(states) == 1 else f"model_{'_'.join(targets)}.ckpt"
        save_checkpoint(st, out / name, spec, targets)
    write_metrics_csv(out / "metrics.csv", report.epochs)
    write_report(out / "report.json", report)


# ---------------------------------------------------------------------------
# ablation


def all_term_subsets() -> list[tuple]:
    """The seven nonempty subsets of {dc, mmd, mix}, ordered as in the table:
    singles, pairs, then the full set."""
    return [c for r in (1, 2, 3) for c in itertools.combinations(LOSS_TERMS, r)]


def run_ablation(spec: ExperimentSpec, cfg: TrainConfig, datasets: dict, term_subsets=None,
                 aggregators=("lse",), out_dir=None) -> list[tuple]:
    """One training run per (loss-term subset, aggregator), identical seeds."""
    subsets = all_term_subsets() if term_subsets is None else [tuple(s) for s in term_subsets]
    for s in subsets:
        if not s:
            raise ConfigError("empty loss-term subset is not allowed")
        bad = set(s) - set(LOSS_TERMS)
        if bad:
            raise ConfigError(f"unknown loss terms {sorted(bad)}")
    rows = []
    for agg in aggregators:
        for subset in subsets:
            loss = LossWeights(**{**asdict(spec.loss), "aggregator": agg})
            sub = ExperimentSpec(**{**spec.__dict__, "loss": loss, "loss_terms": subset})
            run_dir = None if out_dir is None else Path(out_dir) / f"{agg}_{'+'.join(subset)}"
            _, report = train_mtda(sub, cfg, datasets, run_dir)
            rows.append((subset, agg, report))
    return rows
