import math
import struct

import numpy as np
import pytest
import torch

from mensa.adaptation import MixupConfig, Strategy, classify_domain
from mensa.checkpoint import CheckpointError, CheckpointShapeError, CheckpointVersionError
from mensa.data import DomainShiftSpec, generate_synthetic_domain
from mensa.encoder import EncoderConfig
from mensa.losses import LossWeights, domain_confusion_loss
from mensa.trainer import (
    CSV_COLUMNS,
    ConfigError,
    DomainData,
    ExperimentSpec,
    TrainConfig,
    all_term_subsets,
    batch_indices,
    build_state,
    compute_losses,
    evaluate_top1,
    load_checkpoint,
    per_class_accuracy,
    predict,
    read_metrics_csv,
    read_report,
    run_ablation,
    run_epoch,
    save_checkpoint,
    top1_from_predictions,
    train_mtda,
    train_step,
)

CLASSES = ["box", "cylinder", "cone"]
SMALL = EncoderConfig(point_mlp_widths=(16, 32), embed_dim=32, attention_nodes=2)


def _domain(seed, per_class=6, split="train", shift=None, domain_id=0):
    shift = shift or DomainShiftSpec(seed=seed)
    return generate_synthetic_domain(CLASSES, per_class, shift, n_points=64, domain_id=domain_id,
                                     split=split, raw_points=256)


@pytest.fixture(scope="module")
def tiny():
    shifts = {"clean": DomainShiftSpec(seed=1),
              "noisy": DomainShiftSpec(jitter_sigma=0.03, seed=2),
              "sparse": DomainShiftSpec(density_keep_fraction=0.3, seed=3)}
    return {name: DomainData(_domain(0, 6, "train", s, d), _domain(0, 3, "test", s, d))
            for d, (name, s) in enumerate(shifts.items())}


def _spec(**kw):
    base = dict(source="clean", targets=["noisy", "sparse"], encoder=SMALL)
    base.update(kw)
    return ExperimentSpec(**base)


def _cfg(**kw):
    base = dict(epochs=2, batch_size=6, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _batches(tiny, n=6):
    src = tiny["clean"].train
    return (src.points[:n], src.labels[:n]), [tiny[t].train.points[:n] for t in ("noisy", "sparse")]


# --- configuration ------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ConfigError):
        _spec(loss_terms=())
    with pytest.raises(ConfigError):
        _spec(loss_terms=("dc", "bogus"))
    with pytest.raises(ConfigError):
        _spec(targets=["clean"])
    with pytest.raises(ConfigError):
        _spec(mode="transductive")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    assert _spec(loss_terms=("mix", "dc")).loss_terms == ("dc", "mix")


def test_term_subsets_order():
    assert all_term_subsets() == [("dc",), ("mmd",), ("mix",), ("dc", "mmd"), ("dc", "mix"),
                                  ("mmd", "mix"), ("dc", "mmd", "mix")]


def test_empty_subset_rejected(tiny):
    with pytest.raises(ConfigError):
        run_ablation(_spec(), _cfg(), tiny, term_subsets=[()])


# --- batching -------------------------------------------------------------------


def test_batch_indices_pure_and_cycling():
    a = batch_indices(10, 4, 3, 1, 0, 2)
    assert np.array_equal(a, batch_indices(10, 4, 3, 1, 0, 2))
    epoch = np.concatenate([batch_indices(12, 4, 0, 0, 0, k) for k in range(3)])
    assert sorted(epoch.tolist()) == list(range(12))
    cyc = np.concatenate([batch_indices(5, 4, 0, 2, 0, k) for k in range(3)])
    assert len(cyc) == 12 and set(cyc.tolist()) == set(range(5))


# --- one step ----------------------------------------------------------------------


def test_eta_starts_at_s(tiny):
    state = build_state(_spec(), _cfg(), 3)
    _, bd = compute_losses(state, *_batches(tiny), _spec(), epoch=0)
    assert bd.eta == pytest.approx(0.1)
    assert all(math.isfinite(v) for v in bd.as_dict().values())


def test_none_equals_mensa_without_mixup_weight(tiny):
    loss = LossWeights(lambda3=0.0)
    params = []
    for strategy in (Strategy.NONE, Strategy.MENSA):
        spec = _spec(mixup=MixupConfig(strategy), loss=loss)
        state = build_state(spec, _cfg(), 3)
        for _ in range(3):
            train_step(state, *_batches(tiny), spec, epoch=0)
        params.append([p.detach().clone() for p in state.model.parameters()])
    assert all(torch.equal(p, q) for p, q in zip(*params))


def test_domain_gradient_reversed_on_encoder(tiny):
    spec = _spec(grl_mu=1.0)
    state = build_state(spec, _cfg(precision="64"), 3)
    model = state.model
    (src, _), tgts = _batches(tiny)
    pts = torch.as_tensor(np.concatenate([src] + tgts), dtype=torch.float64)

    def grads(reversed_):
        model.zero_grad()
        F = model.encoder(pts)
        parts = torch.split(F, len(src))
        if reversed_:
            scores = [classify_domain(p, model.heads, 1.0) for p in parts]
        else:
            scores = [torch.sigmoid(model.heads.domain_classifier(p).squeeze(-1)) for p in parts]
        domain_confusion_loss(scores[0], scores[1:]).backward()
        enc = [p.grad.clone() for p in model.encoder.parameters()]
        head = model.heads.domain_classifier.weight.grad.clone()
        return enc, head

    enc_r, head_r = grads(True)
    enc_p, head_p = grads(False)
    torch.testing.assert_close(head_r, head_p)
    assert any(g.abs().max() > 0 for g in enc_p)
    for a, b in zip(enc_r, enc_p):
        torch.testing.assert_close(a, -b)


def test_domain_head_learns_to_discriminate(tiny):
    spec = _spec(loss_terms=("dc",), grl_mu=0.0)
    state = build_state(spec, _cfg(learning_rate=1e-2), 3)
    first = compute_losses(state, *_batches(tiny), spec, 0)[1].dc
    for _ in range(30):
        train_step(state, *_batches(tiny), spec, epoch=0)
    assert compute_losses(state, *_batches(tiny), spec, 0)[1].dc < first


def test_overfit_small_source():
    ds = _domain(5, per_class=4)
    spec = _spec(mode="no_adaptation", targets=["noisy"])
    state = build_state(spec, _cfg(learning_rate=3e-3, batch_size=12), 3)
    for _ in range(60):
        run_epoch(state, ds, [ds], spec)
    assert evaluate_top1(state.model, ds) >= 95.0


# --- evaluation -----------------------------------------------------------------------


def test_top1_examples():
    labels = np.arange(10) % 5
    assert top1_from_predictions(labels, labels) == 100.0
    assert top1_from_predictions(np.zeros(10, dtype=int), labels) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        top1_from_predictions(np.zeros(0, dtype=int), np.zeros(0, dtype=int))


def test_per_class_counting_identity():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 50)
    preds = rng.integers(0, 4, 50)
    pc = per_class_accuracy(preds, labels, 4)
    counts = np.bincount(labels, minlength=4)
    correct = sum(pc[c] / 100 * counts[c] for c in range(4) if counts[c])
    assert correct == pytest.approx((preds == labels).sum())


def test_uniform_output_predicts_class_zero(tiny):
    state = build_state(_spec(), _cfg(), 3)
    with torch.no_grad():
        state.model.heads.object_classifier.weight.zero_()
        state.model.heads.object_classifier.bias.zero_()
    test = tiny["noisy"].test
    assert (predict(state.model, test) == 0).all()
    assert evaluate_top1(state.model, test) == pytest.approx(100 / 3)


def test_evaluation_has_no_side_effects(tiny):
    state = build_state(_spec(), _cfg(), 3)
    before = [p.detach().clone() for p in state.model.parameters()]
    rng_before = torch.get_rng_state()
    a = predict(state.model, tiny["noisy"].test, batch_size=4)
    b = predict(state.model, tiny["noisy"].test, batch_size=256)
    assert np.array_equal(a, b)
    assert all(torch.equal(p, q) for p, q in zip(before, state.model.parameters()))
    assert torch.equal(rng_before, torch.get_rng_state())


# --- full runs -------------------------------------------------------------------------------


def test_no_adaptation_logs_zero_adaptation_terms(tiny, tmp_path):
    spec = _spec(mode="no_adaptation", folds=2)
    _, report = train_mtda(spec, _cfg(), tiny, tmp_path)
    cols = read_metrics_csv(tmp_path / "metrics.csv")
    assert list(cols) == list(CSV_COLUMNS) and cols["epoch"] == [1.0, 2.0]
    assert all(v == 0.0 for k in ("loss_dc", "loss_mmd", "loss_mixup") for v in cols[k])
    assert report.method == "No adaptation" and len(report.per_target["noisy"]["folds"]) == 2
    assert read_report(tmp_path / "report.json") == report
    assert (tmp_path / "model.ckpt").is_file()


def test_report_fields(tiny):
    _, report = train_mtda(_spec(folds=2), _cfg(epochs=1), tiny)
    assert report.targets == ["noisy", "sparse"] and report.method == "MEnsA"
    assert report.average == pytest.approx(np.mean([report.per_target[t]["mean"] for t in report.targets]))
    assert len(report.per_class["noisy"]) == 3
    assert 0 <= report.source_accuracy["mean"] <= 100


def test_stda_trains_one_model_per_target(tiny, tmp_path):
    train_mtda(_spec(mode="stda", folds=2), _cfg(epochs=1), tiny, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["model_noisy.ckpt", "model_sparse.ckpt"]


def test_missing_domain_is_config_error(tiny):
    with pytest.raises(ConfigError):
        train_mtda(_spec(targets=["noisy", "absent"]), _cfg(), tiny)


# --- checkpoints ---------------------------------------------------------------------------------


def _saved(tmp_path, tiny):
    spec = _spec()
    state = build_state(spec, _cfg(), 3)
    train_step(state, *_batches(tiny), spec, epoch=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path, spec)
    return state, path


def test_checkpoint_round_trip(tmp_path, tiny):
    state, path = _saved(tmp_path, tiny)
    loaded = load_checkpoint(path)
    assert loaded.step == 1 and loaded.seed == state.seed
    assert all(torch.equal(p, q) for p, q in zip(state.model.parameters(), loaded.model.parameters()))
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_truncated(tmp_path, tiny):
    _, path = _saved(tmp_path, tiny)
    raw = path.read_bytes()
    for cut in (10, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
    flipped = bytearray(raw)
    flipped[-10] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_version(tmp_path, tiny):
    _, path = _saved(tmp_path, tiny)
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path, tiny):
    _, path = _saved(tmp_path, tiny)
    other = EncoderConfig(point_mlp_widths=(16, 48), embed_dim=32, attention_nodes=2)
    with pytest.raises(CheckpointShapeError, match="point_layers"):
        load_checkpoint(path, encoder_cfg=other)
