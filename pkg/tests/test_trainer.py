import zipfile

import numpy as np
import pytest
import torch

from hocslm.errors import (
    CheckpointVersionMismatch,
    ConfigError,
    DivergedLoss,
    EmptyDataset,
    LengthMismatch,
)
from hocslm.model import CHECKPOINT_FORMAT, load_checkpoint, read_checkpoint_meta, save_checkpoint
from hocslm.skeleton_io import class_names, make_synthetic_dataset
from hocslm.ssf import ByteTokenizer, parameter_checksum
from hocslm.trainer import (
    AblationReport,
    AblationRow,
    TrainConfig,
    _cosine_lr,
    _phase_epochs,
    build_model,
    confusion_matrix,
    desk_train_config,
    ensemble_scores,
    evaluate,
    split_indices,
    tensorize,
    top1_accuracy,
    train,
)

NAMES = class_names(3)


@pytest.fixture(scope="module")
def tiny():
    return make_synthetic_dataset(3, 5, seed=0, frames=20)


def small_config(**kw):
    base = dict(window=16, batch_size=8, epochs=2, lm_warmup_steps=10)
    base.update(kw)
    return desk_train_config(**base)


def captions(ds):
    return [s.caption for s in ds]


# --- metrics -----------------------------------------------------------------

def test_top1_counts_argmax_hits():
    scores = np.array([[0.1, 0.9], [0.8, 0.2], [0.5, 0.5], [0.3, 0.7]])
    assert top1_accuracy(scores, [1, 0, 1, 0]) == 50.0
    assert top1_accuracy(scores, [1, 0, 0, 1]) == 100.0


def test_top1_errors():
    with pytest.raises(EmptyDataset):
        top1_accuracy(np.zeros((0, 3)), [])
    with pytest.raises(LengthMismatch):
        top1_accuracy(np.zeros((2, 3)), [0])


def test_confusion_matrix():
    cm = confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]


def test_ensemble_is_weighted_softmax_sum():
    a = np.array([[1.0, 2.0, 0.0]])
    b = np.array([[0.0, 0.0, 3.0]])
    soft = lambda v: np.exp(v) / np.exp(v).sum()  # noqa: E731
    fused = ensemble_scores([a, b], [0.25, 2.0])
    assert np.allclose(fused, 0.25 * soft(a) + 2.0 * soft(b))
    assert np.allclose(ensemble_scores([a[0], b[0]]), soft(a[0]) + soft(b[0]))


def test_ensemble_length_checks():
    with pytest.raises(LengthMismatch):
        ensemble_scores([np.zeros((2, 3))], [1.0, 1.0])
    with pytest.raises(LengthMismatch):
        ensemble_scores([np.zeros((2, 3)), np.zeros((3, 3))])
    with pytest.raises(LengthMismatch):
        ensemble_scores([])


# --- schedule and config -------------------------------------------------------

def test_split_holds_out_every_fifth():
    train_idx, val_idx = split_indices(12)
    assert val_idx == [4, 9]
    assert sorted(train_idx + val_idx) == list(range(12))


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(learning_rate=1e-3, min_learning_rate=1e-6)
    assert _cosine_lr(cfg, 0, 10) == pytest.approx(1e-3)
    assert _cosine_lr(cfg, 9, 10) == pytest.approx(1e-6)
    assert _cosine_lr(cfg, 0, 1) == 1e-3


def test_phase_epochs_cover_budget():
    assert _phase_epochs([0.5, 0.5], 7) == [3, 4]
    assert _phase_epochs([1.0], 0) == [0]


def test_config_defaults_and_overrides():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.learning_rate, cfg.weight_decay) == (64, 85, 1e-4, 0.01)
    assert (cfg.lambda_gen, cfg.lambda_cls, cfg.strategy) == (0.5, 1.0, "T3")
    new = cfg.with_overrides(["epochs=3", "streams=[joint, bone]", "learning_rate=2e-3"])
    assert (new.epochs, new.streams, new.learning_rate) == (3, ["joint", "bone"], 2e-3)
    with pytest.raises(ConfigError):
        cfg.with_overrides(["epoch=3"])
    with pytest.raises(ConfigError):
        cfg.with_overrides(["epochs"])
    with pytest.raises(ConfigError):
        cfg.with_overrides(["learning_rate=fast"])
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig(streams=["skin"]).validate()
    with pytest.raises(ConfigError):
        TrainConfig(ensemble_weights=[1.0, 2.0]).validate()


# --- training ----------------------------------------------------------------

def test_train_runs_and_reports(tiny):
    cfg = small_config(track_train_top1=True)
    model = build_model(cfg, 3, NAMES)
    ckpt, report = train(model, tiny, cfg)
    assert len(report.loss_curves["cls"]) == 2
    assert report.loss_curves["gen"] == [None, None]
    assert len(report.val_top1_curve) == len(report.train_top1_curve) == 2
    assert report.confusion.sum() == 3
    assert ckpt.extra["stream"] == "joint"
    assert report.best_epoch in (0, 1)


def test_zero_epochs_keeps_initialization(tiny):
    cfg = small_config(epochs=0)
    model = build_model(cfg, 3, NAMES)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    ckpt, report = train(model, tiny, cfg)
    assert report.best_epoch is None
    assert all(torch.equal(before[k], v) for k, v in ckpt.state.items())
    _, val_idx = split_indices(len(tiny))
    assert evaluate(model, [tiny[i] for i in val_idx], window=16).top1 == report.top1


def test_training_is_reproducible(tiny):
    cfg = small_config(epochs=1)
    a = build_model(cfg, 3, NAMES)
    b = build_model(cfg, 3, NAMES)
    train(a, tiny, cfg)
    train(b, tiny, cfg)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


@pytest.mark.parametrize("strategy", ["T1", "T2", "T3", "T4"])
def test_decoder_stays_frozen(tiny, strategy):
    cfg = small_config(strategy=strategy)
    model = build_model(cfg, 3, NAMES, captions=captions(tiny))
    before = parameter_checksum(model.lm)
    train(model, tiny, cfg, max_steps=3)
    assert parameter_checksum(model.lm) == before


def test_t1_alignment_phase_leaves_encoder_alone(tiny):
    cfg = small_config(strategy="T1", epochs=2)
    model = build_model(cfg, 3, NAMES, captions=captions(tiny))
    w = model.backbone.blocks[0].spatial.w_q.detach().clone()
    train(model, tiny, cfg, max_steps=2)  # both steps fall in the first (alignment) epoch
    assert torch.equal(model.backbone.blocks[0].spatial.w_q, w)


def test_ssf_strategy_needs_fusion_head(tiny):
    cfg = small_config()
    model = build_model(cfg, 3, NAMES)
    with pytest.raises(ConfigError):
        train(model, tiny, small_config(strategy="T3"))


def test_diverged_loss_is_reported(tiny, monkeypatch):
    cfg = small_config()
    model = build_model(cfg, 3, NAMES)
    real = model.forward

    def poisoned(x):
        f_s, logits = real(x)
        return f_s, logits * float("nan")

    monkeypatch.setattr(model, "forward", poisoned)
    with pytest.raises(DivergedLoss):
        train(model, tiny, cfg)


def test_empty_inputs():
    cfg = small_config()
    model = build_model(cfg, 3, NAMES)
    with pytest.raises(EmptyDataset):
        train(model, [], cfg)
    with pytest.raises(EmptyDataset):
        evaluate(model, [])


def test_tensorize_builds_template_captions(tiny):
    stripped = [s.__class__(coords=s.coords, label=s.label) for s in tiny[:2]]
    data = tensorize(stripped, "bone", 16, NAMES)
    assert data.x.shape == (2, 3, 16, 25)
    assert ByteTokenizer().decode(data.captions[0]) == f"A person is {NAMES[0]}."


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny):
    cfg = small_config(strategy="T3")
    model = build_model(cfg, 3, NAMES, captions=captions(tiny)).eval()
    path = tmp_path / "m.hocs"
    save_checkpoint(path, model, {"stream": "joint"})
    back, extra = load_checkpoint(path)
    assert extra == {"stream": "joint"}
    assert back.class_names == NAMES
    assert back.has_ssf
    x = tensorize(tiny[:2], window=16).x
    assert torch.equal(model(x)[1], back.eval()(x)[1])
    assert parameter_checksum(back.lm) == parameter_checksum(model.lm)
    names = zipfile.ZipFile(path).namelist()
    assert "params/cts.0.w_q.npy" in names and "params/dht.0.lambda_g.npy" in names


def test_checkpoint_bytes_are_reproducible(tmp_path):
    cfg = small_config()
    model = build_model(cfg, 3, NAMES)
    save_checkpoint(tmp_path / "a.hocs", model)
    save_checkpoint(tmp_path / "b.hocs", model)
    assert (tmp_path / "a.hocs").read_bytes() == (tmp_path / "b.hocs").read_bytes()


def test_checkpoint_version_mismatch(tmp_path):
    bad = tmp_path / "bad.hocs"
    with zipfile.ZipFile(bad, "w") as zf:
        zf.writestr("meta.json", '{"format": "HOCS-CKPT-0"}')
    with pytest.raises(CheckpointVersionMismatch):
        load_checkpoint(bad)
    (tmp_path / "junk.hocs").write_bytes(b"not a zip")
    with pytest.raises(CheckpointVersionMismatch):
        read_checkpoint_meta(tmp_path / "junk.hocs")
    model = build_model(small_config(), 3, NAMES)
    save_checkpoint(tmp_path / "ok.hocs", model)
    assert read_checkpoint_meta(tmp_path / "ok.hocs")["format"] == CHECKPOINT_FORMAT


def test_caption_generation_is_deterministic(tiny):
    cfg = small_config(strategy="T3")
    model = build_model(cfg, 3, NAMES, captions=captions(tiny))
    x = tensorize(tiny[:1], window=16).x[0]
    assert model.generate_caption(x, 20) == model.generate_caption(x, 20)


# --- ablation report ------------------------------------------------------------

def test_ablation_report_csv():
    rep = AblationReport("core", [AblationRow("Baseline", 50.0, None), AblationRow("HocSLM", 62.5, 12.5)])
    assert rep.to_csv() == "configuration,Top-1,delta-vs-baseline\nBaseline,50.00,\nHocSLM,62.50,+12.50\n"
    streams = AblationReport("streams", [AblationRow("Joint only", 75.0, None, streams="1s")])
    assert streams.to_csv() == "streams,method,Top-1\n1s,Joint only,75.00\n"
