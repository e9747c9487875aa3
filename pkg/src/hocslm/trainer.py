"""Training loop, Top-1 evaluation, score-level stream ensembling and the
ablation tables."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .backbone import PRESETS, STRATEGIES, AblationConfig, BackboneConfig
from .errors import ConfigError, DivergedLoss, EmptyDataset, LengthMismatch
from .model import HocSLM
from .skeleton_io import STREAM_NAMES, SkeletonSequence, class_names as synthetic_class_names, resample, select_stream
from .ssf import ByteTokenizer, TinyDecoderLM, apply_ssf_strategy, warm_up_decoder

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 85
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    lambda_gen: float = 0.5
    lambda_cls: float = 1.0
    seed: int = 0
    strategy: str = "T3"
    streams: list[str] = field(default_factory=lambda: ["joint"])
    # desk-scale additions
    preset: str = "desk"
    window: int = 64
    min_learning_rate: float = 1e-6
    grad_clip: float = 5.0
    finetune_epochs: int = 10
    lm_warmup_steps: int = 300
    ssf_all_streams: bool = True
    ensemble_weights: Optional[list[float]] = None
    target_train_top1: Optional[float] = None
    track_train_top1: bool = False

    def __post_init__(self):
        if isinstance(self.streams, str):
            self.streams = [self.streams]
        self.streams = list(self.streams)
        # YAML 1.1 reads "1e-3" as a string, so float fields are coerced here
        for f in fields(self):
            value = getattr(self, f.name)
            try:
                if f.type in ("float", "Optional[float]") and value is not None:
                    setattr(self, f.name, float(value))
                elif f.type == "Optional[list[float]]" and value is not None:
                    setattr(self, f.name, [float(v) for v in value])
            except (TypeError, ValueError):
                raise ConfigError(f"{f.name} must be numeric, got {value!r}") from None

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.streams:
            raise ConfigError("streams must be nonempty")
        unknown = [s for s in self.streams if s not in STREAM_NAMES]
        if unknown:
            raise ConfigError(f"unknown streams {unknown}; choose from {list(STREAM_NAMES)}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.ensemble_weights is not None and len(self.ensemble_weights) != len(self.streams):
            raise ConfigError("ensemble_weights must match streams in length")
        return self

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def with_overrides(self, overrides: Iterable[str]) -> "TrainConfig":
        """Apply ``key=value`` strings; values are parsed as YAML scalars/lists."""
        data = asdict(self)
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            if key.strip() not in data:
                raise ConfigError(f"unknown config key {key.strip()!r}")
            data[key.strip()] = yaml.safe_load(raw)
        return TrainConfig.from_mapping(data)

    def to_dict(self) -> dict:
        return asdict(self)


def desk_train_config(**overrides) -> TrainConfig:
    """Settings sized for the synthetic desk dataset on a CPU."""
    base = dict(batch_size=16, epochs=60, learning_rate=1e-3, strategy="T0", finetune_epochs=10)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class EvalReport:
    top1: float
    per_class_accuracy: list[float]
    confusion: np.ndarray
    loss_curves: dict[str, list] = field(default_factory=lambda: {"gen": [], "cls": [], "total": []})
    predictions: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    val_top1_curve: list[float] = field(default_factory=list)
    train_top1_curve: list[float] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
            "loss_curves": self.loss_curves,
            "val_top1_curve": self.val_top1_curve,
            "train_top1_curve": self.train_top1_curve,
            "best_epoch": self.best_epoch,
        }


@dataclass
class Checkpoint:
    state: dict
    epoch: int
    extra: dict = field(default_factory=dict)

    def save(self, path, model: HocSLM) -> None:
        from .model import save_checkpoint
        save_checkpoint(path, model, self.extra, state=self.state)


# ----------------------------------------------------------------------------
# Metrics and fusion
# ----------------------------------------------------------------------------

def top1_accuracy(scores, labels) -> float:
    """Percentage of rows whose argmax (lowest index on ties) equals the label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyDataset("no samples to score")
    if scores.shape[0] != len(labels):
        raise LengthMismatch(f"{scores.shape[0]} score rows for {len(labels)} labels")
    hits = int(np.count_nonzero(np.argmax(scores, axis=1) == labels))
    return 100.0 * hits / len(labels)


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ensemble_scores(per_stream_scores: Sequence, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Weighted sum of per-stream softmax scores; works on (C,) or (B, C) entries."""
    arrays = [np.asarray(s, dtype=np.float64) for s in per_stream_scores]
    if not arrays:
        raise LengthMismatch("no streams to fuse")
    weights = [1.0] * len(arrays) if weights is None else list(weights)
    if len(weights) != len(arrays):
        raise LengthMismatch(f"{len(weights)} weights for {len(arrays)} streams")
    if any(a.shape != arrays[0].shape for a in arrays):
        raise LengthMismatch(f"stream scores differ in shape: {[a.shape for a in arrays]}")
    return sum(w * _softmax(a) for w, a in zip(weights, arrays))


# ----------------------------------------------------------------------------
# Data plumbing
# ----------------------------------------------------------------------------

@dataclass
class Batchable:
    x: torch.Tensor
    y: torch.Tensor
    captions: list[list[int]]
    ids: list[str]


def tensorize(dataset: Sequence[SkeletonSequence], stream: str = "joint", window: int = 64,
              class_names: Optional[Sequence[str]] = None) -> Batchable:
    if not dataset:
        raise EmptyDataset("dataset is empty")
    tok = ByteTokenizer()
    xs, ys, caps, ids = [], [], [], []
    for i, seq in enumerate(dataset):
        seq = select_stream(resample(seq, window), stream)
        xs.append(seq.coords.astype(np.float32))
        label = -1 if seq.label is None else seq.label
        ys.append(label)
        text = seq.caption
        if text is None and class_names is not None and label >= 0:
            text = f"A person is {class_names[label]}."
        caps.append(tok.encode(text or ""))
        ids.append(seq.sample_id or f"sample{i:05d}")
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ValueError(f"samples do not share one shape after resampling: {sorted(shapes)}")
    return Batchable(torch.from_numpy(np.stack(xs)), torch.tensor(ys), caps, ids)


def split_indices(n: int) -> tuple[list[int], list[int]]:
    """Deterministic 80/20 split: every fifth sample is held out."""
    val = [i for i in range(n) if i % 5 == 4]
    train = [i for i in range(n) if i % 5 != 4]
    return train, val


def _subset(data: Batchable, idx: Sequence[int]) -> Batchable:
    idx = list(idx)
    return Batchable(data.x[idx], data.y[idx], [data.captions[i] for i in idx], [data.ids[i] for i in idx])


@torch.no_grad()
def predict_scores(model: HocSLM, data: Batchable, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(data.y), batch_size):
        _, logits = model(data.x[start:start + batch_size])
        out.append(logits.double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def _report(scores: np.ndarray, labels: np.ndarray, num_classes: int) -> EvalReport:
    preds = np.argmax(scores, axis=1)
    cm = confusion_matrix(preds, labels, num_classes)
    per_class = [float(cm[k, k] / cm[k].sum()) if cm[k].sum() else float("nan") for k in range(num_classes)]
    return EvalReport(top1=top1_accuracy(scores, labels), per_class_accuracy=per_class, confusion=cm,
                      predictions=preds, labels=labels, scores=scores)


def evaluate(model: HocSLM, dataset, stream: str = "joint", window: Optional[int] = None,
             batch_size: int = 64) -> EvalReport:
    if isinstance(dataset, Batchable):
        data = dataset
    else:
        if len(dataset) == 0:
            raise EmptyDataset("cannot evaluate an empty dataset")
        data = tensorize(dataset, stream, window or model.config.window, model.class_names)
    if len(data.y) == 0:
        raise EmptyDataset("cannot evaluate an empty dataset")
    scores = predict_scores(model, data, batch_size)
    return _report(scores, data.y.numpy(), model.config.num_classes)


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

def _phase_epochs(fractions: Sequence[float], total: int) -> list[int]:
    counts = [int(math.floor(f * total)) for f in fractions]
    counts[-1] += total - sum(counts)
    return counts


def _cosine_lr(config: TrainConfig, epoch: int, total: int) -> float:
    if total <= 1:
        return config.learning_rate
    lo, hi = config.min_learning_rate, config.learning_rate
    return lo + (hi - lo) * 0.5 * (1.0 + math.cos(math.pi * epoch / (total - 1)))


def _set_trainable(model: HocSLM, phase) -> list[torch.nn.Parameter]:
    for p in model.backbone.encoder_parameters():
        p.requires_grad_(phase.train_encoder)
    for p in model.backbone.classifier_parameters():
        p.requires_grad_(phase.train_classifier)
    if model.has_ssf:
        for p in model.ssf.parameters():
            p.requires_grad_(phase.train_projection)
        for p in model.lm.parameters():
            p.requires_grad_(False)
    return [p for p in model.parameters() if p.requires_grad]


def _set_modes(model: HocSLM, phase) -> None:
    model.train()
    if not phase.train_encoder:
        for module in model.backbone.encoder_modules():
            module.eval()


def train(model: HocSLM, dataset, config: TrainConfig, stream: Optional[str] = None,
          max_steps: Optional[int] = None) -> tuple[Checkpoint, EvalReport]:
    """Optimize ``model`` in place; the returned checkpoint is the best epoch of the final phase.

    ``max_steps`` caps the number of optimizer steps (used for short audits).
    """
    config.validate()
    stream = stream or config.streams[0]
    data = dataset if isinstance(dataset, Batchable) else tensorize(dataset, stream, config.window, model.class_names)
    if len(data.y) == 0:
        raise EmptyDataset("training set is empty")
    if (data.y < 0).any() or (data.y >= model.config.num_classes).any():
        raise ConfigError("every training sample needs a label in [0, num_classes)")
    schedule = apply_ssf_strategy(config.strategy)
    if schedule.uses_ssf and not model.has_ssf:
        raise ConfigError(f"strategy {config.strategy} needs a model built with the fusion head")

    torch.manual_seed(config.seed)
    if schedule.reinit_encoder:
        model.backbone.reset_encoder(seed=config.seed)
    train_idx, val_idx = split_indices(len(data.y))
    train_data = _subset(data, train_idx)
    val_data = _subset(data, val_idx) if val_idx else train_data
    num_classes = model.config.num_classes

    curves = {"gen": [], "cls": [], "total": []}
    val_curve, train_curve = [], []
    best_state, best_top1, best_epoch = copy.deepcopy(model.state_dict()), -1.0, 0
    total_epochs = config.epochs
    epoch_counts = _phase_epochs([p.fraction for p in schedule.phases], total_epochs)
    steps = 0
    global_epoch = 0
    stop = False
    for phase_no, (phase, n_epochs) in enumerate(zip(schedule.phases, epoch_counts)):
        final_phase = phase_no == len(schedule.phases) - 1
        params = _set_trainable(model, phase)
        optimizer = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
        lam_gen = config.lambda_gen if phase.use_gen else 0.0
        lam_cls = config.lambda_cls if phase.use_cls else 0.0
        for _ in range(n_epochs):
            for group in optimizer.param_groups:
                group["lr"] = _cosine_lr(config, global_epoch, total_epochs)
            _set_modes(model, phase)
            rng = np.random.default_rng([config.seed, global_epoch])
            order = rng.permutation(len(train_data.y))
            sums = {"gen": 0.0, "cls": 0.0, "total": 0.0}
            batches = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                f_s, logits = model(train_data.x[idx])
                loss = logits.new_zeros(())
                if phase.use_cls:
                    l_cls = F.cross_entropy(logits, train_data.y[idx])
                    loss = loss + lam_cls * l_cls
                    sums["cls"] += l_cls.item()
                if phase.use_gen:
                    l_gen = model.caption_loss(f_s, [train_data.captions[i] for i in idx])
                    loss = loss + lam_gen * l_gen
                    sums["gen"] += l_gen.item()
                if not torch.isfinite(loss):
                    raise DivergedLoss(f"loss became {loss.item()} at epoch {global_epoch}, phase {phase.name}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
                optimizer.step()
                sums["total"] += loss.item()
                batches += 1
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    stop = True
                    break
            curves["gen"].append(sums["gen"] / batches if phase.use_gen else None)
            curves["cls"].append(sums["cls"] / batches if phase.use_cls else None)
            curves["total"].append(sums["total"] / batches)
            val_top1 = top1_accuracy(predict_scores(model, val_data), val_data.y.numpy())
            val_curve.append(val_top1)
            train_top1 = None
            if config.track_train_top1 or config.target_train_top1 is not None:
                train_top1 = top1_accuracy(predict_scores(model, train_data), train_data.y.numpy())
                train_curve.append(train_top1)
            log.debug("epoch %d phase %s loss %.4f val %.2f train %s", global_epoch, phase.name,
                      curves["total"][-1], val_top1, train_top1)
            if final_phase and val_top1 >= best_top1:
                best_state, best_top1, best_epoch = copy.deepcopy(model.state_dict()), val_top1, global_epoch
            global_epoch += 1
            if config.target_train_top1 is not None and train_top1 is not None and train_top1 >= config.target_train_top1:
                stop = True
            if stop:
                break
        if stop:
            break

    model.load_state_dict(best_state)
    for p in model.parameters():
        p.requires_grad_(True)
    if model.has_ssf:
        for p in model.lm.parameters():
            p.requires_grad_(False)
    report = _report(predict_scores(model, val_data), val_data.y.numpy(), num_classes)
    report.loss_curves = curves
    report.val_top1_curve = val_curve
    report.train_top1_curve = train_curve
    report.best_epoch = best_epoch if total_epochs else None
    extra = {"train_config": config.to_dict(), "stream": stream, "best_epoch": report.best_epoch}
    return Checkpoint(state=best_state, epoch=best_epoch, extra=extra), report


# ----------------------------------------------------------------------------
# Model construction
# ----------------------------------------------------------------------------

_WARM_DECODERS: dict = {}


def warmed_decoder(captions: Sequence[str], steps: int, seed: int = 0) -> TinyDecoderLM:
    """Stub decoder fitted to ``captions``; memoized because it is reused across runs."""
    key = (tuple(sorted(set(captions))), steps, seed)
    if key not in _WARM_DECODERS:
        _WARM_DECODERS[key] = warm_up_decoder(TinyDecoderLM(seed=seed), list(key[0]), steps=steps, seed=seed)
    return copy.deepcopy(_WARM_DECODERS[key])


def build_model(config: TrainConfig, num_classes: int, class_names: Optional[Sequence[str]] = None,
                ablation: Optional[AblationConfig] = None, captions: Sequence[str] = ()) -> HocSLM:
    if ablation is None:
        use_ssf = config.strategy != "T0"
        ablation = AblationConfig(use_ssf=use_ssf, ssf_strategy=config.strategy)
    backbone = PRESETS[config.preset](num_classes, ablation, window=config.window)
    lm = warmed_decoder(captions, config.lm_warmup_steps, config.seed) if ablation.use_ssf else None
    torch.manual_seed(config.seed)
    return HocSLM(backbone, class_names or synthetic_class_names(num_classes), lm=lm)


# ----------------------------------------------------------------------------
# Ablation tables
# ----------------------------------------------------------------------------

CORE_ROWS = (
    ("Baseline", dict(use_cts=False, use_dht=False), "T0"),
    ("Baseline + CTS", dict(use_dht=False), "T0"),
    ("Baseline + CTS + DHT", dict(), "T0"),
    ("HocSLM", dict(), "T3"),
)
HGLNET_ROWS = (
    ("Baseline", dict(use_cts=False, use_dht=False)),
    ("Only Local", dict(use_gsm=False, use_gta=False)),
    ("w/o GSM", dict(use_gsm=False)),
    ("w/o GTA", dict(use_gta=False)),
    ("HGLNet", dict()),
)
STREAM_ROWS = (
    ("1s", "Joint only", ("joint",)),
    ("1s", "Bone only", ("bone",)),
    ("1s", "Joint Motion only", ("joint_motion",)),
    ("1s", "Bone Motion only", ("bone_motion",)),
    ("1s", "Joint 2nd-order only", ("joint_2nd",)),
    ("1s", "Vel 2nd-order only", ("vel_2nd",)),
    ("2s", "Joint + Bone", ("joint", "bone")),
    ("4s", "Joint + Bone + Joint Motion + Bone Motion", ("joint", "bone", "joint_motion", "bone_motion")),
    ("6s", "Joint + Bone + J-Motion + B-Motion + Joint 2nd-order + Vel 2nd-order", STREAM_NAMES),
)
TABLES = ("core", "hglnet", "ssf", "streams")


@dataclass
class AblationRow:
    configuration: str
    top1: float
    delta: Optional[float]
    report: Optional[EvalReport] = None
    streams: Optional[str] = None


@dataclass
class AblationReport:
    table: str
    rows: list[AblationRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if self.table == "streams":
            writer.writerow(["streams", "method", "Top-1"])
            for r in self.rows:
                writer.writerow([r.streams, r.configuration, f"{r.top1:.2f}"])
        else:
            writer.writerow(["configuration", "Top-1", "delta-vs-baseline"])
            for r in self.rows:
                writer.writerow([r.configuration, f"{r.top1:.2f}", "" if r.delta is None else f"{r.delta:+.2f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"table": self.table,
                "rows": [{"configuration": r.configuration, "streams": r.streams, "top1": r.top1,
                          "delta": r.delta} for r in self.rows]}


def _ablation(flags: dict, strategy: str) -> AblationConfig:
    return AblationConfig(use_ssf=strategy != "T0", ssf_strategy=strategy, **flags)


def _run(dataset, config: TrainConfig, num_classes, names, captions, flags, strategy, epochs,
         init_from: Optional[HocSLM] = None, stream: str = "joint") -> tuple[HocSLM, EvalReport]:
    cfg = copy.deepcopy(config)
    cfg.strategy, cfg.epochs = strategy, epochs
    model = build_model(cfg, num_classes, names, _ablation(flags, strategy), captions)
    if init_from is not None:
        model.backbone.load_state_dict(init_from.backbone.state_dict())
    _, report = train(model, dataset, cfg, stream=stream)
    return model, report


def run_ablation_suite(dataset: Sequence[SkeletonSequence], table: str, config: Optional[TrainConfig] = None,
                       class_names: Optional[Sequence[str]] = None) -> AblationReport:
    """Train every row of one ablation table with a shared seed.

    Rows that use the fusion head start from a classifier-only encoder of the same
    architecture and fine-tune for ``config.finetune_epochs``; the T4 row redraws
    its encoder and gets the same fine-tuning budget.
    """
    if table not in TABLES:
        raise ConfigError(f"unknown ablation table {table!r}; choose from {TABLES}")
    config = (config or desk_train_config()).validate()
    num_classes = 1 + max(s.label for s in dataset)
    names = list(class_names) if class_names else synthetic_class_names(num_classes)
    captions = [s.caption or f"A person is {names[s.label]}." for s in dataset]
    data_cache: dict[str, Batchable] = {}

    def data(stream: str) -> Batchable:
        if stream not in data_cache:
            data_cache[stream] = tensorize(dataset, stream, config.window, names)
        return data_cache[stream]

    rows: list[AblationRow] = []
    if table == "core":
        pretrained = None
        for name, flags, strategy in CORE_ROWS:
            if strategy == "T0":
                model, report = _run(data("joint"), config, num_classes, names, captions, flags, "T0", config.epochs)
                pretrained = model
            else:
                _, report = _run(data("joint"), config, num_classes, names, captions, flags, strategy,
                                 config.finetune_epochs, init_from=pretrained)
            rows.append(AblationRow(name, report.top1, None, report))
    elif table == "hglnet":
        for name, flags in HGLNET_ROWS:
            _, report = _run(data("joint"), config, num_classes, names, captions, flags, "T0", config.epochs)
            rows.append(AblationRow(name, report.top1, None, report))
    elif table == "ssf":
        pretrained, _ = _run(data("joint"), config, num_classes, names, captions, {}, "T0", config.epochs)
        for strategy in STRATEGIES:
            _, report = _run(data("joint"), config, num_classes, names, captions, {}, strategy,
                             config.finetune_epochs, init_from=pretrained)
            label = f"{strategy} (Baseline)" if strategy == "T0" else strategy
            rows.append(AblationRow(label, report.top1, None, report))
    else:
        scores: dict[str, np.ndarray] = {}
        labels = None
        for stream in STREAM_NAMES:
            strategy = config.strategy if (config.ssf_all_streams or stream == "joint") else "T0"
            model, report = _run(data(stream), config, num_classes, names, captions, {}, "T0",
                                 config.epochs, stream=stream)
            if strategy != "T0":
                model, report = _run(data(stream), config, num_classes, names, captions, {}, strategy,
                                     config.finetune_epochs, init_from=model, stream=stream)
            scores[stream], labels = report.scores, report.labels
        for group, method, streams in STREAM_ROWS:
            fused = ensemble_scores([scores[s] for s in streams])
            rows.append(AblationRow(method, top1_accuracy(fused, labels), None, streams=group))
    baseline = rows[0].top1
    for r in rows:
        if table != "streams":
            r.delta = r.top1 - baseline if r is not rows[0] else None
    return AblationReport(table, rows)
