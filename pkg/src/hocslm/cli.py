"""``hocslm`` command line: prepare, train, eval, ablate, ensemble, viz-attn, captions.

Errors print one line ``error: <category>: <message>`` on stderr. Exit status
is 2 for usage errors, 3 for I/O errors and 1 for everything else.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import yaml

from .errors import CheckpointLacksSsf, ConfigError, EmptyDataset, HocslmError, SampleNotFound
from .model import HocSLM, load_checkpoint
from .skeleton_io import (
    SkeletonSequence,
    class_names as synthetic_class_names,
    dumps_cache,
    load_cache,
    make_synthetic_dataset,
    read_caption_sidecar,
    read_skeleton_file,
    resample,
    select_stream,
)
from .trainer import (
    TrainConfig,
    build_model,
    desk_train_config,
    ensemble_scores,
    evaluate,
    run_ablation_suite,
    split_indices,
    tensorize,
    top1_accuracy,
    predict_scores,
    train,
)

EXIT_CODES = {"usage": 2, "io": 3}
CACHE_ENV = "HOCSLM_CACHE"
CACHE_SUFFIX = ".hocs1"
NAMES_FILE = "class_names.txt"


class UsageError(HocslmError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------------------
# Atomic output
# ----------------------------------------------------------------------------

def atomic_write(path: str | os.PathLike, data: bytes | str | Callable[[str], None]) -> Path:
    """Write ``data`` (or let ``data(tmp_path)`` write) to a temp file, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        if callable(data):
            os.close(fd)
            data(tmp)
        else:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ----------------------------------------------------------------------------
# Config and data sources
# ----------------------------------------------------------------------------

def load_train_config(config_path: Optional[str], overrides: Sequence[str] = (),
                      seed: Optional[int] = None) -> TrainConfig:
    """Desk defaults, then the YAML file, then ``--set`` items, then ``--seed``."""
    config = desk_train_config()
    if config_path:
        try:
            data = yaml.safe_load(Path(config_path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{config_path}: invalid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path}: expected a mapping at top level")
        config = TrainConfig.from_mapping({**config.to_dict(), **data})
    config = config.with_overrides(overrides)
    if seed is not None:
        config.seed = seed
    return config.validate()


def _parse_synthetic(spec: str) -> tuple[int, int]:
    try:
        classes, per_class = (int(v) for v in spec.split(":"))
    except ValueError:
        raise UsageError(f"--synthetic expects CLASSES:PER_CLASS, got {spec!r}") from None
    return classes, per_class


def cache_dir(explicit: Optional[str] = None) -> Path:
    return Path(explicit or os.environ.get(CACHE_ENV) or "hocslm-cache")


def load_cache_dir(directory: str | os.PathLike) -> tuple[list[SkeletonSequence], Optional[list[str]]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"cache directory {directory} does not exist")
    dataset = [load_cache(p) for p in sorted(directory.glob(f"*{CACHE_SUFFIX}"))]
    names_file = directory / NAMES_FILE
    names = names_file.read_text(encoding="utf-8").splitlines() if names_file.exists() else None
    return dataset, names


def load_dataset(args, seed: int) -> tuple[list[SkeletonSequence], list[str]]:
    """Samples and class names from ``--synthetic`` or a prepared cache directory."""
    if getattr(args, "synthetic", None):
        classes, per_class = _parse_synthetic(args.synthetic)
        return make_synthetic_dataset(classes, per_class, seed), synthetic_class_names(classes)
    dataset, names = load_cache_dir(cache_dir(getattr(args, "data", None)))
    if names is None:
        labels = [s.label for s in dataset if s.label is not None]
        names = [f"action {k + 1}" for k in range(1 + max(labels, default=-1))]
    return dataset, names


def select_split(dataset: Sequence, split: str) -> list:
    train_idx, val_idx = split_indices(len(dataset))
    idx = {"train": train_idx, "val": val_idx, "all": range(len(dataset))}[split]
    return [dataset[i] for i in idx]


# ----------------------------------------------------------------------------
# Attention export
# ----------------------------------------------------------------------------

@torch.no_grad()
def frame_topologies(model: HocSLM, sample: SkeletonSequence, stride: int, stream: str = "joint",
                     block: int = 0) -> list[tuple[int, np.ndarray]]:
    """Channel-averaged fused topology of ``block`` for frames ``0, stride, 2*stride, ...``.

    Each sampled frame is fed on its own, so the topology reflects that pose only.
    """
    if stride < 1:
        raise UsageError("stride must be >= 1")
    seq = select_stream(sample, stream)
    x = torch.as_tensor(seq.coords, dtype=torch.float32)
    model.eval()
    out = []
    for t in range(0, seq.frame_count, stride):
        a_s = model.backbone.spatial_topology(x[None, :, t:t + 1], block)
        out.append((t, a_s.mean(dim=1)[0].double().numpy()))
    return out


def joint_radii(a_s: np.ndarray) -> np.ndarray:
    """Column mass of ``|A_s|`` scaled so the largest joint gets 1."""
    mass = np.abs(a_s).sum(axis=0)
    peak = mass.max()
    return mass / peak if peak > 0 else np.ones_like(mass)


def matrix_to_csv(matrix: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in matrix:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def read_matrix_csv(path: str | os.PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def _render_heatmap(matrix: np.ndarray, title: str) -> Callable[[str], None]:
    def write(tmp: str) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(matrix, cmap="viridis", interpolation="nearest")
        ax.set_title(title)
        ax.set_xlabel("joint")
        ax.set_ylabel("joint")
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.savefig(tmp, format="png")
        plt.close(fig)
    return write


def _render_skeleton(xyz: np.ndarray, edges, radii: np.ndarray, title: str) -> Callable[[str], None]:
    def write(tmp: str) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        for a, b in edges:
            ax.plot(xyz[0, [a, b]], xyz[1, [a, b]], color="0.6", lw=1)
        ax.scatter(xyz[0], xyz[1], s=20 + 300 * radii, c=radii, cmap="viridis",
                   vmin=0, vmax=1, edgecolors="k", linewidths=0.5)
        ax.set_aspect("equal")
        ax.set_title(title)
        ax.axis("off")
        fig.savefig(tmp, format="png")
        plt.close(fig)
    return write


def export_attention(model: HocSLM, sample: SkeletonSequence, stride: int, out_dir: str | os.PathLike,
                     stream: str = "joint") -> list[int]:
    """Heatmap, skeleton overlay and CSV dumps per sampled frame; returns the frame indices."""
    out_dir = Path(out_dir)
    frames = frame_topologies(model, sample, stride, stream)
    coords = sample.coords if sample.coords.ndim == 3 else sample.coords[..., 0]
    radius_rows = []
    for t, a_s in frames:
        radii = joint_radii(a_s)
        radius_rows.append([t] + [repr(float(r)) for r in radii])
        atomic_write(out_dir / f"frame{t:04d}_A_s.csv", matrix_to_csv(a_s))
        atomic_write(out_dir / f"frame{t:04d}_heatmap.png", _render_heatmap(a_s, f"A_s, frame {t}"))
        atomic_write(out_dir / f"frame{t:04d}_skeleton.png",
                     _render_skeleton(coords[:, t], sample.skeleton_edges, radii, f"frame {t}"))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame"] + [f"joint{j}" for j in range(coords.shape[2])])
    writer.writerows(radius_rows)
    atomic_write(out_dir / "radii.csv", buf.getvalue())
    return [t for t, _ in frames]


# ----------------------------------------------------------------------------
# Caption report
# ----------------------------------------------------------------------------

CAPTION_HEADER = ("sample_id", "label", "caption", "match")


def caption_report(model: HocSLM, samples: Sequence[SkeletonSequence], stream: str = "joint",
                   max_tokens: int = 48) -> tuple[str, float]:
    """Tab-separated report plus the fraction of captions naming the true label."""
    if not model.has_ssf:
        raise CheckpointLacksSsf("checkpoint was trained without the fusion head (strategy T0)")
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(CAPTION_HEADER)
    hits = 0
    for i, seq in enumerate(samples):
        seq = select_stream(resample(seq, model.config.window), stream)
        x = torch.as_tensor(seq.coords, dtype=torch.float32)
        text = model.generate_caption(x, max_tokens)
        name = model.class_names[seq.label] if seq.label is not None else ""
        match = bool(name) and name in text
        hits += match
        writer.writerow([seq.sample_id or f"sample{i:05d}", name, text, int(match)])
    rate = hits / len(samples) if samples else 0.0
    return buf.getvalue(), rate


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    out = cache_dir(args.out)
    if args.synthetic:
        classes, per_class = _parse_synthetic(args.synthetic)
        dataset = make_synthetic_dataset(classes, per_class, args.seed or 0)
        names = synthetic_class_names(classes)
    else:
        if args.source is None:
            raise UsageError("prepare needs a source directory or --synthetic")
        src = Path(args.source)
        if not src.is_dir():
            raise FileNotFoundError(f"source directory {src} does not exist")
        sidecar = src / "captions.tsv"
        captions = read_caption_sidecar(sidecar) if sidecar.exists() else {}
        dataset = []
        for path in sorted(src.glob("*.skeleton")):
            dataset.append(read_skeleton_file(path, caption=captions.get(path.stem)))
        if not dataset:
            raise EmptyDataset(f"no .skeleton files in {src}")
        names = None
    for i, seq in enumerate(dataset):
        atomic_write(out / f"{seq.sample_id or f'sample{i:05d}'}{CACHE_SUFFIX}", dumps_cache(seq))
    if names:
        atomic_write(out / NAMES_FILE, "\n".join(names) + "\n")
    print(f"prepared {len(dataset)} samples in {out}")
    return 0


def _out_dir(args) -> Path:
    return Path(args.out or ".")


def cmd_train(args) -> int:
    config = load_train_config(args.config, args.set, args.seed)
    dataset, names = load_dataset(args, config.seed)
    num_classes = len(names)
    captions = [s.caption or f"A person is {names[s.label]}." for s in dataset]
    out = _out_dir(args)
    summary = {}
    for stream in config.streams:
        strategy = config.strategy if (config.ssf_all_streams or stream == "joint") else "T0"
        cfg = TrainConfig.from_mapping({**config.to_dict(), "strategy": strategy})
        model = build_model(cfg, num_classes, names, captions=captions)
        checkpoint, report = train(model, dataset, cfg, stream=stream)
        path = out / f"checkpoint_{stream}.hocs"
        checkpoint.save(path, model)
        summary[stream] = {"checkpoint": path.name, **report.to_dict()}
        print(f"{stream}: val Top-1 {report.top1:.2f} -> {path}")
    _write_json(out / "train_report.json", {"config": config.to_dict(), "streams": summary})
    return 0


def _checkpoint_stream(extra: dict, fallback: str = "joint") -> str:
    return extra.get("stream") or fallback


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    dataset, _ = load_dataset(args, seed)
    samples = select_split(dataset, args.split)
    report = evaluate(model, samples, stream=_checkpoint_stream(extra))
    _write_json(_out_dir(args) / "eval_report.json", report.to_dict())
    print(f"Top-1 {report.top1:.2f} on {len(samples)} samples")
    return 0


def cmd_ablate(args) -> int:
    config = load_train_config(args.config, args.set, args.seed)
    dataset, names = load_dataset(args, config.seed)
    report = run_ablation_suite(dataset, args.table, config, names)
    out = _out_dir(args)
    atomic_write(out / f"ablation_{args.table}.csv", report.to_csv())
    _write_json(out / f"ablation_{args.table}.json", report.summary())
    print(report.to_csv(), end="")
    return 0


def cmd_ensemble(args) -> int:
    seed = args.seed if args.seed is not None else 0
    dataset, _ = load_dataset(args, seed)
    samples = select_split(dataset, args.split)
    if not samples:
        raise EmptyDataset("nothing to evaluate")
    scores, streams, labels = [], [], None
    for path in args.checkpoints:
        model, extra = load_checkpoint(path)
        stream = _checkpoint_stream(extra)
        data = tensorize(samples, stream, model.config.window, model.class_names)
        scores.append(predict_scores(model, data))
        streams.append(stream)
        labels = data.y.numpy()
    fused = ensemble_scores(scores, args.weights)
    top1 = top1_accuracy(fused, labels)
    _write_json(_out_dir(args) / "ensemble_report.json",
                {"streams": streams, "weights": args.weights, "top1": top1,
                 "per_stream_top1": [top1_accuracy(s, labels) for s in scores]})
    print(f"ensemble of {len(streams)} streams: Top-1 {top1:.2f}")
    return 0


def _find_sample(dataset: Sequence[SkeletonSequence], sample_id: str) -> SkeletonSequence:
    for seq in dataset:
        if seq.sample_id == sample_id:
            return seq
    raise SampleNotFound(f"no sample with id {sample_id!r}")


def cmd_viz_attn(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    dataset, _ = load_dataset(args, seed)
    sample = _find_sample(dataset, args.sample)
    frames = export_attention(model, sample, args.stride, _out_dir(args), _checkpoint_stream(extra))
    print(f"exported {len(frames)} frame(s): {frames}")
    return 0


def cmd_captions(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    if not model.has_ssf:
        raise CheckpointLacksSsf("checkpoint was trained without the fusion head (strategy T0)")
    seed = args.seed if args.seed is not None else 0
    dataset, _ = load_dataset(args, seed)
    text, rate = caption_report(model, select_split(dataset, args.split), _checkpoint_stream(extra),
                                args.max_tokens)
    atomic_write(_out_dir(args) / "captions.tsv", text)
    print(f"match rate {rate:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hocslm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, config=False, data=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if config:
            p.add_argument("--config", default=None, help="YAML file of training settings")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override one setting (repeatable)")
        if data:
            src = p.add_mutually_exclusive_group()
            src.add_argument("--data", default=None, help=f"prepared cache directory (default ${CACHE_ENV})")
            src.add_argument("--synthetic", default=None, metavar="CLASSES:PER_CLASS",
                             help="use the built-in synthetic dataset")

    p = sub.add_parser("prepare", help="parse .skeleton files into the binary cache")
    p.add_argument("source", nargs="?", help="directory of .skeleton files (optional captions.tsv)")
    p.add_argument("--synthetic", default=None, metavar="CLASSES:PER_CLASS")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help=f"cache directory (default ${CACHE_ENV})")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model per configured stream")
    common(p, config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Top-1 of a checkpoint on a split")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation table")
    common(p, config=True)
    p.add_argument("--table", choices=("core", "hglnet", "ssf", "streams"), default="core")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ensemble", help="fuse per-stream checkpoints at the score level")
    common(p)
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--weights", type=float, nargs="+", default=None)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("viz-attn", help="export joint-joint topology heatmaps for one sample")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--sample", required=True, help="sample id")
    p.add_argument("--stride", type=int, default=20, help="frame sampling stride")
    p.set_defaults(func=cmd_viz_attn)

    p = sub.add_parser("captions", help="generate a caption per sample")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--max-tokens", type=int, default=48)
    p.set_defaults(func=cmd_captions)
    return parser


def _category(exc: BaseException) -> str:
    if isinstance(exc, HocslmError):
        return exc.category
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is not None:
            torch.manual_seed(args.seed)
        return args.func(args)
    except (HocslmError, OSError) as exc:
        category = _category(exc)
        message = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error: {category}: {' '.join(message.split())}", file=sys.stderr)
        return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
