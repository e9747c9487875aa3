"""The full recognizer: HGLNet encoder, optional fusion head and frozen decoder,
plus the single-file checkpoint container."""
from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, HGLNet
from .errors import CheckpointVersionMismatch, DecoderUnavailable
from .ssf import (
    ByteTokenizer,
    SsfHead,
    TinyDecoderLM,
    assemble_multimodal_sequence,
    freeze,
    greedy_decode,
    sequence_generation_loss,
)

CHECKPOINT_FORMAT = "HOCS-CKPT-1"


class HocSLM(nn.Module):
    def __init__(self, config: BackboneConfig, class_names: Optional[Sequence[str]] = None,
                 lm: Optional[TinyDecoderLM] = None, prompt_length: int = 8):
        super().__init__()
        self.config = config
        self.backbone = HGLNet(config)
        self.class_names = list(class_names) if class_names else [f"class {k}" for k in range(config.num_classes)]
        self.tokenizer = ByteTokenizer()
        self.lm = None
        self.ssf = None
        if config.ablation.use_ssf:
            if lm is None:
                lm = TinyDecoderLM()
            self.lm = freeze(lm)
            self.ssf = SsfHead(config.feature_dim, self.lm, self.tokenizer, prompt_length)

    @property
    def has_ssf(self) -> bool:
        return self.ssf is not None

    def train(self, mode: bool = True):
        super().train(mode)
        if self.lm is not None:
            self.lm.eval()
        return self

    def forward(self, x: torch.Tensor):
        """``(f_s, logits)`` for a batch."""
        features = self.backbone.encode(x)
        f_s = self.backbone.semantic_vector(features)
        return f_s, self.backbone.fc(f_s)

    def caption_loss(self, f_s: torch.Tensor, caption_ids: Sequence[Sequence[int]]) -> torch.Tensor:
        if not self.has_ssf:
            raise DecoderUnavailable("model was built without the fusion head")
        sk = self.ssf.projection(f_s)
        seq = assemble_multimodal_sequence(sk, self.ssf.prompt, caption_ids, self.lm)
        return sequence_generation_loss(self.lm, seq)

    @torch.no_grad()
    def generate_caption(self, sample: torch.Tensor, max_tokens: int = 48) -> str:
        """Greedy caption for one ``(C, T, N[, M])`` sample."""
        if not self.has_ssf:
            raise DecoderUnavailable("model was built without the fusion head")
        was_training = self.training
        self.eval()
        try:
            f_s, _ = self(sample[None])
            sk = self.ssf.projection(f_s)[0]
            ids = greedy_decode(self.lm, sk, self.ssf.prompt, max_tokens)
        finally:
            self.train(was_training)
        return self.tokenizer.decode(ids)


# ----------------------------------------------------------------------------
# Checkpoint container
# ----------------------------------------------------------------------------

def _external_key(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "backbone" and len(parts) > 3 and parts[1] == "blocks":
        layer, part, rest = parts[2], parts[3], ".".join(parts[4:])
        if part == "spatial":
            return f"cts.{layer}.{rest}"
        if part == "temporal":
            return f"dht.{layer}.{rest}"
    return name


def _entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp so identical weights give identical files
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def save_checkpoint(path: str | os.PathLike, model: HocSLM, extra: Optional[dict] = None,
                    state: Optional[dict] = None) -> None:
    """Write parameters and config to one zip file, atomically."""
    state = state if state is not None else model.state_dict()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "backbone": model.config.to_dict(),
        "class_names": model.class_names,
        "prompt_length": model.ssf.prompt_length if model.has_ssf else None,
        "lm": ({"vocab_size": model.lm.vocab_size, "dim": model.lm.embedding_dim,
                "layers": len(model.lm.layers), "heads": model.lm.layers[0].heads,
                "max_len": model.lm.max_len} if model.has_ssf else None),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh, zipfile.ZipFile(fh, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr(_entry("meta.json"), json.dumps(meta, indent=2, sort_keys=True))
            for name, tensor in state.items():
                buf = io.BytesIO()
                np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
                zf.writestr(_entry(f"params/{_external_key(name)}.npy"), buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint_meta(path: str | os.PathLike) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointVersionMismatch(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint ({exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionMismatch(f"{path}: format {meta.get('format')!r}, expected {CHECKPOINT_FORMAT}")
    return meta


def load_checkpoint(path: str | os.PathLike) -> tuple[HocSLM, dict]:
    meta = read_checkpoint_meta(path)
    config = BackboneConfig.from_dict(meta["backbone"])
    lm = None
    if meta["lm"] is not None:
        spec = meta["lm"]
        lm = TinyDecoderLM(spec["vocab_size"], spec["dim"], spec["layers"], spec["heads"], spec["max_len"], seed=None)
    model = HocSLM(config, meta["class_names"], lm=lm, prompt_length=meta["prompt_length"] or 8)
    wanted = {_external_key(n): n for n in model.state_dict()}
    state = {}
    with zipfile.ZipFile(path) as zf:
        for entry in zf.namelist():
            if not entry.startswith("params/"):
                continue
            key = entry[len("params/"):-len(".npy")]
            if key not in wanted:
                raise CheckpointVersionMismatch(f"unexpected parameter {key!r} in {path}")
            state[wanted[key]] = torch.from_numpy(np.load(io.BytesIO(zf.read(entry)), allow_pickle=False))
    missing = set(wanted.values()) - set(state)
    if missing:
        raise CheckpointVersionMismatch(f"{path} lacks parameters: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    if model.lm is not None:
        freeze(model.lm)
    return model, meta.get("extra", {})
