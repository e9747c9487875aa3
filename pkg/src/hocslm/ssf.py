"""Skeleton-language fusion: project the skeleton semantic vector into a frozen
decoder's embedding space, prepend it to a learnable prompt and the caption,
and train through the decoder's next-token loss."""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AllMaskedWarning, ConfigError, DecoderUnavailable, EmptyCaption, NonFiniteActivation

IGNORE_INDEX = -100
DEFAULT_PROMPT = "Describe the action:"


# ----------------------------------------------------------------------------
# Tokenizer and desk-scale decoder
# ----------------------------------------------------------------------------

class ByteTokenizer:
    """UTF-8 bytes as token ids; three ASCII control bytes serve as specials."""

    vocab_size = 256
    pad_id = 0
    bos_id = 2
    eos_id = 3

    def encode(self, text: str, add_eos: bool = True) -> list[int]:
        ids = [b for b in text.encode("utf-8") if b not in (self.pad_id, self.bos_id, self.eos_id)]
        return ids + [self.eos_id] if add_eos else ids

    def decode(self, ids: Sequence[int]) -> str:
        out = bytearray()
        for i in ids:
            if i == self.eos_id:
                break
            if i not in (self.pad_id, self.bos_id):
                out.append(int(i))
        return out.decode("utf-8", errors="replace")


class FrozenDecoderLM(Protocol):
    vocab_size: int
    embedding_dim: int
    bos_id: int
    eos_id: int
    pad_id: int

    def embed(self, ids: torch.Tensor) -> torch.Tensor: ...

    def __call__(self, inputs_embeds: torch.Tensor) -> torch.Tensor: ...


class _DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(b, length, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        causal = torch.ones(length, length, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v
        x = x + self.out(attn.transpose(1, 2).reshape(b, length, d))
        return x + self.mlp(self.ln2(x))


class TinyDecoderLM(nn.Module):
    """Causal transformer over byte tokens with tied input/output embeddings."""

    def __init__(self, vocab_size: int = 256, dim: int = 64, layers: int = 2, heads: int = 4,
                 max_len: int = 160, seed: Optional[int] = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self._build(vocab_size, dim, layers, heads, max_len)

    def _build(self, vocab_size: int, dim: int, layers: int, heads: int, max_len: int) -> None:
        tok = ByteTokenizer()
        self.vocab_size = vocab_size
        self.embedding_dim = dim
        self.max_len = max_len
        self.bos_id, self.eos_id, self.pad_id = tok.bos_id, tok.eos_id, tok.pad_id
        self.tokenizer = tok
        self.token_embedding = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.token_embedding.weight, std=0.5)
        self.pos_embedding = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.layers = nn.ModuleList(_DecoderBlock(dim, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(dim)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(ids)

    def forward(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        length = inputs_embeds.shape[1]
        if length > self.max_len:
            raise ValueError(f"sequence of {length} exceeds the decoder window {self.max_len}")
        x = inputs_embeds + self.pos_embedding[:length]
        for layer in self.layers:
            x = layer(x)
        return self.ln_f(x) @ self.token_embedding.weight.t()


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# Projection, prompt and sequence assembly
# ----------------------------------------------------------------------------

class SkeletonProjection(nn.Module):
    """Two-layer MLP with LayerNorm mapping ``f_s`` (D) to the ``[SK]`` token (D*)."""

    def __init__(self, feature_dim: int, embed_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim, feature_dim)
        self.fc2 = nn.Linear(feature_dim, embed_dim)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, f_s: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(f_s).all():
            raise NonFiniteActivation("non-finite semantic vector")
        h = F.relu(self.fc1(f_s))
        return self.norm(self.fc2(h))


def project_skeleton_token(projection: SkeletonProjection, f_s: torch.Tensor) -> torch.Tensor:
    return projection(f_s)


def prompt_from_text(lm: FrozenDecoderLM, tokenizer: ByteTokenizer, text: str, length: int) -> torch.Tensor:
    """Embed ``text`` and average it into ``length`` contiguous slots."""
    ids = torch.tensor(tokenizer.encode(text, add_eos=False) or [tokenizer.bos_id])
    with torch.no_grad():
        emb = lm.embed(ids)
    chunks = torch.tensor_split(emb, length) if len(ids) >= length else [emb[i % len(ids)][None] for i in range(length)]
    return torch.stack([c.mean(0) for c in chunks])


class SsfHead(nn.Module):
    def __init__(self, feature_dim: int, lm: FrozenDecoderLM, tokenizer: ByteTokenizer,
                 prompt_length: int = 8, prompt_text: str = DEFAULT_PROMPT):
        super().__init__()
        if prompt_length < 1:
            raise ConfigError("prompt length must be at least 1")
        self.projection = SkeletonProjection(feature_dim, lm.embedding_dim)
        self.prompt = nn.Parameter(prompt_from_text(lm, tokenizer, prompt_text, prompt_length).clone())

    @property
    def prompt_length(self) -> int:
        return self.prompt.shape[0]


@dataclass
class MultimodalSequence:
    """``embeddings`` (B, 1 + L_p + L_t, D*); ``label_ids`` aligned with input
    positions (the token at each caption position, -100 elsewhere). The loss
    compares position ``p`` logits against the label at ``p + 1``."""

    embeddings: torch.Tensor
    label_ids: torch.Tensor

    @property
    def shifted_targets(self) -> torch.Tensor:
        """Next-token targets aligned with the logits of positions ``0 .. L-2``."""
        return self.label_ids[:, 1:]


def assemble_multimodal_sequence(sk: torch.Tensor, prompt: torch.Tensor,
                                 caption_ids: Sequence[Sequence[int]] | Sequence[int],
                                 lm: FrozenDecoderLM) -> MultimodalSequence:
    """Concatenate ``[SK]``, the prompt and the caption embeddings.

    ``sk`` is ``(D*,)`` with a flat caption id list, or ``(B, D*)`` with one id
    list per row. Shorter captions are right-padded with masked pad tokens.
    """
    single = sk.dim() == 1
    if single:
        sk = sk[None]
        caption_ids = [caption_ids]
    if len(caption_ids) != sk.shape[0]:
        raise ValueError(f"{sk.shape[0]} skeleton tokens but {len(caption_ids)} captions")
    for ids in caption_ids:
        if len(ids) == 0:
            raise EmptyCaption("caption has no tokens")
        if ids[-1] != lm.eos_id:
            raise EmptyCaption("caption must end with the eos token")
    b, lp = sk.shape[0], prompt.shape[0]
    lt = max(len(ids) for ids in caption_ids)
    tokens = torch.full((b, lt), lm.pad_id, dtype=torch.long)
    labels = torch.full((b, 1 + lp + lt), IGNORE_INDEX, dtype=torch.long)
    for i, ids in enumerate(caption_ids):
        tokens[i, :len(ids)] = torch.as_tensor(list(ids))
        labels[i, 1 + lp:1 + lp + len(ids)] = torch.as_tensor(list(ids))
    embeddings = torch.cat([sk[:, None], prompt.expand(b, -1, -1), lm.embed(tokens)], dim=1)
    return MultimodalSequence(embeddings=embeddings, label_ids=labels)


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------

def generation_loss(lm_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample summed NLL over positions whose label is not -100, averaged over the batch.

    ``lm_logits`` (B, L, V) and ``labels`` (B, L) must already be position-aligned.
    """
    if lm_logits.shape[:2] != labels.shape:
        raise ValueError(f"logits {tuple(lm_logits.shape)} do not align with labels {tuple(labels.shape)}")
    keep = labels != IGNORE_INDEX
    if not keep.any():
        warnings.warn("every label is the ignore index; generation loss set to 0", AllMaskedWarning, stacklevel=2)
        return lm_logits.sum() * 0.0
    logp = torch.log_softmax(lm_logits, dim=-1)
    picked = logp.gather(-1, labels.clamp_min(0).unsqueeze(-1)).squeeze(-1)
    return -(picked * keep).sum() / labels.shape[0]


def sequence_generation_loss(lm: FrozenDecoderLM, seq: MultimodalSequence) -> torch.Tensor:
    logits = lm(seq.embeddings)
    return generation_loss(logits[:, :-1], seq.shifted_targets)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def total_loss(l_gen, l_cls, lambda_gen: float, lambda_cls: float):
    return lambda_gen * l_gen + lambda_cls * l_cls


# ----------------------------------------------------------------------------
# Training strategies
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Phase:
    """One leg of a strategy schedule; ``fraction`` of the epoch budget."""

    name: str
    fraction: float
    train_encoder: bool
    train_projection: bool
    train_classifier: bool
    use_gen: bool
    use_cls: bool


@dataclass(frozen=True)
class StrategySchedule:
    strategy: str
    phases: tuple[Phase, ...]
    reinit_encoder: bool = False
    uses_ssf: bool = True


def apply_ssf_strategy(strategy: str) -> StrategySchedule:
    """Freeze masks and loss schedule for T0 .. T4; the decoder is always frozen."""
    if strategy == "T0":
        return StrategySchedule("T0", (Phase("classify", 1.0, True, False, True, False, True),), uses_ssf=False)
    if strategy == "T1":
        return StrategySchedule("T1", (
            Phase("align", 0.5, False, True, False, True, False),
            Phase("classify", 0.5, True, True, True, False, True),
        ))
    if strategy == "T2":
        return StrategySchedule("T2", (
            Phase("align", 0.5, True, True, False, True, False),
            Phase("classify", 0.5, True, False, True, False, True),
        ))
    if strategy in ("T3", "T4"):
        joint = Phase("joint", 1.0, True, True, True, True, True)
        return StrategySchedule(strategy, (joint,), reinit_encoder=strategy == "T4")
    raise ConfigError(f"unknown SSF strategy {strategy!r}")


# ----------------------------------------------------------------------------
# Decoder warm-up and greedy decoding
# ----------------------------------------------------------------------------

def context_vector(lm: TinyDecoderLM, ids: Sequence[int]) -> torch.Tensor:
    """Unit-scale summary of a caption's token embeddings."""
    emb = lm.embed(torch.as_tensor(list(ids)))
    return F.layer_norm(emb.mean(0), (lm.embedding_dim,))


def warm_up_decoder(lm: TinyDecoderLM, captions: Sequence[str], steps: int = 300, prompt_length: int = 8,
                    seed: int = 0, lr: float = 3e-3, batch_size: int = 32) -> TinyDecoderLM:
    """Fit the stub decoder to the caption language before it is frozen.

    Each training sequence is laid out like a fusion sequence: a context vector
    summarizing the caption in the ``[SK]`` slot, the prompt, then the caption.
    This gives the stub the ability to read a leading context token.
    """
    if steps <= 0 or not captions:
        return lm
    tok = lm.tokenizer
    g = torch.Generator().manual_seed(seed)
    encoded = [tok.encode(c) for c in sorted(set(captions))]
    prompt = prompt_from_text(lm, tok, DEFAULT_PROMPT, prompt_length)
    opt = torch.optim.AdamW(lm.parameters(), lr=lr, weight_decay=0.0)
    lm.train()
    for _ in range(steps):
        idx = torch.randint(len(encoded), (batch_size,), generator=g).tolist()
        batch = [encoded[i] for i in idx]
        ctx = torch.stack([context_vector(lm, ids) for ids in batch])
        ctx = ctx + 0.1 * torch.randn(ctx.shape, generator=g)
        seq = assemble_multimodal_sequence(ctx, prompt, batch, lm)
        loss = sequence_generation_loss(lm, seq) / max(len(ids) for ids in batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return lm.eval()


@torch.no_grad()
def greedy_decode(lm: Optional[FrozenDecoderLM], sk: torch.Tensor, prompt: torch.Tensor, max_tokens: int) -> list[int]:
    """Greedy continuation of ``[SK] + prompt``; stops at eos or ``max_tokens``."""
    if lm is None:
        raise DecoderUnavailable("no decoder loaded")
    out: list[int] = []
    if max_tokens <= 0:
        return out
    seq = torch.cat([sk.view(1, 1, -1), prompt[None]], dim=1)
    limit = getattr(lm, "max_len", None)
    for _ in range(max_tokens):
        if limit is not None and seq.shape[1] > limit:
            break
        nxt = int(lm(seq)[0, -1].argmax())
        if nxt == lm.eos_id:
            break
        out.append(nxt)
        seq = torch.cat([seq, lm.embed(torch.tensor([[nxt]]))], dim=1)
    return out
