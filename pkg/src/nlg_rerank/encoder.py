"""Joint (source, candidate, candidate) encoding and per-metric scoring."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.special import expit

from .errors import ConfigError, DataError
from .metrics import tokenize

PAD, UNK, BOS, SEP = "<pad>", "<unk>", "<s>", "</s>"
SOURCE, CAND1, CAND2 = "<source>", "<candidate1>", "<candidate2>"
SPECIAL_TOKENS = (PAD, UNK, BOS, SEP, SOURCE, CAND1, CAND2)
# BOS, three segment markers and three separators.
PAIR_OVERHEAD = 7

CHECKPOINT_FORMAT = "nlg_rerank.checkpoint"
CHECKPOINT_VERSION = 1


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError("vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary has duplicate tokens")

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1) -> "Vocab":
        counts = Counter(t for text in texts for t in tokenize(text))
        words = sorted(w for w, c in counts.items() if c >= min_freq and w not in SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self[t] for t in tokens]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]


@dataclass(frozen=True)
class TruncationLimits:
    source_max: int
    cand_max: int

    @classmethod
    def for_capacity(cls, capacity: int) -> "TruncationLimits":
        """Half of the free capacity for the source, a quarter for each candidate."""
        free = capacity - PAIR_OVERHEAD
        if free < 4:
            raise ConfigError(f"capacity {capacity} too small for a pair sequence")
        return cls(source_max=free // 2, cand_max=free // 4)

    def total(self) -> int:
        return self.source_max + 2 * self.cand_max + PAIR_OVERHEAD


@dataclass
class PairInput:
    tokens: list[str]
    anchors: tuple[int, int, int]  # positions of <source>, <candidate1>, <candidate2>
    truncated: bool = False

    @property
    def segments(self) -> tuple[list[str], list[str], list[str]]:
        s, c1, c2 = self.anchors
        return self.tokens[s + 1:c1 - 1], self.tokens[c1 + 1:c2 - 1], self.tokens[c2 + 1:-1]


def assemble_pair_sequence(source: str, c_i: str, c_j: str, limits: TruncationLimits,
                           capacity: int | None = None) -> PairInput:
    """Lay out ``<s> <source> x </s> <candidate1> c_i </s> <candidate2> c_j </s>``.

    Each segment keeps its first ``source_max`` / ``cand_max`` tokens.
    """
    if capacity is not None and limits.total() > capacity:
        raise ConfigError(f"truncation limits {limits} need {limits.total()} positions, "
                          f"capacity is {capacity}")
    segs = []
    truncated = False
    for name, text, limit in (("source", source, limits.source_max),
                              ("candidate 1", c_i, limits.cand_max),
                              ("candidate 2", c_j, limits.cand_max)):
        toks = tokenize(text)
        if not toks:
            raise DataError(f"{name} segment is empty")
        truncated |= len(toks) > limit
        segs.append(toks[:limit])
    src, a, b = segs
    tokens = [BOS, SOURCE, *src, SEP, CAND1, *a, SEP, CAND2, *b, SEP]
    anchors = (1, 3 + len(src), 5 + len(src) + len(a))
    return PairInput(tokens, anchors, truncated)


@dataclass
class ModelConfig:
    metrics: list[str]
    width: int = 256
    layers: int = 4
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.1
    capacity: int = 512
    use_positions: bool = True
    source_max: int | None = None
    cand_max: int | None = None

    @property
    def limits(self) -> TruncationLimits:
        default = TruncationLimits.for_capacity(self.capacity)
        return TruncationLimits(self.source_max or default.source_max,
                                self.cand_max or default.cand_max)

    def validate(self) -> "ModelConfig":
        if not self.metrics:
            raise ConfigError("model needs at least one metric")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if self.limits.total() > self.capacity:
            raise ConfigError(f"truncation limits exceed capacity {self.capacity}")
        return self


class TextEncoder(nn.Module):
    """Bidirectional transformer encoder returning final hidden states."""

    def __init__(self, vocab_size: int, width: int, layers: int, heads: int, ff_mult: int = 4,
                 dropout: float = 0.1, capacity: int = 512, use_positions: bool = True):
        super().__init__()
        self.width = width
        self.embed = nn.Embedding(vocab_size, width)
        self.pos = nn.Embedding(capacity, width) if use_positions else None
        layer = nn.TransformerEncoderLayer(width, heads, ff_mult * width, dropout,
                                           batch_first=True, norm_first=True)
        self.layers = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(width)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.embed(ids)
        if self.pos is not None:
            h = h + self.pos(torch.arange(ids.shape[1], device=ids.device))[None]
        return self.norm(self.layers(h, src_key_padding_mask=~mask))


class ScoreHead(nn.Module):
    """Five linear layers with tanh between them; one output per metric."""

    def __init__(self, in_dim: int, hidden: int, n_out: int, depth: int = 5):
        super().__init__()
        dims = [in_dim] + [hidden] * (depth - 1) + [n_out]
        mods: list[nn.Module] = []
        for i in range(depth):
            mods.append(nn.Linear(dims[i], dims[i + 1]))
            if i < depth - 1:
                mods.append(nn.Tanh())
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class PairScorer(nn.Module):
    def __init__(self, encoder: nn.Module, width: int, n_metrics: int):
        super().__init__()
        self.encoder = encoder
        self.width = width
        self.n_metrics = n_metrics
        # One head for both candidate slots.
        self.head = ScoreHead(2 * width, width, n_metrics)

    def anchor_states(self, ids, mask, anchors):
        hidden = self.encoder(ids, mask)
        if hidden.shape[-1] != self.width:
            raise ConfigError(f"encoder width {hidden.shape[-1]} does not match head input "
                              f"{self.width}")
        rows = torch.arange(ids.shape[0], device=ids.device)
        return hidden[rows, anchors[:, 0]], hidden[rows, anchors[:, 1]], hidden[rows, anchors[:, 2]]

    def head_scores(self, h_src, h_a, h_b):
        return self.head(torch.cat([h_src, h_a], -1)), self.head(torch.cat([h_src, h_b], -1))

    def forward(self, ids, mask, anchors):
        return self.head_scores(*self.anchor_states(ids, mask, anchors))


class PairReranker:
    """A ``PairScorer`` bundled with its vocabulary, limits and metric list."""

    variant = "pairreranker"

    def __init__(self, config: ModelConfig, vocab: Vocab, scorer: PairScorer | None = None,
                 seed: int = 0):
        self.config = config.validate()
        self.vocab = vocab
        if scorer is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                enc = TextEncoder(len(vocab), config.width, config.layers, config.heads,
                                  config.ff_mult, config.dropout, config.capacity,
                                  config.use_positions)
                scorer = PairScorer(enc, config.width, len(config.metrics))
        self.model = scorer
        self.model.eval()

    @property
    def metrics(self) -> list[str]:
        return list(self.config.metrics)

    def assemble(self, source: str, a: str, b: str) -> PairInput:
        return assemble_pair_sequence(source, a, b, self.config.limits, self.config.capacity)

    def collate(self, inputs: Sequence[PairInput]):
        longest = max(len(x.tokens) for x in inputs)
        ids = torch.full((len(inputs), longest), self.vocab.pad_id, dtype=torch.long)
        for i, x in enumerate(inputs):
            ids[i, :len(x.tokens)] = torch.tensor(self.vocab.encode(x.tokens))
        anchors = torch.tensor([x.anchors for x in inputs], dtype=torch.long)
        return ids, ids != self.vocab.pad_id, anchors

    def forward(self, inputs: Sequence[PairInput]):
        ids, mask, anchors = self.collate(inputs)
        return self.model(ids, mask, anchors)

    @torch.no_grad()
    def score_pairs(self, triples: Sequence[tuple[str, str, str]], batch_size: int = 64):
        """Score (source, a, b) triples; returns two ``(n, |metrics|)`` float arrays."""
        self.model.eval()
        sa, sb = [], []
        for start in range(0, len(triples), batch_size):
            chunk = [self.assemble(*t) for t in triples[start:start + batch_size]]
            a, b = self.forward(chunk)
            sa.append(a.double().numpy())
            sb.append(b.double().numpy())
        n = len(self.metrics)
        if not sa:
            return np.zeros((0, n)), np.zeros((0, n))
        return np.concatenate(sa), np.concatenate(sb)

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, self.variant, self.config, self.vocab, self.model.state_dict(), meta)

    @classmethod
    def load(cls, path, metrics: Sequence[str] | None = None) -> "PairReranker":
        ckpt = load_checkpoint(path, cls.variant, metrics)
        obj = cls(ModelConfig(**ckpt["model_config"]), Vocab(ckpt["vocab"]))
        obj.model.load_state_dict(ckpt["state_dict"])
        obj.model.eval()
        obj.meta = ckpt.get("meta", {})
        return obj


def encode_and_score(model: PairReranker, pair: PairInput) -> tuple[np.ndarray, np.ndarray]:
    model.model.eval()
    with torch.no_grad():
        a, b = model.forward([pair])
    return a[0].double().numpy(), b[0].double().numpy()


def confidence(s_i, s_j) -> np.ndarray:
    """Per-metric probability that candidate i beats candidate j: sigmoid(s_i - s_j)."""
    s_i = np.asarray(s_i, dtype=np.float64)
    s_j = np.asarray(s_j, dtype=np.float64)
    if s_i.shape != s_j.shape:
        raise ValueError(f"score vectors differ in shape: {s_i.shape} vs {s_j.shape}")
    return expit(s_i - s_j)


def save_checkpoint(path, variant: str, config: ModelConfig, vocab: Vocab, state_dict,
                    meta: dict | None = None) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": variant,
        "model_config": asdict(config),
        "vocab": list(vocab.tokens),
        "state_dict": {k: v.detach().clone() for k, v in state_dict.items()},
        "meta": dict(meta or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, variant: str | None = None, metrics: Sequence[str] | None = None) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a reranker checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    if variant is not None and ckpt["variant"] != variant:
        raise ConfigError(f"{path} holds a {ckpt['variant']!r} model, expected {variant!r}")
    have = list(ckpt["model_config"]["metrics"])
    if metrics is not None and list(metrics) != have:
        raise ConfigError(f"checkpoint {path} was trained on metrics {have}, "
                          f"requested {list(metrics)}")
    return ckpt
