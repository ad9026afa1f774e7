"""Toy transformer sentence encoder.

Token embeddings ``X`` are exposed separately from the transformer stack so
that adversarial perturbations can be added in embedding space before the
pooled sentence vector ``z`` is computed.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2
SPECIAL_TOKENS = (PAD, UNK, CLS)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class TokenSequence:
    ids: list[int]
    mask: list[int]
    raw_text: str = ""

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise ValueError("ids and mask must have the same length")
        if not any(self.mask):
            raise ValueError("token sequence has no active position")

    def __len__(self):
        return len(self.ids)

    @property
    def n_active(self) -> int:
        return int(sum(self.mask))


class Vocab:
    """Whitespace vocabulary with ``[PAD]``, ``[UNK]`` and ``[CLS]`` at ids 0-2."""

    def __init__(self, tokens: Sequence[str], counts: dict[str, int] | None = None):
        if tuple(tokens[:3]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.counts = dict(counts or {})

    @classmethod
    def build(cls, sentences: Iterable[str], min_count: int = 1) -> "Vocab":
        counts = Counter(w for s in sentences for w in tokenize(s))
        words = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIAL_TOKENS),
                       key=lambda w: (-counts[w], w))
        return cls(list(SPECIAL_TOKENS) + words, {w: counts[w] for w in words})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.index

    def encode(self, text: str, max_len: int) -> TokenSequence:
        ids = [CLS_ID] + [self.index.get(w, UNK_ID) for w in tokenize(text)]
        ids = ids[:max_len]
        return TokenSequence(ids=ids, mask=[1] * len(ids), raw_text=text)

    def unigram_probs(self) -> np.ndarray:
        """Corpus unigram distribution over ids; special tokens get zero mass."""
        p = np.zeros(len(self), dtype=np.float64)
        for w, c in self.counts.items():
            p[self.index[w]] = c
        if p.sum() == 0:
            p[len(SPECIAL_TOKENS):] = 1.0
        return p / p.sum()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(f"{t}\t{self.counts.get(t, 0)}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens, counts = [], {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                tok, _, c = line.rstrip("\n").partition("\t")
                tokens.append(tok)
                if tok not in SPECIAL_TOKENS:
                    counts[tok] = int(c or 0)
        return cls(tokens, counts)


@dataclass
class Batch:
    """Padded batch of token sequences."""

    ids: torch.Tensor
    mask: torch.Tensor
    sequences: list[TokenSequence] = field(default_factory=list)

    def __len__(self):
        return self.ids.shape[0]

    @property
    def texts(self) -> list[str]:
        return [s.raw_text for s in self.sequences]


def collate(seqs: Sequence[TokenSequence], length: int | None = None) -> Batch:
    if len(seqs) == 0:
        raise ValueError("empty batch")
    L = max(len(s) for s in seqs) if length is None else length
    ids = torch.full((len(seqs), L), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), L), dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s) > L:
            raise ValueError(f"sequence of length {len(s)} exceeds batch length {L}")
        ids[i, : len(s)] = torch.tensor(s.ids, dtype=torch.long)
        mask[i, : len(s)] = torch.tensor(s.mask, dtype=torch.long)
    return Batch(ids, mask, list(seqs))


@dataclass
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 32
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if min(self.vocab_size, self.dim, self.layers, self.heads, self.max_len) < 1:
            raise ValueError("encoder sizes must be positive")


def seeded_dropout(x: torch.Tensor, p: float, seed: int | None) -> torch.Tensor:
    """Inverted dropout whose mask is a pure function of ``seed``."""
    if seed is None or p == 0.0:
        return x
    gen = torch.Generator().manual_seed(int(seed))
    keep = torch.rand(x.shape, generator=gen, dtype=torch.float64) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, h, key_mask):
        B, L, D = h.shape
        q, k, v = self.qkv(h).view(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // self.heads)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(B, L, D))


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.attn = SelfAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, h, key_mask):
        h = self.norm1(h + self.attn(h, key_mask))
        return self.norm2(h + self.ff(h))


class Encoder(nn.Module):
    """Post-LN transformer with a tanh pooler over the ``[CLS]`` position.

    Dropout is applied only to the token embeddings ``X`` and is driven by an
    explicit seed, so two seeds give the two views of a positive pair.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.dim)
        self.pos_emb = nn.Embedding(config.max_len, config.dim)
        nn.init.normal_(self.pos_emb.weight, std=0.1)
        self.emb_norm = nn.LayerNorm(config.dim)
        self.layers = nn.ModuleList(EncoderLayer(config.dim, config.heads) for _ in range(config.layers))
        self.pooler = nn.Linear(config.dim, config.dim)

    @property
    def dim(self):
        return self.config.dim

    def embed(self, batch: Batch, dropout_seed: int | None = None) -> torch.Tensor:
        if len(batch) == 0:
            raise ValueError("empty batch")
        ids = batch.ids
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"batch length {ids.shape[1]} exceeds max_len={self.config.max_len}")
        bad = (ids < 0) | (ids >= self.config.vocab_size)
        if bad.any():
            raise ValueError(f"unknown token id {int(ids[bad][0])} (vocab_size={self.config.vocab_size})")
        pos = torch.arange(ids.shape[1])
        X = self.tok_emb(ids) + self.pos_emb(pos)[None]
        return seeded_dropout(X, self.config.dropout_p, dropout_seed)

    def encode_from_embeddings(self, X: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(X).all():
            raise ValueError("non-finite token embeddings")
        key_mask = mask.bool()
        h = self.emb_norm(X)
        for layer in self.layers:
            h = layer(h, key_mask)
        return torch.tanh(self.pooler(h[:, 0]))

    def encode(self, batch: Batch, dropout_seed: int | None = None) -> torch.Tensor:
        return self.encode_from_embeddings(self.embed(batch, dropout_seed), batch.mask)

    def forward(self, batch, dropout_seed=None):
        return self.encode(batch, dropout_seed)


class TextEncoder:
    """Vocabulary plus encoder: maps raw strings to sentence vectors."""

    def __init__(self, vocab: Vocab, encoder: Encoder):
        self.vocab = vocab
        self.encoder = encoder

    def batch(self, texts: Sequence[str]) -> Batch:
        return collate([self.vocab.encode(t, self.encoder.config.max_len) for t in texts])

    @torch.no_grad()
    def encode_texts(self, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(texts), batch_size):
            out.append(self.encoder.encode(self.batch(texts[i : i + batch_size])).double().numpy())
        if not out:
            return np.zeros((0, self.encoder.dim))
        return np.concatenate(out)


def random_encoder(vocab_size: int, seed: int = 0, dtype=torch.float32, **kwargs) -> Encoder:
    """Freshly initialised encoder with weights drawn from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = Encoder(EncoderConfig(vocab_size=vocab_size, **kwargs))
    return enc.to(dtype)


def distributional_embeddings(sentences: Iterable[str], vocab: Vocab, dim: int, window: int = 2,
                              seed: int = 0) -> torch.Tensor:
    """Unit-scale token vectors from a truncated SVD of the corpus PPMI matrix.

    Words used in the same contexts end up close together, a cheap stand-in
    for a pretrained embedding table. Special tokens get N(0, 1) rows.
    """
    n = len(vocab)
    counts = np.zeros((n, n))
    for s in sentences:
        ids = [vocab.index.get(w, UNK_ID) for w in tokenize(s)]
        for i, a in enumerate(ids):
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    counts[a, ids[j]] += 1.0
    total = counts.sum()
    rng = np.random.default_rng(seed)
    out = rng.standard_normal((n, dim))
    if total == 0:
        return torch.from_numpy(out)
    row = counts.sum(1, keepdims=True)
    col = counts.sum(0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * col))
    ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
    u, s, _ = np.linalg.svd(ppmi)
    k = min(dim, n)
    vecs = u[:, :k] * np.sqrt(s[:k])
    words = np.arange(len(SPECIAL_TOKENS), n)
    if len(words):
        scale = vecs[words].std()
        if scale > 0:
            out[words, :k] = vecs[words] / scale
        if k < dim:
            out[words, k:] = 0.0
    return torch.from_numpy(out)
