"""Training objectives: contrastive loss, replaced-token detection, total loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import CLS_ID, Batch, Encoder, TokenSequence, collate
from .perturbation import HyperParams


def cosine_sim(u, v) -> torch.Tensor:
    u, v = torch.as_tensor(u), torch.as_tensor(v)
    nu, nv = u.norm(), v.norm()
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return (u @ v) / (nu * nv)


def _as_rows(vectors, like: torch.Tensor) -> torch.Tensor:
    if isinstance(vectors, torch.Tensor):
        return vectors.reshape(-1, like.shape[-1])
    if len(vectors) == 0:
        return like.new_zeros((0, like.shape[-1]))
    return torch.stack([torch.as_tensor(v, dtype=like.dtype) for v in vectors])


def contrastive_loss(z, pos_set, neg_set, tau: float) -> torch.Tensor:
    """``-log(sum_pos exp(sim/tau) / sum_{pos+neg} exp(sim/tau))`` for one anchor."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    z = torch.as_tensor(z)
    pos = _as_rows(pos_set, z)
    neg = _as_rows(neg_set, z)
    if pos.shape[0] == 0:
        raise ValueError("positive set is empty")
    rows = torch.cat([pos, neg])
    if z.norm() == 0 or (rows.norm(dim=-1) == 0).any():
        raise ValueError("cosine similarity is undefined for a zero vector")
    sims = F.normalize(rows, dim=-1) @ F.normalize(z, dim=-1) / tau
    return torch.logsumexp(sims, 0) - torch.logsumexp(sims[: pos.shape[0]], 0)


def batch_contrastive_loss(anchors, positives, pool_a, pool_b, tau: float) -> torch.Tensor:
    """Mean contrastive loss over a batch of anchors.

    ``positives`` is a list of ``B x D`` tensors matched row-wise with the
    anchors. Row ``i``'s negatives are ``pool_a[j]`` and ``pool_b[j]`` for all
    ``j != i`` (the other sentences and their positive views).
    """
    B = anchors.shape[0]
    a = F.normalize(anchors, dim=-1)
    pos_logits = torch.stack([(a * F.normalize(p, dim=-1)).sum(-1) for p in positives], dim=1) / tau
    pool = F.normalize(torch.cat([pool_a, pool_b]), dim=-1)
    neg_logits = a @ pool.T / tau
    own = torch.zeros((B, 2 * B), dtype=torch.bool)
    idx = torch.arange(B)
    own[idx, idx] = True
    own[idx, idx + B] = True
    neg_logits = neg_logits.masked_fill(own, float("-inf"))
    all_logits = torch.cat([pos_logits, neg_logits], dim=1)
    return (torch.logsumexp(all_logits, 1) - torch.logsumexp(pos_logits, 1)).mean()


class UnigramGenerator:
    """Stand-in for a masked-LM generator: samples replacements from corpus unigram frequencies."""

    def __init__(self, probs: np.ndarray):
        self.probs = np.asarray(probs, dtype=np.float64)
        if self.probs.ndim != 1 or (self.probs < 0).any() or self.probs.sum() <= 0:
            raise ValueError("unigram distribution must be a non-negative, non-zero vector")

    def sample(self, original_id: int, rng: np.random.Generator) -> int:
        p = self.probs.copy()
        p[original_id] = 0.0
        total = p.sum()
        if total <= 0:
            raise ValueError(f"no replacement available for token id {original_id}")
        return int(rng.choice(len(p), p=p / total))


@dataclass
class RtdInstance:
    original_ids: list[int]
    edited_ids: list[int]
    labels: list[int]
    X_adv: torch.Tensor | None = None

    def __post_init__(self):
        if len(self.original_ids) != len(self.edited_ids) or len(self.labels) != len(self.edited_ids):
            raise ValueError("RTD instance fields have different lengths")
        for o, e, y in zip(self.original_ids, self.edited_ids, self.labels):
            if y != int(o == e):
                raise ValueError("labels disagree with id equality")


def n_to_mask(mask_rate: float, n_active: int) -> int:
    # half-up rounding, not Python's banker's rounding
    return max(1, int(math.floor(mask_rate * n_active + 0.5)))


def rtd_edit(seq: TokenSequence, mask_rate: float, rng: np.random.Generator, generator: UnigramGenerator) -> RtdInstance:
    """Mask a share of the word positions and let ``generator`` fill them in.

    The ``[CLS]`` slot and padding are never edited.
    """
    if not 0 < mask_rate < 1:
        raise ValueError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    cand = [i for i, (t, m) in enumerate(zip(seq.ids, seq.mask)) if m and t != CLS_ID]
    if not cand:
        raise ValueError("cannot edit a sequence with no word tokens")
    chosen = rng.choice(len(cand), size=n_to_mask(mask_rate, len(cand)), replace=False)
    edited = list(seq.ids)
    for c in sorted(chosen):
        pos = cand[c]
        edited[pos] = generator.sample(seq.ids[pos], rng)
    labels = [int(o == e) for o, e in zip(seq.ids, edited)]
    return RtdInstance(list(seq.ids), edited, labels)


@dataclass
class RtdBatch:
    edited: Batch
    labels: torch.Tensor
    weight: torch.Tensor


def rtd_batch(batch: Batch, mask_rate, rng, generator) -> RtdBatch:
    instances = [rtd_edit(s, mask_rate, rng, generator) for s in batch.sequences]
    L = batch.ids.shape[1]
    edited = collate([TokenSequence(inst.edited_ids, s.mask, s.raw_text) for inst, s in zip(instances, batch.sequences)], L)
    labels = torch.ones_like(batch.ids, dtype=torch.float64)
    for i, inst in enumerate(instances):
        labels[i, : len(inst.labels)] = torch.tensor(inst.labels, dtype=torch.float64)
    weight = (batch.mask.bool() & (batch.ids != CLS_ID)).to(torch.float64)
    return RtdBatch(edited, labels, weight)


class Discriminator(nn.Module):
    """Per-token MLP scoring ``[perturbed token embedding ; sentence vector ; position]``."""

    def __init__(self, dim: int, max_len: int = 32, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.max_len = max_len
        self.pos = nn.Embedding(max_len, dim)
        self.net = nn.Sequential(nn.Linear(3 * dim, hidden), nn.GELU(), nn.Linear(hidden, 1))

    def forward(self, X_adv: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """Logits that each token is original; shape ``B x L`` (or ``L`` unbatched)."""
        L = X_adv.shape[-2]
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds discriminator max_len={self.max_len}")
        h = h.unsqueeze(-2).expand(*X_adv.shape[:-1], h.shape[-1])
        pos = self.pos.weight[:L].to(X_adv.dtype).expand(*X_adv.shape[:-1], -1)
        return self.net(torch.cat([X_adv, h, pos], dim=-1)).squeeze(-1)

    def probs(self, X_adv, h):
        return torch.sigmoid(self(X_adv, h))


def rtd_bce(probs, labels, weight=None) -> torch.Tensor:
    """Summed binary cross-entropy with ``0 * log 0 = 0``."""
    probs = torch.as_tensor(probs, dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=probs.dtype)
    if not torch.isfinite(probs).all() or (probs < 0).any() or (probs > 1).any():
        raise ValueError("discriminator output outside [0, 1]")
    per_tok = -(torch.xlogy(labels, probs) + torch.xlogy(1 - labels, 1 - probs))
    if weight is not None:
        per_tok = per_tok * torch.as_tensor(weight, dtype=probs.dtype)
    return per_tok.sum()


def batch_rtd_loss(X_adv, h, labels, weight, disc: Discriminator) -> torch.Tensor:
    """Sum over sentences and word positions of the per-token RTD cross-entropy."""
    logits = disc(X_adv, h)
    if not torch.isfinite(logits).all():
        raise ValueError("discriminator produced non-finite scores")
    per_tok = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none")
    return (per_tok * weight.to(logits.dtype)).sum()


def rtd_loss(instance: RtdInstance, h, disc: Discriminator) -> torch.Tensor:
    if instance.X_adv is None:
        raise ValueError("RTD instance carries no perturbed embeddings")
    weight = torch.tensor([float(t != CLS_ID) for t in instance.original_ids])
    labels = torch.tensor(instance.labels, dtype=torch.float64)
    return batch_rtd_loss(instance.X_adv, h, labels, weight, disc)


@dataclass
class LossParts:
    con: torch.Tensor
    reg: torch.Tensor
    rtd: torch.Tensor
    total: torch.Tensor


def total_loss(encoder: Encoder, disc: Discriminator, mask, X, X_pos, delta, eta,
               X_edit, rtd: RtdBatch | None, hyper: HyperParams) -> LossParts:
    """Robust contrastive term + ``lambda1`` regulariser + ``lambda2`` RTD term.

    With ``hyper.epsilon == 0`` adversarial views are disabled and the first
    term is the plain dual-dropout contrastive loss.
    """
    z = encoder.encode_from_embeddings(X, mask)
    z_pos = encoder.encode_from_embeddings(X_pos, mask)
    zero = z.new_zeros(())
    if not hyper.adversarial:
        con = batch_contrastive_loss(z, [z_pos], z, z_pos, hyper.tau)
        return LossParts(con, zero, zero, con)
    z_adv = encoder.encode_from_embeddings(X + delta, mask)
    con = batch_contrastive_loss(z, [z_pos, z_adv], z, z_pos, hyper.tau)
    reg = batch_contrastive_loss(z_adv, [z_pos], z, z_pos, hyper.tau) if hyper.lambda1 > 0 else zero
    if hyper.lambda2 > 0 and rtd is not None:
        rtd_term = batch_rtd_loss(X_edit + eta, z, rtd.labels, rtd.weight, disc)
    else:
        rtd_term = zero
    total = con + hyper.lambda1 * reg + hyper.lambda2 * rtd_term
    if not torch.isfinite(total):
        raise FloatingPointError("total loss is not finite")
    return LossParts(con, reg, rtd_term, total)


def perturbation_loss_fn(encoder: Encoder, mask, tau: float):
    """Contrastive loss of perturbed anchors against their clean positive views."""

    def loss_fn(X_pert, X_pos):
        z_pert = encoder.encode_from_embeddings(X_pert, mask)
        z_pos = encoder.encode_from_embeddings(X_pos, mask)
        return batch_contrastive_loss(z_pert, [z_pos], z_pert, z_pos, tau)

    return loss_fn
