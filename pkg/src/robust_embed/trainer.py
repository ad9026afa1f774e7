"""Adversarial contrastive training loop and checkpoint round-tripping."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .encoder import Encoder, EncoderConfig, TextEncoder, Vocab, collate, distributional_embeddings
from .objectives import Discriminator, UnigramGenerator, perturbation_loss_fn, rtd_batch, total_loss
from .perturbation import HyperParams, generate, init_vocab_table, norm_of

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "L_con", "L_reg", "L_rtd", "L_total", "max_delta_norm", "max_eta_norm")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, dump: dict):
        super().__init__(message)
        self.dump = dump


def derive_seed(master: int, stream: str) -> int:
    """Independent child seed for a named RNG stream."""
    key = [int(master)] + [ord(c) for c in stream]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class TrainState:
    encoder: Encoder
    disc: Discriminator
    vocab: Vocab
    V: torch.Tensor
    hyper: HyperParams
    seed: int = 0
    step: int = 0
    epoch: int = 0
    optimizer: torch.optim.Optimizer | None = None
    best_metric: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def text_encoder(self) -> TextEncoder:
        return TextEncoder(self.vocab, self.encoder)


def init_state(vocab: Vocab, hyper: HyperParams, seed: int = 0, embedding_init: str = "random",
               sentences: Sequence[str] = (), **encoder_kwargs) -> TrainState:
    config = EncoderConfig(vocab_size=len(vocab), **encoder_kwargs)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init"))
        encoder = Encoder(config)
        disc = Discriminator(config.dim, config.max_len)
    if embedding_init == "distributional":
        table = distributional_embeddings(sentences, vocab, config.dim, seed=derive_seed(seed, "emb"))
        with torch.no_grad():
            encoder.tok_emb.weight.copy_(table)
    elif embedding_init != "random":
        raise ValueError(f"unknown embedding_init {embedding_init!r}")
    gen = torch.Generator().manual_seed(derive_seed(seed, "vocab-table"))
    V = init_vocab_table(len(vocab), config.dim, hyper, gen)
    params = list(encoder.parameters()) + list(disc.parameters())
    opt = torch.optim.Adam(params, lr=hyper.lr)
    return TrainState(encoder, disc, vocab, V, hyper, seed=seed, optimizer=opt)


def _record(state, parts, delta, eta):
    hyper = state.hyper
    return {
        "step": state.step,
        "epoch": state.epoch,
        "L_con": parts.con.item(),
        "L_reg": parts.reg.item(),
        "L_rtd": parts.rtd.item(),
        "L_total": parts.total.item(),
        "max_delta_norm": float(norm_of(delta, hyper.norm, 1).max()) if delta.numel() else 0.0,
        "max_eta_norm": float(norm_of(eta, hyper.norm, 2).max()) if eta.numel() else 0.0,
    }


def train_step(state: TrainState, batch, rngs: dict) -> dict:
    """One pass of the inner perturbation loop followed by one optimizer step."""
    hyper, enc = state.hyper, state.encoder
    enc.train()
    m1, m2 = (int(s) for s in rngs["dropout"].integers(0, 2**62, size=2))
    X = enc.embed(batch, m1)
    X_pos = enc.embed(batch, m2)
    delta, eta, state.V = generate(
        X, X_pos, state.V, hyper, perturbation_loss_fn(enc, batch.mask, hyper.tau),
        batch.ids, batch.mask, rngs["perturb"],
    )
    rtd = X_edit = None
    if hyper.adversarial and hyper.lambda2 > 0:
        rtd = rtd_batch(batch, hyper.mask_rate, rngs["mask"], rngs["generator"])
        X_edit = enc.embed(rtd.edited, m1)
    try:
        parts = total_loss(enc, state.disc, batch.mask, X, X_pos, delta, eta, X_edit, rtd, hyper)
    except FloatingPointError as exc:
        dump = {
            "step": state.step,
            "texts": batch.texts,
            "max_delta_norm": float(norm_of(delta, hyper.norm, 1).max()),
            "max_eta_norm": float(norm_of(eta, hyper.norm, 2).max()),
        }
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {json.dumps(dump)}", dump) from exc
    state.optimizer.zero_grad(set_to_none=True)
    parts.total.backward()
    state.optimizer.step()
    state.step += 1
    return _record(state, parts, delta, eta)


def batches(seqs, batch_size, order):
    for i in range(0, len(order), batch_size):
        yield collate([seqs[j] for j in order[i : i + batch_size]])


def train(
    sentences: Sequence[str],
    hyper: HyperParams,
    seed: int = 0,
    vocab: Vocab | None = None,
    encoder_kwargs: dict | None = None,
    validate: Callable[[TextEncoder], float] | None = None,
    log_path=None,
    reset_v_each_epoch: bool = False,
    on_record: Callable[[dict], None] | None = None,
    embedding_init: str = "random",
) -> tuple[TrainState, list[dict]]:
    """Train an encoder on raw sentences.

    If ``validate`` is given it is called after every epoch and the weights
    with the highest score are kept; otherwise the last epoch's weights are.
    """
    sentences = [s for s in sentences if s.strip()]
    if not sentences:
        raise ValueError("training corpus is empty")
    vocab = vocab or Vocab.build(sentences)
    state = init_state(vocab, hyper, seed, embedding_init, sentences, **(encoder_kwargs or {}))
    max_len = state.encoder.config.max_len
    seqs = [vocab.encode(s, max_len) for s in sentences]
    rngs = {
        "shuffle": np.random.default_rng(derive_seed(seed, "shuffle")),
        "dropout": np.random.default_rng(derive_seed(seed, "dropout")),
        "mask": np.random.default_rng(derive_seed(seed, "mask")),
        "perturb": torch.Generator().manual_seed(derive_seed(seed, "perturb")),
        "generator": UnigramGenerator(vocab.unigram_probs()),
    }
    records: list[dict] = []
    best = None
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, hyper.epochs + 1):
            state.epoch = epoch
            if reset_v_each_epoch and epoch > 1:
                gen = torch.Generator().manual_seed(derive_seed(seed, f"vocab-table-{epoch}"))
                state.V = init_vocab_table(len(vocab), state.encoder.dim, hyper, gen)
            order = rngs["shuffle"].permutation(len(seqs))
            for batch in batches(seqs, hyper.batch_size, order):
                rec = train_step(state, batch, rngs)
                records.append(rec)
                if log_file:
                    log_file.write(", ".join(f"{k}={rec[k]}" for k in LOG_FIELDS) + "\n")
                if on_record:
                    on_record(rec)
            epoch_loss = np.mean([r["L_total"] for r in records if r["epoch"] == epoch])
            log.info("epoch %d mean L_total %.4f", epoch, epoch_loss)
            if validate is not None:
                state.encoder.eval()
                score = float(validate(state.text_encoder))
                log.info("epoch %d validation %.4f", epoch, score)
                if best is None or score > best[0]:
                    best = (score, copy.deepcopy(state.encoder.state_dict()),
                            copy.deepcopy(state.disc.state_dict()), state.V.clone())
    finally:
        if log_file:
            log_file.close()
    if best is not None:
        state.best_metric = best[0]
        state.encoder.load_state_dict(best[1])
        state.disc.load_state_dict(best[2])
        state.V = best[3]
    state.encoder.eval()
    return state, records


def epoch_means(records: list[dict], key: str = "L_total") -> dict[int, float]:
    out: dict[int, list[float]] = {}
    for r in records:
        out.setdefault(r["epoch"], []).append(r[key])
    return {e: float(np.mean(v)) for e, v in sorted(out.items())}


def save_checkpoint(state: TrainState, path):
    path = Path(path)
    tensors = {f"encoder.{k}": v for k, v in state.encoder.state_dict().items()}
    tensors.update({f"disc.{k}": v for k, v in state.disc.state_dict().items()})
    tensors["V"] = state.V
    if state.optimizer is not None:
        for i, p in enumerate(p for g in state.optimizer.param_groups for p in g["params"]):
            st = state.optimizer.state.get(p)
            if st:
                tensors[f"optim.{i}.exp_avg"] = st["exp_avg"]
                tensors[f"optim.{i}.exp_avg_sq"] = st["exp_avg_sq"]
    ckpt.write_tensors(path, tensors)
    state.vocab.save(path / "vocab.txt")
    ckpt.write_meta(path, {
        "encoder_config": asdict(state.encoder.config),
        "hyper": state.hyper.as_dict(),
        "seed": state.seed,
        "step": state.step,
        "epoch": state.epoch,
        "best_metric": state.best_metric,
    })


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    meta = ckpt.read_meta(path)
    tensors = ckpt.read_tensors(path)
    if not (path / "vocab.txt").exists():
        raise ckpt.CheckpointError(f"no vocab.txt in {path}")
    vocab = Vocab.load(path / "vocab.txt")
    config = EncoderConfig(**meta["encoder_config"])
    if config.vocab_size != len(vocab):
        raise ckpt.CheckpointError(f"vocab.txt has {len(vocab)} entries, config expects {config.vocab_size}")
    hyper = HyperParams(**meta["hyper"])
    encoder = Encoder(config)
    disc = Discriminator(config.dim, config.max_len)
    for prefix, module in (("encoder.", encoder), ("disc.", disc)):
        sd = module.state_dict()
        for k, ref in sd.items():
            name = prefix + k
            if name not in tensors:
                raise ckpt.CheckpointError(f"tensor {name} missing from manifest")
            if tuple(tensors[name].shape) != tuple(ref.shape):
                raise ckpt.CheckpointError(f"tensor {name}: shape {tuple(tensors[name].shape)} != {tuple(ref.shape)}")
        module.load_state_dict({k: tensors[prefix + k] for k in sd})
    if "V" not in tensors or tuple(tensors["V"].shape) != (len(vocab), config.dim):
        raise ckpt.CheckpointError("tensor V missing or mis-shaped")
    params = list(encoder.parameters()) + list(disc.parameters())
    opt = torch.optim.Adam(params, lr=hyper.lr)
    for i, p in enumerate(params):
        if f"optim.{i}.exp_avg" in tensors:
            opt.state[p] = {
                "step": torch.tensor(float(meta["step"])),
                "exp_avg": tensors[f"optim.{i}.exp_avg"],
                "exp_avg_sq": tensors[f"optim.{i}.exp_avg_sq"],
            }
    encoder.eval()
    return TrainState(encoder, disc, vocab, tensors["V"], hyper, seed=meta["seed"], step=meta["step"],
                      epoch=meta["epoch"], optimizer=opt, best_metric=meta.get("best_metric"))


def load_text_encoder(path) -> TextEncoder:
    return load_checkpoint(path).text_encoder
