"""STS scoring, transfer probing, AdvSTS construction and embedding diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.linear_model import LogisticRegression

from .data import LabeledExample, StsExample

UNIT_TOL = 1e-6


def _unit_checked(x, what="embeddings") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= UNIT_TOL):
        raise ValueError(f"{what} must be unit-normalised (max |norm - 1| = {np.max(np.abs(norms - 1)):.2e})")
    return x


def normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalise a zero vector")
    return x / n


def cosine(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("degenerate zero embedding")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def score_from_embeddings(za, zb) -> float:
    return 2.5 * (1.0 + cosine(za, zb))


def sts_score(model, sentence_a: str, sentence_b: str) -> float:
    """Similarity on the 0-5 scale, ``2.5 * (1 + cos(z_a, z_b))``."""
    z = model.encode_texts([sentence_a, sentence_b])
    return score_from_embeddings(z[0], z[1])


def sts_scores(model, examples: Sequence[StsExample]) -> np.ndarray:
    za = model.encode_texts([e.sentence_a for e in examples])
    zb = model.encode_texts([e.sentence_b for e in examples])
    return np.array([score_from_embeddings(a, b) for a, b in zip(za, zb)])


def spearman(pred, gold) -> float:
    """Spearman rank correlation with average ranks for ties."""
    pred, gold = np.asarray(pred, dtype=np.float64), np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape or pred.ndim != 1:
        raise ValueError("spearman needs two 1-d sequences of equal length")
    if len(pred) < 2:
        raise ValueError("spearman needs at least two items")
    if np.all(pred == pred[0]) or np.all(gold == gold[0]):
        raise ValueError("spearman correlation is undefined for a constant input")
    rp, rg = rankdata(pred), rankdata(gold)
    rp, rg = rp - rp.mean(), rg - rg.mean()
    return float(np.clip(rp @ rg / math.sqrt((rp @ rp) * (rg @ rg)), -1.0, 1.0))


def evaluate_sts(model, examples: Sequence[StsExample]) -> float:
    return spearman(sts_scores(model, examples), [e.gold for e in examples])


def alignment(pairs) -> float:
    """Mean squared distance between unit-normalised positive pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("alignment needs at least one pair")
    a = _unit_checked([p[0] for p in pairs])
    b = _unit_checked([p[1] for p in pairs])
    return float(np.mean(np.sum((a - b) ** 2, axis=-1)))


def uniformity(embeddings, t: float = 2.0) -> float:
    """``log mean exp(-t * |x - y|^2)`` over ordered pairs with ``x != y``."""
    x = _unit_checked(embeddings)
    n = x.shape[0]
    if n < 2:
        raise ValueError("uniformity needs at least two embeddings")
    sq = np.maximum(2.0 - 2.0 * (x @ x.T), 0.0)
    off = ~np.eye(n, dtype=bool)
    vals = -t * sq[off]
    m = vals.max()
    return float(m + np.log(np.mean(np.exp(vals - m))))


def embedding_metrics(model, sentences: Sequence[str], dropout_model=None) -> dict:
    """Alignment over dropout views (or identical views) and uniformity over ``sentences``."""
    z = normalize(model.encode_texts(sentences))
    if dropout_model is not None:
        za, zb = dropout_model(sentences)
        pairs = list(zip(normalize(za), normalize(zb)))
    else:
        pairs = list(zip(z, z))
    return {"alignment": alignment(pairs), "uniformity": uniformity(z)}


@dataclass
class ProbeResult:
    accuracy: float
    classifier: LogisticRegression = field(repr=False)


def fit_probe(X, y, seed: int = 0, C: float = 1.0) -> LogisticRegression:
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise ValueError("transfer probe needs at least two classes in the training set")
    clf = LogisticRegression(C=C, max_iter=2000, random_state=seed)
    return clf.fit(np.asarray(X, dtype=np.float64), y)


def transfer_probe(model, train: Sequence[LabeledExample], test: Sequence[LabeledExample], seed: int = 0,
                   C: float = 1.0) -> ProbeResult:
    """Logistic-regression head on frozen sentence embeddings; returns test accuracy."""
    Xtr = model.encode_texts([e.text for e in train])
    clf = fit_probe(Xtr, [e.label for e in train], seed, C)
    Xte = model.encode_texts([e.text for e in test])
    acc = float(np.mean(clf.predict(Xte) == np.array([e.label for e in test])))
    return ProbeResult(acc, clf)


class ProbeClassifier:
    """Frozen encoder + fitted probe, callable on raw text -> class probabilities."""

    def __init__(self, model, clf: LogisticRegression):
        self.model = model
        self.clf = clf

    def __call__(self, text: str) -> np.ndarray:
        return self.clf.predict_proba(self.model.encode_texts([text]))[0]


@dataclass
class AdvStsOutcome:
    examples: list[StsExample]
    success_rate: float
    results: list = field(repr=False, default_factory=list)


def build_advsts(model, dataset: Sequence[StsExample], attack: Callable, delta_threshold: float = 1.0) -> AdvStsOutcome:
    """Attack one sentence per pair to push the predicted score away from gold.

    ``attack(victim, text, goal)`` is an attack from :mod:`robust_embed.attacks`.
    The longer sentence is attacked (``sentence_a`` on ties). The success
    rate is over all pairs.
    """
    from .attacks import RegressionGoal, VictimModel

    if not dataset:
        raise ValueError("AdvSTS needs a non-empty dataset")
    out, results = [], []
    for ex in dataset:
        attack_a = len(ex.sentence_a.split()) >= len(ex.sentence_b.split())
        fixed = ex.sentence_b if attack_a else ex.sentence_a
        z_fixed = model.encode_texts([fixed])[0]

        def predict(text, z_fixed=z_fixed):
            return score_from_embeddings(model.encode_texts([text])[0], z_fixed)

        victim = VictimModel(predict)
        target = ex.sentence_a if attack_a else ex.sentence_b
        res = attack(victim, target, RegressionGoal(ex.gold, delta_threshold))
        results.append(res)
        new = res.perturbed_text if res.success else target
        out.append(StsExample(new, ex.sentence_b, ex.gold) if attack_a else StsExample(ex.sentence_a, new, ex.gold))
    rate = sum(r.success for r in results) / len(results)
    return AdvStsOutcome(out, rate, results)
