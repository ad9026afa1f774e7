"""Black-box word- and character-level attacks with exact query accounting."""
from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class VictimModel:
    """Wraps a prediction closure and counts every call."""

    def __init__(self, predict: Callable):
        self.predict = predict
        self.queries = 0

    def __call__(self, text):
        self.queries += 1
        return self.predict(text)


@dataclass
class AttackResult:
    original_text: str
    perturbed_text: str
    original_output: object
    perturbed_output: object
    success: bool
    queries: int
    words_modified: int
    eligible: bool = True
    label: int | None = None

    def as_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return [float(x) for x in v]
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v

        return {k: clean(v) for k, v in self.__dict__.items()}


class ClassificationGoal:
    """Flip the predicted label. With ``label`` set, only originally correct inputs are eligible."""

    def __init__(self, label: int | None = None):
        self.label = label
        self.target = None

    def bind(self, output) -> "ClassificationGoal":
        g = ClassificationGoal(self.label)
        g.target = int(np.argmax(output))
        return g

    @property
    def eligible(self):
        return self.label is None or self.target == self.label

    def score(self, output) -> float:
        return float(np.asarray(output)[self.target])

    def is_success(self, output) -> bool:
        return int(np.argmax(output)) != self.target


class RegressionGoal:
    """Push a regression output away from ``gold`` by at least ``threshold`` more than it started."""

    def __init__(self, gold: float, threshold: float = 1.0):
        self.gold = float(gold)
        self.threshold = float(threshold)
        self.base = None

    def bind(self, output) -> "RegressionGoal":
        g = RegressionGoal(self.gold, self.threshold)
        g.base = abs(float(output) - self.gold)
        return g

    eligible = True

    def score(self, output) -> float:
        return -abs(float(output) - self.gold)

    def is_success(self, output) -> bool:
        return abs(float(output) - self.gold) - self.base >= self.threshold


class BudgetExhausted(Exception):
    pass


class _Session:
    def __init__(self, victim: VictimModel, budget: int | None):
        self.victim = victim
        self.start = victim.queries
        self.budget = budget

    @property
    def used(self):
        return self.victim.queries - self.start

    def query(self, text):
        if self.budget is not None and self.used >= self.budget:
            raise BudgetExhausted
        return self.victim(text)


def _join(words):
    return " ".join(words)


def _importance(session: _Session, words: list[str], goal) -> list[tuple[int, float]]:
    base = goal._base_score
    out = []
    for i in range(len(words)):
        out.append((i, base - goal.score(session.query(_join(words[:i] + words[i + 1 :])))))
    return out


def _rank(importances):
    return [i for i, _ in sorted(importances, key=lambda t: (-t[1], t[0]))]


def _start(victim, text, goal, budget):
    words = text.split()
    if not words:
        raise ValueError("cannot attack an empty text")
    if budget is not None and budget <= 0:
        raise ValueError("attack budget must be positive")
    session = _Session(victim, budget)
    orig = session.query(text)
    goal = (goal or ClassificationGoal()).bind(orig)
    goal._base_score = goal.score(orig)
    return words, session, orig, goal


def word_importance(victim: VictimModel, text: str, goal=None) -> list[int]:
    """Word indices ranked by how much deleting each word hurts the prediction.

    Uses ``len(words) + 1`` queries. Ties keep positional order.
    """
    words, session, _, goal = _start(victim, text, goal, None)
    return _rank(_importance(session, words, goal))


def _greedy(victim, text, goal, budget, max_fraction_modified, candidates_for, order_fn=None):
    words, session, orig, goal = _start(victim, text, goal, budget)
    label = getattr(goal, "label", None)
    if not goal.eligible:
        return AttackResult(text, text, orig, orig, False, session.used, 0, eligible=False, label=label)
    current, cur_out = list(words), orig
    cur_score = goal.score(orig)
    modified = 0
    limit = int(math.floor(max_fraction_modified * len(words) + 1e-9))
    try:
        imp = _importance(session, words, goal)
        order = order_fn(session, words, goal, imp) if order_fn else _rank(imp)
        for idx in order:
            if modified >= limit:
                break
            cands = [c for c in candidates_for(words[idx]) if c != current[idx]]
            best = None
            for c in cands:
                trial = current[:idx] + [c] + current[idx + 1 :]
                out = session.query(_join(trial))
                s = goal.score(out)
                if goal.is_success(out):
                    best = (s, c, out, True)
                    break
                if best is None or s < best[0]:
                    best = (s, c, out, False)
            if best is None or (best[0] >= cur_score and not best[3]):
                continue
            current[idx] = best[1]
            cur_score, cur_out = best[0], best[2]
            modified += 1
            if best[3]:
                return AttackResult(text, _join(current), orig, cur_out, True, session.used, modified, label=label)
    except BudgetExhausted:
        pass
    return AttackResult(text, _join(current), orig, cur_out, False, session.used, modified, label=label)


def synonym_swap_attack(victim: VictimModel, text: str, lexicon: dict[str, list[str]], budget: int | None = 2000,
                        goal=None, max_fraction_modified: float = 0.4, saliency: str = "delete") -> AttackResult:
    """Greedy synonym substitution in word-importance order.

    ``saliency="pwws"`` reorders words by softmax(deletion saliency) times
    the best single-swap effect, in the spirit of probability-weighted word
    saliency; this costs one extra query per candidate synonym.
    """

    def candidates(word):
        return lexicon.get(word.lower(), [])

    order_fn = None
    if saliency == "pwws":
        def order_fn(session, words, goal, imp):
            sal = np.array([s for _, s in imp])
            w = np.exp(sal - sal.max())
            w /= w.sum()
            base = goal._base_score
            gains = []
            for i, word in enumerate(words):
                best = 0.0
                for c in candidates(word):
                    out = session.query(_join(words[:i] + [c] + words[i + 1 :]))
                    best = max(best, base - goal.score(out))
                gains.append(best)
            return [i for i in sorted(range(len(words)), key=lambda i: (-w[i] * gains[i], i))]
    elif saliency != "delete":
        raise ValueError(f"unknown saliency mode {saliency!r}")
    return _greedy(victim, text, goal, budget, max_fraction_modified, candidates, order_fn)


VISUAL = {"o": "0", "l": "1", "i": "1", "a": "@", "e": "3", "s": "$", "t": "7", "b": "8", "g": "9"}


def bug_candidates(word: str, rng: np.random.Generator) -> list[str]:
    """Swap, delete, insert and visually-similar substitutions of one word."""
    out = []
    n = len(word)
    if n >= 2:
        i = int(rng.integers(n - 1))
        out.append(word[:i] + word[i + 1] + word[i] + word[i + 2 :])
        j = int(rng.integers(n))
        out.append(word[:j] + word[j + 1 :])
    k = int(rng.integers(n + 1))
    out.append(word[:k] + string.ascii_lowercase[int(rng.integers(26))] + word[k:])
    for j, ch in enumerate(word):
        if ch in VISUAL:
            out.append(word[:j] + VISUAL[ch] + word[j + 1 :])
            break
    seen, uniq = set(), []
    for c in out:
        if c and c != word and c not in seen:
            seen.add(c)
            uniq.append(c)
    return uniq


def char_bugger_attack(victim: VictimModel, text: str, budget: int | None = 2000, goal=None,
                       max_fraction_modified: float = 0.4, seed: int = 0) -> AttackResult:
    """Greedy character-level edits on the most important words."""
    rng = np.random.default_rng(seed)
    return _greedy(victim, text, goal, budget, max_fraction_modified, lambda w: bug_candidates(w, rng))


def success_rate(results: Sequence[AttackResult]) -> float:
    eligible = [r for r in results if r.eligible]
    if not eligible:
        raise ValueError("no eligible attack results")
    return sum(r.success for r in eligible) / len(eligible)


def mean_queries(results: Sequence[AttackResult]) -> float:
    eligible = [r for r in results if r.eligible]
    if not eligible:
        raise ValueError("no eligible attack results")
    return float(np.mean([r.queries for r in eligible]))


@dataclass
class AttackSummary:
    success_rate: float
    mean_queries: float
    clean_accuracy: float
    adversarial_accuracy: float
    n: int
    eligible: int
    results: list = field(repr=False, default_factory=list)


def summarize(results: Sequence[AttackResult]) -> AttackSummary:
    """Aggregates for one attack run; ``clean - adversarial`` accuracy is the accuracy reduction."""
    n = len(results)
    eligible = [r for r in results if r.eligible]
    clean = len(eligible) / n if n else 0.0
    adv = sum(1 for r in eligible if not r.success) / n if n else 0.0
    return AttackSummary(success_rate(results), mean_queries(results), clean, adv, n, len(eligible), list(results))
