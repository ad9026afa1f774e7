"""Bundled toy datasets and loaders for the plain-text formats.

Formats (all UTF-8):

* corpus: one sentence per line
* STS: ``sentence_a<TAB>sentence_b<TAB>score`` with score in [0, 5]
* classification: ``text<TAB>label``
* lexicon: ``word<TAB>syn1,syn2,...``
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

# Synonym groups. The first two members of each adjective group are the
# "common" forms used in labelled data; the rest only occur in the
# unlabelled corpus and in the lexicon.
POSITIVE = [
    ["good", "nice", "fine", "decent"],
    ["great", "excellent", "superb", "terrific"],
    ["fun", "enjoyable", "entertaining", "amusing"],
    ["beautiful", "lovely", "gorgeous", "stunning"],
    ["smart", "clever", "witty", "sharp"],
]
NEGATIVE = [
    ["bad", "poor", "lousy", "weak"],
    ["terrible", "awful", "dreadful", "horrible"],
    ["boring", "dull", "tedious", "bland"],
    ["ugly", "hideous", "grim", "messy"],
    ["stupid", "silly", "dumb", "inane"],
]
SUBJECTS = [["movie", "film"], ["show", "series"], ["story", "tale"], ["book", "novel"], ["play", "drama"], ["album", "record"]]
ASPECTS = [["acting", "performances"], ["plot", "storyline"], ["music", "score"], ["ending", "finale"], ["pacing", "tempo"], ["dialogue", "lines"]]
INTENSIFIERS = [["very", "really", "truly", "quite"]]

TEMPLATES = [
    "the {s} was {i} {a}",
    "the {p} of the {s} was {a}",
    "i found the {p} {i} {a} and the {p2} {a2}",
    "what a {a} {s} with {a2} {p}",
    "this {s} is {a} and {a2}",
    "the {s} has {a} {p} and a {a2} {p2}",
    "honestly the {p} felt {i} {a}",
    "everyone said the {s} was {a} but the {p} was {a2}",
]


@dataclass
class StsExample:
    sentence_a: str
    sentence_b: str
    gold: float

    def __post_init__(self):
        if not 0.0 <= self.gold <= 5.0:
            raise ValueError(f"STS gold score {self.gold} outside [0, 5]")


@dataclass
class LabeledExample:
    text: str
    label: int


class ToyWorld:
    """Template grammar over sentiment-bearing synonym groups."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def _pick(self, groups, common_only):
        g = groups[self.rng.integers(len(groups))]
        pool = g[:2] if common_only else g
        return g, pool[self.rng.integers(len(pool))]

    def _fill(self, template, polarity, common_only):
        adj = POSITIVE if polarity > 0 else NEGATIVE
        _, s = self._pick(SUBJECTS, common_only)
        _, p = self._pick(ASPECTS, common_only)
        _, p2 = self._pick(ASPECTS, common_only)
        _, i = self._pick(INTENSIFIERS, common_only)
        _, a = self._pick(adj, common_only)
        _, a2 = self._pick(adj, common_only)
        return template.format(s=s, p=p, p2=p2, i=i, a=a, a2=a2)

    def sentence(self, polarity: int | None = None, common_only: bool = False) -> tuple[str, int]:
        if polarity is None:
            polarity = 1 if self.rng.random() < 0.5 else -1
        t = TEMPLATES[self.rng.integers(len(TEMPLATES))]
        return self._fill(t, polarity, common_only), int(polarity > 0)

    def corpus(self, n: int) -> list[str]:
        return [self.sentence()[0] for _ in range(n)]

    def classification(self, n: int, common_only: bool = True) -> list[LabeledExample]:
        out = []
        for k in range(n):
            text, label = self.sentence(polarity=1 if k % 2 == 0 else -1, common_only=common_only)
            out.append(LabeledExample(text, label))
        return out

    def _paraphrase(self, text: str) -> str:
        words = []
        for w in text.split():
            group = _GROUP_OF.get(w)
            if group is not None and self.rng.random() < 0.7:
                alts = [x for x in group if x != w]
                w = alts[self.rng.integers(len(alts))]
            words.append(w)
        return " ".join(words)

    def _flip(self, text: str) -> str:
        words = []
        for w in text.split():
            if w in _OPPOSITE:
                alts = _OPPOSITE[w]
                w = alts[self.rng.integers(len(alts))]
            words.append(w)
        return " ".join(words)

    def sts(self, n: int) -> list[StsExample]:
        out = []
        for k in range(n):
            a, _ = self.sentence()
            kind = k % 4
            if kind == 0:
                b, base = self._paraphrase(a), 4.6
            elif kind == 1:
                b, base = self._paraphrase(self._flip(a)), 1.8
            elif kind == 2:
                pol = 1 if any(w in _POS_WORDS for w in a.split()) else -1
                b, base = self.sentence(polarity=pol)[0], 3.0
            else:
                b, base = self.sentence()[0], 0.6
            gold = float(np.clip(base + self.rng.uniform(-0.4, 0.4), 0.0, 5.0))
            out.append(StsExample(a, b, round(gold, 2)))
        return out


_GROUP_OF = {w: g for groups in (POSITIVE, NEGATIVE, SUBJECTS, ASPECTS, INTENSIFIERS) for g in groups for w in g}
_POS_WORDS = {w for g in POSITIVE for w in g}
_OPPOSITE = {}
for _pg, _ng in zip(POSITIVE, NEGATIVE):
    for _w in _pg:
        _OPPOSITE[_w] = _ng
    for _w in _ng:
        _OPPOSITE[_w] = _pg


def default_lexicon() -> dict[str, list[str]]:
    lex = {}
    for groups in (POSITIVE, NEGATIVE, SUBJECTS, ASPECTS, INTENSIFIERS):
        for g in groups:
            for w in g:
                lex[w] = [x for x in g if x != w]
    return lex


# ---------------------------------------------------------------- file I/O

def read_corpus(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def write_corpus(path, sentences):
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(s + "\n" for s in sentences)


def read_sts(path) -> list[StsExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            out.append(StsExample(parts[0], parts[1], float(parts[2])))
    return out


def write_sts(path, examples):
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(f"{ex.sentence_a}\t{ex.sentence_b}\t{ex.gold}\n")


def read_classification(path) -> list[LabeledExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            text, sep, label = line.rpartition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected text<TAB>label")
            out.append(LabeledExample(text, int(label)))
    return out


def write_classification(path, examples):
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(f"{ex.text}\t{ex.label}\n")


def read_lexicon(path) -> dict[str, list[str]]:
    lex = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            word, sep, syns = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected word<TAB>syn1,syn2,...")
            lex[word.strip().lower()] = [s.strip().lower() for s in syns.split(",") if s.strip()]
    return lex


def write_lexicon(path, lex):
    with open(path, "w", encoding="utf-8") as f:
        for w, syns in lex.items():
            f.write(f"{w}\t{','.join(syns)}\n")


BUNDLED = {
    "corpus": "toy_corpus.txt",
    "corpus_large": "toy_corpus_large.txt",
    "sts": "mini_sts.tsv",
    "sts_dev": "mini_sts_dev.tsv",
    "sentiment_train": "sentiment_train.tsv",
    "sentiment_test": "sentiment_test.tsv",
    "lexicon": "lexicon.txt",
}


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("robust_embed") / "data" / BUNDLED[name]))


def build_bundled(out_dir, seed: int = 0, corpus_size: int = 512, large_corpus_size: int = 2048):
    """Regenerate the bundled files deterministically.

    Labelled sentiment data uses only the common word forms, so a synonym
    swap moves an input onto words the probe never saw with a label.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = ToyWorld(seed)
    write_corpus(out / BUNDLED["corpus"], world.corpus(corpus_size))
    write_sts(out / BUNDLED["sts"], world.sts(200))
    write_sts(out / BUNDLED["sts_dev"], world.sts(80))
    write_classification(out / BUNDLED["sentiment_train"], world.classification(300))
    write_classification(out / BUNDLED["sentiment_test"], world.classification(300))
    write_lexicon(out / BUNDLED["lexicon"], default_lexicon())
    write_corpus(out / BUNDLED["corpus_large"], world.corpus(large_corpus_size))
