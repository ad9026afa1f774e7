import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_embed.attacks import (
    AttackResult,
    ClassificationGoal,
    RegressionGoal,
    VictimModel,
    bug_candidates,
    char_bugger_attack,
    mean_queries,
    success_rate,
    summarize,
    synonym_swap_attack,
    word_importance,
)

POS = {"good": 2.0, "great": 3.0, "nice": 0.5}
NEG = {"bad": 2.0, "awful": 3.0, "poor": 0.1}
LEX = {"good": ["nice", "fine"], "great": ["superb", "nice"], "movie": ["film"], "bad": ["poor"]}


def keyword_probs(text):
    """Two-class keyword scorer; unknown words are neutral."""
    s = sum(POS.get(w, 0.0) - NEG.get(w, 0.0) for w in text.split())
    p = 1.0 / (1.0 + np.exp(-s))
    return np.array([1 - p, p])


def victim():
    return VictimModel(keyword_probs)


def test_victim_counts_queries():
    v = victim()
    v("good")
    v("bad")
    assert v.queries == 2


def test_word_importance_order_and_cost():
    v = victim()
    order = word_importance(v, "the movie was great and good")
    assert order[:2] == [3, 5]
    assert v.queries == 6 + 1


def test_swap_flips_keyword_classifier():
    v = victim()
    res = synonym_swap_attack(v, "a good movie", LEX, goal=ClassificationGoal(1))
    assert res.success
    assert res.perturbed_text == "a fine movie"
    assert res.words_modified == 1
    assert res.queries == v.queries
    assert np.argmax(res.perturbed_output) == 0


def test_no_synonyms_fails():
    res = synonym_swap_attack(victim(), "great great", {}, goal=ClassificationGoal(1))
    assert not res.success and res.words_modified == 0 and res.perturbed_text == "great great"


def test_fraction_limit():
    # 4 words, 0.4 -> at most one word may change; two swaps would be needed
    lex = {"great": ["nice"], "good": ["nice"]}
    res = synonym_swap_attack(victim(), "great good poor poor", lex, goal=ClassificationGoal(1))
    assert res.words_modified <= 1 and not res.success


def test_budget_respected():
    v = victim()
    res = synonym_swap_attack(v, "the movie was great and good", LEX, budget=3)
    assert res.queries == 3 and v.queries == 3 and not res.success


def test_misclassified_input_not_eligible():
    res = synonym_swap_attack(victim(), "a good movie", LEX, goal=ClassificationGoal(0))
    assert not res.eligible and res.queries == 1


def test_pwws_mode_also_succeeds():
    res = synonym_swap_attack(victim(), "a good movie", LEX, goal=ClassificationGoal(1), saliency="pwws")
    assert res.success
    with pytest.raises(ValueError):
        synonym_swap_attack(victim(), "a good movie", LEX, saliency="nope")


def test_empty_text_and_bad_budget():
    with pytest.raises(ValueError):
        synonym_swap_attack(victim(), "   ", LEX)
    with pytest.raises(ValueError):
        synonym_swap_attack(victim(), "good", LEX, budget=0)


def test_char_bugger_breaks_keyword():
    res = char_bugger_attack(victim(), "a good movie", goal=ClassificationGoal(1), seed=0)
    assert res.success
    assert "good" not in res.perturbed_text.split()


def test_char_bugger_deterministic():
    a = char_bugger_attack(victim(), "a great and good movie", seed=3)
    b = char_bugger_attack(victim(), "a great and good movie", seed=3)
    assert (a.perturbed_text, a.queries, a.success) == (b.perturbed_text, b.queries, b.success)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=10), st.integers(0, 1000))
def test_bug_candidates_are_small_edits(word, seed):
    for c in bug_candidates(word, np.random.default_rng(seed)):
        assert c != word
        assert abs(len(c) - len(word)) <= 1


def test_regression_goal():
    g = RegressionGoal(gold=4.0, threshold=1.0).bind(3.5)
    assert not g.is_success(4.4)
    assert g.is_success(2.5)
    assert g.score(2.5) < g.score(3.5)


def test_regression_attack_on_similarity_victim():
    def predict(text):
        return 5.0 if "good" in text.split() else 1.0

    res = synonym_swap_attack(VictimModel(predict), "a good movie", LEX, goal=RegressionGoal(5.0, 1.0))
    assert res.success


def _r(success, queries, eligible=True):
    return AttackResult("t", "t", None, None, success, queries, 0, eligible=eligible)


def test_success_rate_and_queries_use_eligible_only():
    rs = [_r(True, 10), _r(False, 20), _r(False, 1, eligible=False)]
    assert success_rate(rs) == 0.5
    assert mean_queries(rs) == 15.0
    s = summarize(rs)
    assert s.clean_accuracy == pytest.approx(2 / 3)
    assert s.adversarial_accuracy == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        success_rate([_r(False, 1, eligible=False)])


def test_as_dict_is_json_ready():
    import json

    res = synonym_swap_attack(victim(), "a good movie", LEX, goal=ClassificationGoal(1))
    json.dumps(res.as_dict())
