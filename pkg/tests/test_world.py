import json

import numpy as np
import pytest

from okapi import world as W
from okapi.records import load_corpus


def test_three_languages_cover_every_category():
    w = W.make_world(3, seed=0, ratios=[2.0, 0.5, 0.05], corpus_size=20, seeds_per_language=5)
    assert [l.category for l in w.languages] == ["H", "M", "L"]
    assert [l.code for l in w.languages] == ["xa", "xb", "xc"]
    assert len(w.base_corpus) == 20 and all(len(w.corpora[l.code]) == 20 for l in w.languages)


def test_default_ladder_categories():
    w = W.make_world(6, seed=1, corpus_size=8, seeds_per_language=2)
    assert [l.category for l in w.languages] == ["H", "M", "L"] * 2


def test_world_errors():
    with pytest.raises(ValueError):
        W.make_world(1, seed=0)
    with pytest.raises(ValueError):
        W.make_world(3, seed=0, ratios=[1.0, 2.0])
    with pytest.raises(ValueError):
        W.SyntheticLanguage("q", "Q", 1.0, tuple([32] * 95))
    with pytest.raises(KeyError):
        W.make_world(2, seed=0, corpus_size=4, seeds_per_language=2).language("zz")


def test_same_seed_same_world():
    a = W.make_world(3, seed=7, corpus_size=12, seeds_per_language=3)
    b = W.make_world(3, seed=7, corpus_size=12, seeds_per_language=3)
    c = W.make_world(3, seed=8, corpus_size=12, seeds_per_language=3)
    assert a.languages == b.languages and a.corpora == b.corpora and a.seeds == b.seeds
    assert a.languages != c.languages


def test_encode_decode_roundtrip_and_bijection():
    w = W.make_world(3, seed=2, corpus_size=30, seeds_per_language=3)
    text = "".join(chr(c) for c in W.PRINTABLE)
    for lang in w.languages:
        assert sorted(ord(ch) for ch in lang.encode(text)) == W.PRINTABLE
        assert lang.decode(lang.encode(text)) == text
        for en, rec in zip(w.base_corpus, w.corpora[lang.code]):
            back = lang.decode_record(rec)
            assert (back.instruction, back.input, back.output) == (en.instruction, en.input, en.output)
            # statistics are carried over exactly: lengths and marker positions
            assert len(rec.output) == len(en.output)
            assert rec.output.count(lang.marker) == en.output.count(W.MARKER)


def test_instructions_are_unique_across_seeds_and_corpus():
    w = W.make_world(2, seed=3, corpus_size=60, seeds_per_language=10)
    texts = [r.instruction for r in w.base_corpus + w.seeds["en"]]
    assert len(set(texts)) == len(texts)


def test_resource_scale_shrinks_lower_categories():
    w = W.make_world(3, seed=0, corpus_size=20, seeds_per_language=2, resource_scale={"M": 0.5, "L": 0.25})
    assert [len(w.corpora[c]) for c in ("xa", "xb", "xc")] == [20, 10, 5]


def test_oracle_reward_examples():
    assert W.oracle_reward("marker_count", "p", "a* b* c*") == 3.0
    assert W.oracle_reward("length_band", "p", "x" * 7, band=(5, 10)) == 1.0
    assert W.oracle_reward("length_band", "p", "x" * 11, band=(5, 10)) == 0.0
    assert W.oracle_reward("judge_agreement", "p", "long one", judge=W.length_judge, references=["a", "bb"]) == 1.0
    assert W.oracle_reward("judge_agreement", "p", "", judge=W.length_judge, references=["a", "bb"]) == 0.0
    with pytest.raises(ValueError):
        W.oracle_reward("judge_agreement", "p", "x")
    with pytest.raises(ValueError):
        W.oracle_reward("vibes", "p", "x")


def test_marker_count_matches_recount():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = "".join(rng.choice(list("ab *"), size=int(rng.integers(0, 30))))
        assert W.oracle_reward("marker_count", "", s) == float(sum(ch == "*" for ch in s))


def _resort_ranks(scores):
    """Rank 1 for the highest score; equal scores share the order of first appearance."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranks = [0] * len(scores)
    for r, i in enumerate(order, 1):
        ranks[i] = r
    return ranks


def test_judges_agree_with_resort_oracle():
    rng = np.random.default_rng(1)
    mj = W.make_judge("marker")
    for _ in range(100):
        resp = ["".join(rng.choice(list("ab*"), size=int(rng.integers(1, 12)))) for _ in range(4)]
        assert W.length_judge("i", "", resp) == _resort_ranks([len(r) for r in resp])
        assert mj("i", "", resp) == _resort_ranks([r.count("*") for r in resp])
    rj = W.make_judge("random", seed=3)
    assert rj("i", "", ["a", "b", "c", "d"]) == rj("i", "", ["a", "b", "c", "d"])
    assert sorted(rj("i", "", ["a", "b", "c", "d"])) == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        W.make_judge("oracle")


def test_marker_eval_items_gold_has_most_markers():
    w = W.make_world(2, seed=0, corpus_size=4, seeds_per_language=2)
    items = W.marker_eval_items(w, "xb", 30, seed=1)
    lang = w.language("xb")
    for it in items:
        counts = [c.count(lang.marker) for c in it.choices]
        assert counts[it.gold_index] == max(counts) and sorted(counts) == [0, 1, 2, 3]
    assert items == W.marker_eval_items(w, "xb", 30, seed=1)


def test_synthetic_ranked_sets_follow_marker_count():
    w = W.make_world(2, seed=0, corpus_size=4, seeds_per_language=2)
    lang = w.language("xa")
    for s in W.synthetic_ranked_sets(w, "xa", 20, seed=0):
        counts = [r.count(lang.marker) for r in s.responses]
        assert list(s.ranks) == _resort_ranks(counts)


def test_write_world_roundtrip(tmp_path):
    w = W.make_world(3, seed=5, corpus_size=10, seeds_per_language=3)
    out = W.write_world(w, tmp_path / "w")
    assert W.read_registry(out / "registry.jsonl") == w.languages
    assert load_corpus(out / "corpus_xc.jsonl") == w.corpora["xc"]
    assert load_corpus(out / "seeds_en.jsonl") == w.seeds["en"]
    meta = json.loads((out / "world.json").read_text())
    assert meta["seed"] == 5 and meta["marker"] == "*"


def test_pretraining_text_scales_by_category():
    w = W.make_world(3, seed=0, corpus_size=4, seeds_per_language=2)
    lines = W.pretraining_text(w, 10, seed=0, resource_scale={"L": 0.5})
    assert len(lines) == 10 * 3 + 5
    assert lines == W.pretraining_text(w, 10, seed=0, resource_scale={"L": 0.5})
