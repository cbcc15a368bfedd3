import pytest

from kgdial.corpus import (
    DOMAIN_LEVEL, Dialogue, KnowledgeBase, KnowledgeSnippet, Speaker, Turn,
)
from kgdial.entity_track import (
    collect_candidates, entity_recall, exact_match_entities,
    fuzzy_match_entities, fuzzy_similarity, track_entities,
)


def snip(domain="hotel", entity_id="1", name="Hamilton Lodge", doc_id="0"):
    return KnowledgeSnippet(domain=domain, entity_id=entity_id, entity_name=name,
                            question=f"q{doc_id}?", answer=f"a{doc_id}",
                            doc_id=doc_id)


def make_kb():
    return KnowledgeBase([
        snip("hotel", "1", "Hamilton Lodge", "0"),
        snip("hotel", "1", "Hamilton Lodge", "1"),
        snip("hotel", "2", "SW Hotel", "0"),
        snip("hotel", DOMAIN_LEVEL, "hotel", "0"),
        snip("restaurant", "9", "Palm Court", "0"),
    ])


def dlg(*texts):
    turns = tuple(
        Turn(Speaker.USER if i % 2 == 0 else Speaker.SYSTEM, t)
        for i, t in enumerate(texts))
    return Dialogue(id="d0", turns=turns)


def names(entities):
    return sorted(e.name for e in entities)


class TestExactMatch:
    def test_case_folded_match(self):
        got = exact_match_entities(dlg("can I cooking at hamilton lodge"), make_kb())
        # the domain pseudo-entity "hotel" is not mentioned; only the entity
        assert names(got) == ["Hamilton Lodge"]

    def test_corrupted_name_not_matched(self):
        got = exact_match_entities(dlg("can I cooking at Hamilton launch"), make_kb())
        assert names(got) == []

    def test_scrambled_name_not_matched(self):
        got = exact_match_entities(dlg("cooking lodge at Hamilton please"), make_kb())
        assert names(got) == []

    def test_domain_pseudo_entity_by_domain_token(self):
        got = exact_match_entities(dlg("any hotel will do"), make_kb())
        assert names(got) == ["hotel"]


class TestFuzzyMatch:
    def test_similarity_frozen_value(self):
        # edit distance("hamilton lodge", "hamilton launch") = 5, max len 15
        sim = fuzzy_similarity("Hamilton Lodge",
                               "can i cooking at hamilton launch".split())
        assert sim == pytest.approx(1 - 5 / 15)

    def test_threshold_behavior_on_noisy_name(self):
        noisy = dlg("can I cooking at Hamilton launch")
        assert "Hamilton Lodge" in names(fuzzy_match_entities(noisy, make_kb(), 0.6))
        assert "Hamilton Lodge" not in names(fuzzy_match_entities(noisy, make_kb(), 0.7))

    def test_exact_occurrence_is_similarity_one(self):
        d = dlg("book the SW Hotel now")
        assert fuzzy_similarity("SW Hotel", "book the sw hotel now".split()) == 1.0
        assert "SW Hotel" in names(fuzzy_match_entities(d, make_kb(), 1.0))

    def test_threshold_zero_matches_everything(self):
        got = fuzzy_match_entities(dlg("totally unrelated words"), make_kb(), 0.0)
        assert len(got) == len(make_kb().entities)

    def test_exact_subset_of_fuzzy(self):
        for text in ("can I cooking at hamilton lodge",
                     "the palm court is nice",
                     "sw hotel and hamilton launch"):
            d = dlg(text)
            kb = make_kb()
            exact = {e.key for e in exact_match_entities(d, kb)}
            fuzzy = {e.key for e in fuzzy_match_entities(d, kb, 1.0)}
            assert exact <= fuzzy


class OracleScorer:
    """Returns 1.0 exactly for one entity name, 0 for everything else."""

    def __init__(self, target):
        self.target = target

    def score(self, s1, s2):
        return 1.0 if self.target in s2 else 0.0


class TestLearnedTracking:
    def test_oracle_scorer_tracks_exactly_target(self):
        got = track_entities(OracleScorer("Hamilton Lodge"),
                             dlg("anything at all"), make_kb(), delta_e=0.5)
        assert names(got) == ["Hamilton Lodge"]

    def test_delta_one_tracks_nothing(self):
        got = track_entities(OracleScorer("Hamilton Lodge"),
                             dlg("anything"), make_kb(), delta_e=1.0)
        assert got == []


class TestCollectCandidates:
    def test_entity_docs_collected(self):
        kb = make_kb()
        ents = [e for e in kb.entities if e.name == "Hamilton Lodge"]
        got = collect_candidates(ents, kb)
        # 2 entity docs + 1 hotel domain-level doc
        assert len(got) == 3

    def test_no_duplicate_domain_snippets(self):
        kb = make_kb()
        ents = [e for e in kb.entities if e.domain == "hotel"]
        got = collect_candidates(ents, kb)
        assert len(got) == len({s.key for s in got}) == 4

    def test_count_oracle(self):
        kb = make_kb()
        ents = [e for e in kb.entities
                if e.name in ("Hamilton Lodge", "Palm Court")]
        got = collect_candidates(ents, kb)
        expected = (len(kb.snippets_for("hotel", "1"))
                    + len(kb.snippets_for("restaurant", "9"))
                    + len(kb.snippets_for("hotel", DOMAIN_LEVEL))
                    + len(kb.snippets_for("restaurant", DOMAIN_LEVEL)))
        assert len(got) == expected

    def test_empty_entities_empty_candidates(self):
        assert collect_candidates([], make_kb()) == []

    def test_subset_of_kb_and_deterministic(self):
        kb = make_kb()
        got1 = collect_candidates(list(kb.entities), kb)
        got2 = collect_candidates(list(reversed(kb.entities)), kb)
        assert [s.key for s in got1] == [s.key for s in got2]
        assert {s.key for s in got1} <= {s.key for s in kb.snippets}


class TestEntityRecall:
    def test_full_coverage(self):
        kb = make_kb()
        ents = list(kb.entities)
        refs = [{e.key for e in ents}]
        assert entity_recall([ents], refs) == 1.0

    def test_half_coverage(self):
        kb = make_kb()
        one = [e for e in kb.entities if e.name == "SW Hotel"]
        refs = [{("hotel", "2"), ("hotel", "1")}]
        assert entity_recall([one], refs) == 0.5

    def test_empty_predictions(self):
        assert entity_recall([[]], [{("hotel", "1")}]) == 0.0
