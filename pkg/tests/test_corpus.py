import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgdial import corpus
from kgdial.corpus import (
    Dialogue, KnowledgeBase, KnowledgeSnippet, Speaker, Turn,
    build_generation_context, linearize_history, linearize_knowledge,
    load_corpus, load_knowledge_base, parse_history, split_kfold, tokenize,
)


def dlg(*texts, label=None, id="d0"):
    turns = tuple(
        Turn(speaker=Speaker.USER if i % 2 == 0 else Speaker.SYSTEM, text=t)
        for i, t in enumerate(texts))
    return Dialogue(id=id, turns=turns, label=label)


def snippet(domain="hotel", entity_id="1", name="Hamilton Lodge",
            question="Can I cook?", answer="No.", doc_id="0"):
    return KnowledgeSnippet(domain=domain, entity_id=entity_id,
                            entity_name=name, question=question,
                            answer=answer, doc_id=doc_id)


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")


class TestLoadCorpus:
    def test_basic_label_attach(self, tmp_path):
        logs = tmp_path / "logs.json"
        labels = tmp_path / "labels.json"
        write_json(logs, [[{"speaker": "U", "text": "hi"},
                           {"speaker": "S", "text": "hello"},
                           {"speaker": "U", "text": "thanks"}]])
        write_json(labels, [{"target": False}])
        out = load_corpus(str(logs), str(labels))
        assert len(out) == 1
        assert len(out[0].turns) == 3
        assert out[0].label.is_knowledge_seeking is False

    def test_alignment_error(self, tmp_path):
        logs = tmp_path / "logs.json"
        labels = tmp_path / "labels.json"
        write_json(logs, [[{"speaker": "U", "text": "a"}],
                          [{"speaker": "U", "text": "b"}],
                          [{"speaker": "U", "text": "c"}]])
        write_json(labels, [{"target": False}, {"target": False}])
        with pytest.raises(corpus.CorpusError, match="mismatch"):
            load_corpus(str(logs), str(labels))

    def test_malformed_record_names_index(self, tmp_path):
        logs = tmp_path / "logs.json"
        write_json(logs, [[{"speaker": "U", "text": "ok"}], [{"speaker": "X", "text": "bad"}]])
        with pytest.raises(corpus.CorpusError, match="index 1"):
            load_corpus(str(logs))

    def test_reserved_tag_escaped_and_round_trips(self, tmp_path):
        logs = tmp_path / "logs.json"
        write_json(logs, [[{"speaker": "U", "text": "say ⟨user⟩ now"}]])
        out = load_corpus(str(logs))
        text = out[0].turns[0].text
        assert "⟨user⟩" not in text
        logs2 = tmp_path / "logs2.json"
        corpus.save_corpus(out, str(logs2))
        again = load_corpus(str(logs2))
        assert again[0].turns[0].text == text


class TestKnowledgeBase:
    def test_single_snippet(self, tmp_path):
        path = tmp_path / "kb.json"
        write_json(path, {"hotel": {"1": {"name": "Hamilton Lodge", "docs": {
            "0": {"title": "Can I cook?", "body": "No."}}}}})
        kb = load_knowledge_base(str(path))
        assert len(kb) == 1
        assert kb.snippets[0].entity_name == "Hamilton Lodge"
        assert kb.snippets[0].question == "Can I cook?"

    def test_domain_level_entry(self, tmp_path):
        path = tmp_path / "kb.json"
        write_json(path, {"hotel": {"*": {"name": None, "docs": {
            "0": {"title": "Do you allow pets?", "body": "Varies."}}}}})
        kb = load_knowledge_base(str(path))
        snip = kb.snippets[0]
        assert snip.entity_name == "hotel"
        assert snip.entity_id == corpus.DOMAIN_LEVEL
        assert snip.is_domain_level

    def test_snippet_count_is_entities_times_docs(self, tmp_path):
        entities, docs = 4, 3
        data = {"hotel": {
            str(e): {"name": f"Hotel {e}", "docs": {
                str(d): {"title": f"q{d}?", "body": f"a{d}"} for d in range(docs)}}
            for e in range(entities)}}
        path = tmp_path / "kb.json"
        write_json(path, data)
        kb = load_knowledge_base(str(path))
        assert len(kb) == entities * docs

    def test_duplicate_key_rejected(self):
        with pytest.raises(corpus.CorpusError, match="duplicate"):
            KnowledgeBase([snippet(), snippet()])

    def test_entity_index_covers_every_snippet_once(self, tmp_path):
        kb = KnowledgeBase([snippet(doc_id="0"), snippet(doc_id="1"),
                            snippet(entity_id="*", name="x", doc_id="0")])
        indexed = [s for group in kb.entity_index.values() for s in group]
        assert sorted(s.key for s in indexed) == sorted(s.key for s in kb.snippets)


class TestLinearize:
    def test_history_tags(self):
        d = dlg("hi", "hello", "thanks")
        assert linearize_history(d) == "⟨user⟩ hi ⟨sys⟩ hello ⟨user⟩ thanks"

    def test_left_truncation_keeps_suffix(self):
        d = dlg("hi", "hello", "thanks")
        assert linearize_history(d, max_tokens=4) == "⟨sys⟩ hello ⟨user⟩ thanks"

    def test_no_truncation_when_budget_large(self):
        d = dlg("hi", "hello", "thanks")
        assert linearize_history(d, max_tokens=100) == linearize_history(d)

    def test_empty_dialogue_raises(self):
        d = Dialogue(id="x", turns=())
        with pytest.raises(corpus.CorpusError):
            linearize_history(d)

    def test_parse_back_recovers_turns(self):
        d = dlg("can I cook at Hamilton Lodge?", "Sure, why not.", "thanks a lot!")
        parsed = parse_history(linearize_history(d))
        assert parsed == [(t.speaker, t.text) for t in d.turns]

    def test_knowledge_format(self):
        assert linearize_knowledge(snippet()) == "⟨kng⟩ Can I cook? ⟨ans⟩ No."

    def test_knowledge_empty_answer(self):
        assert linearize_knowledge(snippet(answer="")) == "⟨kng⟩ Can I cook? ⟨ans⟩"

    def test_knowledge_parse_back(self):
        s = snippet(question="Is breakfast free?", answer="Yes, on weekdays.")
        text = linearize_knowledge(s)
        body = text.split("⟨kng⟩", 1)[1]
        q, a = body.split("⟨ans⟩", 1)
        assert q.strip() == s.question
        assert a.strip() == s.answer

    def test_truncation_never_splits_a_tag(self):
        d = dlg("aa bb cc", "dd ee ff", "gg hh")
        for budget in range(1, 15):
            out = linearize_history(d, max_tokens=budget)
            assert "⟨" not in out or all(
                tok in corpus.RESERVED_TAGS for tok in tokenize(out)
                if tok.startswith("⟨"))
            assert corpus.count_tokens(out) <= budget


class TestGenerationContext:
    def test_single_snippet_adjacent_to_user(self):
        d = dlg("hi", "hello", "can I cook there?")
        ctx = build_generation_context(d, [snippet()])
        assert ctx.text.endswith(
            "⟨kng_1⟩ ⟨ent⟩ Hamilton Lodge ⟨ans⟩ No. "
            "⟨user⟩ can I cook there?")
        assert ctx.has_knowledge

    def test_descending_order(self):
        d = dlg("hi", "hello", "ok?")
        k1 = snippet(doc_id="0", answer="first")
        k2 = snippet(doc_id="1", answer="second")
        ctx = build_generation_context(d, [k1, k2])
        assert ctx.text.index("⟨kng_2⟩") < ctx.text.index("⟨kng_1⟩")
        assert "⟨kng_2⟩ ⟨ent⟩ Hamilton Lodge ⟨ans⟩ second" in ctx.text

    def test_empty_topk_flagged(self):
        d = dlg("hi", "hello", "ok?")
        ctx = build_generation_context(d, [])
        assert not ctx.has_knowledge
        assert "⟨kng_1⟩" not in ctx.text

    @given(st.integers(min_value=1, max_value=40))
    @settings(max_examples=40, deadline=None)
    def test_token_budget_respected(self, budget):
        d = dlg("one two three four", "five six seven", "eight nine ten?")
        ctx = build_generation_context(d, [snippet(), snippet(doc_id="9")], max_tokens=budget)
        assert corpus.count_tokens(ctx.text) <= budget


class TestKFold:
    def test_ten_singletons(self):
        folds = split_kfold(list(range(10)), k=10, seed=3)
        assert sorted(len(f) for f in folds) == [1] * 10

    def test_sizes_differ_by_at_most_one(self):
        folds = split_kfold(list(range(7)), k=3, seed=0)
        assert sorted(len(f) for f in folds) == [2, 2, 3]

    def test_deterministic(self):
        a = split_kfold(list(range(23)), k=4, seed=11)
        b = split_kfold(list(range(23)), k=4, seed=11)
        assert a == b

    def test_partition(self):
        items = [f"x{i}" for i in range(17)]
        folds = split_kfold(items, k=5, seed=2)
        flat = [x for f in folds for x in f]
        assert sorted(flat) == sorted(items)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            split_kfold([1, 2], k=3, seed=0)


class TestTokenize:
    def test_punctuation_detached_and_lowercased(self):
        assert tokenize("Can I cook?") == ["can", "i", "cook", "?"]

    def test_tags_are_single_tokens(self):
        assert tokenize("⟨user⟩ Hi there!") == ["⟨user⟩", "hi", "there", "!"]
