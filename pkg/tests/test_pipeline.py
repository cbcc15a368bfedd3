import os

import pytest

from kgdial.consensus import ConsensusWeights
from kgdial.pipeline import (
    ConfigError, DecodeComponents, DependencyError, PipelineConfig,
    end_to_end_decode, evaluate_predictions, load_config, make_tracker,
    require, validate_labels_schema, write_manifest,
)
from kgdial.rank import RankedKnowledgeList
from kgdial.synth import MiniCorpusConfig, build_mini_corpus


class TestConfig:
    def test_defaults_carry_paper_constants(self):
        cfg = PipelineConfig()
        assert cfg["detect.delta_d"] == 0.3
        assert cfg["track.delta_e"] == 0.5
        assert cfg["rank.alpha"] == 100.0
        assert cfg["gen.p_s"] == 0.15
        assert cfg["augment.replace_rate_low"] == 0.1
        assert cfg["augment.replace_rate_high"] == 0.3
        assert cfg["augment.ena_probability"] == 0.3
        assert cfg["augment.ena_delete_prob"] == 0.1
        assert cfg["gen.kfolds"] == 10
        assert cfg["rank.entity_negatives"] == 3

    def test_file_parse_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nseed = 7\ndetect.delta_d = 0.2\n")
        cfg = load_config(str(path), overrides=["rank.alpha=50"])
        assert cfg.seed == 7
        assert cfg["detect.delta_d"] == 0.2
        assert cfg["rank.alpha"] == 50.0

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("no.such.key = 1\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_bad_boolean_rejected(self):
        with pytest.raises(ConfigError):
            load_config("", overrides=["rank.use_mtl=maybe"])


class TestManifest:
    def test_identical_inputs_identical_manifests(self, tmp_path):
        out = tmp_path / "out"
        cfg = PipelineConfig({"paths.output": str(out)})
        artifact = out / "artifact.json"
        os.makedirs(out, exist_ok=True)
        artifact.write_text('{"x": 1}')
        m1 = write_manifest(cfg, "demo", [], [str(artifact)])
        first = open(m1).read()
        m2 = write_manifest(cfg, "demo", [], [str(artifact)])
        assert open(m2).read() == first

    def test_require_names_missing_stage(self):
        with pytest.raises(DependencyError, match="train-detect"):
            require("/nope/never.npz", "train-detect")


class TestLabelsSchema:
    def test_valid_records_pass(self):
        validate_labels_schema([
            {"target": False},
            {"target": True,
             "knowledge": [{"domain": "hotel", "entity_id": "1", "doc_id": "0"}],
             "response": "yes"},
        ])

    def test_negative_with_knowledge_rejected(self):
        with pytest.raises(ValueError):
            validate_labels_schema([{"target": False, "knowledge": [{}]}])

    def test_positive_without_knowledge_rejected(self):
        with pytest.raises(ValueError):
            validate_labels_schema([{"target": True, "knowledge": []}])


class OracleGenerator:
    def __init__(self, table):
        self.table = table

    def generate_nbest(self, context, n):
        for key, response in self.table.items():
            if key in context:
                return [(response, -0.1)]
        return [("fallback response", -5.0)]


def oracle_components(dialogues, kb):
    """Components that look up gold answers from their own tables,
    without touching dialogue labels at decode time."""
    truth = {d.id: d.label for d in dialogues}
    entities_by_key = {e.key: e for e in kb.entities}

    def detector(dialogue):
        return 1.0 if truth[dialogue.id].is_knowledge_seeking else 0.0

    def tracker(dialogue, kb_):
        refs = truth[dialogue.id].knowledge_refs
        return [entities_by_key[(dom, eid)] for dom, eid, _ in refs]

    def ranker(dialogue, candidates, tracked):
        refs = set(truth[dialogue.id].knowledge_refs)
        scored = tuple(
            (snip, 1.0 if snip.key in refs else 0.0) for snip in candidates)
        ordered = tuple(sorted(scored, key=lambda t: -t[1])[:5])
        return RankedKnowledgeList(dialogue.id, ordered)

    generator = OracleGenerator({
        d.id: truth[d.id].response for d in dialogues
        if truth[d.id].is_knowledge_seeking and truth[d.id].response})

    class ContextualOracleGenerator:
        def generate_nbest(self, context, n):
            return [("oracle response", -0.5)]

    return truth, DecodeComponents(
        detector=detector, tracker=tracker, rankers=[ranker],
        generator=ContextualOracleGenerator(),
        consensus_weights=ConsensusWeights.uniform(), nbest=1)


@pytest.fixture(scope="module")
def mini():
    dialogues, kb, _ = build_mini_corpus(MiniCorpusConfig(n_dialogues=40, seed=3))
    return dialogues, kb


class TestEndToEndOracle:

    def test_oracle_decode_is_perfect(self, mini):
        dialogues, kb = mini
        truth, components = oracle_components(dialogues, kb)
        records = end_to_end_decode(dialogues, kb, components)
        validate_labels_schema(records)
        refs = [
            {"target": t.is_knowledge_seeking,
             "knowledge": [{"domain": d_, "entity_id": e, "doc_id": doc}
                           for d_, e, doc in t.knowledge_refs],
             "response": t.response}
            for t in (truth[d.id] for d in dialogues)]
        report = evaluate_predictions(records, refs)
        assert report.scores["detection-f1"] == 1.0
        assert report.scores["selection-r@1"] == 1.0

    def test_negative_turns_skip_selection(self, mini):
        dialogues, kb = mini
        truth, components = oracle_components(dialogues, kb)
        calls = []
        original = components.tracker

        def counting_tracker(dialogue, kb_):
            calls.append(dialogue.id)
            return original(dialogue, kb_)

        components.tracker = counting_tracker
        records = end_to_end_decode(dialogues, kb, components)
        seeking_ids = {d.id for d in dialogues if truth[d.id].is_knowledge_seeking}
        assert set(calls) == seeking_ids
        for rec, d in zip(records, dialogues):
            if not truth[d.id].is_knowledge_seeking:
                assert rec == {"target": False}

    def test_decode_never_reads_labels(self, mini):
        # identical output whether or not the input corpus carries labels
        dialogues, kb = mini
        _, components = oracle_components(dialogues, kb)
        from kgdial.corpus import strip_labels

        with_labels = end_to_end_decode(dialogues, kb, components)
        without = end_to_end_decode(strip_labels(dialogues), kb, components)
        assert with_labels == without


class TestTrackerFactory:
    def test_exact_and_fuzzy_need_no_model(self):
        dialogues, kb, _ = build_mini_corpus(MiniCorpusConfig(n_dialogues=10, seed=0))
        for method in ("exact", "fuzzy"):
            cfg = PipelineConfig({"track.method": method})
            tracker = make_tracker(cfg)
            assert isinstance(tracker(dialogues[0], kb), list)

    def test_learned_without_model_is_dependency_error(self):
        dialogues, kb, _ = build_mini_corpus(MiniCorpusConfig(n_dialogues=10, seed=0))
        cfg = PipelineConfig({"track.method": "learned"})
        tracker = make_tracker(cfg)
        with pytest.raises(DependencyError):
            tracker(dialogues[0], kb)


class TestEvaluatePredictions:
    def test_detection_counts(self):
        preds = [{"target": True, "knowledge": [
            {"domain": "h", "entity_id": "1", "doc_id": "0"}], "response": "a b"},
            {"target": False}]
        refs = [{"target": True, "knowledge": [
            {"domain": "h", "entity_id": "1", "doc_id": "0"}], "response": "a b"},
            {"target": False}]
        report = evaluate_predictions(preds, refs)
        assert report.scores["detection-f1"] == 1.0
        assert report.scores["selection-r@1"] == 1.0
        assert report.scores["generation-bleu-4"] == 1.0
