"""Entity tracking: which knowledge-base entities does a dialogue mention.

Three interchangeable methods (exact token match, fuzzy windowed edit
distance, learned pair scorer over a threshold) feed candidate knowledge
collection for the ranking stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .corpus import (DOMAIN_LEVEL, Dialogue, Entity, KnowledgeBase,
                     KnowledgeSnippet, linearize_entity, linearize_history,
                     tokenize)
from .kernels import levenshtein
from .models import SentencePairScorer


class TrackMethod(Enum):
    EXACT = "exact"
    FUZZY = "fuzzy"
    LEARNED = "learned"


@dataclass(frozen=True)
class EntityTrackConfig:
    method: TrackMethod = TrackMethod.FUZZY
    fuzzy_threshold: float = 0.8
    delta_e: float = 0.5
    max_history_tokens: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fuzzy_threshold <= 1.0:
            raise ValueError("fuzzy_threshold out of [0,1]")
        if not 0.0 <= self.delta_e <= 1.0:
            raise ValueError("delta_e out of [0,1]")


def _utterance_tokens(dialogue: Dialogue) -> list[list[str]]:
    return [tokenize(t.text) for t in dialogue.turns]


def _contains_subseq(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    if n == 0 or n > len(haystack):
        return False
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def exact_match_entities(dialogue: Dialogue, kb: KnowledgeBase) -> list[Entity]:
    """Entities whose normalized name is a contiguous token subsequence of
    some utterance. Domain pseudo-entities match on the domain name."""
    utterances = _utterance_tokens(dialogue)
    out = []
    for entity in kb.entities:
        name = tokenize(entity.name)
        if any(_contains_subseq(u, name) for u in utterances):
            out.append(entity)
    return out


def fuzzy_similarity(name: str, utterance_tokens: list[str]) -> float:
    """Best-window similarity: 1 - edit_distance / max_len over every
    same-token-length window of the utterance, compared at character level
    on the space-joined strings."""
    name_tokens = tokenize(name)
    w = len(name_tokens)
    if w == 0 or w > len(utterance_tokens):
        return 0.0
    target = " ".join(name_tokens)
    best = 0.0
    for start in range(len(utterance_tokens) - w + 1):
        window = " ".join(utterance_tokens[start:start + w])
        dist = levenshtein(target, window)
        denom = max(len(target), len(window))
        if denom == 0:
            continue
        best = max(best, 1.0 - dist / denom)
    return best


def fuzzy_match_entities(dialogue: Dialogue, kb: KnowledgeBase,
                         threshold: float = 0.8) -> list[Entity]:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold out of [0,1]")
    utterances = _utterance_tokens(dialogue)
    out = []
    for entity in kb.entities:
        score = max((fuzzy_similarity(entity.name, u) for u in utterances),
                    default=0.0)
        if score >= threshold:
            out.append(entity)
    return out


def track_entities(scorer: SentencePairScorer, dialogue: Dialogue,
                   kb: KnowledgeBase, delta_e: float = 0.5,
                   max_history_tokens: int = 0) -> list[Entity]:
    """Learned tracking: keep entities the scorer rates above delta_e."""
    history = linearize_history(dialogue, max_history_tokens)
    out = []
    for entity in kb.entities:
        if scorer.score(history, linearize_entity(entity.name)) > delta_e:
            out.append(entity)
    return out


def collect_candidates(entities: Sequence[Entity],
                       kb: KnowledgeBase) -> list[KnowledgeSnippet]:
    """Union of snippets of the tracked entities plus the domain-level
    snippets of their domains, deduplicated, in stable key order."""
    seen = {}
    for entity in entities:
        for snip in kb.snippets_for(entity.domain, entity.entity_id):
            seen[snip.key] = snip
        for snip in kb.snippets_for(entity.domain, DOMAIN_LEVEL):
            seen[snip.key] = snip
    return [seen[k] for k in sorted(seen)]


def build_tracking_examples(dialogues: Sequence[Dialogue], kb: KnowledgeBase,
                            rng, negatives_per_dialogue: int = 3,
                            max_history_tokens: int = 0) -> list[tuple[str, str, int]]:
    """(history, tagged entity name, label) pairs for the learned tracker.

    Positives come from the labeled ground-truth knowledge; negatives are
    sampled entities not referenced by the turn.
    """
    examples = []
    for d in dialogues:
        if d.label is None or not d.label.is_knowledge_seeking or not d.label.knowledge_refs:
            continue
        history = linearize_history(d, max_history_tokens)
        positive_keys = {(dom, eid) for dom, eid, _ in d.label.knowledge_refs}
        positives = [e for e in kb.entities if e.key in positive_keys]
        negatives = [e for e in kb.entities if e.key not in positive_keys]
        for entity in positives:
            examples.append((history, linearize_entity(entity.name), 1))
        take = min(negatives_per_dialogue, len(negatives))
        if take:
            picks = rng.choice(len(negatives), size=take, replace=False)
            for idx in sorted(int(i) for i in picks):
                examples.append((history, linearize_entity(negatives[idx].name), 0))
    return examples


def entity_recall(predicted: Sequence[Sequence[Entity]],
                  references: Sequence[set[tuple[str, str]]]) -> float:
    """Fraction of reference entity keys covered by the predictions."""
    if len(predicted) != len(references):
        raise ValueError("prediction/reference length mismatch")
    total = hit = 0
    for ents, refs in zip(predicted, references):
        keys = {e.key for e in ents}
        for ref in refs:
            total += 1
            if ref in keys:
                hit += 1
    return hit / total if total else 0.0
