"""Knowledge ranking: point-wise scoring with Wide & Deep sparse features,
a multi-task head (domain classification + attention-pooled entity
selection), negative sampling, list-wise 5-way reranking, k-fold
bootstrapping of list-wise data, and the sum-of-probabilities ensemble.

The multi-task head computes, for a pooled query vector f and per-token
states H of the concatenated entity names,

    a   = softmax( (1/sqrt(d)) * f Wq Wk^T H^T )
    g_i = a_i * (h_i Wv)
    s_k = sum of g_i over the k-th entity's token span
    p   = softmax(s_k . v)

and trains with KL(true one-hot || p). All gradients are analytic and
finite-difference checked.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .augment import AugmentConfig, augment_entity_name
from .corpus import (Dialogue, Entity, KnowledgeBase, KnowledgeSnippet,
                     TAG_ENT, linearize_history, linearize_knowledge,
                     split_kfold, tokenize)
from .entity_track import exact_match_entities
from .metrics import mrr_at_k, recall_at_k
from .models import (ToyEncoder, TrainConfig, bce_loss, build_vocab,
                     pair_readout, pair_readout_backward, sigmoid, softmax,
                     softmax_backward, train_model)

N_SPARSE = 4  # is_domain_level, is_last_entity, unigram, bigram


class RankError(Exception):
    pass


class Variant(Enum):
    WD = "WD"
    WD2 = "WD2"


@dataclass(frozen=True)
class SparseFeatures:
    is_domain_level: int
    is_last_entity: int
    unigram_in_dialogue: int
    bigram_in_dialogue: int
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise RankError("alpha must be positive")
        for v in (self.is_domain_level, self.is_last_entity,
                  self.unigram_in_dialogue, self.bigram_in_dialogue):
            if v not in (0, 1):
                raise RankError("sparse indicators must be binary")

    def vector(self, mask: Optional[Sequence[int]] = None) -> np.ndarray:
        vec = np.array([self.is_domain_level, self.is_last_entity,
                        self.unigram_in_dialogue, self.bigram_in_dialogue],
                       dtype=np.float64)
        scale = np.full(N_SPARSE, self.alpha)
        if mask is not None:
            scale = np.where(np.asarray(mask, dtype=bool), scale, 1.0)
        return vec * scale


def _dialogue_tokens(dialogue: Dialogue) -> list[list[str]]:
    return [tokenize(t.text) for t in dialogue.turns]


def _rightmost_occurrence(utterances: list[list[str]], name_tokens: list[str]) -> int:
    """Global token offset just past the last occurrence of name_tokens,
    or -1 when the name never matches. Comparing match ends (with a
    longer-name tie-break at the caller) keeps nested mentions sane,
    e.g. "SW Hotel" vs the domain pseudo-entity "hotel"."""
    best = -1
    offset = 0
    n = len(name_tokens)
    for utt in utterances:
        if n and n <= len(utt):
            for start in range(len(utt) - n + 1):
                if utt[start:start + n] == name_tokens:
                    best = max(best, offset + start + n)
        offset += len(utt)
    return best


def extract_sparse_features(dialogue: Dialogue, snippet: KnowledgeSnippet,
                            tracked_entities: Sequence[Entity],
                            variant: Variant = Variant.WD2,
                            alpha: float = 1.0) -> SparseFeatures:
    """Indicator features of the candidate snippet against the dialogue.

    is_last_entity fires when the snippet's entity has the rightmost
    string-match occurrence among the tracked entities. The n-gram
    indicators (WD2 only) fire when any unigram/bigram of the entity name
    occurs in the utterances, catching names scattered across turns.
    """
    utterances = _dialogue_tokens(dialogue)
    positions = {}
    for entity in tracked_entities:
        pos = _rightmost_occurrence(utterances, tokenize(entity.name))
        if pos >= 0:
            positions[entity.key] = (pos, len(tokenize(entity.name)), entity.name)
    is_last = 0
    if positions:
        last_key = max(positions, key=lambda k: positions[k])
        if last_key == snippet.entity_key:
            is_last = 1
    unigram = bigram = 0
    if variant is Variant.WD2:
        name_tokens = tokenize(snippet.entity_name)
        all_tokens = [tok for utt in utterances for tok in utt]
        token_set = set(all_tokens)
        if any(tok in token_set for tok in name_tokens):
            unigram = 1
        dialogue_bigrams = {
            (utt[i], utt[i + 1]) for utt in utterances for i in range(len(utt) - 1)}
        name_bigrams = [
            (name_tokens[i], name_tokens[i + 1]) for i in range(len(name_tokens) - 1)]
        if any(bg in dialogue_bigrams for bg in name_bigrams):
            bigram = 1
    return SparseFeatures(
        is_domain_level=int(snippet.is_domain_level),
        is_last_entity=is_last,
        unigram_in_dialogue=unigram,
        bigram_in_dialogue=bigram,
        alpha=alpha)


DEFAULT_POOLS = ("kb", "mentioned", "other_entity")


def sample_negatives(gt_snippet: KnowledgeSnippet, kb: KnowledgeBase,
                     dialogue: Dialogue, rng: np.random.Generator,
                     count: int = 4,
                     strategy: Sequence[str] = DEFAULT_POOLS) -> list[KnowledgeSnippet]:
    """Draw negatives without replacement, split equally across pools:
    the whole knowledge base, knowledge of entities mentioned in the
    utterances, and knowledge of mentioned non-ground-truth entities.
    Empty or exhausted pools redistribute to the remaining ones."""
    unknown = set(strategy) - set(DEFAULT_POOLS)
    if unknown:
        raise RankError(f"unknown negative pools: {sorted(unknown)}")
    mentioned = exact_match_entities(dialogue, kb)
    mentioned_keys = {e.key for e in mentioned}
    pools: dict[str, list[KnowledgeSnippet]] = {
        "kb": [s for s in kb.snippets if s.key != gt_snippet.key],
        "mentioned": [s for s in kb.snippets
                      if s.entity_key in mentioned_keys and s.key != gt_snippet.key],
        "other_entity": [s for s in kb.snippets
                         if s.entity_key in mentioned_keys
                         and s.entity_key != gt_snippet.entity_key],
    }
    available = {s.key for name in strategy for s in pools[name]}
    if len(available) < count:
        raise RankError(
            f"need {count} distinct negatives, only {len(available)} available")
    active = [name for name in strategy if pools[name]]
    quotas = {name: count // len(active) for name in active}
    for name in active[:count % len(active)]:
        quotas[name] += 1
    chosen: dict[tuple, KnowledgeSnippet] = {}
    shortfall = 0
    for name in active:
        pool = [s for s in pools[name] if s.key not in chosen]
        take = min(quotas[name] + shortfall, len(pool))
        shortfall = quotas[name] + shortfall - take
        if take:
            picks = rng.choice(len(pool), size=take, replace=False)
            for idx in sorted(int(i) for i in picks):
                chosen[pool[idx].key] = pool[idx]
    while len(chosen) < count:  # catch-all: whole-KB pool
        pool = [s for s in pools["kb"] if s.key not in chosen]
        idx = int(rng.integers(len(pool)))
        chosen[pool[idx].key] = pool[idx]
    return list(chosen.values())[:count]


def sample_entity_candidates(kb: KnowledgeBase, dialogue: Dialogue,
                             gt_entity: Entity, rng: np.random.Generator,
                             n_total: int = 4) -> tuple[list[str], int]:
    """Entity names for the selection head: n_total - 1 negatives drawn
    from mentioned and same-domain entities (backfilled from the full
    entity set), with the ground truth at a uniform random position."""
    names = list(dict.fromkeys(e.name for e in kb.entities))
    if len(names) < n_total:
        raise RankError(f"need {n_total} distinct entity names, have {len(names)}")
    mentioned = {e.name for e in exact_match_entities(dialogue, kb)}
    same_domain = {e.name for e in kb.entities if e.domain == gt_entity.domain}
    preferred = sorted((mentioned | same_domain) - {gt_entity.name})
    backfill = [n for n in names if n != gt_entity.name and n not in preferred]
    negatives: list[str] = []
    for pool in (preferred, backfill):
        remaining = n_total - 1 - len(negatives)
        if remaining <= 0:
            break
        take = min(remaining, len(pool))
        if take:
            picks = rng.choice(len(pool), size=take, replace=False)
            negatives.extend(pool[int(i)] for i in sorted(picks))
    true_index = int(rng.integers(n_total))
    result = negatives[:true_index] + [gt_entity.name] + negatives[true_index:]
    return result, true_index


@dataclass
class MTLParams:
    """Projection matrices and output heads of the multi-task block."""
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    entity_vector: np.ndarray
    domain_weights: np.ndarray
    domain_bias: np.ndarray
    lambda_rank: float = 1.0
    lambda_domain: float = 1.0
    lambda_entity: float = 1.0

    @classmethod
    def create(cls, d: int, n_domains: int, seed: int = 0, **lambdas) -> "MTLParams":
        def init(name, shape, scale):
            rng = np.random.default_rng(zlib.crc32(name.encode()) + seed)
            return rng.normal(0.0, scale, size=shape)

        s = 1.0 / math.sqrt(d)
        return cls(wq=init("mtl.wq", (d, d), s), wk=init("mtl.wk", (d, d), s),
                   wv=init("mtl.wv", (d, d), s),
                   entity_vector=init("mtl.v", (d,), s),
                   domain_weights=init("mtl.dom", (d, n_domains), s),
                   domain_bias=np.zeros(n_domains), **lambdas)


def _check_spans(spans: Sequence[tuple[int, int]], length: int) -> None:
    prev_end = 0
    for start, end in spans:
        if not (0 <= start < end <= length):
            raise RankError(f"span ({start}, {end}) out of range for length {length}")
        if start < prev_end:
            raise RankError("entity spans must be disjoint and ordered")
        prev_end = end


def mtl_forward(f: np.ndarray, H: np.ndarray,
                spans: Sequence[tuple[int, int]],
                params: MTLParams) -> tuple[np.ndarray, np.ndarray]:
    """Attention over entity tokens and the induced entity distribution."""
    _check_spans(spans, H.shape[0])
    cache = _mtl_forward_cache(f, H, spans, params)
    return cache["a"], cache["p"]


def _mtl_forward_cache(f, H, spans, params: MTLParams) -> dict:
    d = f.shape[0]
    q = f @ params.wq
    Km = H @ params.wk
    u = (Km @ q) / math.sqrt(d)
    a = softmax(u)
    M = H @ params.wv
    G = a[:, None] * M
    S = np.stack([G[s:e].sum(axis=0) for s, e in spans])
    logits = S @ params.entity_vector
    p = softmax(logits)
    return {"f": f, "H": H, "spans": spans, "q": q, "Km": Km, "u": u, "a": a,
            "M": M, "G": G, "S": S, "logits": logits, "p": p}


def _mtl_backward(cache, params: MTLParams, dlogits: np.ndarray,
                  grads: dict) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through the entity head; returns (df, dH)."""
    f, H, spans = cache["f"], cache["H"], cache["spans"]
    d = f.shape[0]
    a, M = cache["a"], cache["M"]
    grads["mtl.v"] += cache["S"].T @ dlogits
    dS = np.outer(dlogits, params.entity_vector)
    dG = np.zeros_like(cache["G"])
    for k, (s, e) in enumerate(spans):
        dG[s:e] = dS[k]
    da = np.einsum("td,td->t", dG, M)
    dM = a[:, None] * dG
    grads["mtl.wv"] += H.T @ dM
    dH = dM @ params.wv.T
    du = softmax_backward(a, da) / math.sqrt(d)
    dKm = np.outer(du, cache["q"])
    dq = cache["Km"].T @ du
    grads["mtl.wk"] += H.T @ dKm
    dH += dKm @ params.wk.T
    grads["mtl.wq"] += np.outer(f, dq)
    df = params.wq @ dq
    return df, dH


@dataclass
class PointwiseInstance:
    """One (dialogue, candidate) training row with its auxiliary targets."""
    dialogue: Dialogue
    candidate: KnowledgeSnippet
    label: int
    domain_id: int
    entity_names: list[str] = field(default_factory=list)
    true_entity_index: int = 0


@dataclass
class PointwiseConfig:
    use_mtl: bool = False
    variant: Variant = Variant.WD2
    epochs: int = 2
    learning_rate: float = 1e-5
    batch_size: int = 16
    seed: int = 0
    negatives: int = 4
    negative_pools: tuple[str, ...] = DEFAULT_POOLS
    entity_candidates: int = 4
    lambda_rank: float = 1.0
    lambda_domain: float = 1.0
    lambda_entity: float = 1.0
    d: int = 24
    max_len: int = 128
    pooling: str = "mean"
    ena: Optional[AugmentConfig] = None


class PointwiseModel:
    """Wide & Deep point-wise scorer with an optional multi-task head."""

    def __init__(self, vocab: dict[str, int], domains: Sequence[str],
                 config: PointwiseConfig):
        self.config = config
        self.domains = list(domains)
        self.domain_ids = {d: i for i, d in enumerate(self.domains)}
        self.encoder = ToyEncoder(vocab, d=config.d, pooling=config.pooling,
                                  max_len=config.max_len, seed=config.seed)
        rng = np.random.default_rng(config.seed + 1)
        self.head = {"w": rng.normal(0.0, 0.1, size=2 * config.d), "b": np.zeros(1)}
        self.wide = {"u": np.zeros(N_SPARSE)}
        self.mtl: Optional[MTLParams] = None
        if config.use_mtl:
            self.mtl = MTLParams.create(
                config.d, max(1, len(self.domains)), seed=config.seed,
                lambda_rank=config.lambda_rank,
                lambda_domain=config.lambda_domain,
                lambda_entity=config.lambda_entity)
        self._ena_rng = np.random.default_rng(config.seed + 2)
        self._kb: Optional[KnowledgeBase] = None

    def bind_kb(self, kb: KnowledgeBase) -> None:
        self._kb = kb

    def all_params(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out["head.w"] = self.head["w"]
        out["head.b"] = self.head["b"]
        out["wide.u"] = self.wide["u"]
        if self.mtl is not None:
            out.update({"mtl.wq": self.mtl.wq, "mtl.wk": self.mtl.wk,
                        "mtl.wv": self.mtl.wv, "mtl.v": self.mtl.entity_vector,
                        "mtl.dom": self.mtl.domain_weights,
                        "mtl.bdom": self.mtl.domain_bias})
        return out

    def _input1_tokens(self, dialogue: Dialogue,
                       candidate: KnowledgeSnippet) -> tuple[list[str], int]:
        history = tokenize(linearize_history(dialogue))
        return history + tokenize(linearize_knowledge(candidate)), len(history)

    def _input2(self, entity_names: Sequence[str]) -> tuple[list[str], list[tuple[int, int]]]:
        tokens: list[str] = []
        spans = []
        for name in entity_names:
            tokens.append(TAG_ENT)
            name_toks = tokenize(name)
            spans.append((len(tokens), len(tokens) + len(name_toks)))
            tokens.extend(name_toks)
        return tokens, spans

    def _tracked(self, dialogue: Dialogue) -> list[Entity]:
        if self._kb is None:
            return []
        return exact_match_entities(dialogue, self._kb)

    def features(self, dialogue: Dialogue, candidate: KnowledgeSnippet,
                 tracked: Optional[Sequence[Entity]] = None,
                 alpha: float = 1.0) -> SparseFeatures:
        if tracked is None:
            tracked = self._tracked(dialogue)
        return extract_sparse_features(dialogue, candidate, tracked,
                                       self.config.variant, alpha)

    def logit(self, dialogue: Dialogue, candidate: KnowledgeSnippet,
              alpha: float = 1.0,
              tracked: Optional[Sequence[Entity]] = None) -> float:
        tokens, boundary = self._input1_tokens(dialogue, candidate)
        cache = self.encoder.forward(*self.encoder.token_ids(tokens, boundary))
        feats = self.features(dialogue, candidate, tracked, alpha).vector()
        return float(self.head["w"] @ pair_readout(cache) + self.head["b"][0]
                     + self.wide["u"] @ feats)

    def score(self, dialogue: Dialogue, candidate: KnowledgeSnippet,
              alpha: float = 1.0,
              tracked: Optional[Sequence[Entity]] = None) -> float:
        return sigmoid(self.logit(dialogue, candidate, alpha, tracked))

    def loss_and_grads(self, instance: PointwiseInstance) -> tuple[float, dict]:
        cfg = self.config
        dialogue = instance.dialogue
        if cfg.ena is not None:
            dialogue = augment_entity_name(
                dialogue, instance.candidate, bool(instance.label),
                cfg.ena, self._ena_rng)
        params = self.all_params()
        grads = {k: np.zeros_like(v) for k, v in params.items()}

        tokens1, boundary = self._input1_tokens(dialogue, instance.candidate)
        cache1 = self.encoder.forward(*self.encoder.token_ids(tokens1, boundary))
        f1 = cache1["f"]
        u1 = pair_readout(cache1)
        feats = self.features(dialogue, instance.candidate, alpha=1.0).vector()
        z = float(self.head["w"] @ u1 + self.head["b"][0] + self.wide["u"] @ feats)
        rank_loss, dz = bce_loss(z, float(instance.label))
        lam_rank = self.mtl.lambda_rank if self.mtl is not None else cfg.lambda_rank
        loss = lam_rank * rank_loss
        dz *= lam_rank
        grads["head.w"] += dz * u1
        grads["head.b"] += np.array([dz])
        grads["wide.u"] += dz * feats
        dH1, df1 = pair_readout_backward(cache1, dz * self.head["w"])

        enc_grads = {name: grads[f"enc.{name}"] for name in self.encoder.params}

        if self.mtl is not None:
            # domain classification from the pooled pair representation
            dom_logits = f1 @ self.mtl.domain_weights + self.mtl.domain_bias
            dom_p = softmax(dom_logits)
            loss += -self.mtl.lambda_domain * math.log(max(dom_p[instance.domain_id], 1e-300))
            ddom = self.mtl.lambda_domain * dom_p.copy()
            ddom[instance.domain_id] -= self.mtl.lambda_domain
            grads["mtl.dom"] += np.outer(f1, ddom)
            grads["mtl.bdom"] += ddom
            df1 = df1 + self.mtl.domain_weights @ ddom

            # entity selection over the sampled candidate names
            tokens2, spans = self._input2(instance.entity_names)
            ids2, segs2 = self.encoder.token_ids(tokens2)
            if len(ids2) != len(tokens2):
                raise RankError("entity input exceeds encoder max_len; raise max_len")
            cache2 = self.encoder.forward(ids2, segs2)
            mtl_cache = _mtl_forward_cache(f1, cache2["H"], spans, self.mtl)
            p_ent = mtl_cache["p"]
            loss += -self.mtl.lambda_entity * math.log(
                max(p_ent[instance.true_entity_index], 1e-300))
            dlogits = self.mtl.lambda_entity * p_ent.copy()
            dlogits[instance.true_entity_index] -= self.mtl.lambda_entity
            df_mtl, dH2 = _mtl_backward(mtl_cache, self.mtl, dlogits, grads)
            df1 = df1 + df_mtl
            self.encoder.backward(cache2, dH2, None, enc_grads)

        self.encoder.backward(cache1, dH1, df1, enc_grads)
        return loss, grads


def _gt_snippet(dialogue: Dialogue, kb: KnowledgeBase) -> KnowledgeSnippet:
    ref = dialogue.label.knowledge_refs[0]
    return kb.get(*ref)


def build_pointwise_instances(dialogues: Sequence[Dialogue], kb: KnowledgeBase,
                              config: PointwiseConfig,
                              rng: np.random.Generator) -> list[PointwiseInstance]:
    """Positive plus sampled-negative instances for every labeled
    knowledge-seeking turn.

    Sampling runs on a per-dialogue generator derived from the incoming
    one, so the drawn negatives do not depend on unrelated options (an
    MTL and a plain run over the same corpus see the same negatives).
    """
    domains = sorted({s.domain for s in kb.snippets})
    domain_ids = {d: i for i, d in enumerate(domains)}
    base_seed = int(rng.integers(2 ** 31))
    instances = []
    for d in dialogues:
        if d.label is None or not d.label.is_knowledge_seeking or not d.label.knowledge_refs:
            continue
        drng = np.random.default_rng(zlib.crc32(f"{base_seed}:{d.id}".encode()))
        gt = _gt_snippet(d, kb)
        domain_id = domain_ids[gt.domain]
        gt_entity = next(e for e in kb.entities if e.key == gt.entity_key)
        rows = [(gt, 1)]
        rows += [(neg, 0) for neg in sample_negatives(
            gt, kb, d, drng, count=config.negatives, strategy=config.negative_pools)]
        for candidate, label in rows:
            names, true_idx = ([], 0)
            if config.use_mtl:
                names, true_idx = sample_entity_candidates(
                    kb, d, gt_entity, drng, n_total=config.entity_candidates)
            instances.append(PointwiseInstance(
                dialogue=d, candidate=candidate, label=label,
                domain_id=domain_id, entity_names=names,
                true_entity_index=true_idx))
    return instances


def _ranking_vocab(dialogues: Sequence[Dialogue], kb: KnowledgeBase) -> dict[str, int]:
    streams = [tokenize(linearize_history(d)) for d in dialogues if d.turns]
    streams += [tokenize(linearize_knowledge(s)) for s in kb.snippets]
    streams += [[TAG_ENT] + tokenize(e.name) for e in kb.entities]
    return build_vocab(streams)


def train_pointwise(dialogues: Sequence[Dialogue], kb: KnowledgeBase,
                    config: PointwiseConfig) -> PointwiseModel:
    """Fit the point-wise ranker; loss = lambda_rank * BCE + (if MTL)
    lambda_domain * CE + lambda_entity * KL, with online ENA."""
    rng = np.random.default_rng(config.seed)
    instances = build_pointwise_instances(dialogues, kb, config, rng)
    if not instances:
        raise RankError("no labeled knowledge-seeking dialogues to train on")
    labels = {i.label for i in instances}
    if labels != {0, 1}:
        raise RankError("training data must contain both classes")
    domains = sorted({s.domain for s in kb.snippets})
    model = PointwiseModel(_ranking_vocab(dialogues, kb), domains, config)
    model.bind_kb(kb)
    train_model(model, instances,
                TrainConfig(epochs=config.epochs, learning_rate=config.learning_rate,
                            batch_size=config.batch_size, seed=config.seed))
    return model


@dataclass(frozen=True)
class RankedKnowledgeList:
    turn_id: str
    items: tuple[tuple[KnowledgeSnippet, float], ...]

    def __post_init__(self):
        probs = [p for _, p in self.items]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise RankError("probabilities must lie in [0,1]")
        if any(probs[i] < probs[i + 1] for i in range(len(probs) - 1)):
            raise RankError("items must be sorted by non-increasing probability")

    @property
    def keys(self) -> list[tuple[str, str, str]]:
        return [s.key for s, _ in self.items]


def _sorted_items(scored: list[tuple[KnowledgeSnippet, float]],
                  top_n: int = 5) -> tuple[tuple[KnowledgeSnippet, float], ...]:
    ordered = sorted(scored, key=lambda t: (-t[1],) + t[0].key)
    return tuple(ordered[:top_n])


def pointwise_rank(model: PointwiseModel, dialogue: Dialogue,
                   candidates: Sequence[KnowledgeSnippet],
                   alpha: float = 1.0, kb: Optional[KnowledgeBase] = None,
                   tracked: Optional[Sequence[Entity]] = None,
                   top_n: int = 5) -> RankedKnowledgeList:
    """Score candidates independently and keep the top ones. An empty
    candidate list falls back to the full knowledge base."""
    pool = list(candidates)
    if not pool:
        if kb is None:
            raise RankError("empty candidates and no knowledge base to fall back to")
        pool = list(kb.snippets)
    scored = [(snip, model.score(dialogue, snip, alpha, tracked)) for snip in pool]
    return RankedKnowledgeList(dialogue.id, _sorted_items(scored, top_n))


@dataclass
class ListwiseInstance:
    dialogue: Dialogue
    candidates: list[KnowledgeSnippet]
    true_index: int
    features: list[SparseFeatures]


@dataclass
class ListwiseConfig:
    variant: Variant = Variant.WD2
    epochs: int = 2
    learning_rate: float = 1e-5
    batch_size: int = 16
    seed: int = 0
    d: int = 24
    max_len: int = 128
    pooling: str = "mean"
    alpha_inference: float = 100.0
    alpha_mask: tuple[int, int, int, int] = (1, 1, 1, 1)


class ListwiseModel:
    """Jointly normalized scorer over a short candidate list."""

    def __init__(self, vocab: dict[str, int], config: ListwiseConfig):
        self.config = config
        self.encoder = ToyEncoder(vocab, d=config.d, pooling=config.pooling,
                                  max_len=config.max_len, seed=config.seed)
        rng = np.random.default_rng(config.seed + 1)
        self.head = {"w": rng.normal(0.0, 0.1, size=2 * config.d), "b": np.zeros(1)}
        self.wide = {"u": np.zeros(N_SPARSE)}

    def all_params(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out["head.w"] = self.head["w"]
        out["head.b"] = self.head["b"]
        out["wide.u"] = self.wide["u"]
        return out

    def _logits(self, dialogue: Dialogue, candidates: Sequence[KnowledgeSnippet],
                features: Sequence[SparseFeatures], alpha: float,
                caches: Optional[list] = None) -> np.ndarray:
        history_tokens = tokenize(linearize_history(dialogue))
        logits = np.empty(len(candidates))
        for j, (snip, feat) in enumerate(zip(candidates, features)):
            tokens = history_tokens + tokenize(linearize_knowledge(snip))
            cache = self.encoder.forward(
                *self.encoder.token_ids(tokens, len(history_tokens)))
            vec = replace(feat, alpha=alpha).vector(mask=self.config.alpha_mask)
            logits[j] = (self.head["w"] @ pair_readout(cache) + self.head["b"][0]
                         + self.wide["u"] @ vec)
            if caches is not None:
                caches.append((cache, vec))
        return logits

    def distribution(self, dialogue: Dialogue,
                     candidates: Sequence[KnowledgeSnippet],
                     features: Sequence[SparseFeatures],
                     alpha: Optional[float] = None) -> np.ndarray:
        if not candidates:
            raise RankError("listwise scoring needs at least one candidate")
        if len(candidates) > 5:
            raise RankError("listwise scoring accepts at most 5 candidates")
        alpha = self.config.alpha_inference if alpha is None else alpha
        return softmax(self._logits(dialogue, candidates, features, alpha))

    def loss_and_grads(self, instance: ListwiseInstance) -> tuple[float, dict]:
        params = self.all_params()
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        caches: list = []
        # training uses indicator value 1; alpha applies at inference only
        logits = self._logits(instance.dialogue, instance.candidates,
                              instance.features, 1.0, caches)
        p = softmax(logits)
        loss = -math.log(max(p[instance.true_index], 1e-300))
        dlogits = p.copy()
        dlogits[instance.true_index] -= 1.0
        enc_grads = {name: grads[f"enc.{name}"] for name in self.encoder.params}
        for j, (cache, vec) in enumerate(caches):
            dz = dlogits[j]
            grads["head.w"] += dz * pair_readout(cache)
            grads["head.b"] += np.array([dz])
            grads["wide.u"] += dz * vec
            dH, df = pair_readout_backward(cache, dz * self.head["w"])
            self.encoder.backward(cache, dH, df, enc_grads)
        return loss, grads


def build_listwise_training_data(dialogues: Sequence[Dialogue], kb: KnowledgeBase,
                                 config: PointwiseConfig, k: int = 5,
                                 seed: int = 0,
                                 tracker: Optional[Callable] = None,
                                 variant: Variant = Variant.WD2,
                                 top_n: int = 5) -> tuple[list[ListwiseInstance], dict]:
    """Decode each fold with a point-wise model trained on the others and
    keep the 5-way lists whose ground truth survived in the top-n."""
    labeled = [d for d in dialogues
               if d.label is not None and d.label.is_knowledge_seeking
               and d.label.knowledge_refs]
    folds = split_kfold(labeled, k=k, seed=seed)
    instances: list[ListwiseInstance] = []
    dropped = 0
    decoded_ids: set[str] = set()
    for i, fold in enumerate(folds):
        train_set = [d for j, f in enumerate(folds) if j != i for d in f]
        fold_config = replace(config, seed=zlib.crc32(f"fold{i}".encode()) + config.seed)
        try:
            model = train_pointwise(train_set, kb, fold_config)
        except RankError as exc:
            raise RankError(f"fold {i} training failed: {exc}") from exc
        for d in fold:
            decoded_ids.add(d.id)
            candidates = tracker(d, kb) if tracker is not None else list(kb.snippets)
            ranked = pointwise_rank(model, d, candidates, kb=kb, top_n=top_n)
            refs = set(d.label.knowledge_refs)
            true_idx = next((j for j, key in enumerate(ranked.keys) if key in refs), None)
            if true_idx is None:
                dropped += 1
                continue
            cands = [s for s, _ in ranked.items]
            tracked = exact_match_entities(d, kb)
            feats = [extract_sparse_features(d, s, tracked, variant) for s in cands]
            instances.append(ListwiseInstance(
                dialogue=d, candidates=cands, true_index=true_idx, features=feats))
    stats = {"folds": k, "decoded": len(decoded_ids), "emitted": len(instances),
             "dropped": dropped}
    return instances, stats


def train_listwise(instances: Sequence[ListwiseInstance], kb: KnowledgeBase,
                   config: ListwiseConfig,
                   init_from: Optional[PointwiseModel] = None) -> ListwiseModel:
    """Fit the 5-way reranker. List-wise data is scarce (one instance per
    turn instead of one per candidate), so the encoder and heads can warm
    start from a trained point-wise model."""
    if not instances:
        raise RankError("no listwise instances to train on")
    if init_from is not None:
        if init_from.encoder.d != config.d:
            raise RankError("warm start requires matching encoder dimension")
        model = ListwiseModel(init_from.encoder.vocab, config)
        for key, value in init_from.encoder.params.items():
            model.encoder.params[key][...] = value
        model.head["w"][...] = init_from.head["w"]
        model.head["b"][...] = init_from.head["b"]
        model.wide["u"][...] = init_from.wide["u"]
    else:
        dialogues = [inst.dialogue for inst in instances]
        model = ListwiseModel(_ranking_vocab(dialogues, kb), config)
    train_model(model, list(instances),
                TrainConfig(epochs=config.epochs, learning_rate=config.learning_rate,
                            batch_size=config.batch_size, seed=config.seed))
    return model


def listwise_rank(model: ListwiseModel, dialogue: Dialogue,
                  top5: Sequence[KnowledgeSnippet],
                  features: Sequence[SparseFeatures],
                  alpha: Optional[float] = None) -> np.ndarray:
    """Distribution over the (at most 5) candidates."""
    return model.distribution(dialogue, top5, features, alpha)


def listwise_rerank(model: ListwiseModel, dialogue: Dialogue,
                    ranked: RankedKnowledgeList,
                    tracked: Sequence[Entity],
                    alpha: Optional[float] = None) -> RankedKnowledgeList:
    if not ranked.items:
        return ranked
    cands = [s for s, _ in ranked.items]
    feats = [extract_sparse_features(dialogue, s, tracked, model.config.variant)
             for s in cands]
    dist = listwise_rank(model, dialogue, cands, feats, alpha)
    return RankedKnowledgeList(ranked.turn_id,
                               _sorted_items(list(zip(cands, dist))))


def ensemble_rank(system_lists: Sequence[RankedKnowledgeList],
                  top_n: int = 5) -> RankedKnowledgeList:
    """Sum each snippet's probability across systems and re-sort."""
    if not system_lists:
        raise RankError("ensemble needs at least one system")
    turn_id = system_lists[0].turn_id
    if any(lst.turn_id != turn_id for lst in system_lists):
        raise RankError("ensemble inputs must cover the same turn")
    totals: dict[tuple, float] = {}
    snippets: dict[tuple, KnowledgeSnippet] = {}
    for lst in system_lists:
        for snip, prob in lst.items:
            totals[snip.key] = totals.get(snip.key, 0.0) + prob
            snippets[snip.key] = snip
    max_total = max(totals.values(), default=1.0)
    scale = 1.0 / max(1.0, max_total)  # keep summed scores valid probabilities
    scored = [(snippets[k], v * scale) for k, v in totals.items()]
    return RankedKnowledgeList(turn_id, _sorted_items(scored, top_n))


def ranking_metrics(predicted: Sequence[RankedKnowledgeList],
                    references: Sequence[set[tuple[str, str, str]]]) -> dict[str, float]:
    keys = [lst.keys for lst in predicted]
    return {"mrr@5": mrr_at_k(keys, references, 5),
            "r@1": recall_at_k(keys, references, 1),
            "r@5": recall_at_k(keys, references, 5)}
