"""Response generation harness.

Covers the data side of generation: mining and stripping the
written-style trailing interrogatives, building tagged generation
contexts with the top-5 knowledge in descending order, the online
distractor knob p_s (with probability p_s the gold snippet is dropped
from the context so the generator learns to survive selection errors),
and a small trainable conditional generator with n-best beam decoding.

The reference generator is an autoregressive word model conditioned on a
bag-of-words context vector, the previous token and the position. It can
overfit a small training set exactly, which is all the desk-scale
harness requires; real pretrained LMs plug in behind the Generator
contract.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import (Dialogue, GenerationContext, KnowledgeSnippet, TAG_RESP,
                     build_generation_context, normalize_ws, tokenize)
from .models import AdamW, build_vocab

EOS = "⟨eos⟩"

_SENTENCE_RE = re.compile(r"[^.!?]*[.!?]|[^.!?]+$")


class GenerateError(Exception):
    pass


@dataclass
class GenTrainConfig:
    epochs: int = 6
    batch_size: int = 32
    max_history_tokens: int = 512
    max_target_tokens: int = 96
    p_s: float = 0.15
    k_folds: int = 10
    seed: int = 0
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    d: int = 32
    include_question: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p_s <= 1.0:
            raise GenerateError(f"p_s out of [0,1]: {self.p_s}")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_RE.findall(text) if s.strip()]


def _normalize_sentence(sentence: str) -> str:
    return normalize_ws(sentence).lower()


def mine_frequent_interrogatives(responses: Sequence[str],
                                 min_count: int = 20) -> list[str]:
    """Trailing question sentences whose normalized form repeats at least
    min_count times, most frequent first."""
    counts: dict[str, int] = {}
    for response in responses:
        sentences = split_sentences(response)
        if not sentences:
            continue
        tail = sentences[-1]
        if tail.endswith("?"):
            key = _normalize_sentence(tail)
            counts[key] = counts.get(key, 0) + 1
    frequent = [(n, s) for s, n in counts.items() if n >= min_count]
    frequent.sort(key=lambda t: (-t[0], t[1]))
    return [s for _, s in frequent]


def strip_trailing_interrogatives(response: str,
                                  interrogatives: Sequence[str]) -> str:
    """Drop listed trailing questions; never empties the response."""
    listed = {_normalize_sentence(s) for s in interrogatives}
    current = response
    while True:
        sentences = split_sentences(current)
        if len(sentences) < 2:
            return current
        if _normalize_sentence(sentences[-1]) not in listed:
            return current
        current = " ".join(sentences[:-1])


def preprocess_responses(dialogues: Sequence[Dialogue],
                         interrogatives: Sequence[str]) -> list[Dialogue]:
    from dataclasses import replace

    out = []
    for d in dialogues:
        if d.label is None or d.label.response is None:
            out.append(d)
            continue
        stripped = strip_trailing_interrogatives(d.label.response, interrogatives)
        out.append(replace(d, label=replace(d.label, response=stripped)))
    return out


@dataclass(frozen=True)
class GenExample:
    """One generation training row: tagged context plus tagged target."""
    turn_id: str
    context: GenerationContext
    target: str
    gold_replaced: bool = False


def build_gen_examples(dialogues: Sequence[Dialogue],
                       selection_outputs: dict[str, Sequence[KnowledgeSnippet]],
                       config: GenTrainConfig,
                       rng: np.random.Generator) -> list[GenExample]:
    """Contexts from (cross-validated) selection outputs, with the gold
    snippet dropped with probability p_s so contexts reflect inference
    conditions."""
    examples = []
    for d in dialogues:
        if d.label is None or not d.label.is_knowledge_seeking:
            continue
        if d.label.response is None:
            continue
        if d.id not in selection_outputs:
            raise GenerateError(f"no selection output for turn {d.id}")
        topk = list(selection_outputs[d.id])[:5]
        refs = set(d.label.knowledge_refs)
        gold_replaced = False
        if topk and rng.uniform() < config.p_s:
            survivors = [s for s in topk if s.key not in refs]
            if len(survivors) < len(topk):
                topk = survivors
                gold_replaced = True
        context = build_generation_context(
            d, topk, max_tokens=config.max_history_tokens,
            include_question=config.include_question)
        examples.append(GenExample(
            turn_id=d.id, context=context,
            target=f"{TAG_RESP} {d.label.response}",
            gold_replaced=gold_replaced))
    return examples


class ToyGenerator:
    """Word-level conditional generator: tanh state over (previous token,
    position, mean context embedding), softmax over the vocabulary."""

    def __init__(self, vocab: dict[str, int], d: int = 32,
                 max_target_tokens: int = 96, seed: int = 0):
        self.vocab = dict(vocab)
        if EOS not in self.vocab:
            self.vocab[EOS] = len(self.vocab)
        self.inv_vocab = {i: w for w, i in self.vocab.items()}
        self.d = d
        self.max_target_tokens = max_target_tokens
        self.seed = seed
        rng = np.random.default_rng(seed)
        V = len(self.vocab)
        self.params = {
            "emb": rng.normal(0.0, 0.5, size=(V, d)),
            "pos": rng.normal(0.0, 0.1, size=(max_target_tokens + 1, d)),
            "wp": rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)),
            "wc": rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)),
            "bh": np.zeros(d),
            "out": rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, V)),
            "bo": np.zeros(V),
        }

    def all_params(self) -> dict[str, np.ndarray]:
        return self.params

    def _ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.asarray([self.vocab.get(t, 0) for t in tokens], dtype=np.int64)

    def context_vector(self, context: str) -> np.ndarray:
        ids = self._ids(tokenize(context))
        if ids.size == 0:
            return np.zeros(self.d)
        return self.params["emb"][ids].mean(axis=0)

    def _target_ids(self, target: str) -> np.ndarray:
        tokens = tokenize(target)
        if tokens and tokens[0] == TAG_RESP:
            tokens = tokens[1:]
        tokens = tokens[: self.max_target_tokens - 1] + [EOS]
        return self._ids(tokens)

    def _step_forward(self, prev_id: int, pos: int, c: np.ndarray) -> dict:
        p = self.params
        x = p["emb"][prev_id]
        pre = x @ p["wp"] + c @ p["wc"] + p["pos"][pos] + p["bh"]
        h = np.tanh(pre)
        logits = h @ p["out"] + p["bo"]
        shifted = logits - logits.max()
        logp = shifted - math.log(np.exp(shifted).sum())
        return {"prev_id": prev_id, "pos": pos, "x": x, "h": h, "logp": logp}

    def loss_and_grads(self, example: GenExample) -> tuple[float, dict]:
        """Mean token-level cross entropy with analytic gradients."""
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        c = self.context_vector(example.context.text)
        ctx_ids = self._ids(tokenize(example.context.text))
        target = self._target_ids(example.target)
        bos = self.vocab.get(TAG_RESP, 0)
        loss = 0.0
        dc = np.zeros(self.d)
        prev = bos
        n = len(target)
        for pos, tok in enumerate(target):
            step = self._step_forward(prev, pos, c)
            loss += -float(step["logp"][tok]) / n
            dlogits = np.exp(step["logp"]) / n
            dlogits[tok] -= 1.0 / n
            h = step["h"]
            grads["out"] += np.outer(h, dlogits)
            grads["bo"] += dlogits
            dh = p["out"] @ dlogits
            dpre = dh * (1.0 - h * h)
            grads["wp"] += np.outer(step["x"], dpre)
            grads["wc"] += np.outer(c, dpre)
            grads["pos"][pos] += dpre
            grads["bh"] += dpre
            grads["emb"][step["prev_id"]] += p["wp"] @ dpre
            dc += p["wc"] @ dpre
            prev = int(tok)
        if ctx_ids.size:
            np.add.at(grads["emb"], ctx_ids, dc / ctx_ids.size)
        return loss, grads

    def generate_nbest(self, context: str, n: int,
                       beam_width: Optional[int] = None) -> list[tuple[str, float]]:
        """Beam-search n-best: deduplicated texts sorted by log-probability."""
        if n < 1:
            raise GenerateError("n must be >= 1")
        width = max(n, beam_width or 2 * n)
        c = self.context_vector(context)
        bos = self.vocab.get(TAG_RESP, 0)
        eos_id = self.vocab[EOS]
        beams: list[tuple[float, list[int], bool]] = [(0.0, [], False)]
        for pos in range(self.max_target_tokens):
            nxt: list[tuple[float, list[int], bool]] = []
            for logprob, tokens, done in beams:
                if done:
                    nxt.append((logprob, tokens, True))
                    continue
                prev = tokens[-1] if tokens else bos
                step = self._step_forward(prev, pos, c)
                top = np.argsort(-step["logp"], kind="stable")[:width]
                for tok in top:
                    tok = int(tok)
                    nxt.append((logprob + float(step["logp"][tok]),
                                tokens + [tok], tok == eos_id))
            nxt.sort(key=lambda b: (-b[0], b[1]))
            beams = nxt[:width]
            if all(done for _, _, done in beams):
                break
        best: dict[str, float] = {}
        for logprob, tokens, _ in beams:
            words = [self.inv_vocab[t] for t in tokens if t != eos_id]
            text = " ".join(words)
            if text not in best or logprob > best[text]:
                best[text] = logprob
        ranked = sorted(best.items(), key=lambda t: (-t[1], t[0]))
        return ranked[:n]

    def greedy(self, context: str) -> str:
        return self.generate_nbest(context, 1, beam_width=1)[0][0]


def train_generator(examples: Sequence[GenExample],
                    config: GenTrainConfig) -> tuple[ToyGenerator, list[float]]:
    """Fit the reference generator; returns (model, per-epoch mean loss)."""
    if not examples:
        raise GenerateError("no generation examples to train on")
    streams = [tokenize(e.context.text) + tokenize(e.target) for e in examples]
    vocab = build_vocab(streams)
    model = ToyGenerator(vocab, d=config.d,
                         max_target_tokens=config.max_target_tokens,
                         seed=config.seed)
    opt = AdamW(model.params, lr=config.learning_rate,
                weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(examples))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = {k: np.zeros_like(v) for k, v in model.params.items()}
            for idx in batch:
                loss, g = model.loss_and_grads(examples[int(idx)])
                total += loss
                for k in grads:
                    grads[k] += g[k]
            for k in grads:
                grads[k] /= len(batch)
            if config.learning_rate > 0:
                opt.step(grads)
        history.append(total / len(examples))
    return model, history


def decode_nbest(generator, context: str, n: int) -> list[tuple[str, float]]:
    """Contract wrapper: validates ordering, dedup and finite logprobs."""
    out = generator.generate_nbest(context, n)
    if len(out) > n:
        raise GenerateError("generator returned more than n candidates")
    texts = [t for t, _ in out]
    if len(set(texts)) != len(texts):
        raise GenerateError("generator returned duplicate texts")
    logps = [lp for _, lp in out]
    if any(not math.isfinite(lp) or lp > 0 for lp in logps):
        raise GenerateError("log-probabilities must be finite and <= 0")
    if any(logps[i] < logps[i + 1] for i in range(len(logps) - 1)):
        raise GenerateError("candidates must be sorted by descending log-probability")
    return out
