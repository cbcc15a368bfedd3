"""Consensus decoding over pooled n-best candidates.

Each candidate is scored by a weighted sum of 10 features: 9 similarity
features (its mean BLEU-1..4, ROUGE-1/2/L, METEOR-lite and character-F
against every other candidate in the pool) and the reciprocal of its
rank within its own system. Feature weights are tuned toward corpus
BLEU-4 by coordinate ascent with exact line search: along one coordinate
every pool's selection is a piecewise-constant function of the weight,
so the objective only changes at candidate-crossing breakpoints, all of
which are enumerated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .metrics import (bleu_n, char_f, corpus_bleu, meteor_lite, rouge_l,
                      rouge_n)

FEATURE_NAMES = (
    "sim-bleu1", "sim-bleu2", "sim-bleu3", "sim-bleu4",
    "sim-rouge1", "sim-rouge2", "sim-rougeL", "sim-meteor", "sim-charf",
    "reciprocal-rank",
)

_SIMILARITIES: tuple[Callable[[str, str], float], ...] = (
    lambda h, r: bleu_n(h, [r], 1),
    lambda h, r: bleu_n(h, [r], 2),
    lambda h, r: bleu_n(h, [r], 3),
    lambda h, r: bleu_n(h, [r], 4),
    lambda h, r: rouge_n(h, r, 1),
    lambda h, r: rouge_n(h, r, 2),
    rouge_l,
    meteor_lite,
    char_f,
)


class ConsensusError(Exception):
    pass


@dataclass(frozen=True)
class Candidate:
    text: str
    system_id: str
    rank: int
    logprob: float

    def __post_init__(self):
        if self.rank < 1:
            raise ConsensusError("ranks are 1-based")


@dataclass(frozen=True)
class CandidatePool:
    turn_id: str
    candidates: tuple[Candidate, ...]

    def __post_init__(self):
        seen = set()
        per_system: dict[str, list[int]] = {}
        for c in self.candidates:
            key = (c.system_id, c.rank)
            if key in seen:
                raise ConsensusError(f"duplicate (system, rank): {key}")
            seen.add(key)
            per_system.setdefault(c.system_id, []).append(c.rank)
        for system, ranks in per_system.items():
            if sorted(ranks) != list(range(1, len(ranks) + 1)):
                raise ConsensusError(f"ranks not contiguous for system {system!r}")


@dataclass
class ConsensusWeights:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(FEATURE_NAMES),):
            raise ConsensusError(f"expected {len(FEATURE_NAMES)} weights")
        if not np.all(np.isfinite(self.values)):
            raise ConsensusError("weights must be finite")

    def to_json(self) -> dict:
        return {"features": list(FEATURE_NAMES), "weights": self.values.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "ConsensusWeights":
        if list(data.get("features", [])) != list(FEATURE_NAMES):
            raise ConsensusError("feature-name header mismatch")
        return cls(np.asarray(data["weights"], dtype=np.float64))

    @classmethod
    def uniform(cls) -> "ConsensusWeights":
        return cls(np.ones(len(FEATURE_NAMES)))


def extract_features(candidate: Candidate, pool: CandidatePool) -> np.ndarray:
    """10-vector: mean similarity to every other pool candidate per
    metric, then 1/rank. A singleton pool has zero similarity features."""
    others = [c for c in pool.candidates if c is not candidate]
    feats = np.zeros(len(FEATURE_NAMES))
    if others:
        for m, metric in enumerate(_SIMILARITIES):
            feats[m] = sum(metric(candidate.text, o.text) for o in others) / len(others)
    feats[-1] = 1.0 / candidate.rank
    return feats


def pool_features(pool: CandidatePool) -> np.ndarray:
    if not pool.candidates:
        raise ConsensusError(f"empty candidate pool for turn {pool.turn_id}")
    return np.stack([extract_features(c, pool) for c in pool.candidates])


def _tie_key(candidate: Candidate):
    # higher logprob wins, then lexicographic system id, then rank
    return (-candidate.logprob, candidate.system_id, candidate.rank)


def consensus_select(pool: CandidatePool, weights: ConsensusWeights,
                     features: Optional[np.ndarray] = None) -> Candidate:
    if not pool.candidates:
        raise ConsensusError(f"empty candidate pool for turn {pool.turn_id}")
    feats = pool_features(pool) if features is None else features
    scores = feats @ weights.values
    best = None
    best_key = None
    for c, s in zip(pool.candidates, scores):
        key = (-s,) + _tie_key(c)
        if best_key is None or key < best_key:
            best, best_key = c, key
    return best


@dataclass
class TuneConfig:
    restarts: int = 3
    directions_per_round: int = len(FEATURE_NAMES)
    max_rounds: int = 20
    seed: int = 0


def _selection_segments(base: np.ndarray, slope: np.ndarray,
                        pool: CandidatePool) -> list[tuple[float, int]]:
    """Piecewise-constant argmax of base + x*slope: [(x_start, cand_idx)].

    Exhaustive over pairwise crossing points; between consecutive
    breakpoints the argmax is evaluated at the midpoint.
    """
    n = base.shape[0]
    xs = set()
    for i in range(n):
        for j in range(i + 1, n):
            dm = slope[i] - slope[j]
            if dm != 0.0:
                xs.add((base[j] - base[i]) / dm)
    points = sorted(xs)
    probes = [points[0] - 1.0 if points else 0.0]
    for a, b in zip(points, points[1:]):
        probes.append((a + b) / 2.0)
    if points:
        probes.append(points[-1] + 1.0)

    def argmax_at(x: float) -> int:
        scores = base + x * slope
        best_idx = 0
        best_key = None
        for idx in range(n):
            key = (-scores[idx],) + _tie_key(pool.candidates[idx])
            if best_key is None or key < best_key:
                best_idx, best_key = idx, key
        return best_idx

    segments = []
    starts = [-math.inf] + points
    for start, probe in zip(starts, probes):
        idx = argmax_at(probe)
        if not segments or segments[-1][1] != idx:
            segments.append((start, idx))
    return segments


def _bleu_stats(hypothesis: str, reference: str, n: int = 4) -> tuple:
    """Sufficient statistics for corpus BLEU aggregation."""
    from .corpus import tokenize
    from .metrics import _clipped_counts, _closest_ref_len

    hyp = tokenize(hypothesis)
    ref = tokenize(reference)
    clipped = []
    totals = []
    for order in range(1, n + 1):
        c, t = _clipped_counts(hyp, [ref], order)
        clipped.append(c)
        totals.append(t)
    return (np.array(clipped), np.array(totals), len(hyp),
            _closest_ref_len(len(hyp), [len(ref)]) if ref else 0)


def _bleu_from_stats(clipped: np.ndarray, totals: np.ndarray,
                     hyp_len: int, ref_len: int) -> float:
    log_sum = 0.0
    used = 0
    for c, t in zip(clipped, totals):
        if t == 0:
            continue
        if c == 0:
            return 0.0
        log_sum += math.log(c / t)
        used += 1
    if used == 0 or hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum / used)


def tune_weights(dev_pools: Sequence[CandidatePool],
                 references: dict[str, str],
                 init_weights: Optional[ConsensusWeights] = None,
                 config: Optional[TuneConfig] = None) -> ConsensusWeights:
    """Coordinate-ascent line search maximizing corpus BLEU-4 of the
    selected candidates. Only improving moves are accepted, so the
    returned weights never score below the initial ones on the dev set.
    """
    config = config or TuneConfig()
    init = init_weights or ConsensusWeights.uniform()
    if not dev_pools:
        raise ConsensusError("tuning requires at least one dev pool")
    missing = [p.turn_id for p in dev_pools if p.turn_id not in references]
    if missing:
        raise ConsensusError(f"missing references for turns: {missing[:5]}")

    feats = [pool_features(p) for p in dev_pools]
    stats = [
        [_bleu_stats(c.text, references[p.turn_id]) for c in p.candidates]
        for p in dev_pools
    ]

    def objective(selection: list[int]) -> float:
        clipped = np.zeros(4, dtype=np.int64)
        totals = np.zeros(4, dtype=np.int64)
        hyp_len = ref_len = 0
        for pi, ci in enumerate(selection):
            c, t, hl, rl = stats[pi][ci]
            clipped += c
            totals += t
            hyp_len += hl
            ref_len += rl
        return _bleu_from_stats(clipped, totals, hyp_len, ref_len)

    def select_all(weights: np.ndarray) -> list[int]:
        out = []
        for pi, pool in enumerate(dev_pools):
            scores = feats[pi] @ weights
            best_idx, best_key = 0, None
            for idx in range(len(pool.candidates)):
                key = (-scores[idx],) + _tie_key(pool.candidates[idx])
                if best_key is None or key < best_key:
                    best_idx, best_key = idx, key
            out.append(best_idx)
        return out

    def line_search(weights: np.ndarray, direction: np.ndarray,
                    current: float) -> tuple[float, Optional[float]]:
        """Best (objective, step) along weights + step*direction."""
        all_segments = []
        for pi, pool in enumerate(dev_pools):
            base = feats[pi] @ weights
            slope = feats[pi] @ direction
            all_segments.append(_selection_segments(base, slope, pool))
        breakpoints = sorted({seg[0] for segs in all_segments for seg in segs
                              if seg[0] != -math.inf})
        probes = [breakpoints[0] - 1.0 if breakpoints else 0.0]
        for a, b in zip(breakpoints, breakpoints[1:]):
            probes.append((a + b) / 2.0)
        if breakpoints:
            probes.append(breakpoints[-1] + 1.0)

        def selection_at(x: float) -> list[int]:
            out = []
            for segs in all_segments:
                idx = segs[0][1]
                for start, cand in segs:
                    if start <= x:
                        idx = cand
                    else:
                        break
                out.append(idx)
            return out

        best_obj, best_step = current, None
        for x in probes:
            obj = objective(selection_at(x))
            if obj > best_obj + 1e-12:
                best_obj, best_step = obj, x
        return best_obj, best_step

    rng = np.random.default_rng(config.seed)
    n_feat = len(FEATURE_NAMES)
    best_weights = init.values.copy()
    best_obj = objective(select_all(best_weights))

    for restart in range(config.restarts):
        if restart == 0:
            weights = init.values.copy()
        else:
            weights = init.values + rng.normal(0.0, 0.5, size=n_feat)
        current = objective(select_all(weights))
        for _ in range(config.max_rounds):
            improved = False
            order = rng.permutation(n_feat)[: config.directions_per_round]
            for coord in order:
                direction = np.zeros(n_feat)
                direction[int(coord)] = 1.0
                obj, step = line_search(weights, direction, current)
                if step is not None:
                    weights = weights + step * direction
                    current = obj
                    improved = True
            if not improved:
                break
        if current > best_obj:
            best_obj, best_weights = current, weights.copy()

    return ConsensusWeights(best_weights)


def evaluate_selection(pools: Sequence[CandidatePool],
                       references: dict[str, str],
                       weights: ConsensusWeights) -> float:
    """Corpus BLEU-4 of the consensus selections against references."""
    pairs = []
    for pool in pools:
        chosen = consensus_select(pool, weights)
        pairs.append((chosen.text, [references[pool.turn_id]]))
    return corpus_bleu(pairs, n=4)


def save_weights(weights: ConsensusWeights, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(weights.to_json(), fh, indent=1)


def load_weights(path: str) -> ConsensusWeights:
    with open(path, encoding="utf-8") as fh:
        return ConsensusWeights.from_json(json.load(fh))


def load_pools(path: str) -> list[CandidatePool]:
    """Line-delimited records {turn_id, system_id, rank, logprob, text}."""
    grouped: dict[str, list[Candidate]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                grouped.setdefault(rec["turn_id"], []).append(Candidate(
                    text=rec["text"], system_id=rec["system_id"],
                    rank=int(rec["rank"]), logprob=float(rec["logprob"])))
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ConsensusError(f"bad pool record at line {lineno}: {exc}") from exc
    return [CandidatePool(turn_id=t, candidates=tuple(cands))
            for t, cands in grouped.items()]


def save_pools(pools: Sequence[CandidatePool], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pool in pools:
            for c in pool.candidates:
                fh.write(json.dumps({
                    "turn_id": pool.turn_id, "system_id": c.system_id,
                    "rank": c.rank, "logprob": c.logprob, "text": c.text,
                }, ensure_ascii=False) + "\n")
