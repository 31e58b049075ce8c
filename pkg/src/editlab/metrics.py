"""Post-edit evaluation: edit success, portability, locality, fluency.

All metrics are read-only over finished models and deterministic given the
probes. Scoring rule: position-wise token match against the expected answer
(strict whole-sequence match is reported alongside). Locality compares the
post-edit model's outputs to the PRE-edit model's outputs, not to ground
truth: unrelated answers should simply not change. Fluency is the mean of
bigram and trigram entropies (base 2) of greedy continuations.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .model import TinyLM
from .scoring import greedy_answer

FORMULAS = {
    "match_rule": "position-wise token match over the expected length",
    "entropy_base": 2,
    "fluency": "mean over prompts of (bigram entropy + trigram entropy) / 2",
    "locality_reference": "pre-edit model outputs",
}


@dataclass
class ProbeSet:
    rephrase_prompts: list = field(default_factory=list)
    portability_probes: list = field(default_factory=list)
    locality_probes: list = field(default_factory=list)


@dataclass
class MetricsReport:
    edit_success: float | None
    edit_success_exact: float | None
    portability: float | None
    locality: float | None
    fluency: float
    per_request: list = field(default_factory=list)
    formulas: dict = field(default_factory=lambda: dict(FORMULAS))

    def to_dict(self) -> dict:
        return {
            "edit_success": self.edit_success,
            "edit_success_exact": self.edit_success_exact,
            "portability": self.portability,
            "locality": self.locality,
            "fluency": self.fluency,
            "per_request": self.per_request,
            "formulas": self.formulas,
        }


def token_match_score(predicted: Sequence[int], expected: Sequence[int]) -> float:
    """Fraction of positions where predicted matches expected.

    Predicted is truncated or padded (with mismatches) to the expected length.
    """
    expected = list(expected)
    if not expected:
        raise ValueError("expected sequence must be non-empty")
    predicted = list(predicted)[: len(expected)]
    hits = sum(1 for p, e in zip(predicted, expected) if p == e)
    return hits / len(expected)


def edit_success(model_post: TinyLM, requests: Sequence) -> tuple[float | None, float | None, list]:
    """Mean token match of greedy answers on each request's exact prompt and
    its rephrasings, against the new target. Returns (token-level, strict
    whole-sequence level, per-request breakdown)."""
    scores: list[float] = []
    exact_scores: list[float] = []
    breakdown = []
    for req in requests:
        prompts = [req.prompt_ids] + [ids for _, ids in req.rephrase_ids()]
        req_scores = []
        for pid in prompts:
            answer = greedy_answer(model_post, pid, len(req.target_ids))
            s = token_match_score(answer, req.target_ids)
            scores.append(s)
            exact_scores.append(1.0 if answer == list(req.target_ids) else 0.0)
            req_scores.append(s)
        breakdown.append({"subject": req.subject, "scores": req_scores})
    if not scores:
        return None, None, breakdown
    return sum(scores) / len(scores), sum(exact_scores) / len(exact_scores), breakdown


def locality(model_pre: TinyLM, model_post: TinyLM, probes: Sequence) -> float:
    """Mean token match between post-edit and pre-edit greedy answers.

    Each probe fixes its decode length via its recorded reference answer.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("locality requires a non-empty probe set")
    scores = []
    for probe in probes:
        k = len(probe.answer_ids)
        before = greedy_answer(model_pre, probe.prompt_ids, k)
        after = greedy_answer(model_post, probe.prompt_ids, k)
        scores.append(token_match_score(after, before))
    return sum(scores) / len(scores)


def portability(model_post: TinyLM, probes: Sequence) -> float:
    """Mean token match of greedy answers against the probes' expected answers."""
    probes = list(probes)
    if not probes:
        raise ValueError("portability requires a non-empty probe set")
    scores = []
    for probe in probes:
        answer = greedy_answer(model_post, probe.prompt_ids, len(probe.answer_ids))
        scores.append(token_match_score(answer, probe.answer_ids))
    return sum(scores) / len(scores)


def ngram_entropy(tokens: Sequence[int], n: int) -> float:
    """Shannon entropy (base 2) of the empirical n-gram distribution."""
    tokens = list(tokens)
    if len(tokens) < n:
        raise ValueError(f"need at least {n} tokens for {n}-grams, got {len(tokens)}")
    counts = Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    total = sum(counts.values())
    return -sum((c / total) * math.log2(c / total) for c in counts.values())


def fluency(model_post: TinyLM, prompts: Sequence[Sequence[int]], gen_len: int = 20) -> float:
    """Mean over prompts of (bigram + trigram entropy)/2 of greedy continuations."""
    if gen_len < 3:
        raise ValueError(f"gen_len must be >= 3, got {gen_len}")
    prompts = list(prompts)
    if not prompts:
        raise ValueError("fluency requires at least one prompt")
    scores = []
    for prompt in prompts:
        generated = greedy_answer(model_post, prompt, gen_len)
        scores.append((ngram_entropy(generated, 2) + ngram_entropy(generated, 3)) / 2.0)
    return sum(scores) / len(scores)
