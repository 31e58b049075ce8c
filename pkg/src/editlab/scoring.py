"""Completion scoring and greedy generation.

A completion y = (t_1..t_K) after a prompt c is scored factor by factor:
the k-th factor is log p(t_k | c, z_1..z_{k-1}) where z is the scoring
context. With z = y ("own prefix") the factors multiply out to the model's
probability of emitting y after c. With z set to some other sequence
("teacher forced") each token is judged against that forced prefix instead.

All K factors come out of one forward pass over c + z[:K-1]; causal masking
makes that identical to scoring one position at a time.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, log_softmax, narrow, pick
from .model import TinyLM, forward_logits

OWN_PREFIX = "own_prefix"
TEACHER_FORCED = "teacher_forced"


@dataclass
class ScoredCompletion:
    tokens: list[int]
    per_token_logprob: list[float]
    total_logprob: float
    context_mode: str


def _as_ids(seq: Sequence[int], what: str) -> list[int]:
    ids = [int(t) for t in seq]
    if not ids and what == "completion":
        raise ValueError("completion must contain at least one token")
    return ids


def row_logprobs(model: TinyLM, prompt: Sequence[int], context: Sequence[int], k: int) -> Tensor:
    """Log-softmax rows for k completion factors: row j conditions on prompt + context[:j].

    Differentiable; the caller picks token entries out of the [k, V] result.
    """
    prompt = _as_ids(prompt, "prompt")
    context = _as_ids(context, "context")
    if k < 1:
        raise ValueError("need at least one completion factor")
    if len(context) < k - 1:
        raise ValueError(f"scoring context has {len(context)} tokens, need >= {k - 1}")
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    seq = prompt + context[: k - 1]
    if len(seq) > model.config.max_ctx:
        raise ValueError(
            f"scoring sequence length {len(seq)} exceeds max_ctx {model.config.max_ctx}"
        )
    logits = forward_logits(model, seq)
    rows = narrow(logits, 0, len(prompt) - 1, k)
    return log_softmax(rows, axis=-1)


def sequence_logprobs(
    model: TinyLM, prompt: Sequence[int], completion: Sequence[int], context: Sequence[int]
) -> Tensor:
    """Per-token log-probabilities of `completion` under the given scoring context."""
    completion = _as_ids(completion, "completion")
    rows = row_logprobs(model, prompt, context, len(completion))
    return pick(rows, np.asarray(completion))


def completion_logprob(
    model: TinyLM,
    prompt: Sequence[int],
    completion: Sequence[int],
    mode: str = OWN_PREFIX,
    forced: Sequence[int] | None = None,
) -> ScoredCompletion:
    """Score a completion; mode picks the context the factors condition on."""
    completion = _as_ids(completion, "completion")
    if mode == OWN_PREFIX:
        context = completion
    elif mode == TEACHER_FORCED:
        if forced is None:
            raise ValueError("teacher_forced scoring requires a forced context sequence")
        context = _as_ids(forced, "forced")
    else:
        raise ValueError(f"unknown context mode {mode!r}")
    lp = sequence_logprobs(model, prompt, completion, context).data
    per_token = [float(v) for v in lp]
    return ScoredCompletion(
        tokens=completion,
        per_token_logprob=per_token,
        total_logprob=float(lp.sum()),
        context_mode=mode,
    )


def _greedy_free_running(model: TinyLM, prompt: list[int], k: int) -> list[int]:
    ids = list(prompt)
    out = []
    for _ in range(k):
        logits = forward_logits(model, ids).data
        nxt = int(np.argmax(logits[-1]))  # argmax ties break to the lowest token id
        out.append(nxt)
        ids.append(nxt)
    return out


def generate_negative(
    model: TinyLM, prompt: Sequence[int], target: Sequence[int], mode: str
) -> list[int]:
    """Greedy negative completion, exactly len(target) tokens.

    teacher_forced: token k is the argmax after prompt + target[:k-1] (one pass).
    free_running:   token k is the argmax after prompt + its own previous output.
    Both agree on the first token, which sees only the prompt.
    """
    prompt = _as_ids(prompt, "prompt")
    target = _as_ids(target, "completion")
    if len(prompt) + len(target) > model.config.max_ctx:
        raise ValueError(
            f"prompt+completion length {len(prompt) + len(target)} exceeds "
            f"max_ctx {model.config.max_ctx}"
        )
    k = len(target)
    if mode == "free_running":
        return _greedy_free_running(model, prompt, k)
    if mode != TEACHER_FORCED:
        raise ValueError(f"unknown generation mode {mode!r}")
    seq = prompt + target[: k - 1]
    logits = forward_logits(model, seq).data
    rows = logits[len(prompt) - 1 : len(prompt) - 1 + k]
    return [int(np.argmax(row)) for row in rows]


def greedy_answer(model: TinyLM, prompt: Sequence[int], k: int) -> list[int]:
    """Free-running greedy decode of exactly k tokens."""
    prompt = _as_ids(prompt, "prompt")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(prompt) + k > model.config.max_ctx:
        raise ValueError(
            f"prompt length {len(prompt)} + {k} exceeds max_ctx {model.config.max_ctx}"
        )
    return _greedy_free_running(model, prompt, k)
