import itertools
import math

import numpy as np
import pytest

from editlab.model import LMConfig, TinyLM, forward_logits
from editlab.scoring import (
    completion_logprob,
    generate_negative,
    greedy_answer,
    sequence_logprobs,
)


def tiny_model(vocab=4, seed=0, **overrides):
    cfg = dict(vocab_size=vocab, d_model=8, n_layers=2, n_heads=2, d_ff=12, max_ctx=10, seed=seed)
    cfg.update(overrides)
    return TinyLM(LMConfig(**cfg))


def uniform_model(vocab=5):
    model = tiny_model(vocab=vocab)
    for p in model.params.values():
        p.data[:] = 0.0
    return model


def peaked_model(vocab=9, peak=7):
    model = uniform_model(vocab)
    model.params["unembed.b"].data[peak] = 5.0
    return model


def one_token_at_a_time(model, prompt, completion, context):
    """Oracle: score each factor with its own forward pass."""
    out = []
    for k, tok in enumerate(completion):
        seq = list(prompt) + list(context[:k])
        logits = forward_logits(model, seq).data[-1]
        shifted = logits - logits.max()
        out.append(float(shifted[tok] - np.log(np.exp(shifted).sum())))
    return out


def test_uniform_model_total_logprob():
    v, k = 5, 3
    model = uniform_model(v)
    scored = completion_logprob(model, [0], [1, 2, 3])
    assert scored.total_logprob == pytest.approx(-k * math.log(v), abs=1e-10)
    assert all(lp <= 0 for lp in scored.per_token_logprob)
    assert scored.total_logprob == pytest.approx(sum(scored.per_token_logprob), abs=1e-12)


def test_modes_agree_for_single_token():
    model = tiny_model(seed=3)
    own = completion_logprob(model, [1, 2], [3], mode="own_prefix")
    forced = completion_logprob(model, [1, 2], [3], mode="teacher_forced", forced=[0, 1])
    assert own.total_logprob == pytest.approx(forced.total_logprob, abs=1e-15)


def test_teacher_forced_on_own_target_matches_own_prefix():
    model = tiny_model(seed=4)
    y = [1, 3, 2]
    own = completion_logprob(model, [0], y, mode="own_prefix")
    forced = completion_logprob(model, [0], y, mode="teacher_forced", forced=y)
    assert own.per_token_logprob == pytest.approx(forced.per_token_logprob, abs=1e-15)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_batched_scoring_matches_one_token_at_a_time(seed):
    model = tiny_model(vocab=6, seed=seed)
    prompt, y = [2, 4], [1, 5, 0]
    batched = completion_logprob(model, prompt, y).per_token_logprob
    oracle = one_token_at_a_time(model, prompt, y, y)
    assert batched == pytest.approx(oracle, abs=1e-10)
    forced = [3, 3, 3]
    batched_tf = completion_logprob(model, prompt, y, mode="teacher_forced", forced=forced)
    oracle_tf = one_token_at_a_time(model, prompt, y, forced)
    assert batched_tf.per_token_logprob == pytest.approx(oracle_tf, abs=1e-10)


@pytest.mark.parametrize("v,k", [(3, 2), (4, 3), (2, 3)])
def test_enumerated_completions_normalize(v, k):
    model = tiny_model(vocab=v, seed=v + k)
    total = 0.0
    for combo in itertools.product(range(v), repeat=k):
        total += math.exp(completion_logprob(model, [0], list(combo)).total_logprob)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_empty_completion_rejected():
    model = tiny_model()
    with pytest.raises(ValueError, match="at least one token"):
        completion_logprob(model, [0], [])


def test_length_overflow_rejected():
    model = tiny_model()  # max_ctx=10
    with pytest.raises(ValueError, match="max_ctx"):
        completion_logprob(model, [0] * 8, [1, 2, 3, 0])
    with pytest.raises(ValueError, match="max_ctx"):
        generate_negative(model, [0] * 8, [1, 2, 3], "free_running")


def test_teacher_forced_requires_long_enough_context():
    model = tiny_model()
    with pytest.raises(ValueError, match="forced"):
        completion_logprob(model, [0], [1, 2, 3], mode="teacher_forced")
    with pytest.raises(ValueError, match=">= 2"):
        completion_logprob(model, [0], [1, 2, 3], mode="teacher_forced", forced=[1])


def test_peaked_model_generates_constant_token():
    model = peaked_model(vocab=9, peak=7)
    for mode in ("teacher_forced", "free_running"):
        assert generate_negative(model, [0, 1], [2, 3, 4], mode) == [7, 7, 7]


def test_first_negative_token_mode_independent():
    for seed in range(5):
        model = tiny_model(vocab=7, seed=seed)
        tf = generate_negative(model, [1, 2], [3, 4, 5], "teacher_forced")
        fr = generate_negative(model, [1, 2], [3, 4, 5], "free_running")
        assert tf[0] == fr[0]


def test_negative_length_matches_target():
    model = tiny_model(vocab=7, seed=2)
    for k in (1, 2, 4):
        assert len(generate_negative(model, [0], list(range(1, k + 1)), "teacher_forced")) == k


def test_argmax_ties_break_low():
    model = uniform_model(vocab=6)  # all logits identical
    assert generate_negative(model, [2], [4, 5], "free_running") == [0, 0]


def test_greedy_answer_equals_free_running_negative():
    model = tiny_model(vocab=8, seed=6)
    prompt = [3, 1]
    assert greedy_answer(model, prompt, 3) == generate_negative(model, prompt, [0, 0, 0], "free_running")
    assert greedy_answer(model, prompt, 3) == greedy_answer(model, prompt, 3)


def test_teacher_forced_generation_matches_manual_decode():
    model = tiny_model(vocab=6, seed=11)
    prompt, target = [4, 2], [1, 5, 3]
    got = generate_negative(model, prompt, target, "teacher_forced")
    manual = []
    for k in range(len(target)):
        seq = prompt + target[:k]
        manual.append(int(np.argmax(forward_logits(model, seq).data[-1])))
    assert got == manual


def test_sequence_logprobs_differentiable_path_matches_scored():
    model = tiny_model(vocab=5, seed=8)
    lp = sequence_logprobs(model, [0, 1], [2, 3], [2, 3]).data
    scored = completion_logprob(model, [0, 1], [2, 3])
    assert lp.tolist() == pytest.approx(scored.per_token_logprob, abs=1e-15)
