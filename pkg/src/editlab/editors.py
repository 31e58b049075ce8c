"""Preference-loss knowledge editors and fine-tuning baselines.

One edit = one request (prompt c, new target y_w) applied to a mutable model
against a frozen reference snapshot taken at entry. The flow runs n cycles:
regenerate the model's current answer y_l greedily, stop if it already equals
y_w, otherwise take s optimizer steps on the configured loss. Two independent
switches select the editing behavior:

* gen_mode   — how y_l is produced each cycle: "teacher_forced" (token k
  predicted from c + y_w[:k-1]) or "free_running" (from its own prefix).
* scoring_mode — which context the loss scores completions under: "c_w"
  (both y_w and y_l judged against the y_w prefix; equal tokens cancel
  exactly) or "c_l" (each completion under its own prefix, the vanilla
  preference loss).

Defaults: method "kdpo" is (teacher_forced, c_w); "dpo" is (free_running,
c_l); "ft_m"/"ft_l" are cross-entropy baselines restricted to the same
parameter subset.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward, log_sigmoid, pick
from .model import ParamSelector, TinyLM, default_editable, restrict_trainable, snapshot, param_l2_distance
from .optim import Adam
from .scoring import generate_negative, row_logprobs, sequence_logprobs

PREFERENCE_METHODS = ("kdpo", "dpo")
FT_METHODS = ("ft_m", "ft_l")

_METHOD_MODES = {  # method -> (gen_mode, scoring_mode)
    "kdpo": ("teacher_forced", "c_w"),
    "dpo": ("free_running", "c_l"),
}


class EditAbortError(RuntimeError):
    """An edit hit a non-finite loss; carries the partial trace for diagnosis."""

    def __init__(self, message: str, trace: dict | None = None):
        super().__init__(message)
        self.trace = trace or {}


@dataclass
class EditorConfig:
    method: str = "kdpo"
    beta: float = 0.1
    lr: float = 1e-4
    n_cycles: int = 10
    s_steps: int = 8
    editable: ParamSelector | None = None  # None -> penultimate layer's FFN
    gen_mode: str | None = None
    scoring_mode: str | None = None

    def __post_init__(self):
        if self.method not in PREFERENCE_METHODS + FT_METHODS:
            raise ValueError(f"unknown editing method {self.method!r}")
        if self.n_cycles < 1 or self.s_steps < 1:
            raise ValueError("n_cycles and s_steps must be >= 1")
        if self.method in PREFERENCE_METHODS and self.beta <= 0:
            raise ValueError(f"beta must be positive for {self.method}, got {self.beta}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        defaults = _METHOD_MODES.get(self.method, ("free_running", "c_w"))
        if self.gen_mode is None:
            self.gen_mode = defaults[0]
        if self.scoring_mode is None:
            self.scoring_mode = defaults[1]
        if self.gen_mode not in ("teacher_forced", "free_running"):
            raise ValueError(f"unknown gen_mode {self.gen_mode!r}")
        if self.scoring_mode not in ("c_w", "c_l"):
            raise ValueError(f"unknown scoring_mode {self.scoring_mode!r}")

    def resolve_editable(self, model: TinyLM) -> ParamSelector:
        return self.editable if self.editable is not None else default_editable(model.config)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "beta": self.beta,
            "lr": self.lr,
            "n_cycles": self.n_cycles,
            "s_steps": self.s_steps,
            "editable": self.editable.to_dict() if self.editable else None,
            "gen_mode": self.gen_mode,
            "scoring_mode": self.scoring_mode,
        }


@dataclass
class CycleTrace:
    negative: list[int]
    losses: list[float]
    cancelled_positions: int  # positions where the negative already equals the target


@dataclass
class EditOutcome:
    subject: str
    converged: bool
    cycles_used: int
    total_steps: int
    cycles: list[CycleTrace] = field(default_factory=list)
    param_l2_drift: float = 0.0

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "converged": self.converged,
            "cycles_used": self.cycles_used,
            "total_steps": self.total_steps,
            "param_l2_drift": self.param_l2_drift,
            "cycles": [
                {
                    "negative": c.negative,
                    "losses": c.losses,
                    "cancelled_positions": c.cancelled_positions,
                }
                for c in self.cycles
            ],
        }


# -----------------------------------------------------------------------------
# Losses
# -----------------------------------------------------------------------------


def _check_preference_args(y_w, y_l, beta):
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if len(y_w) < 1 or len(y_l) < 1:
        raise ValueError("completions must be non-empty")


def kdpo_loss(
    model: TinyLM,
    ref_model: TinyLM,
    prompt: Sequence[int],
    y_w: Sequence[int],
    y_l: Sequence[int],
    beta: float,
) -> Tensor:
    """-log sigmoid(beta * (inner(model) - inner(ref))), both completions scored
    under the y_w prefix.

    inner(m) = sum_k [log p_m(y_w[k] | c, y_w[:k]) - log p_m(y_l[k] | c, y_w[:k])].
    Both picks share one forward pass, so positions with y_l[k] == y_w[k]
    contribute exactly zero to the value and the gradient.
    """
    _check_preference_args(y_w, y_l, beta)
    if len(y_l) != len(y_w):
        raise ValueError(f"completion lengths differ: {len(y_w)} vs {len(y_l)}")
    idx_w = np.asarray(list(y_w), dtype=np.int64)
    idx_l = np.asarray(list(y_l), dtype=np.int64)

    def inner(m: TinyLM) -> Tensor:
        rows = row_logprobs(m, prompt, y_w, len(y_w))
        return (pick(rows, idx_w) - pick(rows, idx_l)).sum()

    z = (inner(model) - inner(ref_model)) * beta
    return -log_sigmoid(z)


def dpo_loss(
    model: TinyLM,
    ref_model: TinyLM,
    prompt: Sequence[int],
    y_w: Sequence[int],
    y_l: Sequence[int],
    beta: float,
) -> Tensor:
    """Vanilla preference loss: each completion scored under its own prefix.

    -log sigmoid(beta * [(log p(y_w) - log p_ref(y_w)) - (log p(y_l) - log p_ref(y_l))]).
    """
    _check_preference_args(y_w, y_l, beta)

    def total(m: TinyLM, y) -> Tensor:
        return sequence_logprobs(m, prompt, y, y).sum()

    z = (
        (total(model, y_w) - total(ref_model, y_w))
        - (total(model, y_l) - total(ref_model, y_l))
    ) * beta
    return -log_sigmoid(z)


def ft_loss(model: TinyLM, prompt: Sequence[int], y_w: Sequence[int], masked: bool) -> Tensor:
    """Teacher-forced cross-entropy on the target; `masked=False` adds the
    prompt's own next-token terms (prompt positions enter the loss)."""
    if len(y_w) < 1:
        raise ValueError("target must be non-empty")
    target_nll = -sequence_logprobs(model, prompt, y_w, y_w).sum()
    if masked:
        return target_nll
    prompt = [int(t) for t in prompt]
    if len(prompt) < 2:
        return target_nll
    # next-token terms inside the prompt: predict prompt[1:] from prompt[:1],...
    prompt_nll = -sequence_logprobs(model, prompt[:1], prompt[1:], prompt[1:]).sum()
    return target_nll + prompt_nll


# -----------------------------------------------------------------------------
# Edit flows
# -----------------------------------------------------------------------------


def _run_edit_loop(
    model: TinyLM,
    subject: str,
    y_w: list[int],
    cfg: EditorConfig,
    make_loss: Callable[[list[int]], Tensor],
    make_negative: Callable[[], list[int]],
    on_step: Callable | None,
) -> EditOutcome:
    pre = snapshot(model)
    selector = cfg.resolve_editable(model)
    selected = selector.resolve(model)
    outcome = EditOutcome(subject=subject, converged=False, cycles_used=0, total_steps=0)

    with restrict_trainable(model, [n for n, _ in selected]):
        adam = Adam(selected, lr=cfg.lr)
        for _ in range(cfg.n_cycles):
            y_l = make_negative()
            cancelled = sum(1 for a, b in zip(y_l, y_w) if a == b)
            outcome.cycles_used += 1
            if y_l == y_w:
                outcome.cycles.append(CycleTrace(y_l, [], cancelled))
                outcome.converged = True
                break
            losses = []
            for _ in range(cfg.s_steps):
                adam.zero_grad()
                with Tape():
                    loss = make_loss(y_l)
                value = loss.item()
                if not math.isfinite(value):
                    raise EditAbortError(
                        f"non-finite loss ({value}) editing subject {subject!r} "
                        f"at cycle {outcome.cycles_used}, step {len(losses) + 1}",
                        trace=outcome.to_dict(),
                    )
                backward(loss)
                adam.step()
                outcome.total_steps += 1
                losses.append(value)
                if on_step is not None:
                    on_step(model, y_l, value)
            outcome.cycles.append(CycleTrace(y_l, losses, cancelled))

    outcome.param_l2_drift = param_l2_distance(model, pre)
    return outcome


def single_edit(
    model: TinyLM,
    request,
    cfg: EditorConfig,
    on_step: Callable | None = None,
) -> EditOutcome:
    """Preference-loss edit of one request (methods "kdpo" / "dpo").

    Takes a reference snapshot at entry, then cycles: regenerate the negative
    with cfg.gen_mode, stop when it equals the target, otherwise run s
    optimizer steps on the scoring_mode's loss over cfg.editable parameters.
    Adam state persists across cycles within the edit.
    """
    if cfg.method not in PREFERENCE_METHODS:
        raise ValueError(f"single_edit requires a preference method, got {cfg.method!r}")
    prompt, y_w = _request_ids(request, model)
    ref = snapshot(model)

    def loss_fn(y_l):
        if cfg.scoring_mode == "c_w":
            return kdpo_loss(model, ref, prompt, y_w, y_l, cfg.beta)
        return dpo_loss(model, ref, prompt, y_w, y_l, cfg.beta)

    def negative():
        return generate_negative(model, prompt, y_w, cfg.gen_mode)

    return _run_edit_loop(model, request.subject, y_w, cfg, loss_fn, negative, on_step)


def ft_edit(
    model: TinyLM,
    request,
    cfg: EditorConfig,
    on_step: Callable | None = None,
) -> EditOutcome:
    """Cross-entropy fine-tuning baseline on the same cycle/step skeleton.

    "ft_m" masks the prompt from the loss; "ft_l" keeps the prompt's
    next-token terms in it. Early stop is checked once per s steps via a
    free-running greedy match against the target.
    """
    if cfg.method not in FT_METHODS:
        raise ValueError(f"ft_edit requires method 'ft_m' or 'ft_l', got {cfg.method!r}")
    prompt, y_w = _request_ids(request, model)
    masked = cfg.method == "ft_m"

    def loss_fn(_y_l):
        return ft_loss(model, prompt, y_w, masked=masked)

    def negative():
        return generate_negative(model, prompt, y_w, "free_running")

    return _run_edit_loop(model, request.subject, y_w, cfg, loss_fn, negative, on_step)


def apply_edit(model: TinyLM, request, cfg: EditorConfig, on_step=None) -> EditOutcome:
    if cfg.method in PREFERENCE_METHODS:
        return single_edit(model, request, cfg, on_step)
    return ft_edit(model, request, cfg, on_step)


def sequential_edit(
    model: TinyLM, requests: Sequence, cfg: EditorConfig, on_outcome: Callable | None = None
) -> tuple[TinyLM, list[EditOutcome]]:
    """Apply edits in order, each against a fresh reference snapshot.

    No evaluation or rollback between edits; per-edit failures propagate with
    the failing index attached.
    """
    outcomes: list[EditOutcome] = []
    for i, request in enumerate(requests):
        try:
            outcome = apply_edit(model, request, cfg)
        except Exception as exc:
            raise RuntimeError(f"edit {i} (subject {request.subject!r}) failed: {exc}") from exc
        outcomes.append(outcome)
        if on_outcome is not None:
            on_outcome(i, outcome)
    return model, outcomes


def _request_ids(request, model: TinyLM) -> tuple[list[int], list[int]]:
    prompt = getattr(request, "prompt_ids", None)
    target = getattr(request, "target_ids", None)
    if prompt is None or target is None:
        raise ValueError(
            f"request for subject {request.subject!r} is not tokenized; bind it to a vocabulary first"
        )
    prompt, target = list(prompt), list(target)
    if not target:
        raise ValueError("target must tokenize to at least one token")
    if len(prompt) + len(target) > model.config.max_ctx:
        raise ValueError(
            f"prompt+target length {len(prompt) + len(target)} exceeds max_ctx "
            f"{model.config.max_ctx}"
        )
    return prompt, target
