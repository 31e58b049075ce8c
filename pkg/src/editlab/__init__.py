"""Desk-scale knowledge-editing lab.

A small trainable decoder-only transformer (double precision, tape-based
reverse-mode autodiff), preference-loss editors with teacher-forced negative
generation, cross-entropy fine-tuning baselines, and the standard editing
metric suite (edit success, portability, locality, fluency), wrapped in a
synthetic fact-world harness and CLI.
"""

from .autodiff import Tape, Tensor, backward
from .editors import (
    EditAbortError,
    EditorConfig,
    EditOutcome,
    dpo_loss,
    ft_edit,
    ft_loss,
    kdpo_loss,
    sequential_edit,
    single_edit,
)
from .harness import PretrainResult, RunConfig, fact_accuracy, pretrain, run_experiment
from .metrics import (
    MetricsReport,
    ProbeSet,
    edit_success,
    fluency,
    locality,
    ngram_entropy,
    portability,
    token_match_score,
)
from .model import (
    LMConfig,
    ParamSelector,
    TinyLM,
    default_editable,
    forward_logits,
    load_checkpoint,
    param_l2_distance,
    save_checkpoint,
    select_params,
    snapshot,
)
from .optim import Adam
from .scoring import (
    ScoredCompletion,
    completion_logprob,
    generate_negative,
    greedy_answer,
)
from .world import (
    EditRequest,
    FactWorld,
    Probe,
    Vocab,
    bind_requests,
    dedup_by_subject,
    gen_fact_world,
    load_dataset,
    save_dataset,
)

__version__ = "0.1.0"
