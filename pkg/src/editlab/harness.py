"""Pretraining and experiment orchestration.

A run is a pure function of its RunConfig: synthesize (or load) requests,
dedup by subject, pretrain (or load a checkpoint), snapshot the pre-edit
model, apply the full edit sequence, evaluate after the entire sequence, and
write the report artifacts.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward, log_softmax, narrow, pick
from .editors import EditorConfig, sequential_edit
from .metrics import MetricsReport, edit_success, fluency, locality, portability
from .model import (
    LMConfig,
    TinyLM,
    forward_logits,
    load_checkpoint,
    save_checkpoint,
    snapshot,
)
from .optim import Adam
from .scoring import greedy_answer
from .world import (
    EditRequest,
    FactWorld,
    Vocab,
    bind_requests,
    dedup_by_subject,
    gen_fact_world,
    load_dataset,
    save_dataset,
)
from . import report as report_mod


@dataclass
class PretrainResult:
    epoch_losses: list[float]
    fact_accuracy: float
    epochs_run: int


def fact_accuracy(model: TinyLM, pairs) -> float:
    """Fraction of (prompt, answer) pairs reproduced exactly by greedy decode."""
    if not pairs:
        return 0.0
    hits = 0
    for prompt_ids, answer_ids in pairs:
        if greedy_answer(model, prompt_ids, len(answer_ids)) == list(answer_ids):
            hits += 1
    return hits / len(pairs)


def pretrain(
    model: TinyLM,
    corpus_ids: list[list[int]],
    epochs: int,
    lr: float,
    *,
    batch_size: int = 32,
    seed: int = 0,
    eval_pairs=None,
    target_accuracy: float | None = None,
    eval_every: int = 10,
) -> PretrainResult:
    """Next-token cross-entropy training over the corpus (in place).

    Sentences are batched by equal length, so no padding is needed. When
    `target_accuracy` is set, greedy fact accuracy over `eval_pairs` is
    checked every `eval_every` epochs and training stops once reached.
    """
    rng = np.random.default_rng(seed)
    by_len: dict[int, list[list[int]]] = {}
    for seq in corpus_ids:
        if len(seq) < 2:
            raise ValueError("corpus sentences must have at least two tokens")
        by_len.setdefault(len(seq), []).append(seq)

    params = list(model.params.items())
    adam = Adam(params, lr=lr)
    epoch_losses: list[float] = []
    epochs_run = 0

    for epoch in range(epochs):
        batches = []
        for length in sorted(by_len):
            group = by_len[length]
            order = rng.permutation(len(group))
            for start in range(0, len(group), batch_size):
                batches.append(np.array([group[i] for i in order[start : start + batch_size]]))
        batch_order = rng.permutation(len(batches))

        total_nll = 0.0
        total_positions = 0
        for bi in batch_order:
            ids = batches[bi]
            targets = ids[:, 1:]
            adam.zero_grad()
            with Tape():
                logits = forward_logits(model, ids)
                lsm = log_softmax(logits, axis=-1)
                # rows 0..T-2 predict tokens 1..T-1
                pred = narrow(lsm, 1, 0, ids.shape[1] - 1)
                loss = -pick(pred, targets).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"pretraining diverged (loss={value}) at epoch {epoch + 1}"
                )
            backward(loss)
            adam.step()
            total_nll += value * targets.size
            total_positions += targets.size
        epoch_losses.append(total_nll / total_positions)
        epochs_run = epoch + 1

        if (
            target_accuracy is not None
            and eval_pairs
            and (epoch + 1) % eval_every == 0
            and fact_accuracy(model, eval_pairs) >= target_accuracy
        ):
            break

    acc = fact_accuracy(model, eval_pairs) if eval_pairs else 0.0
    return PretrainResult(epoch_losses=epoch_losses, fact_accuracy=acc, epochs_run=epochs_run)


# -----------------------------------------------------------------------------
# Full experiment pipeline
# -----------------------------------------------------------------------------

# pinned pretraining baseline for the default toy world
PRETRAIN_DEFAULTS = {
    "epochs": 400,
    "lr": 1e-3,
    "batch_size": 32,
    "target_accuracy": 1.0,
    "eval_every": 10,
}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: LMConfig = field(default_factory=LMConfig)
    editor: EditorConfig = field(default_factory=EditorConfig)
    # data source: synthetic world by default, or a dataset + checkpoint pair
    dataset_path: str | None = None
    checkpoint_path: str | None = None
    n_subjects: int = 40
    n_relations: int = 2
    n_edits: int = 20
    pretrain_epochs: int = PRETRAIN_DEFAULTS["epochs"]
    pretrain_lr: float = PRETRAIN_DEFAULTS["lr"]
    pretrain_batch: int = PRETRAIN_DEFAULTS["batch_size"]
    pretrain_target_accuracy: float | None = PRETRAIN_DEFAULTS["target_accuracy"]
    fluency_prompts: int = 8
    fluency_gen_len: int = 20

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "model": self.model.to_dict(),
            "editor": self.editor.to_dict(),
            "dataset_path": self.dataset_path,
            "checkpoint_path": self.checkpoint_path,
            "n_subjects": self.n_subjects,
            "n_relations": self.n_relations,
            "n_edits": self.n_edits,
            "pretrain_epochs": self.pretrain_epochs,
            "pretrain_lr": self.pretrain_lr,
            "pretrain_batch": self.pretrain_batch,
            "pretrain_target_accuracy": self.pretrain_target_accuracy,
            "fluency_prompts": self.fluency_prompts,
            "fluency_gen_len": self.fluency_gen_len,
        }
        return d


def _gather_probes(world: FactWorld | None, requests: list[EditRequest]):
    """Locality and portability probe pools for the run."""
    portability_probes = [p for r in requests for p in r.portability]
    if world is not None:
        locality_probes = list(world.locality_pool)
    else:
        seen = set()
        locality_probes = []
        for r in requests:
            for p in r.locality:
                if p.prompt not in seen:
                    seen.add(p.prompt)
                    locality_probes.append(p)
    return locality_probes, portability_probes


def run_experiment(cfg: RunConfig) -> tuple[MetricsReport, dict]:
    """Full pipeline; returns the metrics report and the artifact manifest.

    Any stage failure writes a partial manifest naming the failed stage, then
    re-raises.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"config": cfg.to_dict(), "stages": [], "artifacts": {}}

    def stage(name):
        manifest["stages"].append(name)

    def fail(name, exc):
        manifest["failed_stage"] = name
        manifest["error"] = str(exc)
        _write_json(out / "manifest.json", manifest)

    world: FactWorld | None = None
    try:
        stage("data")
        if cfg.dataset_path is None:
            world, corpus, requests = gen_fact_world(
                cfg.seed, n_subjects=cfg.n_subjects, n_relations=cfg.n_relations
            )
            if len(world.vocab) > cfg.model.vocab_size:
                raise ValueError(
                    f"world vocabulary ({len(world.vocab)} words) exceeds model "
                    f"vocab_size {cfg.model.vocab_size}"
                )
            vocab = world.vocab
            _write_json(out / "world.json", world.to_dict())
        else:
            requests = load_dataset(cfg.dataset_path)
            corpus = []
            if cfg.checkpoint_path is None:
                raise ValueError("dataset runs need a pretrained checkpoint (vocab source)")
    except Exception as exc:
        fail("data", exc)
        raise

    try:
        stage("dedup")
        requests = dedup_by_subject(requests)
        if cfg.n_edits > len(requests):
            raise ValueError(
                f"requested {cfg.n_edits} edits but only {len(requests)} deduplicated requests"
            )
        requests = requests[: cfg.n_edits]
    except Exception as exc:
        fail("dedup", exc)
        raise

    try:
        if cfg.checkpoint_path is not None:
            stage("load_checkpoint")
            model, vocab_words = load_checkpoint(cfg.checkpoint_path)
            if vocab_words is None:
                raise ValueError("checkpoint carries no vocabulary")
            vocab = Vocab(vocab_words)
            bind_requests(requests, vocab, model.config.max_ctx)
            pretrain_info = {"loaded": cfg.checkpoint_path}
        else:
            stage("pretrain")
            model = TinyLM(
                LMConfig(**{**cfg.model.to_dict(), "seed": cfg.model.seed or cfg.seed})
            )
            corpus_ids = [vocab.encode(s) for s in corpus]
            result = pretrain(
                model,
                corpus_ids,
                cfg.pretrain_epochs,
                cfg.pretrain_lr,
                batch_size=cfg.pretrain_batch,
                seed=cfg.seed + 1,
                eval_pairs=world.fact_prompt_pairs(),
                target_accuracy=cfg.pretrain_target_accuracy,
            )
            pretrain_info = {
                "epochs_run": result.epochs_run,
                "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
                "fact_accuracy": result.fact_accuracy,
            }
            bind_requests(requests, vocab, model.config.max_ctx)
    except Exception as exc:
        fail("pretrain", exc)
        raise

    try:
        stage("snapshot")
        model_pre = snapshot(model)
        save_checkpoint(model_pre, out / "model_pre.npz", vocab.words)
        save_dataset(requests, out / "dataset.json")
    except Exception as exc:
        fail("snapshot", exc)
        raise

    try:
        stage("edit")
        trace_path = out / "traces.jsonl"
        with open(trace_path, "w", encoding="utf-8") as trace_file:

            def log_outcome(_i, outcome):
                trace_file.write(json.dumps(outcome.to_dict(), sort_keys=True) + "\n")

            model, outcomes = sequential_edit(model, requests, cfg.editor, on_outcome=log_outcome)
        save_checkpoint(model, out / "model_post.npz", vocab.words)
    except Exception as exc:
        fail("edit", exc)
        raise

    try:
        stage("metrics")
        locality_probes, portability_probes = _gather_probes(world, requests)
        es, es_exact, breakdown = edit_success(model, requests)
        report = MetricsReport(
            edit_success=es,
            edit_success_exact=es_exact,
            portability=portability(model, portability_probes) if portability_probes else None,
            locality=locality(model_pre, model, locality_probes) if locality_probes else None,
            fluency=fluency(
                model,
                _fluency_prompts(world, requests, cfg.fluency_prompts),
                cfg.fluency_gen_len,
            ),
            per_request=breakdown,
        )
    except Exception as exc:
        fail("metrics", exc)
        raise

    try:
        stage("report")
        artifacts = report_mod.write_report_files(
            out, report, outcomes, cfg.editor.method, cfg.to_dict(), pretrain_info
        )
        manifest["artifacts"] = artifacts
        _write_json(out / "manifest.json", manifest)
    except Exception as exc:
        fail("report", exc)
        raise

    return report, manifest


def _fluency_prompts(world: FactWorld | None, requests, count: int):
    if world is not None and world.locality_pool:
        pool = [p.prompt_ids for p in world.locality_pool]
    else:
        pool = [r.prompt_ids for r in requests]
    if not pool:
        raise ValueError("no prompts available for fluency evaluation")
    return pool[: max(1, count)]


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
