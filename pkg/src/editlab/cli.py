"""Command-line surface: synth / pretrain / edit / eval / run."""

import argparse
import json
from pathlib import Path

from .editors import EditorConfig, sequential_edit
from .harness import RunConfig, pretrain, run_experiment
from .metrics import MetricsReport, edit_success, fluency, locality, portability
from .model import (
    LMConfig,
    ParamSelector,
    TinyLM,
    load_checkpoint,
    save_checkpoint,
)
from .world import Vocab, bind_requests, dedup_by_subject, gen_fact_world, load_dataset, save_dataset
from . import report as report_mod


def _add_model_flags(p):
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--max-ctx", type=int, default=64)


def _model_config(args, seed) -> LMConfig:
    return LMConfig(
        vocab_size=args.vocab_size,
        d_model=args.d_model,
        n_layers=args.layers,
        n_heads=args.heads,
        d_ff=args.d_ff,
        max_ctx=args.max_ctx,
        seed=seed,
    )


def _add_editor_flags(p):
    p.add_argument("--method", choices=["kdpo", "dpo", "ft_m", "ft_l"], default="kdpo")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--cycles", type=int, default=10, help="outer regenerate-negative cycles (n)")
    p.add_argument("--steps", type=int, default=8, help="optimizer steps per cycle (s)")
    p.add_argument("--gen-mode", choices=["teacher_forced", "free_running"], default=None)
    p.add_argument("--scoring-mode", choices=["c_w", "c_l"], default=None)
    p.add_argument("--edit-layer", type=int, default=None, help="layer whose FFN is editable (default: penultimate)")


def _editor_config(args) -> EditorConfig:
    editable = ParamSelector.ffn_of_layer(args.edit_layer) if args.edit_layer is not None else None
    return EditorConfig(
        method=args.method,
        beta=args.beta,
        lr=args.lr,
        n_cycles=args.cycles,
        s_steps=args.steps,
        editable=editable,
        gen_mode=args.gen_mode,
        scoring_mode=args.scoring_mode,
    )


def cmd_synth(args):
    world, corpus, requests = gen_fact_world(
        args.seed, n_subjects=args.subjects, n_relations=args.relations
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "world.json", "w", encoding="utf-8") as f:
        json.dump(world.to_dict(), f, indent=2, sort_keys=True)
    with open(out / "corpus.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(corpus) + "\n")
    save_dataset(requests, out / "dataset.json")
    print(f"world: {len(world.subjects)} subjects, {len(world.vocab)} words, "
          f"{len(corpus)} corpus sentences, {len(requests)} edit requests -> {out}")


def cmd_pretrain(args):
    world_dir = Path(args.world)
    with open(world_dir / "world.json", "r", encoding="utf-8") as f:
        world_info = json.load(f)
    vocab = Vocab(world_info["vocab"])
    corpus = (world_dir / "corpus.txt").read_text(encoding="utf-8").splitlines()
    corpus_ids = [vocab.encode(line) for line in corpus if line.strip()]

    if args.vocab_size < len(vocab):
        raise SystemExit(f"--vocab-size {args.vocab_size} smaller than world vocabulary {len(vocab)}")
    model = TinyLM(_model_config(args, args.seed))

    hop = world_info["hop"]
    eval_pairs = [
        (vocab.encode(f"{s} {r}"), vocab.encode(f"{o} {hop[o]}"))
        for s, r, o in world_info["base_facts"]
    ]
    result = pretrain(
        model,
        corpus_ids,
        args.epochs,
        args.lr,
        batch_size=args.batch_size,
        seed=args.seed + 1,
        eval_pairs=eval_pairs,
        target_accuracy=args.target_accuracy,
    )
    save_checkpoint(model, args.out, vocab.words)
    print(f"pretrained {result.epochs_run} epochs, final loss "
          f"{result.epoch_losses[-1]:.4f}, fact accuracy {result.fact_accuracy:.3f} -> {args.out}")


def cmd_edit(args):
    model, vocab_words = load_checkpoint(args.checkpoint)
    if vocab_words is None:
        raise SystemExit("checkpoint carries no vocabulary; cannot tokenize the dataset")
    vocab = Vocab(vocab_words)
    requests = dedup_by_subject(load_dataset(args.dataset))
    if args.edits is not None:
        requests = requests[: args.edits]
    bind_requests(requests, vocab, model.config.max_ctx)

    cfg = _editor_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "traces.jsonl", "w", encoding="utf-8") as trace_file:
        def log_outcome(_i, outcome):
            trace_file.write(json.dumps(outcome.to_dict(), sort_keys=True) + "\n")

        model, outcomes = sequential_edit(model, requests, cfg, on_outcome=log_outcome)
    save_checkpoint(model, out / "model_post.npz", vocab.words)
    converged = sum(1 for o in outcomes if o.converged)
    print(f"applied {len(outcomes)} edits ({converged} converged) -> {out}")


def cmd_eval(args):
    model_pre, vocab_words = load_checkpoint(args.pre)
    model_post, _ = load_checkpoint(args.post)
    if vocab_words is None:
        raise SystemExit("pre checkpoint carries no vocabulary")
    vocab = Vocab(vocab_words)
    requests = dedup_by_subject(load_dataset(args.dataset))
    if args.edits is not None:
        requests = requests[: args.edits]
    bind_requests(requests, vocab, model_pre.config.max_ctx)

    loc_probes = []
    seen = set()
    for r in requests:
        for p in r.locality:
            if p.prompt not in seen:
                seen.add(p.prompt)
                loc_probes.append(p)
    port_probes = [p for r in requests for p in r.portability]

    es, es_exact, breakdown = edit_success(model_post, requests)
    report = MetricsReport(
        edit_success=es,
        edit_success_exact=es_exact,
        portability=portability(model_post, port_probes) if port_probes else None,
        locality=locality(model_pre, model_post, loc_probes) if loc_probes else None,
        fluency=fluency(model_post, [r.prompt_ids for r in requests][: args.fluency_prompts], args.gen_len),
        per_request=breakdown,
    )
    artifacts = report_mod.write_report_files(
        args.out_dir, report, [], args.method_label, {"eval": True}, {"loaded": args.pre}
    )
    print(json.dumps(report.to_dict()["per_request"] and {
        "edit_success": report.edit_success,
        "edit_success_exact": report.edit_success_exact,
        "portability": report.portability,
        "locality": report.locality,
        "fluency": report.fluency,
    } or report.to_dict(), indent=2))
    print(f"report -> {Path(args.out_dir) / artifacts['report_json']}")


def cmd_run(args):
    cfg = RunConfig(
        seed=args.seed,
        out_dir=args.out_dir,
        model=_model_config(args, args.seed),
        editor=_editor_config(args),
        dataset_path=args.dataset,
        checkpoint_path=args.checkpoint,
        n_subjects=args.subjects,
        n_relations=args.relations,
        n_edits=args.edits,
        pretrain_epochs=args.epochs,
        pretrain_lr=args.pretrain_lr,
        pretrain_batch=args.batch_size,
        pretrain_target_accuracy=args.target_accuracy,
        fluency_gen_len=args.gen_len,
    )
    report, manifest = run_experiment(cfg)
    print(json.dumps({
        "edit_success": report.edit_success,
        "edit_success_exact": report.edit_success_exact,
        "portability": report.portability,
        "locality": report.locality,
        "fluency": report.fluency,
    }, indent=2))
    print(f"artifacts -> {args.out_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="editlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic fact world + dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--relations", type=int, default=2)
    p.add_argument("--out", default="world")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="train a fresh model on a synthesized corpus")
    p.add_argument("--world", required=True, help="directory produced by `synth`")
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--target-accuracy", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.npz")
    _add_model_flags(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("edit", help="apply sequential edits to a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--edits", "-n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="edited")
    _add_editor_flags(p)
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("eval", help="evaluate pre/post checkpoints on a dataset's probes")
    p.add_argument("--pre", required=True)
    p.add_argument("--post", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--edits", "-n", type=int, default=None)
    p.add_argument("--gen-len", type=int, default=20)
    p.add_argument("--fluency-prompts", type=int, default=8)
    p.add_argument("--method-label", default="edited")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="evaluation")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", help="full pipeline: synth/load -> pretrain -> edit -> eval -> report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs/default")
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--relations", type=int, default=2)
    p.add_argument("--edits", type=int, default=20)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--pretrain-lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--target-accuracy", type=float, default=1.0)
    p.add_argument("--gen-len", type=int, default=20)
    _add_model_flags(p)
    _add_editor_flags(p)
    p.set_defaults(fn=cmd_run)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
