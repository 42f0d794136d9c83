"""Command-line entry points.

Subcommands: train, pretrain, eval, baseline, ablate, attribute,
gen-synthetic. Every run writes its delimited outputs (TSV), JSON
reports, and rendered figures into --out. Exit code 0 on success, 2 on
validation errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, harness, metrics, plotting, synthetic, templating
from .baselines import BaselineKind
from .corpus import CorpusError, TaskKind, load_corpus
from .harness import ConfigError, ModelBundle, TrainConfig, VARIANT_CHOICES


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg = TrainConfig.from_file(args.config)
    else:
        cfg = TrainConfig()
    if getattr(args, "variant", None):
        variant, head = VARIANT_CHOICES[args.variant]
        cfg.variant = variant.value
        cfg.head = head
    if getattr(args, "task", None):
        cfg.task = args.task
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    cfg.validate()
    return cfg


def _write_predictions(path: Path, corpus, preds, task: TaskKind):
    with open(path, "w", encoding="utf-8") as f:
        f.write("process_id\tentity\tstep\tgold\tpred\n")
        for p, grid in zip(corpus, preds):
            for e, row in zip(p.entities, grid):
                for t, pred in enumerate(row, start=1):
                    f.write(f"{p.id}\t{e.name}\t{t}\t{e.labels[t - 1]}\t{pred}\n")


def _write_eval_outputs(out_dir: Path, name: str, corpus, result: harness.EvalResult):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(result.report_dict(), indent=2), encoding="utf-8"
    )
    if result.task is TaskKind.RECIPES:
        table = metrics.format_recipes_table([(name, result.report)])
        plotting.save_recipes_metrics(result.report, out_dir / "metrics.png", title=name)
        if result.slices is not None:
            plotting.save_composition_hist(result.slices, out_dir / "composition_hist.png")
    else:
        table = metrics.format_propara_table([(name, result.report)])
        plotting.save_propara_metrics(result.report, out_dir / "metrics.png", title=name)
    (out_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    _write_predictions(out_dir / "predictions.tsv", corpus, result.preds, result.task)
    print(table)


def _write_history_outputs(out_dir: Path, history: list[dict]):
    with open(out_dir / "epochs.tsv", "w", encoding="utf-8") as f:
        keys = list(history[0].keys()) if history else ["epoch"]
        f.write("\t".join(keys) + "\n")
        for row in history:
            f.write("\t".join(str(row.get(k, "")) for k in keys) + "\n")
    plotting.save_loss_curves(history, out_dir / "loss_curve.png")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train = load_corpus(args.train, cfg.task)
    dev = load_corpus(args.dev, cfg.task) if args.dev else None
    out = Path(args.out)
    result = harness.finetune(cfg, train, dev, init=args.init, out_dir=out)
    _write_history_outputs(out, result.history)
    if args.dump_encodings:
        _dump_encodings(result.bundle, train, args.dump_encodings)
    final = result.history[-1] if result.history else {}
    print(f"trained {cfg.variant}/{cfg.head} for {len(result.history)} epochs; "
          f"best checkpoint at {result.checkpoint_path}")
    if final:
        print(f"last epoch: train_loss={final['train_loss']:.4f} dev_metric={final['dev_metric']:.4f}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.train, cfg.task)
    out = Path(args.out)
    result = harness.pretrain_lm(cfg, corpus, out_dir=out)
    _write_history_outputs(out, result.history)
    print(f"pretrained for {len(result.history)} epochs; "
          f"final LM loss {result.history[-1]['train_loss']:.4f}; checkpoint at {result.checkpoint_path}")
    return 0


def _dump_encodings(bundle: ModelBundle, corpus, k: int):
    shown = 0
    for p in corpus:
        encs = templating.instances_for_task(p, bundle.variant, bundle.vocab, bundle.max_len)
        for enc in encs:
            print(templating.render(enc, bundle.vocab))
            shown += 1
            if shown >= k:
                return


def cmd_eval(args) -> int:
    bundle = ModelBundle.load(args.checkpoint)
    if bundle.task is None:
        raise ConfigError("checkpoint has no task head; fine-tune before eval")
    corpus = load_corpus(args.data, bundle.task)
    result = harness.evaluate(bundle, corpus)
    out = Path(args.out)
    _write_eval_outputs(out, args.name or bundle.variant.value, corpus, result)
    if args.dump_encodings:
        _dump_encodings(bundle, corpus, args.dump_encodings)
    if args.dump_lattices:
        _dump_lattices(bundle, corpus, out / "lattices.json")
    return 0


def _dump_lattices(bundle: ModelBundle, corpus, path: Path):
    from . import crf, transformer
    from .heads import anchor_scores

    if bundle.task is not TaskKind.PROPARA:
        raise ConfigError("--dump-lattices applies to the propara task")
    records = []
    cases = harness.build_entity_cases(corpus, bundle.variant, bundle.vocab, bundle.max_len) \
        if bundle.variant is not templating.TemplateVariant.POST_COND else None
    if cases is None:
        raise ConfigError("--dump-lattices requires an entity-conditioned variant")
    for case in cases:
        rows = []
        for enc in case.encodings:
            trace = transformer.forward(bundle.tensors, bundle.model_config, enc.token_ids, cache=False)
            rows.append((enc, trace.X))
        slots = {}
        for enc, X in rows:
            for pos, _, step in enc.anchors:
                slots[step] = anchor_scores(X, [pos], bundle.tensors["head.w_task"])[0]
        scores = [slots[t].tolist() for t in sorted(slots)]
        import numpy as np

        lattice = crf.TagLattice(
            potentials=crf.expand_emissions(np.asarray(scores)),
            transitions=bundle.tensors["crf.transitions"].astype(float),
        )
        tags, score = crf.viterbi(lattice)
        records.append(
            {
                "process": corpus[case.process_index].id,
                "entity": corpus[case.process_index].entities[case.entity_index].name,
                "surface_scores": scores,
                "decoded": tags,
                "score": score,
            }
        )
    path.write_text(json.dumps(records, indent=2), encoding="utf-8")


def cmd_baseline(args) -> int:
    corpus = load_corpus(args.data, TaskKind.RECIPES)
    train = load_corpus(args.train, TaskKind.RECIPES) if args.train else None
    kind = BaselineKind(args.kind)
    result = harness.evaluate_baseline(kind, corpus, train)
    _write_eval_outputs(Path(args.out), kind.value, corpus, result)
    return 0


def cmd_ablate(args) -> int:
    task = TaskKind(args.task) if args.task else TaskKind.RECIPES
    corpus = load_corpus(args.data, task)
    spec = analysis.AblationSpec(
        drop_verbs=args.drop_verbs, drop_other_entities=args.drop_other_entities
    )
    transformed = analysis.ablate(corpus, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .corpus import save_corpus

    path = out / "ablated.jsonl"
    save_corpus(transformed, path)
    print(f"wrote {len(transformed)} ablated processes to {path}")
    return 0


def cmd_attribute(args) -> int:
    bundle = ModelBundle.load(args.checkpoint)
    if bundle.head_kind != harness.HEAD_CONDITIONED:
        raise ConfigError("attribution requires an entity-conditioned checkpoint")
    corpus = load_corpus(args.data, bundle.task)
    target = next((p for p in corpus if p.id == args.process_id), None)
    if target is None:
        raise ConfigError(f"process {args.process_id!r} not found in {args.data}")
    if not 0 <= args.entity < len(target.entities):
        raise ConfigError(f"process {args.process_id!r} has no entity index {args.entity}")
    if not 1 <= args.step <= target.n_steps:
        raise ConfigError(f"step {args.step} out of range (T={target.n_steps})")
    variant = bundle.variant
    if variant.document_level:
        enc = templating.encode_entity_conditioned(
            target, args.entity, templating.ALL, variant, bundle.vocab, bundle.max_len
        )
        anchor_index = next(
            i for i, (_, _, step) in enumerate(enc.anchors) if step == args.step
        )
    else:
        enc = templating.encode_entity_conditioned(
            target, args.entity, args.step, variant, bundle.vocab, bundle.max_len
        )
        anchor_index = 0
    entity = target.entities[args.entity]
    gold = entity.labels[args.step - 1]
    target_class = (
        int(gold) if bundle.task is TaskKind.RECIPES else ["O", "C", "E", "M", "D"].index(gold)
    )
    tokens = bundle.vocab.decode(enc.token_ids)
    attribution = analysis.attribute(
        bundle.tensors, bundle.model_config, bundle.tensors["head.w_task"],
        enc, anchor_index, target_class, norm=args.norm, tokens=tokens,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.save_attribution(attribution, out / "attribution.json")
    with open(out / "attribution.tsv", "w", encoding="utf-8") as f:
        f.write("position\ttoken\tscore\n")
        for i, (tok, s) in enumerate(zip(tokens, attribution.scores)):
            f.write(f"{i}\t{tok}\t{s:.8g}\n")
    plotting.save_attribution_plot(
        attribution, out / "attribution.png",
        title=f"{entity.name} @ step {args.step} (gold {gold})",
    )
    print(f"{'rank':<5}{'pos':<5}{'token':<16}{'score':>12}")
    for rank, (i, s) in enumerate(attribution.top_k(args.top_k), start=1):
        print(f"{rank:<5}{i:<5}{tokens[i]:<16}{s:>12.6f}")
    return 0


def cmd_gen_synthetic(args) -> int:
    paths = synthetic.generate(
        args.kind, args.out, seed=args.seed if args.seed is not None else 0,
        n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test,
    )
    for split, path in paths.items():
        print(f"{split}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enttrack",
        description="Entity state tracking over procedural text: training, evaluation, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_variant=True):
        p.add_argument("--config", help="JSON file with TrainConfig fields")
        if with_variant:
            p.add_argument("--variant", choices=sorted(VARIANT_CHOICES))
        p.add_argument("--task", choices=["recipes", "propara"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="fine-tune a model for a task")
    common(p)
    p.add_argument("--train", required=True, help="training corpus (JSONL)")
    p.add_argument("--dev", help="development corpus (JSONL)")
    p.add_argument("--init", help="initial checkpoint (e.g. from pretrain)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dump-encodings", type=int, default=0, metavar="K",
                   help="print the first K rendered encodings")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("pretrain", help="next-token pretraining on unlabeled text")
    common(p, with_variant=False)
    p.add_argument("--train", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--name", help="row label for the report table")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-encodings", type=int, default=0, metavar="K")
    p.add_argument("--dump-lattices", action="store_true",
                   help="dump tag lattices and decoded paths as JSON (propara)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("baseline", help="run a rule-based baseline")
    p.add_argument("--kind", required=True, choices=[k.value for k in BaselineKind])
    p.add_argument("--data", required=True)
    p.add_argument("--train", help="training corpus for the majority label")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("ablate", help="write an input-ablated copy of a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["recipes", "propara"])
    p.add_argument("--drop-verbs", action="store_true")
    p.add_argument("--drop-other-entities", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("attribute", help="gradient attribution for one prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--process-id", required=True)
    p.add_argument("--entity", type=int, default=0, help="entity index")
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--norm", default=analysis.GRAD_NORM,
                   choices=[analysis.GRAD_NORM, analysis.GRAD_X_INPUT])
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attribute)

    p = sub.add_parser("gen-synthetic", help="emit deterministic synthetic corpora")
    p.add_argument("--kind", required=True, choices=list(synthetic.KINDS))
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int, default=96)
    p.add_argument("--n-dev", type=int, default=16)
    p.add_argument("--n-test", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_synthetic)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CorpusError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
