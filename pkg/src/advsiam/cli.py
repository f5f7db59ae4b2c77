"""Command-line interface.

Subcommands: finetune, attack, eval-zeroshot, eval-targeted, sweep,
ablate-stopgrad, compare, score-cider. Exit code 0 only on a fully
successful run. The run-root directory comes from --run-root or the
ADVSIAM_RUN_ROOT environment variable (default: ./runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from . import runs as runs_mod
from .attacks import AttackConfig, ObjectiveContext, apgd, pgd
from .benchmark import make_benchmark
from .cider import CiderCorpus, cider_score
from .config import parse_config_file
from .data import ingest
from .encoder import load_checkpoint
from .errors import AdvSiamError
from .evaluation import eval_zero_shot
from .finetune import TrainConfig, hyperparameter_sweep
from .records import write_csv_table


def _add_common(parser):
    parser.add_argument("--run-root", default=None, help="run directory root")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )


def _cmd_finetune(args) -> int:
    record = runs_mod.run_experiment(
        args.config, run_root_dir=args.run_root, overrides=args.overrides
    )
    print(f"run {record.run_id}: {len(record.losses)} steps, "
          f"final loss {record.losses[-1]:.4f}" if record.losses else
          f"run {record.run_id}: no training steps")
    return 0


def _cmd_attack(args) -> int:
    encoder = load_checkpoint(args.checkpoint)
    config = parse_config_file(args.config, overrides=args.overrides)
    dataset = ingest(config.dataset_spec())
    attack_config = AttackConfig.from_dict(
        {**{"epsilon": 4 / 255, "steps": 100}, **config.attack}
    )
    ctx = ObjectiveContext(
        head=runs_mod._build_head(dataset), labels=dataset.labels
    )
    attack_fn = apgd if args.engine == "apgd" else pgd
    result = attack_fn(encoder, dataset.images, attack_config, ctx)
    print(
        f"attack done: best objective {result.objective_trace[-1]:.6f}, "
        f"success rate {float(result.success_mask.float().mean()):.3f}, "
        f"linf violation {result.linf_violation:.2e}"
    )
    if args.trace_csv:
        result.write_trace_csv(args.trace_csv)
    return 0


def _cmd_eval_zeroshot(args) -> int:
    encoder = load_checkpoint(args.checkpoint)
    _, eval_set, head = make_benchmark(seed=args.seed)
    report = eval_zero_shot(
        encoder,
        head,
        eval_set,
        eps_list=[e / 255.0 for e in args.eps],
        attack_kind=args.attack_kind,
        attack_steps=args.steps,
        attack_subset=args.subset,
        seed=args.seed,
    )
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_eval_targeted(args) -> int:
    encoders = {}
    for spec in args.encoder:
        name, path = spec.split("=", 1)
        encoders[name] = load_checkpoint(path)
    reports = runs_mod.experiment_table2_targeted(
        args.out_dir,
        encoders,
        per_target=args.per_target,
        epsilon=args.epsilon / 255.0,
        steps=args.steps,
        seed=args.seed,
    )
    for name, report in reports.items():
        print(
            f"{name}: success rate {report.mean_success_rate:.3f}, "
            f"cider {report.average_cider:.2f}"
        )
    return 0


def _cmd_sweep(args) -> int:
    train_set, _, head = make_benchmark(seed=args.seed)
    base = TrainConfig(seed=args.seed)
    grid = []
    for lr in args.lr:
        for wd in args.wd:
            for opt in args.optimizer:
                grid.append(
                    {"lr_peak": lr, "weight_decay": wd, "optimizer_kind": opt}
                )
    torch.manual_seed(args.seed)
    _, table = hyperparameter_sweep(
        grid, base, train_set, head=head, early_stop_steps=args.steps
    )
    out = os.path.join(runs_mod.run_root(args.run_root), "sweep.csv")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    write_csv_table(out, list(table[0].keys()), table)
    for row in table:
        print(row)
    print(f"sweep table written to {out}")
    return 0


def _cmd_ablate_stopgrad(args) -> int:
    results = runs_mod.experiment_fig4_stopgrad(
        args.out_dir, steps=args.steps, seed=args.seed
    )
    for name, record in results.items():
        terminal = record.losses[-1] if record.losses else float("nan")
        print(
            f"{name}: {len(record.losses)} steps, terminal loss {terminal:.4f}, "
            f"collapsed={record.collapsed}"
        )
    return 0


def _cmd_compare(args) -> int:
    rows = runs_mod.compare_runs(
        args.run_ids, run_root_dir=args.run_root, out_path=args.out
    )
    for row in rows:
        print(row)
    return 0


def _cmd_score_cider(args) -> int:
    with open(args.references) as fh:
        references = json.load(fh)
    with open(args.candidates) as fh:
        candidates = json.load(fh)
    corpus = CiderCorpus.build(references)
    score, per_image = cider_score(candidates, corpus, per_image=True)
    print(json.dumps({"corpus": score, "per_image": per_image}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advsiam")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("finetune", help="run a config-driven train/eval experiment")
    p.add_argument("config")
    _add_common(p)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("attack", help="attack a dataset with a saved encoder")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--engine", choices=["pgd", "apgd"], default="apgd")
    p.add_argument("--trace-csv", default=None)
    _add_common(p)
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("eval-zeroshot", help="robust zero-shot accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", type=float, nargs="+", default=[2, 4, 8],
                   help="epsilon values in 1/255 units")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--subset", type=int, default=500)
    p.add_argument("--attack-kind", default="apgd_dlr_targeted",
                   choices=["apgd_dlr_targeted", "apgd_ce"])
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(fn=_cmd_eval_zeroshot)

    p = sub.add_parser("eval-targeted", help="targeted-attack success table")
    p.add_argument("--encoder", action="append", required=True,
                   metavar="NAME=CHECKPOINT")
    p.add_argument("--out-dir", default="targeted-eval")
    p.add_argument("--per-target", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=4.0,
                   help="epsilon in 1/255 units")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(fn=_cmd_eval_targeted)

    p = sub.add_parser("sweep", help="lr / wd / optimizer grid sweep")
    p.add_argument("--lr", type=float, nargs="+", default=[1e-3, 1e-4, 1e-5])
    p.add_argument("--wd", type=float, nargs="+", default=[1e-3, 1e-4])
    p.add_argument("--optimizer", nargs="+",
                   default=["adaptive_moment_decoupled_wd", "plain_sgd"])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("ablate-stopgrad", help="stop-gradient collapse ablation")
    p.add_argument("--out-dir", default="stopgrad-ablation")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(fn=_cmd_ablate_stopgrad)

    p = sub.add_parser("compare", help="compare eval reports across runs")
    p.add_argument("run_ids", nargs="+")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("score-cider", help="score candidate captions (JSON files)")
    p.add_argument("--references", required=True,
                   help="JSON: image id -> list of reference captions")
    p.add_argument("--candidates", required=True,
                   help="JSON: image id -> candidate caption")
    p.set_defaults(fn=_cmd_score_cider)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except AdvSiamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
