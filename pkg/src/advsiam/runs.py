"""Experiment orchestration: run directories, packaged experiments,
and run comparison tables.

Run directory layout: <run_root>/<run_id>/{config.ini, record.json,
losses.csv, checkpoints/, reports/}. The record is written last and
atomically, so a killed run leaves either no record or a complete one.
"""

from __future__ import annotations

import json
import os
import time

import torch

from .attacks import AttackConfig
from .benchmark import (
    ablation_config,
    finetune_robust,
    make_benchmark,
    pretrain_baseline,
)
from .captions import build_caption_bank
from .config import RunConfig, parse_config_file
from .data import ingest
from .encoder import TextHead, load_checkpoint, save_checkpoint
from .errors import CollapseError, ConfigError
from .evaluation import eval_zero_shot, targeted_attack_eval
from .finetune import finetune
from .records import (
    RunRecord,
    atomic_write_text,
    run_id_for,
    write_csv_table,
)

RUN_ROOT_ENV = "ADVSIAM_RUN_ROOT"


def run_root(explicit=None) -> str:
    return explicit or os.environ.get(RUN_ROOT_ENV, "runs")


def _run_dir(record_id: str, root) -> str:
    path = os.path.join(run_root(root), record_id)
    os.makedirs(os.path.join(path, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(path, "reports"), exist_ok=True)
    return path


def _build_head(dataset) -> TextHead:
    captions, _, _ = build_caption_bank(dataset.class_names)
    return TextHead.build(dataset.class_names, captions=captions)


def run_experiment(config, run_root_dir=None, overrides=None) -> RunRecord:
    """Execute the train and/or eval stages described by a run config."""
    if not isinstance(config, RunConfig):
        config = parse_config_file(config, overrides=overrides)
    start = time.monotonic()
    seed = config.seed()
    record_id = run_id_for(config.to_dict(), seed)
    out_dir = _run_dir(record_id, run_root_dir)

    dataset = ingest(config.dataset_spec())
    train_fraction = config.data.get("train_fraction", 0.8)
    train_set, eval_set = dataset.split(train_fraction, seed=seed)
    head = _build_head(dataset)

    record = RunRecord(run_id=record_id, config=config.to_dict())
    encoder = None
    train_enabled = config.train.get("enabled", bool(config.train))
    if config.train.get("init_checkpoint"):
        encoder = load_checkpoint(config.train["init_checkpoint"])

    if train_enabled:
        train_config = config.train_config()
        torch.manual_seed(seed)
        try:
            encoder, train_record = finetune(
                train_set,
                train_config,
                head=head,
                init_encoder=encoder,
                checkpoint_every=config.train.get("checkpoint_every"),
                checkpoint_dir=os.path.join(out_dir, "checkpoints"),
            )
        except CollapseError as exc:
            record = exc.record
            record.run_id = record_id
            record.config = config.to_dict()
            record.write_json(os.path.join(out_dir, "record.json"))
            record.write_loss_csv(os.path.join(out_dir, "losses.csv"))
            raise
        record.losses = train_record.losses
        record.collapse_trace = train_record.collapse_trace
        ckpt = os.path.join(out_dir, "checkpoints", "final.ckpt")
        save_checkpoint(encoder, ckpt, metadata={"run_id": record_id})
        record.artifacts["final_checkpoint"] = ckpt
    elif config.eval.get("checkpoint"):
        encoder = load_checkpoint(config.eval["checkpoint"])
    if encoder is None:
        raise ConfigError(
            "no encoder: enable [train], or give [train] init_checkpoint "
            "or [eval] checkpoint"
        )

    if config.eval.get("enabled", bool(config.eval)):
        report = eval_zero_shot(
            encoder,
            head,
            eval_set,
            eps_list=config.eval_eps_list(),
            attack_kind=config.eval.get("attack_kind", "apgd_dlr_targeted"),
            attack_steps=config.eval.get("attack_steps", 100),
            attack_subset=config.eval.get("attack_subset", 500),
            temperature=config.eval.get("temperature", 0.07),
            seed=config.eval.get("seed", seed),
        )
        record.eval_reports.append({"kind": "zero_shot", **report.to_dict()})
        atomic_write_text(
            os.path.join(out_dir, "reports", "zero_shot.json"),
            json.dumps(report.to_dict(), indent=2, sort_keys=True),
        )
        if config.eval.get("targeted", False):
            t_report = _targeted_stage(encoder, head, eval_set, config)
            record.eval_reports.append({"kind": "targeted", **t_report.to_dict()})
            atomic_write_text(
                os.path.join(out_dir, "reports", "targeted.json"),
                json.dumps(t_report.to_dict(), indent=2, sort_keys=True),
            )

    record.wall_clock_seconds = time.monotonic() - start
    record.write_loss_csv(os.path.join(out_dir, "losses.csv"))
    _write_config_copy(config, os.path.join(out_dir, "config.ini"))
    record.write_json(os.path.join(out_dir, "record.json"))
    return record


def _targeted_stage(encoder, head, eval_set, config: RunConfig):
    _, class_ids, target_ids = build_caption_bank(eval_set.class_names)
    per_target = config.eval.get("targeted_per_target", 4)
    images, targets, references, image_ids = targeted_protocol_inputs(
        eval_set, class_ids, target_ids, per_target
    )
    attack = AttackConfig(
        epsilon=config.eval.get("targeted_epsilon", 4 / 255),
        steps=config.eval.get("targeted_steps", 1000),
        objective="embedding_targeted",
    )
    return targeted_attack_eval(
        encoder, images, targets, head, attack,
        references=references, image_ids=image_ids,
    )


def targeted_protocol_inputs(eval_set, class_ids, target_ids, per_target: int):
    """Deterministic image/target assignment for the targeted protocol.

    Each adversarial target attacks `per_target` images drawn round-robin
    from the eval set; references map each image to its class caption.
    """
    captions, _, _ = build_caption_bank(eval_set.class_names)
    images, targets, references, image_ids = [], [], {}, []
    idx = 0
    for t in target_ids:
        for _ in range(per_target):
            images.append(eval_set.images[idx % len(eval_set)])
            label = int(eval_set.labels[idx % len(eval_set)])
            image_id = len(image_ids)
            image_ids.append(image_id)
            references[image_id] = [captions[class_ids[label]]]
            targets.append(t)
            idx += 1
    return torch.stack(images), torch.tensor(targets), references, image_ids


def _write_config_copy(config: RunConfig, path) -> None:
    lines = []
    for section, values in config.to_dict().items():
        if not values:
            continue
        lines.append(f"[{section}]")
        for key, value in sorted(values.items()):
            lines.append(f"{key} = {value}")
        lines.append("")
    atomic_write_text(path, "\n".join(lines))


def load_run_record(record_id: str, run_root_dir=None) -> RunRecord:
    path = os.path.join(run_root(run_root_dir), record_id, "record.json")
    with open(path) as fh:
        return RunRecord.from_dict(json.load(fh))


def compare_runs(run_ids, run_root_dir=None, out_path=None):
    """Render a comparison table over runs with compatible eval configs."""
    if len(run_ids) < 2:
        raise ConfigError("compare_runs needs at least 2 run ids")
    records = [load_run_record(r, run_root_dir) for r in sorted(run_ids)]
    eps_keys = None
    rows = []
    for record in records:
        zero_shot = next(
            (r for r in record.eval_reports if r.get("kind") == "zero_shot"), None
        )
        if zero_shot is None:
            raise ConfigError(f"run {record.run_id} has no zero-shot eval report")
        keys = tuple(sorted(zero_shot["robust_accuracy"]))
        if eps_keys is None:
            eps_keys = keys
        elif keys != eps_keys:
            raise ConfigError("incompatible eval configs: different epsilon grids")
        row = {
            "run_id": record.run_id,
            "clean_accuracy": zero_shot["clean_accuracy"],
        }
        for k in eps_keys:
            row[f"robust@{k}"] = zero_shot["robust_accuracy"][k]
        rows.append(row)
    fieldnames = list(rows[0].keys())
    # flag the best run per metric column
    best = {
        f: max(r[f] for r in rows)
        for f in fieldnames
        if f != "run_id"
    }
    for row in rows:
        row["best_in"] = ",".join(
            f for f, v in best.items() if row[f] == v
        )
    fieldnames.append("best_in")
    if out_path:
        write_csv_table(out_path, fieldnames, rows)
    return rows


def experiment_fig4_stopgrad(
    out_dir, steps: int = 500, seed: int = 0, n_train: int = 320
):
    """Stop-gradient ablation: identical runs except the stop-grad flag.

    Emits one loss-curve CSV per setting and returns both records.
    """
    os.makedirs(out_dir, exist_ok=True)
    train_set, _, head = make_benchmark(n_train=n_train, n_eval=10, seed=seed)
    results = {}
    for stop_grad in (True, False):
        config = ablation_config(stop_grad, seed=seed, steps=steps)
        torch.manual_seed(seed)
        try:
            _, record = finetune(train_set, config, head=head)
        except CollapseError as exc:
            record = exc.record
        name = "with_stopgrad" if stop_grad else "without_stopgrad"
        record.write_loss_csv(os.path.join(out_dir, f"{name}.csv"))
        results[name] = record
    return results


def experiment_table2_targeted(
    out_dir,
    encoders: dict,
    per_target: int = 4,
    epsilon: float = 4 / 255,
    steps: int = 1000,
    seed: int = 0,
):
    """Targeted-attack success-rate table across encoder variants.

    encoders maps a variant name to a VisionEncoder; rows are the five
    adversarial target strings, columns the variants.
    """
    os.makedirs(out_dir, exist_ok=True)
    _, eval_set, head = make_benchmark(seed=seed)
    _, class_ids, target_ids = build_caption_bank(eval_set.class_names)
    images, targets, references, image_ids = targeted_protocol_inputs(
        eval_set, class_ids, target_ids, per_target
    )
    attack = AttackConfig(
        epsilon=epsilon, steps=steps, objective="embedding_targeted", seed=seed
    )
    reports = {}
    for name, encoder in encoders.items():
        reports[name] = targeted_attack_eval(
            encoder, images, targets, head, attack,
            references=references, image_ids=image_ids,
        )
    target_strings = [head.caption_bank[t] for t in target_ids]
    rows = []
    for t in target_strings:
        row = {"target": t}
        for name, report in reports.items():
            s, a = report.per_target[t]
            row[name] = f"{s}/{a}"
        rows.append(row)
    summary_rate = {"target": "mean_success_rate"}
    summary_cider = {"target": "average_cider"}
    for name, report in reports.items():
        summary_rate[name] = f"{report.mean_success_rate:.4f}"
        summary_cider[name] = f"{report.average_cider:.4f}"
    rows += [summary_rate, summary_cider]
    write_csv_table(
        os.path.join(out_dir, "targeted_success.csv"),
        ["target"] + list(encoders.keys()),
        rows,
    )
    return reports
