"""Command-line front end.

Subcommands cover the full pipeline: generate or ingest data, build splits,
train, analyze selectivity/invariance, check gradients, tune, run the
experiment matrix, and emit plot-ready report CSVs. Exit codes: 0 success,
1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, datagen, experiment, splits, training
from .config import defaults_help, parse_config, write_effective_config
from .errors import ConfigError, OodbenchError
from .neuralcore import (
    finite_difference_check,
    init_params,
    load_checkpoint,
    mini_resnet,
    save_checkpoint,
)
from .seeding import hash_seed

_APPROACH_CHOICES = {
    "baseline": "baseline",
    "late-stopping": "late_stopping",
    "tuned-bn": "tuned_bn",
    "invariance": "invariance_loss",
    "three-together": "three_together",
    "best-of-three": "best_of_three",
}


def _deterministic() -> bool:
    return os.environ.get("OODBENCH_DETERMINISTIC", "") == "1"


def _workers(config, args) -> int:
    if _deterministic():
        return 1
    if getattr(args, "workers", None) is not None:
        return max(1, args.workers)
    return max(1, config["experiment"]["workers"])


def _load_config(args, seed_pointer: str | None = None):
    overrides = {}
    if seed_pointer is not None and getattr(args, "seed", None) is not None:
        overrides[seed_pointer] = args.seed
    if getattr(args, "bn_momentum", None) is not None:
        overrides["/train/bn_momentum"] = args.bn_momentum
    if getattr(args, "lr", None) is not None:
        overrides["/train/learning_rate"] = args.lr
    if getattr(args, "epochs", None) is not None:
        overrides["/train/epochs"] = args.epochs
    if getattr(args, "grid", None) is not None:
        overrides["/experiment/grid"] = args.grid
    return parse_config(getattr(args, "config", None), overrides)


def _network_for_dataset(config, dataset):
    h, w, _ = dataset.items[0].pixels.shape
    return mini_resnet(
        (h, w, 1),
        dataset.num_categories,
        channels=config["network"]["channels"],
        probe_width=config["network"]["probe_width"],
        bn_momentum=config["train"]["bn_momentum"],
    )


def _cmd_gen_data(args) -> int:
    config = _load_config(args, "/data/seed")
    spec = config.grid_spec()
    dataset = datagen.generate_grid_positions(spec, config["data"]["seed"])
    datagen.save_dataset(dataset, args.out)
    write_effective_config(config, args.out)
    print(
        f"generated {len(dataset.items)} images "
        f"({spec.num_categories} categories x {spec.num_conditions} conditions) -> {args.out}"
    )
    return 0


def _cmd_ingest_idx(args) -> int:
    config = _load_config(args)
    d = config["data"]
    base = datagen.load_idx(args.images, args.labels)
    dataset = datagen.build_positions_dataset(
        base,
        grid=tuple(d["cell_grid"]),
        glyph_size=d["glyph_size"],
        canvas_size=d["canvas_size"],
        classes_kept=d["num_categories"],
    )
    datagen.save_dataset(dataset, args.out)
    write_effective_config(config, args.out)
    print(
        f"ingested {len(base)} source images -> {len(dataset.items)} composed items "
        f"({dataset.num_categories} x {dataset.num_conditions}) -> {args.out}"
    )
    return 0


def _cmd_split(args) -> int:
    config = _load_config(args, "/split/seed")
    s = config["split"]
    dataset = datagen.load_dataset(args.data)
    ladder = splits.sample_combination_ladder(
        dataset.num_categories, dataset.num_conditions, s["degrees"], s["seed"]
    )
    label, combos, degree = ladder.levels[s["level"]]
    bundle = splits.partition(
        dataset, combos, s["train_size"], s["val_size"], s["ood_size"], s["seed"],
        level_label=label,
    )
    splits.save_split_bundle(bundle, args.out, degrees=s["degrees"])
    write_effective_config(config, args.out)
    print(
        f"split level {label} (k={degree}, diversity {splits.diversity(combos)}): "
        f"train {len(bundle.train.items)}, val {len(bundle.val.items)}, "
        f"ood {len(bundle.ood.items)} -> {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args, "/train/seed")
    bundle = splits.load_split_bundle(args.split)
    net = _network_for_dataset(config, bundle.train)
    train_config = config.train_config()
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(config, args.out)
    csv_path = os.path.join(args.out, "epochs.csv")
    params, records = training.train(train_config, bundle, net, csv_path=csv_path)
    save_checkpoint(params, os.path.join(args.out, "checkpoint.bin"))
    final = records[-1]
    print(
        f"trained {len(records)} epochs: ind_val_acc {final.ind_val_accuracy:.4f}, "
        f"ood_acc {final.ood_accuracy:.4f} -> {args.out}"
    )
    return 0


def _cmd_analyze_si(args) -> int:
    config = _load_config(args)
    dataset = datagen.load_dataset(args.data)
    net = _network_for_dataset(config, dataset)
    params = load_checkpoint(args.checkpoint, net)
    report = analysis.si_report(params, net, dataset)
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(config, args.out)
    analysis.save_si_report(report, os.path.join(args.out, "si_report.json"))
    print(
        f"si summary {report['si_summary']:.4f} over {report['num_neurons']} neurons "
        f"-> {args.out}/si_report.json"
    )
    return 0


def _cmd_gradcheck(args) -> int:
    config = _load_config(args, "/train/seed")
    d = config["data"]
    net = mini_resnet(
        (d["canvas_size"], d["canvas_size"], 1),
        d["num_categories"],
        channels=config["network"]["channels"],
        probe_width=config["network"]["probe_width"],
        bn_momentum=config["train"]["bn_momentum"],
    )
    seed = config["train"]["seed"]
    params = init_params(net, hash_seed(seed, "gradcheck-init"), dtype=np.float64)
    rng = np.random.default_rng(hash_seed(seed, "gradcheck-batch"))
    half = 3
    batch = rng.random((2 * half, d["canvas_size"], d["canvas_size"], 1))
    labels = rng.integers(0, d["num_categories"], size=half)
    weight = config["train"]["invariance_weight"] or 0.1

    def loss_fn(trace):
        ce, ce_grad = training.cross_entropy(trace.logits[:half], labels)
        logit_grad = np.zeros_like(trace.logits)
        logit_grad[:half] = ce_grad
        inv, ga, gb = training.invariance_loss(trace.probe[:half], trace.probe[half:])
        probe_grad = weight * np.concatenate([ga, gb], axis=0)
        return training.total_loss(ce, inv, weight), logit_grad, probe_grad

    report = finite_difference_check(
        net, params, batch, loss_fn, coords_per_type=args.coords, seed=seed
    )
    print(report.summary())
    return 0 if report.passed else 1


def _build_plan(config, dataset, approach, grids):
    s = config["split"]
    e = config["experiment"]
    return experiment.ExperimentPlan(
        dataset_id=e["dataset_id"],
        dataset=dataset,
        degrees=tuple(s["degrees"]),
        level=s["level"],
        approach=approach,
        train_size=s["train_size"],
        val_size=s["val_size"],
        ood_size=s["ood_size"],
        epochs=config["train"]["epochs"],
        batch_size=config["train"]["batch_size"],
        n_trials=e["n_trials"],
        master_seed=e["master_seed"],
        grids=grids,
        channels=config["network"]["channels"],
        probe_width=config["network"]["probe_width"],
        restart_rule_enabled=config["train"]["restart_rule_enabled"],
    )


def _grids_for(config):
    return (
        experiment.Grids.fast()
        if config["experiment"]["grid"] == "fast"
        else experiment.Grids.paper()
    )


def _cmd_grid_search(args) -> int:
    config = _load_config(args, "/experiment/master_seed")
    dataset = datagen.load_dataset(args.data)
    approach = _APPROACH_CHOICES[args.approach]
    plan = _build_plan(config, dataset, approach, _grids_for(config))
    result = experiment.grid_search(plan, workers=_workers(config, args))
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(config, args.out)
    with open(os.path.join(args.out, "grid_search.json"), "w") as fh:
        json.dump(
            {
                "approach": approach,
                "chosen": result.chosen,
                "reserved_ood_accuracy": result.ood_accuracy,
                "table": [
                    {"hyperparams": h, "ood_accuracy": ood} for h, ood in result.table
                ],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    print(
        f"chose {result.chosen} (reserved OoD accuracy {result.ood_accuracy:.4f}) "
        f"-> {args.out}/grid_search.json"
    )
    return 0


def _cmd_run_matrix(args) -> int:
    config = _load_config(args, "/experiment/master_seed")
    if args.data is not None:
        dataset = datagen.load_dataset(args.data)
    else:
        dataset = datagen.generate_grid_positions(config.grid_spec(), config["data"]["seed"])
    approaches = config["experiment"]["approaches"]
    if getattr(args, "approach", None) is not None:
        wanted = _APPROACH_CHOICES[args.approach]
        approaches = ["baseline"] if wanted == "baseline" else ["baseline", wanted]
        if wanted in experiment.COMBINED_APPROACHES:
            approaches = ["baseline", "late_stopping", "tuned_bn", "invariance_loss", wanted]
    s = config["split"]
    e = config["experiment"]
    result = experiment.run_matrix(
        [(e["dataset_id"], dataset)],
        tuple(s["degrees"]),
        approaches,
        train_size=s["train_size"],
        val_size=s["val_size"],
        ood_size=s["ood_size"],
        epochs=config["train"]["epochs"],
        batch_size=config["train"]["batch_size"],
        n_trials=e["n_trials"],
        master_seed=e["master_seed"],
        grids=_grids_for(config),
        channels=config["network"]["channels"],
        probe_width=config["network"]["probe_width"],
        restart_rule_enabled=config["train"]["restart_rule_enabled"],
        out_dir=args.out,
        workers=_workers(config, args),
    )
    write_effective_config(config, args.out)
    print(f"matrix complete: {len(result.cells)} cells -> {args.out}/summary.json")
    return 0


def _csv_write(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _cmd_report(args) -> int:
    summary_path = os.path.join(args.results, "summary.json")
    with open(summary_path) as fh:
        summary = json.load(fh)
    os.makedirs(args.out, exist_ok=True)
    cells = summary["cells"]
    deltas = summary["deltas"]

    rows = [
        (
            f"{c['dataset']},{c['diversity']},{c['approach']},"
            f"{c['ood_accuracy_mean']:.6f},{c['ood_accuracy_ci95']:.6f},"
            f"{c['ind_val_accuracy_mean']:.6f},{c['ind_val_accuracy_ci95']:.6f},"
            f"{c['si_summary_mean']:.6f},{c['si_summary_ci95']:.6f}"
        )
        for c in sorted(cells, key=lambda c: (c["dataset"], c["diversity"], c["approach"]))
    ]
    _csv_write(
        os.path.join(args.out, "fig4_accuracy.csv"),
        "dataset,diversity,approach,ood_mean,ood_ci95,ind_mean,ind_ci95,si_mean,si_ci95",
        rows,
    )

    scatter = sorted(cells, key=lambda c: (c["dataset"], c["diversity"], c["approach"]))
    _csv_write(
        os.path.join(args.out, "fig5_scatter.csv"),
        "dataset,diversity,approach,si_summary_mean,ood_accuracy_mean",
        [
            f"{c['dataset']},{c['diversity']},{c['approach']},"
            f"{c['si_summary_mean']:.6f},{c['ood_accuracy_mean']:.6f}"
            for c in scatter
        ],
    )
    pearson_value = None
    if len(scatter) >= 2:
        try:
            pearson_value = analysis.pearson(
                [c["si_summary_mean"] for c in scatter],
                [c["ood_accuracy_mean"] for c in scatter],
            )
        except OodbenchError:
            pearson_value = None
    with open(os.path.join(args.out, "fig5_pearson.json"), "w") as fh:
        json.dump(
            {"pearson_r": pearson_value, "points": len(scatter)}, fh, indent=2, sort_keys=True
        )
        fh.write("\n")

    approaches = sorted({c["approach"] for c in cells})
    acc_by_approach = {
        a: {
            (c["dataset"], c["diversity"]): c["ood_accuracy_mean"]
            for c in cells
            if c["approach"] == a
        }
        for a in approaches
    }
    table1_rows = []
    pairs = [(a, "baseline") for a in approaches if a != "baseline"]
    if "best_of_three" in approaches and "three_together" in approaches:
        pairs.append(("best_of_three", "three_together"))
    for a, b in pairs:
        counts = analysis.pairwise_win_counts(acc_by_approach[a], acc_by_approach[b])
        table1_rows.append(f"{a},{b},{counts.wins_a},{counts.wins_b},{counts.ties}")
    _csv_write(
        os.path.join(args.out, "table1_win_counts.csv"),
        "approach_a,approach_b,wins_a,wins_b,ties",
        table1_rows,
    )

    table2_rows = []
    for approach in sorted({d["approach"] for d in deltas}):
        outcomes = [
            (d["acc_sign"], d["si_sign"]) for d in deltas if d["approach"] == approach
        ]
        table = analysis.delta_frequency_table(outcomes)
        table2_rows.append(analysis.frequency_table_csv_row(approach, table))
    _csv_write(
        os.path.join(args.out, "table2_delta_frequencies.csv"),
        analysis.FREQUENCY_CSV_HEADER,
        table2_rows,
    )
    print(f"report written -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodbench",
        description="Bias-controlled OoD benchmark harness.",
        epilog=defaults_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True):
        p.add_argument("--config", help="JSON config path (defaults apply when omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="override the stage seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate the procedural grid-positions dataset")
    common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("ingest-idx", help="compose a positions dataset from IDX files")
    common(p, seed=False)
    p.add_argument("--images", required=True, help="IDX image file")
    p.add_argument("--labels", required=True, help="IDX label file")
    p.set_defaults(func=_cmd_ingest_idx)

    p = sub.add_parser("split", help="sample a combination ladder level and partition")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train on a saved split")
    common(p)
    p.add_argument("--split", required=True, help="split bundle directory")
    p.add_argument("--lr", type=float, help="override /train/learning_rate")
    p.add_argument("--epochs", type=int, help="override /train/epochs")
    p.add_argument("--bn-momentum", dest="bn_momentum", type=float,
                   help="override /train/bn_momentum")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("analyze-si", help="selectivity/invariance report for a checkpoint")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="full-grid dataset directory")
    p.set_defaults(func=_cmd_analyze_si)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--seed", type=int, help="override the check seed")
    p.add_argument("--coords", type=int, default=200, help="coordinates per layer type")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("grid-search", help="reserved-trial hyperparameter search")
    common(p)
    p.add_argument("--data", required=True, help="full-grid dataset directory")
    p.add_argument("--approach", required=True,
                   choices=[k for k, v in _APPROACH_CHOICES.items()
                            if v in experiment.BASE_APPROACHES])
    p.add_argument("--grid", choices=["full", "fast"], help="grid size")
    p.add_argument("--workers", type=int, help="parallel grid points")
    p.set_defaults(func=_cmd_grid_search)

    p = sub.add_parser("run-matrix", help="full (dataset x diversity x approach) matrix")
    common(p)
    p.add_argument("--data", help="dataset directory (generated from config when omitted)")
    p.add_argument("--approach", choices=list(_APPROACH_CHOICES),
                   help="restrict to baseline plus one approach")
    p.add_argument("--grid", choices=["full", "fast"], help="grid size")
    p.add_argument("--workers", type=int, help="parallel trials/grid points")
    p.set_defaults(func=_cmd_run_matrix)

    p = sub.add_parser("report", help="emit plot-ready CSV tables from a matrix run")
    p.add_argument("--results", required=True, help="run-matrix output directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error at {exc.pointer}: {exc.message}", file=sys.stderr)
        return 2
    except OodbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
