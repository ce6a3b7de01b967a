"""Protocol orchestration: grid search, measurement trials, and the matrix.

One cell of the experiment matrix is (dataset, diversity level, approach).
Hyperparameters are tuned on a reserved trial whose split seed never
reappears among the measurement trials; the five measurement trials share
their split seeds across approaches within a cell, so deltas against the
baseline isolate the approach itself.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .analysis import mean_ci95, save_si_report, si_report
from .datagen import Dataset
from .errors import (
    ConsistencyError,
    InvalidArgumentError,
    PlanError,
    SearchFailure,
    TrainingFailure,
)
from .neuralcore import mini_resnet, save_checkpoint
from .seeding import hash_seed
from .splits import SplitBundle, partition, sample_combination_ladder
from .training import TrainConfig, train

BASE_APPROACHES = ("baseline", "late_stopping", "tuned_bn", "invariance_loss")
COMBINED_APPROACHES = ("three_together", "best_of_three")

PAPER_LR_GRID = (0.1, 0.01, 0.001, 0.0001, 0.00001)
PAPER_BETA_GRID = (0.01, 0.1, 0.5, 0.9, 0.99)
PAPER_LAMBDA_GRID = (1.0, 0.1, 0.01, 0.001, 0.0001)
PAPER_REFRESH_GRID = (10, 20, 50, 100)

FAST_LR_GRID = (0.001,)
FAST_BETA_GRID = (0.1, 0.9, 0.99)
FAST_LAMBDA_GRID = (1.0, 0.1, 0.01)
FAST_REFRESH_GRID = (20,)


@dataclass(frozen=True)
class Grids:
    learning_rate: tuple = PAPER_LR_GRID
    bn_momentum: tuple = PAPER_BETA_GRID
    invariance_weight: tuple = PAPER_LAMBDA_GRID
    pair_refresh_interval: tuple = PAPER_REFRESH_GRID

    @classmethod
    def paper(cls) -> "Grids":
        return cls()

    @classmethod
    def fast(cls) -> "Grids":
        return cls(
            learning_rate=FAST_LR_GRID,
            bn_momentum=FAST_BETA_GRID,
            invariance_weight=FAST_LAMBDA_GRID,
            pair_refresh_interval=FAST_REFRESH_GRID,
        )


@dataclass(frozen=True)
class ExperimentPlan:
    dataset_id: str
    dataset: Dataset  # full grid; every (category, condition) cell populated
    degrees: tuple  # nested ladder degrees, e.g. (2, 3, 4)
    level: int  # index into degrees: the diversity level under study
    approach: str
    train_size: int
    val_size: int
    ood_size: int
    epochs: int | None = None  # base budget; late stopping uses 10x (or 1000 if None)
    batch_size: int = 32
    n_trials: int = 5
    master_seed: int = 0
    grids: Grids = field(default_factory=Grids)
    channels: int = 16
    probe_width: int = 64
    restart_rule_enabled: bool = True
    eval_batch_size: int = 256

    def validate(self):
        if self.approach not in BASE_APPROACHES + COMBINED_APPROACHES:
            raise InvalidArgumentError(f"unknown approach {self.approach!r}")
        if not (0 <= self.level < len(self.degrees)):
            raise InvalidArgumentError(f"level {self.level} outside ladder {self.degrees}")
        if self.n_trials < 1:
            raise InvalidArgumentError("n_trials must be >= 1")
        self.dataset.validate()

    @property
    def degree(self) -> int:
        return self.degrees[self.level]

    @property
    def diversity_label(self) -> str:
        return f"k{self.degree}"

    @property
    def diversity(self) -> Fraction:
        return Fraction(self.degree, self.dataset.num_conditions)


@dataclass
class TrialResult:
    trial: int
    seed: int
    combos: object
    ind_val_accuracy: float
    ood_accuracy: float
    si_summary: float
    records: list
    failed: bool = False
    failure: str = ""


@dataclass
class SearchResult:
    chosen: dict
    ood_accuracy: float
    table: list  # (hyperparams, ood accuracy or None) per grid point


@dataclass
class CellResult:
    dataset_id: str
    degree: int
    diversity_label: str
    approach: str
    hyperparams: dict
    reserved_seed: int
    trial_seeds: list
    search: SearchResult | None
    trials: list
    aggregates: dict


@dataclass
class MatrixResult:
    cells: dict  # (dataset_id, diversity_label, approach) -> CellResult
    deltas: list  # (dataset_id, diversity_label, approach, acc_sign, si_sign)

    def summary(self) -> dict:
        return {
            "cells": [
                {
                    "dataset": c.dataset_id,
                    "degree": c.degree,
                    "diversity": c.diversity_label,
                    "approach": c.approach,
                    "hyperparams": c.hyperparams,
                    "reserved_seed": c.reserved_seed,
                    "trial_seeds": c.trial_seeds,
                    "ind_val_accuracy_mean": c.aggregates["ind_val_accuracy"][0],
                    "ind_val_accuracy_ci95": c.aggregates["ind_val_accuracy"][1],
                    "ood_accuracy_mean": c.aggregates["ood_accuracy"][0],
                    "ood_accuracy_ci95": c.aggregates["ood_accuracy"][1],
                    "si_summary_mean": c.aggregates["si_summary"][0],
                    "si_summary_ci95": c.aggregates["si_summary"][1],
                    "trials": [
                        {
                            "trial": t.trial,
                            "seed": t.seed,
                            "ind_val_accuracy": t.ind_val_accuracy,
                            "ood_accuracy": t.ood_accuracy,
                            "si_summary": t.si_summary,
                            "failed": t.failed,
                        }
                        for t in c.trials
                    ],
                }
                for c in self.cells.values()
            ],
            "deltas": [
                {
                    "dataset": d[0],
                    "diversity": d[1],
                    "approach": d[2],
                    "acc_sign": d[3],
                    "si_sign": d[4],
                }
                for d in self.deltas
            ],
        }


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def network_for(plan: ExperimentPlan, bn_momentum: float = 0.99):
    h, w, _ = plan.dataset.items[0].pixels.shape
    return mini_resnet(
        (h, w, 1),
        plan.dataset.num_categories,
        channels=plan.channels,
        probe_width=plan.probe_width,
        bn_momentum=bn_momentum,
    )


def trial_seeds(plan: ExperimentPlan) -> tuple[int, list]:
    """Reserved-trial seed plus measurement seeds; approach-independent."""
    seeds = [
        hash_seed(plan.master_seed, plan.dataset_id, plan.diversity_label, i)
        for i in range(plan.n_trials + 1)
    ]
    if len(set(seeds)) != len(seeds):
        raise ConsistencyError("trial seed derivation collided")
    return seeds[0], seeds[1:]


def build_split(plan: ExperimentPlan, split_seed: int) -> SplitBundle:
    ladder = sample_combination_ladder(
        plan.dataset.num_categories, plan.dataset.num_conditions, plan.degrees, split_seed
    )
    label, combos, _ = ladder.levels[plan.level]
    return partition(
        plan.dataset,
        combos,
        plan.train_size,
        plan.val_size,
        plan.ood_size,
        split_seed,
        level_label=label,
    )


def grid_points(plan: ExperimentPlan, approach: str | None = None) -> list:
    """Hyperparameter combinations for one approach, in deterministic order.

    Only the approach's own dimensions vary: baseline and late stopping tune
    the learning rate alone; tuned BN adds momentum; the invariance approach
    adds weight and refresh interval.
    """
    approach = approach or plan.approach
    g = plan.grids
    points = []
    if approach in ("baseline", "late_stopping"):
        for lr in g.learning_rate:
            points.append({"learning_rate": lr})
    elif approach == "tuned_bn":
        for lr in g.learning_rate:
            for beta in g.bn_momentum:
                points.append({"learning_rate": lr, "bn_momentum": beta})
    elif approach == "invariance_loss":
        for lr in g.learning_rate:
            for lam in g.invariance_weight:
                for interval in g.pair_refresh_interval:
                    points.append(
                        {
                            "learning_rate": lr,
                            "invariance_weight": lam,
                            "pair_refresh_interval": interval,
                        }
                    )
    else:
        raise InvalidArgumentError(f"no grid for approach {approach!r}")
    return points


def config_for(plan: ExperimentPlan, approach: str, hyper: dict, seed: int) -> TrainConfig:
    flags = set()
    epochs = plan.epochs
    if approach in ("late_stopping", "three_together"):
        flags.add("late_stopping")
        epochs = plan.epochs * 10 if plan.epochs is not None else None
    if approach in ("tuned_bn", "three_together"):
        flags.add("tuned_bn")
    if approach in ("invariance_loss", "three_together"):
        flags.add("invariance_loss")
    return TrainConfig(
        learning_rate=hyper["learning_rate"],
        epochs=epochs,
        batch_size=plan.batch_size,
        bn_momentum=hyper.get("bn_momentum", 0.99),
        invariance_weight=hyper.get("invariance_weight", 0.0),
        pair_refresh_interval=hyper.get("pair_refresh_interval", 100),
        seed=seed,
        approach_flags=frozenset(flags),
        restart_rule_enabled=plan.restart_rule_enabled,
        eval_batch_size=plan.eval_batch_size,
    )


def grid_search(plan: ExperimentPlan, reserved_trial_seed: int | None = None,
                workers: int = 1) -> SearchResult:
    """Train every grid point on the reserved split; argmax OoD accuracy.

    Ties keep the first point in grid order. Raises SearchFailure with the
    partial table when every point exhausts its restart budget.
    """
    plan.validate()
    if plan.approach not in BASE_APPROACHES:
        raise InvalidArgumentError(f"grid_search tunes base approaches, not {plan.approach!r}")
    seed = reserved_trial_seed if reserved_trial_seed is not None else trial_seeds(plan)[0]
    split = build_split(plan, seed)
    points = grid_points(plan)

    def run_point(hyper):
        net = network_for(plan, hyper.get("bn_momentum", 0.99))
        config = config_for(plan, plan.approach, hyper, hash_seed(seed, plan.approach))
        try:
            _, records = train(config, split, net)
        except TrainingFailure:
            return (hyper, None)
        return (hyper, records[-1].ood_accuracy)

    table = _map(run_point, points, workers)
    best = None
    best_ood = None
    for hyper, ood in table:
        if ood is None:
            continue
        if best is None or ood > best_ood:
            best, best_ood = hyper, ood
    if best is None:
        raise SearchFailure("every grid point exhausted its restart budget", table)
    return SearchResult(chosen=best, ood_accuracy=best_ood, table=table)


def _run_one_trial(plan, approach, hyper, trial, seed, out_dir):
    split = build_split(plan, seed)
    net = network_for(plan, hyper.get("bn_momentum", 0.99))
    config = config_for(plan, approach, hyper, hash_seed(seed, approach))
    trial_dir = None
    csv_path = None
    if out_dir is not None:
        trial_dir = os.path.join(out_dir, f"trial{trial}")
        os.makedirs(trial_dir, exist_ok=True)
        csv_path = os.path.join(trial_dir, "epochs.csv")
    try:
        params, records = train(config, split, net, csv_path=csv_path)
    except TrainingFailure as exc:
        return TrialResult(
            trial=trial,
            seed=seed,
            combos=split.combos,
            ind_val_accuracy=0.0,
            ood_accuracy=0.0,
            si_summary=0.0,
            records=exc.records or [],
            failed=True,
            failure=str(exc),
        )
    report = si_report(params, net, plan.dataset, batch_size=plan.eval_batch_size)
    if trial_dir is not None:
        save_checkpoint(params, os.path.join(trial_dir, "checkpoint.bin"))
        save_si_report(report, os.path.join(trial_dir, "si_report.json"))
    final = records[-1]
    return TrialResult(
        trial=trial,
        seed=seed,
        combos=split.combos,
        ind_val_accuracy=final.ind_val_accuracy,
        ood_accuracy=final.ood_accuracy,
        si_summary=report["si_summary"],
        records=records,
    )


def run_trials(plan: ExperimentPlan, hyper: dict, out_dir=None,
               workers: int = 1, approach: str | None = None):
    """Measurement trials with fresh splits; aggregates via mean_ci95."""
    plan.validate()
    approach = approach or plan.approach
    _, seeds = trial_seeds(plan)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    jobs = list(enumerate(seeds, start=1))
    results = _map(
        lambda job: _run_one_trial(plan, approach, hyper, job[0], job[1], out_dir),
        jobs,
        workers,
    )
    ok = [r for r in results if not r.failed]
    if len(ok) < 2:
        raise TrainingFailure(
            f"only {len(ok)} of {len(results)} trials succeeded; need >= 2 to aggregate",
            records=[],
        )
    aggregates = {
        "ind_val_accuracy": mean_ci95([r.ind_val_accuracy for r in ok]),
        "ood_accuracy": mean_ci95([r.ood_accuracy for r in ok]),
        "si_summary": mean_ci95([r.si_summary for r in ok]),
        "n_success": len(ok),
    }
    return results, aggregates


def _delta_sign(approach_mean: float, baseline_mean: float) -> str:
    return "+" if approach_mean > baseline_mean else "-"


def _cell_out_dir(out_dir, dataset_id, label, approach):
    if out_dir is None:
        return None
    path = os.path.join(out_dir, dataset_id, label, approach)
    os.makedirs(path, exist_ok=True)
    return path


def _search_table_json(search: SearchResult | None):
    if search is None:
        return None
    return {
        "chosen": search.chosen,
        "reserved_ood_accuracy": search.ood_accuracy,
        "table": [
            {"hyperparams": h, "ood_accuracy": ood} for h, ood in search.table
        ],
    }


def combined_run(
    mode: str,
    plan: ExperimentPlan,
    tuned: dict,
    out_dir=None,
    workers: int = 1,
) -> CellResult:
    """Appendix-style combined strategies from the three tuned approaches.

    ``tuned`` maps each base approach to its SearchResult. three_together
    trains once per trial with all three approaches on (learning rate taken
    from the reserved-trial-best single approach); best_of_three re-labels
    the reserved-trial winner's own measurement results.
    """
    plan.validate()
    if mode not in COMBINED_APPROACHES:
        raise InvalidArgumentError(f"unknown combined mode {mode!r}")
    needed = ("late_stopping", "tuned_bn", "invariance_loss")
    missing = [a for a in needed if a not in tuned]
    if missing:
        raise PlanError(f"combined run needs tuned results for {missing}")
    reserved, _ = trial_seeds(plan)
    winner = max(needed, key=lambda a: (tuned[a].ood_accuracy, -needed.index(a)))
    if mode == "best_of_three":
        hyper = dict(tuned[winner].chosen)
        approach = winner
    else:
        hyper = {
            "learning_rate": tuned[winner].chosen["learning_rate"],
            "bn_momentum": tuned["tuned_bn"].chosen["bn_momentum"],
            "invariance_weight": tuned["invariance_loss"].chosen["invariance_weight"],
            "pair_refresh_interval": tuned["invariance_loss"].chosen["pair_refresh_interval"],
        }
        approach = "three_together"
    trials, aggregates = run_trials(
        plan, hyper, out_dir=out_dir, workers=workers, approach=approach
    )
    _, seeds = trial_seeds(plan)
    return CellResult(
        dataset_id=plan.dataset_id,
        degree=plan.degree,
        diversity_label=plan.diversity_label,
        approach=mode,
        hyperparams=hyper,
        reserved_seed=reserved,
        trial_seeds=seeds,
        search=None,
        trials=trials,
        aggregates=aggregates,
    )


def run_matrix(
    datasets,
    degrees,
    approaches,
    *,
    train_size: int,
    val_size: int,
    ood_size: int,
    epochs: int | None = None,
    batch_size: int = 32,
    n_trials: int = 5,
    master_seed: int = 0,
    grids: Grids | None = None,
    channels: int = 16,
    probe_width: int = 64,
    restart_rule_enabled: bool = True,
    eval_batch_size: int = 256,
    out_dir=None,
    workers: int = 1,
) -> MatrixResult:
    """Full cube over (dataset, ladder level, approach) plus delta outcomes.

    ``datasets`` is a list of (dataset_id, Dataset) with every cell
    populated. Baseline must be among the approaches (deltas need it), and
    combined approaches require all three singles.
    """
    approaches = list(approaches)
    if not approaches:
        raise PlanError("no approaches requested")
    if "baseline" not in approaches:
        raise PlanError("baseline approach is required for delta outcomes")
    for approach in approaches:
        if approach not in BASE_APPROACHES + COMBINED_APPROACHES:
            raise InvalidArgumentError(f"unknown approach {approach!r}")
    combined = [a for a in approaches if a in COMBINED_APPROACHES]
    if combined:
        missing = [
            a
            for a in ("late_stopping", "tuned_bn", "invariance_loss")
            if a not in approaches
        ]
        if missing:
            raise PlanError(
                f"combined approaches {combined} require the single approaches {missing}"
            )
    grids = grids if grids is not None else Grids()
    cells: dict = {}
    deltas: list = []
    for dataset_id, dataset in datasets:
        for level in range(len(degrees)):
            base_plan = ExperimentPlan(
                dataset_id=dataset_id,
                dataset=dataset,
                degrees=tuple(degrees),
                level=level,
                approach="baseline",
                train_size=train_size,
                val_size=val_size,
                ood_size=ood_size,
                epochs=epochs,
                batch_size=batch_size,
                n_trials=n_trials,
                master_seed=master_seed,
                grids=grids,
                channels=channels,
                probe_width=probe_width,
                restart_rule_enabled=restart_rule_enabled,
                eval_batch_size=eval_batch_size,
            )
            label = base_plan.diversity_label
            reserved, seeds = trial_seeds(base_plan)
            tuned: dict = {}
            for approach in [a for a in approaches if a in BASE_APPROACHES]:
                plan = replace(base_plan, approach=approach)
                cell_dir = _cell_out_dir(out_dir, dataset_id, label, approach)
                search = grid_search(plan, reserved, workers=workers)
                tuned[approach] = search
                trials, aggregates = run_trials(
                    plan, search.chosen, out_dir=cell_dir, workers=workers
                )
                cells[(dataset_id, label, approach)] = CellResult(
                    dataset_id=dataset_id,
                    degree=plan.degree,
                    diversity_label=label,
                    approach=approach,
                    hyperparams=search.chosen,
                    reserved_seed=reserved,
                    trial_seeds=seeds,
                    search=search,
                    trials=trials,
                    aggregates=aggregates,
                )
                if cell_dir is not None:
                    with open(os.path.join(cell_dir, "grid_search.json"), "w") as fh:
                        json.dump(_search_table_json(search), fh, indent=2, sort_keys=True)
                        fh.write("\n")
            for mode in combined:
                cell_dir = _cell_out_dir(out_dir, dataset_id, label, mode)
                cells[(dataset_id, label, mode)] = combined_run(
                    mode, base_plan, tuned, out_dir=cell_dir, workers=workers
                )
            baseline_cell = cells[(dataset_id, label, "baseline")]
            for approach in approaches:
                if approach == "baseline":
                    continue
                cell = cells[(dataset_id, label, approach)]
                deltas.append(
                    (
                        dataset_id,
                        label,
                        approach,
                        _delta_sign(
                            cell.aggregates["ood_accuracy"][0],
                            baseline_cell.aggregates["ood_accuracy"][0],
                        ),
                        _delta_sign(
                            cell.aggregates["si_summary"][0],
                            baseline_cell.aggregates["si_summary"][0],
                        ),
                    )
                )
    result = MatrixResult(cells=cells, deltas=deltas)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(result.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result
