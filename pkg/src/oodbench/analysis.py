"""Per-neuron selectivity/invariance scoring and the reporting statistics.

A neuron's activity table holds its mean activation per (category,
condition) cell, min-max normalized per neuron. Selectivity contrasts the
preferred category's mean activity against all other cells; invariance is
one minus the activity range across conditions within the preferred
category; their geometric mean is the SI score. The layer summary averages
the top 20% of neuron SI scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .datagen import Dataset
from .errors import (
    CoverageError,
    InvalidArgumentError,
    ShapeError,
    UndefinedCorrelationError,
)
from .neuralcore import NetworkSpec, ParamStore, forward


@dataclass
class ActivityTable:
    values: np.ndarray  # neurons x categories x conditions, in [0, 1]
    raw_range: np.ndarray  # neurons x 2 (min, max before normalization)
    counts: np.ndarray  # categories x conditions items used
    degenerate: np.ndarray  # neurons bool; constant raw activity

    def validate(self):
        j, c, n = self.values.shape
        if self.counts.shape != (c, n):
            raise ShapeError("counts grid does not match table shape")
        if np.any(self.counts < 1):
            raise CoverageError([tuple(map(int, cell)) for cell in np.argwhere(self.counts < 1)])
        if np.any(self.values < -1e-12) or np.any(self.values > 1 + 1e-12):
            raise InvalidArgumentError("normalized activities must lie in [0, 1]")
        if np.any(self.values[self.degenerate] != 0):
            raise InvalidArgumentError("degenerate rows must be all-zero")


@dataclass(frozen=True)
class NeuronScore:
    neuron: int
    preferred_category: int
    selectivity: float
    invariance: float
    si: float
    degenerate: bool


class WinCounts(NamedTuple):
    wins_a: int
    wins_b: int
    ties: int


@dataclass(frozen=True)
class FrequencyTable:
    n_total: int
    n_acc_up: int
    n_si_up: int
    n_acc_up_given_si_up: int
    n_acc_up_given_si_down: int

    @property
    def p_acc_up(self) -> Fraction:
        return Fraction(self.n_acc_up, self.n_total)

    @property
    def p_si_up(self) -> Fraction:
        return Fraction(self.n_si_up, self.n_total)

    @property
    def p_acc_up_given_si_up(self):
        if self.n_si_up == 0:
            return None
        return Fraction(self.n_acc_up_given_si_up, self.n_si_up)

    @property
    def p_acc_up_given_si_down(self):
        n_down = self.n_total - self.n_si_up
        if n_down == 0:
            return None
        return Fraction(self.n_acc_up_given_si_down, n_down)

    def validate(self):
        if self.n_acc_up > self.n_total or self.n_si_up > self.n_total:
            raise InvalidArgumentError("count exceeds total")
        if self.n_acc_up_given_si_up > self.n_si_up:
            raise InvalidArgumentError("conditional count exceeds subgroup")
        if self.n_acc_up_given_si_down > self.n_total - self.n_si_up:
            raise InvalidArgumentError("conditional count exceeds subgroup")
        if self.n_acc_up_given_si_up + self.n_acc_up_given_si_down != self.n_acc_up:
            raise InvalidArgumentError("conditional counts do not partition acc-up cases")


def probe_activations(params: ParamStore, spec: NetworkSpec, pixels: np.ndarray,
                      batch_size: int = 256) -> np.ndarray:
    """Eval-mode probe-layer activations for a stack of images."""
    chunks = []
    for s in range(0, pixels.shape[0], batch_size):
        trace = forward(spec, params, pixels[s : s + batch_size], mode="eval")
        chunks.append(trace.probe)
    return np.concatenate(chunks, axis=0)


def activity_table(params: ParamStore, spec: NetworkSpec, dataset: Dataset,
                   batch_size: int = 256) -> ActivityTable:
    """Mean probe activity per (category, condition), normalized per neuron.

    The dataset must populate every (category, condition) cell; use the full
    generated grid rather than a split, since invariance ranges over all
    conditions including those excluded from training.
    """
    dataset.validate()
    c_count = dataset.num_categories
    n_count = dataset.num_conditions
    counts = np.zeros((c_count, n_count), dtype=np.int64)
    for item in dataset.items:
        counts[item.category, item.condition] += 1
    if np.any(counts == 0):
        missing = [tuple(map(int, cell)) for cell in np.argwhere(counts == 0)]
        raise CoverageError(missing)
    pixels = dataset.stacked_pixels()
    acts = probe_activations(params, spec, pixels, batch_size=batch_size)
    num_neurons = acts.shape[1]
    sums = np.zeros((num_neurons, c_count, n_count), dtype=np.float64)
    for idx, item in enumerate(dataset.items):
        sums[:, item.category, item.condition] += acts[idx]
    raw = sums / counts[None, :, :]
    flat = raw.reshape(num_neurons, -1)
    mins = flat.min(axis=1)
    maxs = flat.max(axis=1)
    degenerate = maxs == mins
    span = np.where(degenerate, 1.0, maxs - mins)
    values = (raw - mins[:, None, None]) / span[:, None, None]
    values[degenerate] = 0.0
    table = ActivityTable(
        values=values,
        raw_range=np.stack([mins, maxs], axis=1),
        counts=counts,
        degenerate=degenerate,
    )
    table.validate()
    return table


def neuron_scores(table: ActivityTable) -> list:
    """Selectivity, invariance, and SI per neuron from a normalized table."""
    table.validate()
    num_neurons, c_count, n_count = table.values.shape
    scores = []
    for j in range(num_neurons):
        if table.degenerate[j]:
            scores.append(
                NeuronScore(
                    neuron=j, preferred_category=0,
                    selectivity=0.0, invariance=1.0, si=0.0, degenerate=True,
                )
            )
            continue
        cells = table.values[j]
        preferred = int(np.argmax(cells.sum(axis=1)))  # ties break to lowest id
        pref_row = cells[preferred]
        alpha_hat = float(pref_row.mean())
        other_sum = float(cells.sum() - pref_row.sum())
        alpha_bar = other_sum / ((c_count - 1) * n_count)
        denom = alpha_hat + alpha_bar
        # alpha_hat >= alpha_bar holds exactly, but mean/sum round differently;
        # clamp so tied rows cannot push the product under zero.
        selectivity = 0.0 if denom < 1e-12 else max(0.0, (alpha_hat - alpha_bar) / denom)
        invariance = max(0.0, 1.0 - (float(pref_row.max()) - float(pref_row.min())))
        si = math.sqrt(selectivity * invariance)
        scores.append(
            NeuronScore(
                neuron=j, preferred_category=preferred,
                selectivity=selectivity, invariance=invariance, si=si, degenerate=False,
            )
        )
    return scores


def layer_si_summary(scores, top_fraction: float = 0.2) -> tuple[float, float]:
    """Mean of the top-fraction SI scores, plus the cutoff score of that group."""
    if not scores:
        raise InvalidArgumentError("no neuron scores")
    if not (0 < top_fraction <= 1):
        raise InvalidArgumentError(f"top_fraction must lie in (0, 1], got {top_fraction}")
    values = np.sort(np.array([s.si for s in scores]))[::-1]
    k = math.ceil(top_fraction * values.shape[0])
    return float(values[:k].mean()), float(values[k - 1])


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidArgumentError("pearson needs two equal-length 1-D arrays")
    if xs.shape[0] < 2:
        raise InvalidArgumentError("pearson needs at least 2 points")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance in pearson input")
    r = float((dx * dy).sum() / (sx * sy))
    return max(-1.0, min(1.0, r))


# Two-tailed 95% Student-t quantiles, df 1..30; beyond 30 the normal
# quantile is used.
_T_975 = [
    12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.3060, 2.2622,
    2.2281, 2.2010, 2.1788, 2.1604, 2.1448, 2.1314, 2.1199, 2.1098, 2.1009,
    2.0930, 2.0860, 2.0796, 2.0739, 2.0687, 2.0639, 2.0595, 2.0555, 2.0518,
    2.0484, 2.0452, 2.0423,
]
_Z_975 = 1.959964


def t_quantile_975(df: int) -> float:
    if df < 1:
        raise InvalidArgumentError(f"degrees of freedom must be >= 1, got {df}")
    if df <= len(_T_975):
        return _T_975[df - 1]
    return _Z_975


def mean_ci95(values) -> tuple[float, float]:
    """Mean and Student-t 95% half-width (t quantile tabulated for n <= 31)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise InvalidArgumentError("mean_ci95 needs at least 2 values")
    n = arr.shape[0]
    mean = float(arr.mean())
    std = float(arr.std(ddof=1))
    half = t_quantile_975(n - 1) * std / math.sqrt(n)
    return mean, half


def delta_frequency_table(outcomes) -> FrequencyTable:
    """Conditional improvement frequencies from (acc sign, si sign) records."""
    outcomes = list(outcomes)
    if not outcomes:
        raise InvalidArgumentError("no outcomes")
    for acc, si in outcomes:
        if acc not in ("+", "-") or si not in ("+", "-"):
            raise InvalidArgumentError(
                f"outcome signs must be '+' or '-', got ({acc!r}, {si!r})"
            )
    table = FrequencyTable(
        n_total=len(outcomes),
        n_acc_up=sum(1 for acc, _ in outcomes if acc == "+"),
        n_si_up=sum(1 for _, si in outcomes if si == "+"),
        n_acc_up_given_si_up=sum(1 for acc, si in outcomes if acc == "+" and si == "+"),
        n_acc_up_given_si_down=sum(1 for acc, si in outcomes if acc == "+" and si == "-"),
    )
    table.validate()
    return table


def pairwise_win_counts(results_a: dict, results_b: dict) -> WinCounts:
    """Strict per-cell comparison of two keyed accuracy maps; ties separate."""
    if set(results_a) != set(results_b):
        raise InvalidArgumentError("result keys do not align")
    if not results_a:
        raise InvalidArgumentError("no cells to compare")
    wins_a = wins_b = ties = 0
    for key in results_a:
        a, b = results_a[key], results_b[key]
        if a > b:
            wins_a += 1
        elif b > a:
            wins_b += 1
        else:
            ties += 1
    return WinCounts(wins_a, wins_b, ties)


def fraction_cell(numerator: int, denominator: int) -> str:
    """Table-style "75.0 (9/12)" rendering from raw counts, unreduced.

    Empty subgroups (zero denominator) render as "-".
    """
    if denominator == 0:
        return "-"
    pct = 100.0 * numerator / denominator
    return f"{pct:.1f} ({numerator}/{denominator})"


def frequency_table_csv_row(label: str, table: FrequencyTable) -> str:
    cells = [
        fraction_cell(table.n_acc_up, table.n_total),
        fraction_cell(table.n_si_up, table.n_total),
        fraction_cell(table.n_acc_up_given_si_up, table.n_si_up),
        fraction_cell(table.n_acc_up_given_si_down, table.n_total - table.n_si_up),
    ]
    return ",".join([label] + [f'"{c}"' for c in cells])


FREQUENCY_CSV_HEADER = (
    'approach,"P(acc+)","P(si+)","P(acc+|si+)","P(acc+|si-)"'
)


def si_report(params: ParamStore, spec: NetworkSpec, dataset: Dataset,
              batch_size: int = 256) -> dict:
    """Layer summary plus per-neuron scores as a JSON-ready dictionary."""
    table = activity_table(params, spec, dataset, batch_size=batch_size)
    scores = neuron_scores(table)
    summary, cutoff = layer_si_summary(scores)
    return {
        "layer": "probe",
        "table_source": "full_grid",
        "num_neurons": len(scores),
        "si_summary": summary,
        "si_top_group_cutoff": cutoff,
        "neurons": [
            {
                "neuron": s.neuron,
                "preferred_category": s.preferred_category,
                "selectivity": s.selectivity,
                "invariance": s.invariance,
                "si": s.si,
                "degenerate": s.degenerate,
            }
            for s in scores
        ],
    }


def save_si_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
