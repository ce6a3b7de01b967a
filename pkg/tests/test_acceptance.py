"""Acceptance suite: ten criteria, one printed PASS/FAIL line each.

Criteria 6 and 7 train real networks on the 5x5 grid-positions dataset and
dominate the runtime (roughly 45 minutes together on one core); everything
else finishes in seconds. Run with ``pytest tests/test_acceptance.py -v -s``
to watch the verdict lines as they come.
"""

import hashlib
import json
import math
import time
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from oodbench import cli
from oodbench.analysis import (
    ActivityTable,
    delta_frequency_table,
    frequency_table_csv_row,
    mean_ci95,
    neuron_scores,
    pairwise_win_counts,
    pearson,
    probe_activations,
    si_report,
)
from oodbench.datagen import GridSpec, generate_grid_positions, read_idx, write_idx
from oodbench.errors import FormatError, TrainingFailure
from oodbench.neuralcore import (
    bn_update_running,
    finite_difference_check,
    init_params,
    mini_resnet,
)
from oodbench.seeding import hash_seed
from oodbench.splits import diversity, partition, sample_combination_ladder
from oodbench.training import (
    TrainConfig,
    cross_entropy,
    invariance_loss,
    total_loss,
    train,
)

NET = mini_resnet((42, 42, 1), 5, channels=16, probe_width=64)
SIZES = dict(train_size=320, val_size=80, ood_size=200)
MASTER = 99


VERDICTS: list = []


def _verdict(n, ok, detail):
    line = f"CRITERION {n:02d}: {'PASS' if ok else 'FAIL'} - {detail}"
    VERDICTS.append(line)
    print(line, flush=True)
    assert ok, line


# -- shared trained models ----------------------------------------------------


@pytest.fixture(scope="module")
def grid_data():
    spec = GridSpec(5, 5, (3, 3), 14, 42, 40, noise_std=0.02)
    return generate_grid_positions(spec, seed=7)


def _split_for(grid_data, k, tag, degrees=(2, 3, 4)):
    ladder = sample_combination_ladder(5, 5, degrees, hash_seed(MASTER, "ladder", tag))
    label, combos, degree = ladder.levels[degrees.index(k)]
    assert degree == k
    split_seed = hash_seed(MASTER, "grid-positions", f"k{k}", tag)
    split = partition(
        grid_data, combos, SIZES["train_size"], SIZES["val_size"], SIZES["ood_size"],
        split_seed, level_label=label,
    )
    return split, split_seed


def _baseline_config(split_seed):
    return TrainConfig(
        learning_rate=0.001, epochs=60, batch_size=32,
        seed=hash_seed(split_seed, "baseline"),
    )


def _invariance_config(split_seed, lam):
    return TrainConfig(
        learning_rate=0.001, epochs=60, batch_size=32,
        invariance_weight=lam, pair_refresh_interval=20,
        approach_flags=frozenset({"invariance_loss"}),
        seed=hash_seed(split_seed, "invariance_loss"),
    )


@pytest.fixture(scope="module")
def trend_runs(grid_data):
    """Baseline runs for 3 seeds x k in {2, 3, 4}; k=3 results feed criterion 7.

    Training failures become sentinel entries instead of fixture errors so that
    criteria 6 and 7 still print their own FAIL verdicts.
    """
    runs = {}
    for i in range(3):
        for k in (2, 3, 4):
            split, split_seed = _split_for(grid_data, k, i)
            t0 = time.perf_counter()
            try:
                params, records = train(_baseline_config(split_seed), split, NET)
            except TrainingFailure as exc:
                runs[(i, k)] = SimpleNamespace(
                    failed=f"seed {i} k={k}: {exc}",
                    elapsed=time.perf_counter() - t0,
                )
                continue
            runs[(i, k)] = SimpleNamespace(
                failed=None,
                ind=records[-1].ind_val_accuracy,
                ood=records[-1].ood_accuracy,
                params=params,
                split=split,
                elapsed=time.perf_counter() - t0,
            )
    return runs


def _same_category_pair_distance(params, split):
    acts = probe_activations(params, NET, split.val.stacked_pixels())
    labels = np.array([it.category for it in split.val.items])
    total, count = 0.0, 0
    for c in range(5):
        idx = np.flatnonzero(labels == c)
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                total += float(np.linalg.norm(acts[idx[a]] - acts[idx[b]]))
                count += 1
    return total / count


@pytest.fixture(scope="module")
def invariance_runs(grid_data):
    """Tune lambda on a reserved split, then train the winner on the 3 seeds.

    A grid point whose reserved run never fits the training distribution is
    not an admissible winner: at this scale lambda=1.0 can land at 40% InD
    yet edge out working models on raw OoD argmax by noise. Admissibility
    uses the same health bar as the diversity-trend criterion (InD >= 0.90),
    falling back to plain argmax if nothing clears it. Failed runs are
    recorded (not raised) so criterion 7 owns the verdict.
    """
    t0 = time.perf_counter()
    reserved, reserved_seed = _split_for(grid_data, 3, "reserved")
    table = []
    for lam in (1.0, 0.1, 0.01):
        try:
            _, records = train(_invariance_config(reserved_seed, lam), reserved, NET)
        except TrainingFailure:
            table.append((lam, None, None))
            continue
        table.append((lam, records[-1].ind_val_accuracy, records[-1].ood_accuracy))

    def argmax_ood(rows):
        best = None
        for lam, _, ood in rows:
            if best is None or ood > best[1]:
                best = (lam, ood)
        return best

    admissible = [row for row in table if row[1] is not None and row[1] >= 0.90]
    finished = [row for row in table if row[1] is not None]
    best = argmax_ood(admissible) or argmax_ood(finished)
    best_lam = best[0] if best else None
    runs = {}
    if best_lam is not None:
        for i in range(3):
            split, split_seed = _split_for(grid_data, 3, i)
            try:
                params, _ = train(_invariance_config(split_seed, best_lam), split, NET)
            except TrainingFailure:
                params = None
            runs[i] = params
    return SimpleNamespace(
        chosen=best_lam, table=table, runs=runs,
        elapsed=time.perf_counter() - t0,
    )


# -- criteria -----------------------------------------------------------------


def test_criterion_01_split_invariants():
    t0 = time.perf_counter()
    checked = 0
    for n, degrees in ((9, (2, 4, 8)), (5, (2, 3, 4))):
        full = {(c, m) for c in range(n) for m in range(n)}
        for seed in range(100):
            ladder = sample_combination_ladder(n, n, degrees, seed)
            previous = None
            for (label, combos, k), want_k in zip(ladder.levels, degrees):
                assert k == want_k
                assert diversity(combos) == Fraction(k, n)
                per_cat = [0] * n
                per_cond = [0] * n
                for c, m in combos.pairs:
                    per_cat[c] += 1
                    per_cond[m] += 1
                assert per_cat == [k] * n and per_cond == [k] * n  # k-regular
                if previous is not None:
                    assert previous < combos.pairs  # strictly nested
                previous = combos.pairs
                ood = combos.complement()
                assert combos.pairs | ood == full
                assert not (combos.pairs & ood)
                checked += 1
    elapsed = time.perf_counter() - t0
    _verdict(
        1,
        elapsed < 5.0,
        f"{checked} ladder levels over 200 seeds verified in {elapsed:.2f}s (< 5s)",
    )


def test_criterion_02_gradient_correctness():
    rng = np.random.default_rng(hash_seed(MASTER, "gradcheck"))
    params = init_params(NET, seed=hash_seed(MASTER, "gradcheck-init"), dtype=np.float64)
    batch = rng.random((6, 42, 42, 1))
    labels = rng.integers(0, 5, size=3)
    lam = 0.1

    def loss_fn(trace):
        half = trace.logits.shape[0] // 2
        ce, ce_grad = cross_entropy(trace.logits[:half], labels)
        logit_grad = np.zeros_like(trace.logits)
        logit_grad[:half] = ce_grad
        inv, ga, gb = invariance_loss(trace.probe[:half], trace.probe[half:])
        probe_grad = lam * np.concatenate([ga, gb], axis=0)
        return total_loss(ce, inv, lam), logit_grad, probe_grad

    t0 = time.perf_counter()
    report = finite_difference_check(
        NET, params, batch, loss_fn, h=1e-4, tol=1e-4, coords_per_type=40,
        seed=hash_seed(MASTER, "gradcheck-coords"),
    )
    elapsed = time.perf_counter() - t0
    kinds = {layer.kind for layer in NET.layers}
    structural = {"conv", "batchnorm", "relu", "residual", "avgpool", "flatten", "dense"}
    ok = (
        report.passed
        and report.max_rel_err <= 1e-4
        and report.per_type_max.keys() >= {"conv", "batchnorm", "dense"}
        and kinds >= structural
        and elapsed < 60.0
    )
    _verdict(
        2,
        ok,
        f"max_rel_err {report.max_rel_err:.2e} over {report.checked} coords "
        f"({report.skipped_kinks} kink skips), combined CE + invariance objective, "
        f"{elapsed:.1f}s (< 60s)",
    )


def test_criterion_03_bn_momentum_semantics():
    running_mean = np.array([0.0, 3.0])
    running_var = np.array([1.0, 4.0])
    batch_mean = np.array([2.0, 1.0])
    batch_var = np.array([0.5, 2.0])

    m0, v0 = bn_update_running(running_mean, running_var, batch_mean, batch_var, 0.0)
    m1, v1 = bn_update_running(running_mean, running_var, batch_mean, batch_var, 1.0)
    m5, _ = bn_update_running(
        np.array([0.0]), np.array([1.0]), np.array([2.0]), np.array([1.0]), 0.5
    )
    ok = (
        np.max(np.abs(m0 - batch_mean)) <= 1e-12
        and np.max(np.abs(v0 - batch_var)) <= 1e-12
        and np.max(np.abs(m1 - running_mean)) <= 1e-12
        and np.max(np.abs(v1 - running_var)) <= 1e-12
        and abs(float(m5[0]) - 1.0) <= 1e-12
    )
    _verdict(
        3,
        ok,
        "beta=0 adopts batch stats, beta=1 keeps running stats, "
        "beta=0.5 maps (0, 2) -> 1.0, all within 1e-12",
    )


def _brute_force_si(cells):
    """Direct transcription of the scoring formulas, independent of the library."""
    c_count = len(cells)
    n_count = len(cells[0])
    sums = [sum(row) for row in cells]
    pref = sums.index(max(sums))
    row = cells[pref]
    a_hat = sum(row) / n_count
    rest = [v for c in range(c_count) if c != pref for v in cells[c]]
    a_bar = sum(rest) / ((c_count - 1) * n_count)
    s = 0.0 if a_hat + a_bar < 1e-12 else (a_hat - a_bar) / (a_hat + a_bar)
    i = 1.0 - (max(row) - min(row))
    return pref, s, i, math.sqrt(s * i)


def _table_of(values):
    arr = np.asarray(values, dtype=np.float64)
    j, c, n = arr.shape
    return ActivityTable(
        values=arr,
        raw_range=np.tile(np.array([0.0, 1.0]), (j, 1)),
        counts=np.ones((c, n), dtype=np.int64),
        degenerate=np.zeros(j, dtype=bool),
    )


def test_criterion_04_si_oracle_equivalence():
    rng = np.random.default_rng(hash_seed(MASTER, "si-oracle"))
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 10))
        n = int(rng.integers(2, 10))
        values = rng.random((1, c, n))
        (score,) = neuron_scores(_table_of(values))
        pref, s, i, si = _brute_force_si(values[0].tolist())
        assert score.preferred_category == pref
        worst = max(
            worst,
            abs(score.selectivity - s),
            abs(score.invariance - i),
            abs(score.si - si),
        )
    (hand,) = neuron_scores(_table_of([[[0.8, 0.4], [0.2, 0.2]]]))
    hand_ok = (
        abs(hand.selectivity - 0.5) < 1e-12
        and abs(hand.invariance - 0.6) < 1e-12
        and abs(hand.si - math.sqrt(0.30)) < 1e-12
    )
    _verdict(
        4,
        worst < 1e-12 and hand_ok,
        f"1000 random tables match the brute-force transcription "
        f"(worst abs diff {worst:.2e}); hand case -> (0.5, 0.6, sqrt(0.30))",
    )


def test_criterion_05_tabulation_fixtures():
    # Table 2: per-approach (acc sign, si sign) outcome counts over 12 cells
    fixtures = {
        "late_stopping": {("+", "+"): 5, ("-", "+"): 1, ("+", "-"): 4, ("-", "-"): 2},
        "tuned_bn": {("+", "+"): 8, ("-", "+"): 2, ("+", "-"): 1, ("-", "-"): 1},
        "invariance_loss": {("+", "+"): 10, ("-", "+"): 0, ("+", "-"): 1, ("-", "-"): 1},
    }
    expected_fractions = {
        "late_stopping": (Fraction(9, 12), Fraction(6, 12), Fraction(5, 6), Fraction(4, 6)),
        "tuned_bn": (Fraction(9, 12), Fraction(10, 12), Fraction(8, 10), Fraction(1, 2)),
        "invariance_loss": (
            Fraction(11, 12), Fraction(10, 12), Fraction(10, 10), Fraction(1, 2),
        ),
        "total": (Fraction(29, 36), Fraction(26, 36), Fraction(23, 26), Fraction(6, 10)),
    }
    expected_rows = {
        "late_stopping": 'late_stopping,"75.0 (9/12)","50.0 (6/12)","83.3 (5/6)","66.7 (4/6)"',
        "tuned_bn": 'tuned_bn,"75.0 (9/12)","83.3 (10/12)","80.0 (8/10)","50.0 (1/2)"',
        "invariance_loss": (
            'invariance_loss,"91.7 (11/12)","83.3 (10/12)","100.0 (10/10)","50.0 (1/2)"'
        ),
        "total": 'total,"80.6 (29/36)","72.2 (26/36)","88.5 (23/26)","60.0 (6/10)"',
    }
    all_outcomes = []
    for approach, cells in fixtures.items():
        outcomes = [pair for pair, count in cells.items() for _ in range(count)]
        all_outcomes.extend(outcomes)
        table = delta_frequency_table(outcomes)
        got = (
            table.p_acc_up,
            table.p_si_up,
            table.p_acc_up_given_si_up,
            table.p_acc_up_given_si_down,
        )
        assert got == expected_fractions[approach], approach
        assert frequency_table_csv_row(approach, table) == expected_rows[approach]
    total = delta_frequency_table(all_outcomes)
    assert (
        total.p_acc_up,
        total.p_si_up,
        total.p_acc_up_given_si_up,
        total.p_acc_up_given_si_down,
    ) == expected_fractions["total"]
    assert frequency_table_csv_row("total", total) == expected_rows["total"]

    # Table 1: per-dataset win patterns composing the three comparison rows
    best, together, base = {}, {}, {}

    def put(dataset, cell, b, t, bl):
        key = (dataset, cell)
        best[key], together[key], base[key] = b, t, bl

    for dataset in ("d1", "d3"):  # 3v0 / 1v2 / 3v0
        put(dataset, "k1", 0.9, 0.8, 0.7)
        put(dataset, "k2", 0.9, 0.6, 0.7)
        put(dataset, "k3", 0.9, 0.6, 0.7)
    put("d2", "k1", 0.9, 0.8, 0.5)  # 2v1 / 1v2 / 2v1
    put("d2", "k2", 0.4, 0.5, 0.6)
    put("d2", "k3", 0.9, 0.3, 0.5)
    put("d4", "k1", 0.9, 0.95, 0.5)  # 3v0 / 2v1 / 1v2
    put("d4", "k2", 0.9, 0.95, 0.5)
    put("d4", "k3", 0.9, 0.4, 0.5)

    assert pairwise_win_counts(best, base) == (11, 1, 0)
    assert pairwise_win_counts(together, base) == (5, 7, 0)
    assert pairwise_win_counts(best, together) == (9, 3, 0)
    for dataset, wins in (("d1", (3, 0)), ("d2", (2, 1)), ("d3", (3, 0)), ("d4", (3, 0))):
        sub_best = {key: v for key, v in best.items() if key[0] == dataset}
        sub_base = {key: v for key, v in base.items() if key[0] == dataset}
        counts = pairwise_win_counts(sub_best, sub_base)
        assert (counts.wins_a, counts.wins_b) == wins
    _verdict(
        5,
        True,
        "Table 2 rows exact (unreduced rationals, incl. total) and Table 1 "
        "win counts 11v1 / 5v7 / 9v3 with per-dataset patterns",
    )


@pytest.mark.slow
def test_criterion_06_diversity_trend(trend_runs):
    failures = [run.failed for run in trend_runs.values() if run.failed]
    if failures:
        _verdict(6, False, "training failed without recovery: " + "; ".join(failures))
    ind = {k: np.mean([trend_runs[(i, k)].ind for i in range(3)]) for k in (2, 3, 4)}
    ood = {k: np.mean([trend_runs[(i, k)].ood for i in range(3)]) for k in (2, 3, 4)}
    per_seed = [sum(trend_runs[(i, k)].elapsed for k in (2, 3, 4)) for i in range(3)]
    ok = (
        all(ind[k] >= 0.90 for k in (2, 3, 4))
        and (ind[2] - ood[2]) >= 0.15
        and ood[2] <= ood[3] + 0.03
        and ood[3] <= ood[4] + 0.03
        and max(per_seed) <= 15 * 60
    )
    _verdict(
        6,
        ok,
        f"mean InD {ind[2]:.3f}/{ind[3]:.3f}/{ind[4]:.3f}, "
        f"mean OoD {ood[2]:.3f}/{ood[3]:.3f}/{ood[4]:.3f} for k=2/3/4; "
        f"k=2 gap {ind[2] - ood[2]:.3f} (>= 0.15); slowest seed "
        f"{max(per_seed) / 60:.1f} min (<= 15)",
    )


@pytest.mark.slow
def test_criterion_07_invariance_effect(grid_data, trend_runs, invariance_runs):
    missing = [f"seed {i}" for i in range(3)
               if trend_runs[(i, 3)].failed or invariance_runs.runs.get(i) is None]
    if invariance_runs.chosen is None or missing:
        _verdict(
            7, False,
            f"runs unavailable (tuning table {invariance_runs.table}, "
            f"missing: {', '.join(missing) or 'none'})",
        )
    base_dist, inv_dist, si_pairs = [], [], []
    for i in range(3):
        split = trend_runs[(i, 3)].split
        base_params = trend_runs[(i, 3)].params
        inv_params = invariance_runs.runs[i]
        base_dist.append(_same_category_pair_distance(base_params, split))
        inv_dist.append(_same_category_pair_distance(inv_params, split))
        si_pairs.append((
            si_report(inv_params, NET, grid_data)["si_summary"],
            si_report(base_params, NET, grid_data)["si_summary"],
        ))
    si_wins = sum(inv > base for inv, base in si_pairs)
    ratio = float(np.mean(inv_dist)) / float(np.mean(base_dist))
    minutes = invariance_runs.elapsed / 60
    tuning = ", ".join(
        f"{lam}: " + ("failed" if ind is None else f"ind {ind:.2f} ood {ood:.2f}")
        for lam, ind, ood in invariance_runs.table
    )
    si_text = " ".join(f"{inv:.3f}v{base:.3f}" for inv, base in si_pairs)
    ok = ratio <= 0.5 and si_wins >= 2 and minutes <= 45
    _verdict(
        7,
        ok,
        f"lambda={invariance_runs.chosen} (reserved: {tuning}); pair-distance "
        f"ratio {ratio:.3f} (<= 0.5); SI higher in {si_wins}/3 seeds "
        f"[{si_text}] (>= 2); {minutes:.1f} min (<= 45)",
    )


def test_criterion_08_statistics():
    mean, half = mean_ci95([0, 0, 0, 0, 1])
    x = np.array([0.0, 1.0, 2.0, 5.0, -3.0])
    ok = (
        abs(mean - 0.2) < 1e-12
        and abs(half - 0.5552) <= 1e-3
        and abs(pearson(x, 2.0 * x + 1.0) - 1.0) <= 1e-12
        and abs(pearson(x, -3.0 * x + 0.5) + 1.0) <= 1e-12
    )
    _verdict(
        8,
        ok,
        f"mean_ci95 half-width {half:.4f} (0.5552 +/- 1e-3, t4=2.7764); "
        "pearson exact +/-1 on linear data",
    )


def _tree_hashes(root):
    hashes = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            hashes[str(path.relative_to(root))] = hashlib.sha256(
                path.read_bytes()
            ).hexdigest()
    return hashes


def test_criterion_09_reproducibility(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OODBENCH_DETERMINISTIC", "1")
    doc = {
        "data": {
            "num_categories": 3, "num_conditions": 3, "cell_grid": [3, 3],
            "glyph_size": 8, "canvas_size": 24, "samples_per_combination": 6,
            "noise_std": 0.02, "seed": 42,
        },
        "split": {
            "degrees": [2], "level": 0,
            "train_size": 24, "val_size": 6, "ood_size": 12, "seed": 13,
        },
        "network": {"channels": 4, "probe_width": 8},
        "train": {"learning_rate": 0.01, "epochs": 2, "batch_size": 16, "seed": 3},
        "experiment": {"n_trials": 2, "grid": "fast", "dataset_id": "tiny"},
    }
    config = tmp_path / "config.json"
    config.write_text(json.dumps(doc))
    data_dir = str(tmp_path / "data")
    split_dir = str(tmp_path / "split")
    assert cli.main(["gen-data", "--config", str(config), "--out", data_dir]) == 0
    assert cli.main(["split", "--config", str(config), "--out", split_dir,
                     "--data", data_dir]) == 0

    for run in ("a", "b"):
        assert cli.main(["train", "--config", str(config),
                         "--out", str(tmp_path / f"train_{run}"),
                         "--split", split_dir]) == 0
    train_a = _tree_hashes(tmp_path / "train_a")
    train_b = _tree_hashes(tmp_path / "train_b")

    for run in ("a", "b"):
        assert cli.main(["run-matrix", "--config", str(config),
                         "--out", str(tmp_path / f"matrix_{run}"),
                         "--data", data_dir, "--approach", "baseline"]) == 0
    matrix_a = _tree_hashes(tmp_path / "matrix_a")
    matrix_b = _tree_hashes(tmp_path / "matrix_b")
    capsys.readouterr()

    ok = train_a == train_b and matrix_a == matrix_b
    _verdict(
        9,
        ok,
        f"train ({len(train_a)} files) and run-matrix ({len(matrix_a)} files) "
        "repeat byte-identically under OODBENCH_DETERMINISTIC=1",
    )


def test_criterion_10_idx_round_trip(tmp_path):
    rng = np.random.default_rng(hash_seed(MASTER, "idx"))
    cases = 0
    for shape in [(20,), (7, 5), (6, 9, 4), (3, 2, 5, 4), (0, 5, 5), (0,)]:
        arr = rng.integers(0, 256, size=shape).astype(np.uint8)
        path = tmp_path / f"case{cases}.idx"
        write_idx(path, arr)
        back = read_idx(path)
        assert back.shape == arr.shape and back.dtype == np.uint8
        assert np.array_equal(back, arr)
        cases += 1
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x12\x34\x08\x01\x00\x00\x00\x02\x00\x00")
    try:
        read_idx(bad)
        rejected = False
    except FormatError:
        rejected = True
    _verdict(
        10,
        rejected,
        f"{cases} randomized IDX files (incl. zero-record) round-trip bit-exactly; "
        "malformed magic raises the format error",
    )
