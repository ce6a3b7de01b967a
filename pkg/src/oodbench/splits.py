"""Bias-controlled split machinery.

A combination set I is a subset of the category x condition grid; training
data is drawn only from I, the OoD test set only from its complement. Sets
are built as unions of disjoint random permutation matrices, which makes
coverage and k-regularity exact and makes nested diversity ladders trivial
(a level of degree k is the union of the first k matrices).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .datagen import Dataset, load_dataset, save_dataset
from .errors import CapacityError, InvalidArgumentError

LEVEL_LABELS = ("low", "medium", "high")


@dataclass(frozen=True)
class CombinationSet:
    pairs: frozenset[tuple[int, int]]
    num_categories: int
    num_conditions: int

    def validate(self, allow_full: bool = True):
        if not self.pairs:
            raise InvalidArgumentError("combination set is empty")
        cats = {c for c, _ in self.pairs}
        conds = {n for _, n in self.pairs}
        for c, n in self.pairs:
            if not (0 <= c < self.num_categories and 0 <= n < self.num_conditions):
                raise InvalidArgumentError(f"pair {(c, n)} outside the grid")
        if cats != set(range(self.num_categories)):
            raise InvalidArgumentError("some category never appears in the combination set")
        if conds != set(range(self.num_conditions)):
            raise InvalidArgumentError("some condition never appears in the combination set")
        full = self.num_categories * self.num_conditions
        if not allow_full and len(self.pairs) >= full:
            raise InvalidArgumentError("combination set covers the full grid")

    def complement(self) -> frozenset[tuple[int, int]]:
        full = {
            (c, n)
            for c in range(self.num_categories)
            for n in range(self.num_conditions)
        }
        return frozenset(full - self.pairs)


@dataclass(frozen=True)
class CombinationLadder:
    """Nested combination sets, one per diversity level."""

    levels: tuple[tuple[str, CombinationSet, int], ...]

    def level(self, label: str) -> CombinationSet:
        for name, combos, _ in self.levels:
            if name == label:
                return combos
        raise InvalidArgumentError(f"no ladder level {label!r}")

    def degrees(self) -> list[int]:
        return [k for _, _, k in self.levels]


@dataclass
class SplitBundle:
    train: Dataset
    val: Dataset
    ood: Dataset
    combos: CombinationSet
    ladder_level: str
    seed: int

    def validate(self):
        self.combos.validate()
        for ds in (self.train, self.val, self.ood):
            ds.validate()
            if (
                ds.num_categories != self.combos.num_categories
                or ds.num_conditions != self.combos.num_conditions
            ):
                raise InvalidArgumentError("split dataset grid does not match combos")
        for name, ds in (("train", self.train), ("val", self.val)):
            for item in ds.items:
                if (item.category, item.condition) not in self.combos.pairs:
                    raise InvalidArgumentError(
                        f"{name} item labeled {(item.category, item.condition)} "
                        "lies outside the InD combination set"
                    )
        complement = self.combos.complement()
        for item in self.ood.items:
            if (item.category, item.condition) not in complement:
                raise InvalidArgumentError(
                    f"ood item labeled {(item.category, item.condition)} "
                    "lies inside the InD combination set"
                )


def diversity(combos: CombinationSet) -> Fraction:
    """Exact fraction of grid combinations included in the set."""
    combos.validate()
    return Fraction(len(combos.pairs), combos.num_categories * combos.num_conditions)


def _sample_disjoint_permutation(rng: np.random.Generator, used_conditions, n: int):
    """One permutation of range(n) avoiding ``used_conditions[c]`` per category.

    Backtracking with randomized value order; the remaining bipartite graph is
    regular, so a solution always exists while fewer than n permutations have
    been taken.
    """
    perm = [-1] * n
    taken = [False] * n
    choices = []
    for c in range(n):
        options = [v for v in range(n) if v not in used_conditions[c]]
        rng.shuffle(options)
        choices.append(options)

    def assign(c: int) -> bool:
        if c == n:
            return True
        for v in choices[c]:
            if not taken[v]:
                perm[c] = v
                taken[v] = True
                if assign(c + 1):
                    return True
                taken[v] = False
                perm[c] = -1
        return False

    if not assign(0):
        raise InvalidArgumentError("no disjoint permutation remains")
    return perm


def sample_combination_ladder(
    num_categories: int, num_conditions: int, degrees, seed: int
) -> CombinationLadder:
    """Sample a nested ladder of k-regular combination sets.

    Each level of degree k is the union of the first k of a random sequence of
    mutually disjoint permutation matrices, so every category and condition
    appears exactly k times and lower levels are strict subsets of higher ones.
    """
    if num_categories != num_conditions:
        raise InvalidArgumentError(
            f"only square grids are supported, got {num_categories}x{num_conditions}"
        )
    n = num_categories
    degrees = list(degrees)
    if not degrees or len(degrees) > len(LEVEL_LABELS):
        raise InvalidArgumentError("degrees must list 1 to 3 ascending values")
    if any(degrees[i] >= degrees[i + 1] for i in range(len(degrees) - 1)):
        raise InvalidArgumentError(f"degrees must be strictly increasing, got {degrees}")
    # k = n would cover the full grid and leave no OoD complement.
    if degrees[0] < 1 or degrees[-1] >= n:
        raise InvalidArgumentError(f"degrees must lie in [1, {n - 1}], got {degrees}")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), n, *degrees]))
    used = [set() for _ in range(n)]
    perms = []
    for _ in range(degrees[-1]):
        perm = _sample_disjoint_permutation(rng, used, n)
        perms.append(perm)
        for c, v in enumerate(perm):
            used[c].add(v)

    levels = []
    for label, k in zip(LEVEL_LABELS, degrees):
        pairs = frozenset((c, perm[c]) for perm in perms[:k] for c in range(n))
        combos = CombinationSet(pairs=pairs, num_categories=n, num_conditions=n)
        combos.validate()
        levels.append((label, combos, k))
    return CombinationLadder(levels=tuple(levels))


def _stratified_take(rng, strata: dict, quota: int, name: str):
    """Draw ``quota`` items across strata with per-stratum counts within 1.

    ``strata`` maps (c, n) -> list of item indices still available; drawn
    indices are removed so later calls stay disjoint.
    """
    keys = sorted(strata.keys())
    if quota == 0:
        return []
    if not keys:
        raise CapacityError(name, quota, 0)
    base, extra = divmod(quota, len(keys))
    bonus = set(rng.choice(len(keys), size=extra, replace=False).tolist()) if extra else set()
    taken = []
    for ki, key in enumerate(keys):
        want = base + (1 if ki in bonus else 0)
        pool = strata[key]
        if len(pool) < want:
            raise CapacityError(key, want, len(pool))
        pick = rng.choice(len(pool), size=want, replace=False)
        pick = sorted(pick.tolist(), reverse=True)
        for p in pick:
            taken.append(pool.pop(p))
    return taken


def partition(
    dataset: Dataset,
    combos: CombinationSet,
    train_size: int,
    val_size: int,
    ood_size: int,
    seed: int,
    level_label: str = "",
) -> SplitBundle:
    """Stratified InD train/val + OoD split.

    Train and val are sampled without replacement from items whose label pair
    is in ``combos``; the OoD set only from complement pairs. Within each
    split the per-combination counts differ by at most one.
    """
    combos.validate()
    if dataset.num_categories != combos.num_categories or dataset.num_conditions != combos.num_conditions:
        raise InvalidArgumentError("dataset grid does not match the combination set")
    if min(train_size, val_size, ood_size) < 0:
        raise InvalidArgumentError("split sizes must be >= 0")

    in_strata: dict = {pair: [] for pair in combos.pairs}
    out_strata: dict = {pair: [] for pair in combos.complement()}
    for idx, item in enumerate(dataset.items):
        key = (item.category, item.condition)
        if key in in_strata:
            in_strata[key].append(idx)
        elif key in out_strata:
            out_strata[key].append(idx)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), len(combos.pairs)]))
    train_idx = _stratified_take(rng, in_strata, train_size, "train")
    val_idx = _stratified_take(rng, in_strata, val_size, "val")
    ood_idx = _stratified_take(rng, out_strata, ood_size, "ood")

    def subset(indices):
        return Dataset(
            items=[dataset.items[i] for i in sorted(indices)],
            num_categories=dataset.num_categories,
            num_conditions=dataset.num_conditions,
            provenance=dataset.provenance,
        )

    return SplitBundle(
        train=subset(train_idx),
        val=subset(val_idx),
        ood=subset(ood_idx),
        combos=combos,
        ladder_level=level_label,
        seed=int(seed),
    )


def save_split_bundle(bundle: SplitBundle, directory, degrees=None):
    """Persist the three datasets plus a split.json audit record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_dataset(bundle.train, directory / "train")
    save_dataset(bundle.val, directory / "val")
    save_dataset(bundle.ood, directory / "ood")
    record = {
        "seed": bundle.seed,
        "ladder_level": bundle.ladder_level,
        "degrees": list(degrees) if degrees is not None else None,
        "construction": "disjoint-permutation-union (balanced-regular)",
        "diversity": str(diversity(bundle.combos)),
        "pairs": sorted(list(p) for p in bundle.combos.pairs),
        "num_categories": bundle.combos.num_categories,
        "num_conditions": bundle.combos.num_conditions,
    }
    with open(directory / "split.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def load_split_bundle(directory) -> SplitBundle:
    directory = Path(directory)
    with open(directory / "split.json", encoding="utf-8") as f:
        record = json.load(f)
    combos = CombinationSet(
        pairs=frozenset((int(c), int(n)) for c, n in record["pairs"]),
        num_categories=int(record["num_categories"]),
        num_conditions=int(record["num_conditions"]),
    )
    return SplitBundle(
        train=load_dataset(directory / "train"),
        val=load_dataset(directory / "val"),
        ood=load_dataset(directory / "ood"),
        combos=combos,
        ladder_level=record.get("ladder_level", ""),
        seed=int(record["seed"]),
    )
