"""Cohort construction: common cohort, LOS matching, missingness balancing,
and the five OOD-mitigated train/validation/test splits.

All sampling here is subset-only (nothing duplicated or fabricated), seeded,
and patient-disjoint across partitions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .ehr import PatientStay
from .featurize import FeatureVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CohortSplit:
    """One train/validation/test partition over stay ids, patient-disjoint."""

    split_id: int
    seed: int
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]

    def __post_init__(self) -> None:
        if self.train & self.validation or self.train & self.test or self.validation & self.test:
            raise ValueError("split partitions must be disjoint")


def build_common_cohort(iri_stay_ids: set[str], vap_stay_ids: set[str]) -> set[str]:
    """Stays usable by both models. Warns (does not fail) when empty."""
    common = set(iri_stay_ids) & set(vap_stay_ids)
    if not common:
        logger.warning("common cohort is empty: the model cohorts do not overlap")
    return common


@dataclass(frozen=True)
class MatchResult:
    retained_controls: list[PatientStay]
    target_total: int
    #: bin lower edge (hours) -> controls wanted but unavailable
    shortfall_by_bin: Mapping[float, int]


def _los_bin(stay: PatientStay, width: float) -> int:
    return int(stay.los_hours // width)


def match_los(
    cases: Sequence[PatientStay],
    controls: Sequence[PatientStay],
    bin_width_hours: float = 24.0,
    seed: int = 0,
    target_total: Optional[int] = None,
    shortfall_tolerance: float = 0.01,
) -> MatchResult:
    """Subsample controls so their LOS histogram is proportional to the cases'.

    Per bin, the retained count is round(case-bin share x target_total),
    sampled uniformly without replacement; bins with too few controls are
    filled as far as possible and the shortfall reported. When target_total
    is not given, it is the largest total whose overall shortfall fraction
    stays within shortfall_tolerance, so a sparse tail bin costs a few
    reported stays instead of collapsing the whole matched cohort.
    """
    if bin_width_hours <= 0:
        raise ValueError("bin width must be positive")
    if not cases:
        raise ValueError("no case stays to match against")
    if not controls:
        raise ValueError("no control stays to subsample")

    case_counts: dict[int, int] = {}
    for stay in cases:
        b = _los_bin(stay, bin_width_hours)
        case_counts[b] = case_counts.get(b, 0) + 1
    control_bins: dict[int, list[PatientStay]] = {}
    for stay in sorted(controls, key=lambda s: s.stay_id):
        control_bins.setdefault(_los_bin(stay, bin_width_hours), []).append(stay)

    n_cases = len(cases)

    def shortfall_at(total: int) -> int:
        missing = 0
        for b, count in case_counts.items():
            wanted = int(round(count / n_cases * total))
            missing += max(0, wanted - len(control_bins.get(b, [])))
        return missing

    if target_total is None:
        lo, hi = 0, len(controls)
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if shortfall_at(mid) <= shortfall_tolerance * mid:
                lo = mid
            else:
                hi = mid - 1
        target_total = lo

    rng = np.random.default_rng(seed)
    retained: list[PatientStay] = []
    shortfall: dict[float, int] = {}
    for b in sorted(case_counts):
        share = case_counts[b] / n_cases
        wanted = int(round(share * target_total))
        pool = control_bins.get(b, [])
        take = min(wanted, len(pool))
        if take < wanted:
            shortfall[b * bin_width_hours] = wanted - take
        if take:
            picked = rng.choice(len(pool), size=take, replace=False)
            retained.extend(pool[i] for i in sorted(picked))
    retained.sort(key=lambda s: s.stay_id)
    return MatchResult(retained, target_total, dict(sorted(shortfall.items())))


@dataclass(frozen=True)
class BalanceResult:
    samples: list[FeatureVector]
    labels: list[bool]
    rate_positive: float
    rate_negative: float
    removed: int


def _anchor_rate(samples: Sequence[FeatureVector], anchor: str) -> float:
    return sum(1 for fv in samples if fv.missing_mask[anchor]) / len(samples)


def _removal_plan(
    target_class: Sequence[FeatureVector],
    anchor: str,
    stratum_missing: bool,
    other_rate: float,
) -> tuple[int, float]:
    """Best integer removal count from one stratum and the gap it achieves.

    Removing anchor-present samples raises the class's missingness rate;
    removing anchor-missing samples lowers it. The class always keeps at
    least one sample of the untouched stratum.
    """
    n = len(target_class)
    n_missing = sum(1 for fv in target_class if fv.missing_mask[anchor])
    stratum_size = n_missing if stratum_missing else n - n_missing

    def achieved(x: int) -> float:
        kept = n - x
        missing = n_missing - x if stratum_missing else n_missing
        return missing / kept if kept else 1.0

    if stratum_missing:
        # (n_missing - x) / (n - x) = other_rate
        exact = (n_missing - other_rate * n) / (1.0 - other_rate) if other_rate < 1.0 else 0.0
    else:
        # n_missing / (n - x) = other_rate
        exact = n - n_missing / other_rate if other_rate > 0.0 else 0.0

    base = int(np.floor(exact))
    max_x = min(stratum_size, n - 1)  # the class must survive
    best_x, best_gap = 0, abs(achieved(0) - other_rate)
    for x in range(max(base - 2, 0), min(base + 3, max_x) + 1):
        gap = abs(achieved(x) - other_rate)
        if gap < best_gap:
            best_x, best_gap = x, gap
    return best_x, best_gap


def balance_missingness(
    samples: Sequence[FeatureVector],
    labels: Sequence[bool],
    anchor_feature: str,
    seed: int = 0,
    epsilon: float = 0.01,
    direction: str = "auto",
) -> BalanceResult:
    """Equalize the anchor feature's missingness rate between classes.

    direction="raise_lower" removes anchor-present samples from the class
    with the lower missingness rate, raising it to meet the higher one;
    direction="lower_higher" removes anchor-missing samples from the
    higher-rate class instead. The default "auto" picks, among the directions
    that can reach epsilon, the one that keeps the most positive samples
    (ties favor raise_lower), so balancing never decimates a rare positive
    class just because its anchor happens to be well observed. Removal is
    uniform at random within the chosen stratum and never empties a class.
    """
    if len(samples) != len(labels):
        raise ValueError("samples and labels must align")
    if samples and anchor_feature not in samples[0].missing_mask:
        raise ValueError(f"anchor feature {anchor_feature!r} not in the catalog")
    pos = [fv for fv, y in zip(samples, labels) if y]
    neg = [fv for fv, y in zip(samples, labels) if not y]
    if not pos or not neg:
        raise ValueError("both classes must be non-empty")

    rate_pos = _anchor_rate(pos, anchor_feature)
    rate_neg = _anchor_rate(neg, anchor_feature)
    if rate_pos >= 1.0 or rate_neg >= 1.0:
        raise ValueError(
            f"anchor {anchor_feature!r} is missing in every sample of one class; "
            "rates cannot be balanced by subsampling"
        )
    if abs(rate_pos - rate_neg) <= epsilon:
        return BalanceResult(list(samples), list(labels), rate_pos, rate_neg, 0)

    lower_is_pos = rate_pos < rate_neg
    low_class, low_rate = (pos, rate_pos) if lower_is_pos else (neg, rate_neg)
    high_class, high_rate = (neg, rate_neg) if lower_is_pos else (pos, rate_pos)

    plans: dict[str, tuple[Sequence[FeatureVector], bool, int, float]] = {}
    x, gap = _removal_plan(low_class, anchor_feature, False, high_rate)
    plans["raise_lower"] = (low_class, False, x, gap)
    x, gap = _removal_plan(high_class, anchor_feature, True, low_rate)
    plans["lower_higher"] = (high_class, True, x, gap)

    if direction == "auto":
        def positives_kept(name: str) -> int:
            target, _, x, _ = plans[name]
            return len(pos) - (x if target is pos else 0)

        feasible = [d for d in ("raise_lower", "lower_higher") if plans[d][3] <= epsilon]
        if not feasible:
            best = min(plans.values(), key=lambda p: p[3])
            raise ValueError(
                f"cannot balance {anchor_feature!r} missingness within epsilon={epsilon}: "
                f"best achievable gap {best[3]:.4f}"
            )
        chosen = max(feasible, key=positives_kept)  # max() keeps the first on ties
    elif direction in plans:
        chosen = direction
        if plans[chosen][3] > epsilon:
            raise ValueError(
                f"cannot balance {anchor_feature!r} missingness within epsilon={epsilon} "
                f"using direction={direction!r}: best achievable gap {plans[chosen][3]:.4f}"
            )
    else:
        raise ValueError(f"unknown direction {direction!r}")

    target_class, stratum_missing, best_x, _ = plans[chosen]
    stratum = [fv for fv in target_class if fv.missing_mask[anchor_feature] == stratum_missing]

    rng = np.random.default_rng(seed)
    order_idx = np.argsort([fv.sample_id for fv in stratum], kind="stable")
    removable = [stratum[i] for i in order_idx]
    drop_idx = (
        set(rng.choice(len(removable), size=best_x, replace=False).tolist()) if best_x else set()
    )
    dropped_ids = {removable[i].sample_id for i in drop_idx}

    kept_samples, kept_labels = [], []
    target_is_pos = target_class is pos
    for fv, y in zip(samples, labels):
        if (y is True) == target_is_pos and fv.sample_id in dropped_ids:
            continue
        kept_samples.append(fv)
        kept_labels.append(y)

    new_pos = [fv for fv, y in zip(kept_samples, kept_labels) if y]
    new_neg = [fv for fv, y in zip(kept_samples, kept_labels) if not y]
    return BalanceResult(
        kept_samples,
        kept_labels,
        _anchor_rate(new_pos, anchor_feature),
        _anchor_rate(new_neg, anchor_feature),
        best_x,
    )


def split_with_ood_mitigation(
    model_cohort: set[str],
    common_cohort: set[str],
    stays_by_id: Mapping[str, PatientStay],
    fractions: tuple[float, float] = (0.8, 0.2),
    seed: int = 0,
    split_id: int = 1,
) -> CohortSplit:
    """Build one patient-disjoint split with 1/5 of the common cohort folded
    into training and the remaining 4/5 held out as the test set.

    Partitioning happens at the patient level; each selected patient
    contributes all of their cohort stays to one partition.
    """
    if sum(fractions) > 1.0 + 1e-9:
        raise ValueError("train/validation fractions must sum to at most 1")
    universe = set(model_cohort) | set(common_cohort)

    common_patients = sorted({stays_by_id[sid].patient_id for sid in common_cohort})
    if len(common_patients) < 5:
        raise ValueError(
            f"common cohort has {len(common_patients)} patients; at least 5 required"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(common_patients))
    n_to_train = len(common_patients) // 5
    train_common = {common_patients[i] for i in perm[:n_to_train]}
    test_patients = {common_patients[i] for i in perm[n_to_train:]}

    remaining = sorted(
        {stays_by_id[sid].patient_id for sid in model_cohort}
        - set(common_patients)
    )
    perm2 = rng.permutation(len(remaining))
    n_train = int(round(fractions[0] * len(remaining)))
    n_val = min(int(round(fractions[1] * len(remaining))), len(remaining) - n_train)
    train_patients = {remaining[i] for i in perm2[:n_train]} | train_common
    val_patients = {remaining[i] for i in perm2[n_train : n_train + n_val]}

    def stays_of(patients: set[str], pool: set[str]) -> frozenset[str]:
        return frozenset(sid for sid in pool if stays_by_id[sid].patient_id in patients)

    return CohortSplit(
        split_id=split_id,
        seed=seed,
        train=stays_of(train_patients, universe),
        validation=stays_of(val_patients, universe),
        test=stays_of(test_patients, common_cohort),
    )


def repeat_splits(
    model_cohort: set[str],
    common_cohort: set[str],
    stays_by_id: Mapping[str, PatientStay],
    n: int = 5,
    base_seed: int = 0,
    fractions: tuple[float, float] = (0.8, 0.2),
) -> list[CohortSplit]:
    """n splits from deterministically derived child seeds."""
    child_seeds = [
        int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(base_seed).spawn(n)
    ]
    return [
        split_with_ood_mitigation(
            model_cohort, common_cohort, stays_by_id, fractions, child_seeds[i], split_id=i + 1
        )
        for i in range(n)
    ]


def split_to_manifest(split: CohortSplit) -> list[dict]:
    """JSONL-ready rows: one per stay with its partition assignment."""
    rows = []
    for partition in ("train", "validation", "test"):
        for stay_id in sorted(getattr(split, partition)):
            rows.append(
                {
                    "split_id": split.split_id,
                    "seed": split.seed,
                    "partition": partition,
                    "stay_id": stay_id,
                }
            )
    return rows


def splits_from_manifest(rows: Sequence[Mapping]) -> list[CohortSplit]:
    grouped: dict[int, dict] = {}
    for row in rows:
        entry = grouped.setdefault(
            int(row["split_id"]),
            {"seed": int(row["seed"]), "train": set(), "validation": set(), "test": set()},
        )
        entry[row["partition"]].add(str(row["stay_id"]))
    return [
        CohortSplit(
            split_id=sid,
            seed=entry["seed"],
            train=frozenset(entry["train"]),
            validation=frozenset(entry["validation"]),
            test=frozenset(entry["test"]),
        )
        for sid, entry in sorted(grouped.items())
    ]
