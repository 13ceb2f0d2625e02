"""Turn fitted Bernoulli means into track labels, localizations, and scores.

Track classification is an argmax over a concept's factor range, with a
configurable background threshold on the winning mean (a Bernoulli mean below
0.5 says the factor is more likely absent). Localization selects the track
maximizing the product of the tuple's means. Without real video geometry,
localization quality is scored as the rate at which the selected track's
planted labels match the tuple, rather than by box overlap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .types import (
    ACTION,
    SUBJECT,
    ConceptSpace,
    Dataset,
    LabelTuple,
    ValidationError,
    VariationalState,
    dedup_labels,
)

DEFAULT_THETA_BG = 0.5


@dataclass
class DecodedBag:
    """Per-track labels (None = background) and the selected track per tuple."""

    track_subject_labels: list[Optional[int]]
    track_action_labels: list[Optional[int]]
    localization: dict[LabelTuple, int]


@dataclass
class MetricsReport:
    """Classification, ranking, and localization quality against ground truth.

    Accuracies are fractions of tracks; pairwise accuracy is evaluated only
    on tracks whose planted subject and action are both non-background.
    ``mean_average_precision`` and ``per_class`` are keyed by concept, with
    background excluded from ranking metrics.
    """

    subject_accuracy: float
    action_accuracy: float
    pairwise_accuracy: float
    mean_average_precision: dict[str, float]
    localization_hit_rate: float
    per_class: dict[str, dict[int, dict[str, float]]]


def _concept_range(space: ConceptSpace, concept: str) -> range:
    return space.subject_factors() if concept == SUBJECT else space.action_factors()


def _decode_concept(nu_bag: np.ndarray, factors: range, theta_bg: float) -> list[Optional[int]]:
    out: list[Optional[int]] = []
    if len(factors) == 0:
        return [None] * nu_bag.shape[0]
    block = nu_bag[:, factors.start:factors.stop]
    for row in block:
        win = int(np.argmax(row))  # argmax takes the lowest index on ties
        if row[win] == 0.0 or row[win] < theta_bg:
            out.append(None)
        else:
            out.append(win)
    return out


def decode_tracks(
    state: VariationalState,
    bag_index: int,
    space: ConceptSpace,
    theta_bg: float = DEFAULT_THETA_BG,
) -> tuple[list[Optional[int]], list[Optional[int]]]:
    """Per-track (subject, action) class labels for one bag; None = background."""
    nu_bag = state.nu_bag(bag_index)
    subjects = _decode_concept(nu_bag, _concept_range(space, SUBJECT), theta_bg)
    actions = _decode_concept(nu_bag, _concept_range(space, ACTION), theta_bg)
    return subjects, actions


def localize(
    state: VariationalState,
    bag_index: int,
    tup: LabelTuple,
    space: ConceptSpace,
    bag_labels: Sequence[LabelTuple],
) -> int:
    """Index of the track best witnessing a label tuple (ties -> lowest index)."""
    if tup not in list(bag_labels):
        raise ValidationError(f"tuple {tup} is not among the bag's labels")
    nu_bag = state.nu_bag(bag_index)
    if tup.is_pair:
        scores = nu_bag[:, space.subject_factor(tup.subject)] * nu_bag[:, space.action_factor(tup.action)]
    elif tup.subject is not None:
        scores = nu_bag[:, space.subject_factor(tup.subject)]
    else:
        scores = nu_bag[:, space.action_factor(tup.action)]
    return int(np.argmax(scores))


def decode_bag(
    state: VariationalState,
    bag_index: int,
    dataset: Dataset,
    theta_bg: float = DEFAULT_THETA_BG,
) -> DecodedBag:
    bag = dataset.videos[bag_index]
    subjects, actions = decode_tracks(state, bag_index, dataset.space, theta_bg)
    labels = dedup_labels(bag.labels)
    loc = {tup: localize(state, bag_index, tup, dataset.space, labels) for tup in labels}
    return DecodedBag(subjects, actions, loc)


def decode_dataset(
    state: VariationalState, dataset: Dataset, theta_bg: float = DEFAULT_THETA_BG
) -> list[DecodedBag]:
    return [decode_bag(state, i, dataset, theta_bg) for i in range(dataset.num_videos)]


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Textbook AP of one ranked list: mean precision at each positive.

    Ranking is by descending score with ties broken by original order.
    Returns 0.0 when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if positives.sum() == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    precisions = np.cumsum(hits)[ranks - 1] / ranks
    return float(precisions.mean())


def _ground_truth_arrays(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    gt_s, gt_a = [], []
    for bag in dataset.videos:
        for j, t in enumerate(bag.tracks):
            if t.ground_truth is None:
                raise ValidationError(
                    f"track {j} of bag {bag.id!r} has no ground truth; cannot score"
                )
            s, a = t.ground_truth
            gt_s.append(-1 if s is None else s)
            gt_a.append(-1 if a is None else a)
    return np.asarray(gt_s), np.asarray(gt_a)


def score(
    state: VariationalState,
    dataset: Dataset,
    theta_bg: float = DEFAULT_THETA_BG,
    decoded: Optional[list[DecodedBag]] = None,
) -> MetricsReport:
    """Score decoded labels and localizations against planted ground truth."""
    space = dataset.space
    if decoded is None:
        decoded = decode_dataset(state, dataset, theta_bg)
    gt_s, gt_a = _ground_truth_arrays(dataset)
    pred_s = np.asarray(
        [-1 if v is None else v for dec in decoded for v in dec.track_subject_labels]
    )
    pred_a = np.asarray(
        [-1 if v is None else v for dec in decoded for v in dec.track_action_labels]
    )

    def frac(num: int, den: int) -> float:
        return num / den if den else 0.0

    n = len(gt_s)
    subject_acc = frac(int((pred_s == gt_s).sum()), n)
    action_acc = frac(int((pred_a == gt_a).sum()), n)
    eligible = (gt_s >= 0) & (gt_a >= 0)
    pair_hits = (pred_s == gt_s) & (pred_a == gt_a) & eligible
    pairwise_acc = frac(int(pair_hits.sum()), int(eligible.sum()))

    per_class: dict[str, dict[int, dict[str, float]]] = {SUBJECT: {}, ACTION: {}}
    maps: dict[str, float] = {}
    for concept, gt, pred in ((SUBJECT, gt_s, pred_s), (ACTION, gt_a, pred_a)):
        factors = _concept_range(space, concept)
        aps = []
        for c, k in enumerate(factors):
            pos = gt == c
            support = int(pos.sum())
            ap = average_precision(state.nu[:, k], pos) if support else 0.0
            recall = frac(int(((pred == c) & pos).sum()), support)
            per_class[concept][c] = {"ap": ap, "recall": recall, "support": float(support)}
            if support:
                aps.append(ap)
        maps[concept] = float(np.mean(aps)) if aps else 0.0

    loc_total = 0
    loc_hits = 0
    for i, bag in enumerate(dataset.videos):
        for tup, j_star in decoded[i].localization.items():
            loc_total += 1
            s, a = bag.tracks[j_star].ground_truth
            ok = True
            if tup.subject is not None:
                ok = ok and s == tup.subject
            if tup.action is not None:
                ok = ok and a == tup.action
            loc_hits += int(ok)

    return MetricsReport(
        subject_accuracy=subject_acc,
        action_accuracy=action_acc,
        pairwise_accuracy=pairwise_acc,
        mean_average_precision=maps,
        localization_hit_rate=frac(loc_hits, loc_total),
        per_class=per_class,
    )


def threshold_sweep(
    state: VariationalState,
    dataset: Dataset,
    thetas: Optional[Sequence[float]] = None,
) -> dict[str, list[dict[str, float]]]:
    """Background vs non-background recall as the decode threshold varies.

    Non-background recall counts a track only when its exact class is
    recovered. Default grid is 0.00, 0.05, ..., 1.00.
    """
    if thetas is None:
        thetas = [round(0.05 * t, 2) for t in range(21)]
    gt_s, gt_a = _ground_truth_arrays(dataset)
    out: dict[str, list[dict[str, float]]] = {SUBJECT: [], ACTION: []}
    for theta in thetas:
        decoded = decode_dataset(state, dataset, theta_bg=theta)
        pred = {
            SUBJECT: np.asarray(
                [-1 if v is None else v for d in decoded for v in d.track_subject_labels]
            ),
            ACTION: np.asarray(
                [-1 if v is None else v for d in decoded for v in d.track_action_labels]
            ),
        }
        for concept, gt in ((SUBJECT, gt_s), (ACTION, gt_a)):
            p = pred[concept]
            bg = gt < 0
            bg_recall = float((p[bg] < 0).mean()) if bg.any() else 0.0
            fg = ~bg
            fg_recall = float((p[fg] == gt[fg]).mean()) if fg.any() else 0.0
            out[concept].append(
                {
                    "theta": float(theta),
                    "background_recall": bg_recall,
                    "nonbackground_recall": fg_recall,
                }
            )
    return out
