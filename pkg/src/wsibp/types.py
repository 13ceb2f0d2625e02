"""Shared model types: concept spaces, track bags, weak labels, constraints.

Factor index layout is fixed everywhere in the package: factors
``0 .. num_subjects-1`` are subject classes, the following ``num_actions``
factors are action classes, and every factor beyond that is background.
Class indices are 0-based both in memory and on disk.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

SUBJECT = "subject"
ACTION = "action"
CONCEPTS = (SUBJECT, ACTION)


class ValidationError(ValueError):
    """An input violates a documented invariant."""


class NumericalError(RuntimeError):
    """Inference produced a non-finite quantity."""


def _as_locked_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ConceptSpace:
    """Closed class sets for both concepts plus the background pool size.

    ``feature_dims`` maps concept name ("subject"/"action") to the feature
    dimensionality carried by every track for that concept.
    """

    num_subjects: int
    num_actions: int
    num_background: int
    feature_dims: Mapping[str, int]

    def __post_init__(self):
        for attr in ("num_subjects", "num_actions", "num_background"):
            v = getattr(self, attr)
            if not isinstance(v, int) or v < 0:
                raise ValidationError(f"{attr} must be a nonnegative integer, got {v!r}")
        dims = dict(self.feature_dims)
        if set(dims) != set(CONCEPTS):
            raise ValidationError(f"feature_dims must have keys {CONCEPTS}, got {sorted(dims)}")
        for name, d in dims.items():
            if not isinstance(d, int) or d < 1:
                raise ValidationError(f"feature dim for {name!r} must be >= 1, got {d!r}")
        object.__setattr__(self, "feature_dims", dims)

    @property
    def num_labeled(self) -> int:
        return self.num_subjects + self.num_actions

    def subject_factor(self, s: int) -> int:
        return s

    def action_factor(self, a: int) -> int:
        return self.num_subjects + a

    def subject_factors(self) -> range:
        return range(0, self.num_subjects)

    def action_factors(self) -> range:
        return range(self.num_subjects, self.num_labeled)


@dataclass(frozen=True)
class LabelTuple:
    """One weak bag-level label: a subject class, an action class, or a pair.

    ``None`` marks an absent component; (None, None) is invalid.
    """

    subject: Optional[int] = None
    action: Optional[int] = None

    def __post_init__(self):
        if self.subject is None and self.action is None:
            raise ValidationError("label tuple must name a subject, an action, or both")
        for name, v in (("subject", self.subject), ("action", self.action)):
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 0):
                raise ValidationError(f"label {name} index must be a nonnegative integer, got {v!r}")

    def check_in_space(self, space: ConceptSpace, bag_id: str) -> None:
        if self.subject is not None and self.subject >= space.num_subjects:
            raise ValidationError(
                f"subject index {self.subject} out of range [0, {space.num_subjects}) in bag {bag_id!r}"
            )
        if self.action is not None and self.action >= space.num_actions:
            raise ValidationError(
                f"action index {self.action} out of range [0, {space.num_actions}) in bag {bag_id!r}"
            )

    @property
    def is_pair(self) -> bool:
        return self.subject is not None and self.action is not None


@dataclass
class Track:
    """One spatio-temporal track: a feature vector per concept.

    ``ground_truth`` is an evaluation-only (subject, action) pair where None
    means background; it is never read by inference.
    """

    feat_subject: np.ndarray
    feat_action: np.ndarray
    ground_truth: Optional[tuple[Optional[int], Optional[int]]] = None

    def __post_init__(self):
        self.feat_subject = _as_locked_vector(self.feat_subject, "feat_subject")
        self.feat_action = _as_locked_vector(self.feat_action, "feat_action")
        if self.ground_truth is not None:
            gt = tuple(self.ground_truth)
            if len(gt) != 2:
                raise ValidationError(f"ground_truth must be a (subject, action) pair, got {gt!r}")
            self.ground_truth = gt

    def feat(self, concept: str) -> np.ndarray:
        return self.feat_subject if concept == SUBJECT else self.feat_action

    def __eq__(self, other):
        if not isinstance(other, Track):
            return NotImplemented
        return (
            np.array_equal(self.feat_subject, other.feat_subject)
            and np.array_equal(self.feat_action, other.feat_action)
            and self.ground_truth == other.ground_truth
        )


@dataclass
class VideoBag:
    """A bag of tracks plus its weak label set."""

    id: str
    tracks: list[Track]
    labels: list[LabelTuple] = field(default_factory=list)

    def __post_init__(self):
        if len(self.tracks) < 1:
            raise ValidationError(f"bag {self.id!r} must contain at least one track")

    @property
    def num_tracks(self) -> int:
        return len(self.tracks)

    def __eq__(self, other):
        if not isinstance(other, VideoBag):
            return NotImplemented
        return self.id == other.id and self.tracks == other.tracks and self.labels == other.labels


@dataclass
class Dataset:
    """A concept space together with the bags drawn over it."""

    space: ConceptSpace
    videos: list[VideoBag]

    def __post_init__(self):
        seen = set()
        for bag in self.videos:
            if bag.id in seen:
                raise ValidationError(f"duplicate video id {bag.id!r}")
            seen.add(bag.id)
            for lab in bag.labels:
                lab.check_in_space(self.space, bag.id)
            for j, track in enumerate(bag.tracks):
                for concept in CONCEPTS:
                    want = self.space.feature_dims[concept]
                    got = track.feat(concept).shape[0]
                    if got != want:
                        raise ValidationError(
                            f"feat_{concept} length {got} ≠ {want} at video {bag.id} track {j}"
                        )

    @property
    def num_videos(self) -> int:
        return len(self.videos)

    @property
    def total_tracks(self) -> int:
        return sum(bag.num_tracks for bag in self.videos)

    def has_ground_truth(self) -> bool:
        return all(t.ground_truth is not None for bag in self.videos for t in bag.tracks)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.space == other.space and self.videos == other.videos


def _uniform_map(value, name: str) -> dict[str, float]:
    if isinstance(value, Mapping):
        out = {k: float(v) for k, v in value.items()}
    else:
        out = {c: float(value) for c in CONCEPTS}
    for k, v in out.items():
        if not np.isfinite(v):
            raise ValidationError(f"{name}[{k!r}] must be finite, got {v!r}")
    return out


@dataclass(frozen=True)
class HyperParams:
    """Model hyperparameters: sparsity prior, constraint weight, truncation, variances.

    ``sigma_n2``/``sigma_a2`` map concept name to the noise/appearance prior
    variance; a scalar is broadcast to both concepts. ``estimate_variances``
    turns the outer empirical-Bayes variance re-estimation on or off.
    """

    alpha: float = 100.0
    penalty_c: float = 0.5
    k_max: int = 30
    sigma_n2: Mapping[str, float] = 1.0
    sigma_a2: Mapping[str, float] = 1.0
    estimate_variances: bool = True

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "penalty_c", float(self.penalty_c))
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if self.penalty_c < 0:
            raise ValidationError(f"penalty_c must be >= 0, got {self.penalty_c}")
        if not isinstance(self.k_max, int) or self.k_max < 1:
            raise ValidationError(f"k_max must be a positive integer, got {self.k_max!r}")
        object.__setattr__(self, "sigma_n2", _uniform_map(self.sigma_n2, "sigma_n2"))
        object.__setattr__(self, "sigma_a2", _uniform_map(self.sigma_a2, "sigma_a2"))
        for name, m in (("sigma_n2", self.sigma_n2), ("sigma_a2", self.sigma_a2)):
            for k, v in m.items():
                if v <= 0:
                    raise ValidationError(f"{name}[{k!r}] must be > 0, got {v}")

    def check_k_max(self, space: ConceptSpace) -> None:
        if self.k_max < space.num_labeled:
            raise ValidationError(
                f"k_max={self.k_max} cannot house the {space.num_labeled} labeled factors"
            )


@dataclass
class ConstraintSet:
    """Per-bag location constraints and the factor admissibility mask.

    ``mask[k] == 1`` iff factor ``k`` is admissible in this bag: always for
    background factors, and for a labeled factor exactly when its class is
    mentioned in the bag's labels. Pair/singleton entries hold class indices.
    """

    pair_constraints: list[tuple[int, int]]
    singleton_subject: list[int]
    singleton_action: list[int]
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)


def dedup_labels(labels: Sequence[LabelTuple]) -> list[LabelTuple]:
    """Drop duplicate tuples, keeping first-occurrence order."""
    seen: set[LabelTuple] = set()
    out = []
    for lab in labels:
        if lab not in seen:
            seen.add(lab)
            out.append(lab)
    return out


def build_constraints(bag: VideoBag, space: ConceptSpace, k_max: int) -> ConstraintSet:
    """Derive the constraint lists and the admissibility mask from a bag's labels.

    Slack variables are never materialized; violations are charged through
    hinge penalties inside the inference objective.
    """
    if k_max < space.num_labeled:
        raise ValidationError(
            f"k_max={k_max} cannot house the {space.num_labeled} labeled factors"
        )
    pairs: list[tuple[int, int]] = []
    singles_s: list[int] = []
    singles_a: list[int] = []
    mask = np.zeros(k_max, dtype=np.float64)
    mask[space.num_labeled:] = 1.0
    for lab in dedup_labels(bag.labels):
        lab.check_in_space(space, bag.id)
        if lab.subject is not None:
            mask[space.subject_factor(lab.subject)] = 1.0
        if lab.action is not None:
            mask[space.action_factor(lab.action)] = 1.0
        if lab.is_pair:
            pairs.append((lab.subject, lab.action))
        elif lab.subject is not None:
            singles_s.append(lab.subject)
        else:
            singles_a.append(lab.action)
    return ConstraintSet(pairs, singles_s, singles_a, mask)


def build_all_constraints(dataset: Dataset, k_max: int) -> list[ConstraintSet]:
    return [build_constraints(bag, dataset.space, k_max) for bag in dataset.videos]


@dataclass
class VariationalState:
    """Variational posterior parameters owned by one inference engine.

    ``tau`` has shape (num_bags, k_max, 2); ``nu`` stores all bags' track
    rows stacked into one (total_tracks, k_max) matrix with ``offsets``
    delimiting bag ``i`` as rows ``offsets[i]:offsets[i+1]``. ``phi`` and
    ``sigma_k2`` map channel name to the (k_max, dim) posterior means and
    (k_max,) posterior variances of the appearance model.
    """

    tau: np.ndarray
    nu: np.ndarray
    offsets: np.ndarray
    phi: dict[str, np.ndarray]
    sigma_k2: dict[str, np.ndarray]

    @property
    def num_bags(self) -> int:
        return len(self.offsets) - 1

    @property
    def k_max(self) -> int:
        return self.tau.shape[1]

    def nu_bag(self, i: int) -> np.ndarray:
        return self.nu[self.offsets[i]:self.offsets[i + 1]]

    def tracks_in_bag(self, i: int) -> int:
        return int(self.offsets[i + 1] - self.offsets[i])

    def copy(self) -> "VariationalState":
        return VariationalState(
            tau=self.tau.copy(),
            nu=self.nu.copy(),
            offsets=self.offsets.copy(),
            phi={k: v.copy() for k, v in self.phi.items()},
            sigma_k2={k: v.copy() for k, v in self.sigma_k2.items()},
        )

    def validate(self, constraints: Optional[Sequence[ConstraintSet]] = None) -> None:
        """Assert the documented invariants; used by tests and debug runs."""
        if not np.all(self.tau > 0):
            raise ValidationError("tau must be strictly positive")
        if not (np.all(self.nu >= 0.0) and np.all(self.nu <= 1.0)):
            raise ValidationError("nu must lie in [0, 1]")
        for name, s in self.sigma_k2.items():
            if not np.all(s > 0):
                raise ValidationError(f"sigma_k2[{name!r}] must be strictly positive")
        for name, p in self.phi.items():
            if not np.all(np.isfinite(p)):
                raise ValidationError(f"phi[{name!r}] contains non-finite entries")
        if constraints is not None:
            for i, cset in enumerate(constraints):
                masked = cset.mask == 0.0
                if np.any(self.nu_bag(i)[:, masked] != 0.0):
                    raise ValidationError(f"masked factors carry nonzero nu in bag {i}")


def deep_copy_dataset(dataset: Dataset) -> Dataset:
    return copy.deepcopy(dataset)
