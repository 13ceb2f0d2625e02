"""Synthetic data generator following the model's own generative story.

Every factor gets a Gaussian appearance row per concept; each bag draws its
own stick-breaking prior; tracks switch factors on by Bernoulli draws and emit
noisy superpositions of the active rows. The factor pool is truncated at
``num_subjects + num_actions + num_background``.

Bag labels are derived from the planted activations by a co-occurrence rule:
every (subject, action) pair active on some track becomes a pair label, and a
concept active on a track with no partner concept becomes a singleton label.
Real weak labels come from human descriptions, so this rule is a stand-in;
tests rely only on its guarantee that every emitted tuple has a witnessing
track. Optional label noise deletes tuples (it never fabricates them).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np

from .types import (
    ACTION,
    CONCEPTS,
    SUBJECT,
    ConceptSpace,
    Dataset,
    LabelTuple,
    Track,
    ValidationError,
    VideoBag,
    _uniform_map,
)

_MAX_COVERAGE_ATTEMPTS = 1000


@dataclass(frozen=True)
class GenConfig:
    """Configuration of one synthetic draw.

    ``tracks_per_video`` is either a fixed count or an inclusive (lo, hi)
    range sampled per bag. ``label_noise`` is the probability that any single
    label tuple is deleted from its bag. Identical configs (including
    ``seed``) always yield byte-identical datasets.
    """

    space: ConceptSpace
    num_videos: int
    tracks_per_video: Union[int, tuple[int, int]]
    alpha: float
    sigma_n2: Mapping[str, float] = 0.1
    sigma_a2: Mapping[str, float] = 1.0
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.num_videos, int) or self.num_videos < 1:
            raise ValidationError(f"num_videos must be >= 1, got {self.num_videos!r}")
        if float(self.alpha) <= 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))
        if not (0.0 <= float(self.label_noise) < 1.0):
            raise ValidationError(f"label_noise must lie in [0, 1), got {self.label_noise}")
        object.__setattr__(self, "label_noise", float(self.label_noise))
        object.__setattr__(self, "sigma_n2", _uniform_map(self.sigma_n2, "sigma_n2"))
        object.__setattr__(self, "sigma_a2", _uniform_map(self.sigma_a2, "sigma_a2"))
        for name, m in (("sigma_n2", self.sigma_n2), ("sigma_a2", self.sigma_a2)):
            for k, v in m.items():
                if v < 0:
                    raise ValidationError(f"{name}[{k!r}] must be >= 0, got {v}")
        tpv = self.tracks_per_video
        if isinstance(tpv, int):
            if tpv < 1:
                raise ValidationError(f"tracks_per_video must be >= 1, got {tpv}")
        else:
            lo, hi = tpv
            if not (isinstance(lo, int) and isinstance(hi, int) and 1 <= lo <= hi):
                raise ValidationError(f"tracks_per_video range invalid: {tpv!r}")
            object.__setattr__(self, "tracks_per_video", (lo, hi))


@dataclass
class PlantedTruth:
    """Everything the sampler knows that the dataset file does not carry."""

    appearance: dict[str, np.ndarray]  # concept -> (k_total, dim) planted rows
    pi: np.ndarray                     # (num_videos, k_total) per-bag priors
    z: list[np.ndarray]                # per bag: (n_tracks, k_total) binary


def sample_stick_breaking(alpha: float, k_max: int, rng) -> np.ndarray:
    """Draw one truncated stick-breaking prior: pi_k = prod of k Beta(alpha, 1) sticks."""
    if alpha <= 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    if k_max < 1:
        raise ValidationError(f"k_max must be >= 1, got {k_max}")
    v = np.asarray(rng.beta(alpha, 1.0, size=k_max), dtype=np.float64)
    # guard against underflow to 0 so that pi stays in (0, 1]
    v = np.clip(v, np.finfo(np.float64).tiny, 1.0)
    return np.cumprod(v)


def _labels_from_activations(z: np.ndarray, space: ConceptSpace) -> list[LabelTuple]:
    ks, ka = space.num_subjects, space.num_actions
    labels: list[LabelTuple] = []
    seen: set[LabelTuple] = set()

    def add(lab: LabelTuple) -> None:
        if lab not in seen:
            seen.add(lab)
            labels.append(lab)

    for row in z:
        subs = np.flatnonzero(row[:ks])
        acts = np.flatnonzero(row[ks:ks + ka])
        if subs.size and acts.size:
            for s in subs:
                for a in acts:
                    add(LabelTuple(int(s), int(a)))
        elif subs.size:
            for s in subs:
                add(LabelTuple(subject=int(s)))
        elif acts.size:
            for a in acts:
                add(LabelTuple(action=int(a)))
    return labels


def _track_ground_truth(row: np.ndarray, space: ConceptSpace) -> tuple[Optional[int], Optional[int]]:
    ks, ka = space.num_subjects, space.num_actions
    subs = np.flatnonzero(row[:ks])
    acts = np.flatnonzero(row[ks:ks + ka])
    # ties (several active classes of one concept) resolve to the lowest index,
    # matching the decoders' tie-break convention
    return (int(subs[0]) if subs.size else None, int(acts[0]) if acts.size else None)


def _sample_once(cfg: GenConfig, attempt: int) -> tuple[Dataset, PlantedTruth]:
    space = cfg.space
    k_total = space.num_labeled + space.num_background
    if k_total < 1:
        raise ValidationError("concept space has no factors to sample")
    children = np.random.SeedSequence([np.uint64(cfg.seed).item(), attempt]).spawn(cfg.num_videos + 1)
    rng_global = np.random.Generator(np.random.PCG64(children[0]))

    appearance = {
        c: rng_global.normal(0.0, np.sqrt(cfg.sigma_a2[c]), size=(k_total, space.feature_dims[c]))
        for c in CONCEPTS
    }

    videos = []
    pi_all = np.empty((cfg.num_videos, k_total))
    z_all = []
    for i in range(cfg.num_videos):
        rng = np.random.Generator(np.random.PCG64(children[i + 1]))
        if isinstance(cfg.tracks_per_video, int):
            n_i = cfg.tracks_per_video
        else:
            lo, hi = cfg.tracks_per_video
            n_i = int(rng.integers(lo, hi + 1))
        pi = sample_stick_breaking(cfg.alpha, k_total, rng)
        z = (rng.random((n_i, k_total)) < pi).astype(np.int8)
        feats = {}
        for c in CONCEPTS:
            noise = rng.normal(0.0, np.sqrt(cfg.sigma_n2[c]), size=(n_i, space.feature_dims[c]))
            feats[c] = z.astype(np.float64) @ appearance[c] + noise
        labels = _labels_from_activations(z, space)
        if cfg.label_noise > 0 and labels:
            keep = rng.random(len(labels)) >= cfg.label_noise
            labels = [lab for lab, k in zip(labels, keep) if k]
        tracks = [
            Track(
                feat_subject=feats[SUBJECT][j],
                feat_action=feats[ACTION][j],
                ground_truth=_track_ground_truth(z[j], space),
            )
            for j in range(n_i)
        ]
        videos.append(VideoBag(id=f"v{i}", tracks=tracks, labels=labels))
        pi_all[i] = pi
        z_all.append(z)

    dataset = Dataset(space=space, videos=videos)
    return dataset, PlantedTruth(appearance=appearance, pi=pi_all, z=z_all)


def sample_dataset_with_truth(cfg: GenConfig) -> tuple[Dataset, PlantedTruth]:
    """Sample a dataset plus its planted internals.

    Redraws the whole dataset (deterministically, by bumping an attempt
    counter folded into the seed) until every labeled class is active on at
    least one track somewhere, so recovery experiments are never vacuous.
    """
    space = cfg.space
    for attempt in range(_MAX_COVERAGE_ATTEMPTS):
        dataset, truth = _sample_once(cfg, attempt)
        counts = np.zeros(space.num_labeled, dtype=np.int64)
        for z in truth.z:
            counts += z[:, :space.num_labeled].sum(axis=0)
        if np.all(counts >= 1) or space.num_labeled == 0:
            return dataset, truth
    raise ValidationError(
        f"could not cover all {space.num_labeled} labeled classes in "
        f"{_MAX_COVERAGE_ATTEMPTS} attempts; increase num_videos or alpha"
    )


def sample_dataset(cfg: GenConfig) -> Dataset:
    """Sample a synthetic dataset with planted per-track ground truth."""
    return sample_dataset_with_truth(cfg)[0]
