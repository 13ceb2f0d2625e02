"""Shared fixtures: random desk-size instances and engine/oracle adapters."""

from __future__ import annotations

import numpy as np
import pytest

from wsibp import (
    ConceptSpace,
    FitOptions,
    GenConfig,
    HyperParams,
    InferenceEngine,
    sample_dataset,
)
from oracles import NaiveInstance, NaiveState


def make_dataset(
    seed,
    num_videos=3,
    tracks=(2, 5),
    num_subjects=2,
    num_actions=2,
    num_background=1,
    dims=(3, 2),
    gen_alpha=3.0,
    sigma_n2=0.3,
    label_noise=0.0,
):
    space = ConceptSpace(
        num_subjects, num_actions, num_background,
        {"subject": dims[0], "action": dims[1]},
    )
    cfg = GenConfig(
        space=space,
        num_videos=num_videos,
        tracks_per_video=tracks,
        alpha=gen_alpha,
        sigma_n2=sigma_n2,
        sigma_a2=1.0,
        label_noise=label_noise,
        seed=seed,
    )
    return sample_dataset(cfg)


def make_engine(
    seed,
    variant="wsc-siibp",
    penalty_c=1.0,
    k_max=5,
    alpha=2.5,
    estimate_variances=False,
    inner_max_iters=50,
    threads=1,
    **dataset_kwargs,
):
    dataset = make_dataset(seed, **dataset_kwargs)
    hp = HyperParams(
        alpha=alpha,
        penalty_c=penalty_c,
        k_max=k_max,
        sigma_n2={"subject": 0.7, "action": 1.3},
        sigma_a2={"subject": 1.1, "action": 0.9},
        estimate_variances=estimate_variances,
    )
    opts = FitOptions(
        inner_max_iters=inner_max_iters, variant=variant, seed=seed, threads=threads
    )
    return InferenceEngine(dataset, hp, opts)


def randomize_state(engine, seed):
    """A feasible but non-trivial state: random tau/nu/phi/sigma under the mask."""
    rng = np.random.default_rng(seed)
    state = engine.init_state()
    state.tau[...] = rng.uniform(0.3, 4.0, state.tau.shape)
    state.nu[...] = engine.track_mask * rng.uniform(0.0, 1.0, state.nu.shape)
    for name in state.phi:
        state.phi[name][...] = rng.normal(0.0, 1.0, state.phi[name].shape)
        state.sigma_k2[name][...] = rng.uniform(0.3, 2.0, state.sigma_k2[name].shape)
    return state


def to_naive(engine, state):
    """Re-express an engine instance and state as plain per-bag arrays."""
    channels = []
    for ch in engine.channels:
        channels.append(
            {
                "name": ch.name,
                "dim": ch.dim,
                "sigma_n2": ch.sigma_n2,
                "sigma_a2": ch.sigma_a2,
                "x": [ch.x[engine.bag_rows(i)].copy() for i in range(engine.num_bags)],
            }
        )
    pairs = [[] for _ in range(engine.num_bags)]
    for p in range(len(engine.pair_bag)):
        pairs[int(engine.pair_bag[p])].append((int(engine.pair_sf[p]), int(engine.pair_af[p])))
    singles = [[] for _ in range(engine.num_bags)]
    for s in range(len(engine.sing_bag)):
        singles[int(engine.sing_bag[s])].append(int(engine.sing_factor[s]))
    inst = NaiveInstance(
        alpha=engine.alpha,
        penalty=engine.penalty,
        k_max=engine.k_max,
        num_labeled=engine.space.num_labeled,
        channels=channels,
        masks=[engine.mask[i].copy() for i in range(engine.num_bags)],
        pairs=pairs,
        singles=singles,
    )
    st = NaiveState(
        tau=[state.tau[i].copy() for i in range(engine.num_bags)],
        nu=[state.nu_bag(i).copy() for i in range(engine.num_bags)],
        phi={k: v.copy() for k, v in state.phi.items()},
        sigma_k2={k: v.copy() for k, v in state.sigma_k2.items()},
    )
    return inst, st


@pytest.fixture
def small_engine():
    return make_engine(seed=11)
