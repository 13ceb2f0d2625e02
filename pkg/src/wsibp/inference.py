"""Truncated mean-field variational inference for the constrained stacked
integrative IBP, with constraint-coupled Bernoulli updates.

The engine runs block-coordinate sweeps over the variational parameters: the
per-factor appearance posteriors (sigma_k2, phi), the per-bag stick Beta
parameters (tau), and the per-track Bernoulli means (nu). Location
constraints derived from weak bag labels enter twice: hard, through the
admissibility mask that pins nu of unlisted classes to zero, and soft,
through hinge penalties whose subgradients couple the nu updates of paired
concepts.

All six published ablations run through this one engine as configuration
variants; they differ only in the feature channels used and in whether the
soft location penalties are active.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from .types import (
    ACTION,
    CONCEPTS,
    SUBJECT,
    ConceptSpace,
    ConstraintSet,
    Dataset,
    HyperParams,
    NumericalError,
    ValidationError,
    VariationalState,
    build_constraints,
)

WSC_SIIBP = "wsc-siibp"
WS_SIIBP = "ws-siibp"
WSC_SIBP = "wsc-sibp"
WS_SIBP = "ws-sibp"
WS_S = "ws-s"
WS_A = "ws-a"
VARIANTS = (WSC_SIIBP, WS_SIIBP, WSC_SIBP, WS_SIBP, WS_S, WS_A)

ZETA_CLIP = 500.0
VARIANCE_FLOOR = 1e-12

MODE_WITH_LABELS = "with_labels"
MODE_FREE_ANNOTATION = "free_annotation"


@dataclass(frozen=True)
class FitOptions:
    """Loop guards and the model variant to run."""

    inner_max_iters: int = 100
    outer_max_iters: int = 10
    inner_rel_tol: float = 1e-3
    outer_rel_tol: float = 1e-4
    seed: int = 0
    variant: str = WSC_SIIBP
    threads: int = 1

    def __post_init__(self):
        if self.inner_max_iters < 1 or self.outer_max_iters < 1:
            raise ValidationError("iteration caps must be >= 1")
        if self.inner_rel_tol <= 0 or self.outer_rel_tol <= 0:
            raise ValidationError("tolerances must be > 0")
        object.__setattr__(self, "variant", str(self.variant).lower())
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")


@dataclass
class InferenceScratch:
    """Sweep-local quantities: stick multinomials, their bounds, and logits.

    ``q[i, k, :k+1]`` is the k-point multinomial used to bound the expected
    log of the residual stick mass; ``lower_bounds[i, k]`` is that bound;
    ``log_stick[i, k]`` is the expected log prior activation of factor k;
    ``zeta`` holds the last computed (clipped) update logits per track.
    """

    q: np.ndarray
    lower_bounds: np.ndarray
    log_stick: np.ndarray
    zeta: np.ndarray


# ---------------------------------------------------------------------------
# stick-breaking expectations


def _stick_digammas(tau: np.ndarray):
    d1 = digamma(tau[..., 0])
    d2 = digamma(tau[..., 1])
    d12 = digamma(tau[..., 0] + tau[..., 1])
    return d1, d2, d12


def stick_log_weights(tau: np.ndarray) -> np.ndarray:
    """Unnormalized log weight of 'the stick first breaks at position m'."""
    d1, d2, d12 = _stick_digammas(tau)
    before = np.cumsum(d1, axis=-1) - d1
    upto = np.cumsum(d12, axis=-1)
    return d2 + before - upto


def optimal_q(tau: np.ndarray) -> np.ndarray:
    """Tightest multinomials: rows ``q[..., k, :k+1]`` are softmaxes of the log weights."""
    w = stick_log_weights(tau)
    k_max = w.shape[-1]
    tri = np.tril(np.ones((k_max, k_max), dtype=bool))
    full = np.where(tri, w[..., None, :], -np.inf)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


def lower_bounds_from_q(tau: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Expected-log-residual lower bound for arbitrary multinomials ``q``.

    Valid (a lower bound) for any row-stochastic ``q`` supported on
    ``{0..k}``; tight when ``q`` comes from :func:`optimal_q`.
    """
    d1, d2, d12 = _stick_digammas(tau)
    suffix = np.flip(np.cumsum(np.flip(q, -1), -1), -1)
    after = np.zeros_like(suffix)
    after[..., :-1] = suffix[..., 1:]
    term_break = (q * d2[..., None, :]).sum(-1)
    term_grow = (after * d1[..., None, :]).sum(-1)
    term_norm = (suffix * d12[..., None, :]).sum(-1)
    entropy = -xlogy(q, q).sum(-1)
    return term_break + term_grow - term_norm + entropy


def log_stick_expectations(tau: np.ndarray) -> np.ndarray:
    """Expected log prior activation of each factor under the stick posterior."""
    d1, _, d12 = _stick_digammas(tau)
    return np.cumsum(d1 - d12, axis=-1)


def _sigmoid_clipped(z):
    z = np.clip(z, -ZETA_CLIP, ZETA_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


# ---------------------------------------------------------------------------
# channels


@dataclass
class _Channel:
    name: str
    x: np.ndarray  # (total_tracks, dim)
    dim: int
    sigma_n2: float
    sigma_a2: float


def variant_channel_plan(variant: str) -> list[tuple[str, tuple[str, ...]]]:
    """Which feature channels a variant runs on, as (channel name, concepts)."""
    if variant in (WSC_SIIBP, WS_SIIBP):
        return [(SUBJECT, (SUBJECT,)), (ACTION, (ACTION,))]
    if variant in (WSC_SIBP, WS_SIBP):
        return [("concat", (SUBJECT, ACTION))]
    if variant == WS_S:
        return [(SUBJECT, (SUBJECT,))]
    if variant == WS_A:
        return [(ACTION, (ACTION,))]
    raise ValidationError(f"unknown variant {variant!r}")


def variant_uses_penalties(variant: str) -> bool:
    return variant in (WSC_SIIBP, WSC_SIBP)


def _merged_sigma(values: dict[str, float], dims: dict[str, int], concepts: tuple[str, ...]) -> float:
    # dimension-weighted mean keeps the total variance budget of the merge
    total_dim = sum(dims[c] for c in concepts)
    return sum(values[c] * dims[c] for c in concepts) / total_dim


def _concat_features(dataset: Dataset) -> dict[str, np.ndarray]:
    feats = {c: [] for c in CONCEPTS}
    for bag in dataset.videos:
        for t in bag.tracks:
            feats[SUBJECT].append(t.feat_subject)
            feats[ACTION].append(t.feat_action)
    return {c: np.asarray(feats[c], dtype=np.float64) for c in CONCEPTS}


def _build_channels(
    dataset: Dataset,
    variant: str,
    sigma_n2: dict[str, float],
    sigma_a2: dict[str, float],
) -> list[_Channel]:
    space = dataset.space
    raw = _concat_features(dataset)
    channels = []
    for name, concepts in variant_channel_plan(variant):
        x = raw[concepts[0]] if len(concepts) == 1 else np.hstack([raw[c] for c in concepts])
        dims = dict(space.feature_dims)
        channels.append(
            _Channel(
                name=name,
                x=x,
                dim=x.shape[1],
                sigma_n2=_merged_sigma(sigma_n2, dims, concepts),
                sigma_a2=_merged_sigma(sigma_a2, dims, concepts),
            )
        )
    return channels


# ---------------------------------------------------------------------------
# engine


class InferenceEngine:
    """Block-coordinate mean-field solver over one dataset.

    One engine instance owns its state exclusively; per-bag blocks are
    independent given the globals, so bag-chunked parallelism (``threads``)
    never changes results.
    """

    def __init__(self, dataset: Dataset, hp: HyperParams, opts: Optional[FitOptions] = None):
        self.opts = opts or FitOptions()
        self.dataset = dataset
        self.space = dataset.space
        self.hp = hp
        hp.check_k_max(self.space)
        if dataset.num_videos == 0:
            raise ValidationError("dataset must contain at least one bag")

        self.variant = self.opts.variant
        self.k_max = hp.k_max
        self.alpha = hp.alpha
        self.penalty = hp.penalty_c if variant_uses_penalties(self.variant) else 0.0
        self.channels = _build_channels(dataset, self.variant, hp.sigma_n2, hp.sigma_a2)

        counts = [bag.num_tracks for bag in dataset.videos]
        self.n_i = np.asarray(counts, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.n_i)]).astype(np.int64)
        self.n_total = int(self.offsets[-1])
        self.num_bags = dataset.num_videos
        self.bag_of_track = np.repeat(np.arange(self.num_bags), self.n_i)

        self.constraints: list[ConstraintSet] = [
            build_constraints(bag, self.space, self.k_max) for bag in dataset.videos
        ]
        self.mask = np.stack([c.mask for c in self.constraints])  # (M, K)
        self._apply_free_annotation = False
        self._frozen_globals = False
        self._index_constraints()

    # -- construction helpers ------------------------------------------------

    def _index_constraints(self) -> None:
        space = self.space
        pair_bag, pair_sf, pair_af = [], [], []
        sing_bag, sing_factor = [], []
        for i, cset in enumerate(self.constraints):
            for (s, a) in cset.pair_constraints:
                pair_bag.append(i)
                pair_sf.append(space.subject_factor(s))
                pair_af.append(space.action_factor(a))
            for s in cset.singleton_subject:
                sing_bag.append(i)
                sing_factor.append(space.subject_factor(s))
            for a in cset.singleton_action:
                sing_bag.append(i)
                sing_factor.append(space.action_factor(a))
        self.pair_bag = np.asarray(pair_bag, dtype=np.int64)
        self.pair_sf = np.asarray(pair_sf, dtype=np.int64)
        self.pair_af = np.asarray(pair_af, dtype=np.int64)
        self.sing_bag = np.asarray(sing_bag, dtype=np.int64)
        self.sing_factor = np.asarray(sing_factor, dtype=np.int64)
        self.track_mask = self.mask[self.bag_of_track]

    def _free_annotation(self) -> None:
        """Admit every factor in every bag and drop all soft penalties."""
        self._apply_free_annotation = True
        self.penalty = 0.0
        self.mask = np.ones_like(self.mask)
        self.track_mask = np.ones_like(self.track_mask)

    def bag_rows(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    # -- initialization -------------------------------------------------------

    def init_state(self) -> VariationalState:
        """Fresh state: tau=(alpha,1), nu=1/2 under the mask, phi=0, sigma_k2=1."""
        tau = np.empty((self.num_bags, self.k_max, 2))
        tau[..., 0] = self.alpha
        tau[..., 1] = 1.0
        nu = 0.5 * self.track_mask.copy()
        phi = {ch.name: np.zeros((self.k_max, ch.dim)) for ch in self.channels}
        sigma_k2 = {ch.name: np.ones(self.k_max) for ch in self.channels}
        return VariationalState(tau=tau, nu=nu, offsets=self.offsets.copy(), phi=phi, sigma_k2=sigma_k2)

    def new_scratch(self) -> InferenceScratch:
        m, k = self.num_bags, self.k_max
        return InferenceScratch(
            q=np.zeros((m, k, k)),
            lower_bounds=np.zeros((m, k)),
            log_stick=np.zeros((m, k)),
            zeta=np.zeros((self.n_total, k)),
        )

    # -- scratch refresh -------------------------------------------------------

    def refresh_scratch(self, state: VariationalState, scratch: Optional[InferenceScratch] = None) -> InferenceScratch:
        """Recompute the multinomials for the current tau, then the bounds."""
        scratch = scratch or self.new_scratch()

        def work(lo, hi):
            scratch.q[lo:hi] = optimal_q(state.tau[lo:hi])

        self._over_bag_chunks(work)
        self.refresh_bounds(state, scratch)
        return scratch

    def refresh_bounds(self, state: VariationalState, scratch: InferenceScratch) -> None:
        """Recompute log-stick expectations and bounds from current tau, keeping q."""

        def work(lo, hi):
            scratch.log_stick[lo:hi] = log_stick_expectations(state.tau[lo:hi])
            scratch.lower_bounds[lo:hi] = lower_bounds_from_q(state.tau[lo:hi], scratch.q[lo:hi])

        self._over_bag_chunks(work)

    def _over_bag_chunks(self, work) -> None:
        threads = self.opts.threads
        if threads <= 1 or self.num_bags < 2 * threads:
            work(0, self.num_bags)
            return
        bounds = np.linspace(0, self.num_bags, threads + 1).astype(int)
        ranges = [(int(bounds[t]), int(bounds[t + 1])) for t in range(threads) if bounds[t] < bounds[t + 1]]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(lambda r: work(*r), ranges))

    # -- per-element operations (the contract surface; sweeps below vectorize them)

    def update_sigma_k2(self, state: VariationalState, channel: str, k: int) -> float:
        """Posterior appearance variance of factor k on one channel."""
        ch = self._channel(channel)
        total_nu = float(state.nu[:, k].sum())
        value = 1.0 / (1.0 / ch.sigma_a2 + total_nu / ch.sigma_n2)
        state.sigma_k2[channel][k] = value
        return value

    def update_phi(self, state: VariationalState, channel: str, k: int) -> np.ndarray:
        """Posterior appearance mean of factor k; expects sigma_k2 already refreshed."""
        ch = self._channel(channel)
        phi = state.phi[channel]
        nu_k = state.nu[:, k]
        residual = ch.x - state.nu @ phi + np.outer(nu_k, phi[k])
        value = (state.sigma_k2[channel][k] / ch.sigma_n2) * (nu_k @ residual)
        phi[k] = value
        return value

    def compute_q(self, state: VariationalState, i: int, k: int) -> np.ndarray:
        """Tightest multinomial over break positions {0..k} for bag i."""
        w = stick_log_weights(state.tau[i])[: k + 1]
        w = w - w.max()
        e = np.exp(w)
        return e / e.sum()

    def compute_lower_bound(
        self, state: VariationalState, i: int, k: int, q_row: Optional[np.ndarray] = None
    ) -> float:
        """Lower bound on the expected log residual stick mass at depth k."""
        if q_row is None:
            q_row = self.compute_q(state, i, k)
        padded = np.zeros(self.k_max)
        padded[: k + 1] = q_row
        return float(lower_bounds_from_q(state.tau[i], padded[None, :])[0])

    def update_tau(
        self, state: VariationalState, scratch: InferenceScratch, i: int, k: int
    ) -> tuple[float, float]:
        """Stick Beta parameters of factor k in bag i, given scratch multinomials."""
        nu_sums = state.nu_bag(i).sum(axis=0)[None, :]
        block = self._tau_block(scratch.q[i][None], nu_sums, self.n_i[i:i + 1])
        state.tau[i, k] = block[0, k]
        return float(block[0, k, 0]), float(block[0, k, 1])

    def compute_zeta(
        self, state: VariationalState, scratch: InferenceScratch, i: int, j: int, k: int
    ) -> float:
        """Update logit of (bag i, track j, factor k), before clipping.

        Constraint indicators are evaluated on the nu values currently in the
        state (the sweep freezes them at sweep entry instead).
        """
        row = int(self.offsets[i]) + j
        tau_i = state.tau[i][None]
        log_stick = log_stick_expectations(tau_i)[0, k]
        lbound = lower_bounds_from_q(tau_i, scratch.q[i][None])[0, k]
        zeta = log_stick - lbound
        for ch in self.channels:
            phi = state.phi[ch.name]
            phi_k = phi[k]
            phi_k2 = float(phi_k @ phi_k)
            zeta -= (ch.dim * state.sigma_k2[ch.name][k] + phi_k2) / (2.0 * ch.sigma_n2)
            recon = state.nu[row] @ phi - state.nu[row, k] * phi_k
            zeta += float(phi_k @ (ch.x[row] - recon)) / ch.sigma_n2
        if self.penalty > 0.0:
            rows = self.bag_rows(i)
            nu_bag = state.nu[rows]
            for p in np.flatnonzero(self.pair_bag == i):
                sf, af = int(self.pair_sf[p]), int(self.pair_af[p])
                unsat = float(nu_bag[:, sf] @ nu_bag[:, af]) < 1.0
                if unsat and sf == k:
                    zeta += self.penalty * state.nu[row, af]
                if unsat and af == k:
                    zeta += self.penalty * state.nu[row, sf]
            if k < self.space.num_labeled and float(nu_bag[:, k].sum()) < 1.0:
                zeta += self.penalty
        return float(zeta)

    def update_nu(
        self, state: VariationalState, scratch: InferenceScratch, i: int, j: int, k: int
    ) -> float:
        """Bernoulli mean of (bag i, track j, factor k); indicators read current nu."""
        zeta = self.compute_zeta(state, scratch, i, j, k)
        value = float(self.mask[i, k] * _sigmoid_clipped(zeta))
        state.nu[int(self.offsets[i]) + j, k] = value
        return value

    def _channel(self, name: str) -> _Channel:
        for ch in self.channels:
            if ch.name == name:
                return ch
        raise ValidationError(f"channel {name!r} not active in variant {self.variant!r}")

    # -- vectorized sweeps -----------------------------------------------------

    def _sweep_sigma_phi(self, state: VariationalState) -> None:
        with np.errstate(over="ignore", invalid="ignore"):
            self._sweep_sigma_phi_inner(state)

    def _sweep_sigma_phi_inner(self, state: VariationalState) -> None:
        nu = state.nu
        col = nu.sum(axis=0)
        col_sq = (nu * nu).sum(axis=0)
        for ch in self.channels:
            phi = state.phi[ch.name]
            sk2 = state.sigma_k2[ch.name]
            recon = nu @ phi
            proj_x = nu.T @ ch.x  # (K, D), fixed per sweep
            for k in range(self.k_max):
                sk2[k] = 1.0 / (1.0 / ch.sigma_a2 + col[k] / ch.sigma_n2)
                target = proj_x[k] - nu[:, k] @ recon + col_sq[k] * phi[k]
                new = (sk2[k] / ch.sigma_n2) * target
                recon += np.outer(nu[:, k], new - phi[k])
                phi[k] = new

    def _tau_block(self, q: np.ndarray, nu_sums: np.ndarray, n_tracks: np.ndarray) -> np.ndarray:
        """Closed-form tau update for a block of bags; shapes (m,K,K), (m,K), (m,)."""
        k_max = self.k_max
        absent = n_tracks[:, None].astype(np.float64) - nu_sums  # (m, K)
        tau2 = 1.0 + np.einsum("im,imk->ik", absent, q)
        present_tail = np.flip(np.cumsum(np.flip(nu_sums, -1), -1), -1)
        qcum = np.cumsum(q, axis=-1)
        later = np.maximum(1.0 - qcum, 0.0)  # sum of q_m,s over s>k; clamp fp dust
        strict = np.tri(k_max, k_max, -1, dtype=bool)  # [m, k] with m > k
        grow = np.einsum("im,imk->ik", absent, later * strict[None, :, :])
        tau1 = self.alpha + present_tail + grow
        return np.stack([tau1, tau2], axis=-1)

    def _sweep_tau(self, state: VariationalState, scratch: InferenceScratch) -> None:
        nu_sums = np.add.reduceat(state.nu, self.offsets[:-1], axis=0)

        def work(lo, hi):
            state.tau[lo:hi] = self._tau_block(scratch.q[lo:hi], nu_sums[lo:hi], self.n_i[lo:hi])

        self._over_bag_chunks(work)

    def _frozen_indicators(self, state: VariationalState):
        """Constraint indicators evaluated once per sweep, on entry values."""
        if self.penalty == 0.0:
            return None, None
        nu = state.nu
        pair_unsat = np.zeros(len(self.pair_bag), dtype=bool)
        for p in range(len(self.pair_bag)):
            rows = self.bag_rows(int(self.pair_bag[p]))
            total = float(nu[rows, self.pair_sf[p]] @ nu[rows, self.pair_af[p]])
            pair_unsat[p] = total < 1.0
        bag_sums = np.add.reduceat(nu, self.offsets[:-1], axis=0)
        single_unsat = bag_sums < 1.0  # (M, K); only labeled factors are consulted
        return pair_unsat, single_unsat

    def _sweep_nu(self, state: VariationalState, scratch: InferenceScratch) -> None:
        with np.errstate(over="ignore", invalid="ignore"):
            self._sweep_nu_inner(state, scratch)

    def _sweep_nu_inner(self, state: VariationalState, scratch: InferenceScratch) -> None:
        nu = state.nu
        pair_unsat, single_unsat = self._frozen_indicators(state)
        recon = {ch.name: nu @ state.phi[ch.name] for ch in self.channels}
        stick = scratch.log_stick[self.bag_of_track]
        bounds = scratch.lower_bounds[self.bag_of_track]
        labeled = self.space.num_labeled
        for k in range(self.k_max):
            zeta = stick[:, k] - bounds[:, k]
            for ch in self.channels:
                phi_k = state.phi[ch.name][k]
                phi_k2 = float(phi_k @ phi_k)
                zeta -= (ch.dim * state.sigma_k2[ch.name][k] + phi_k2) / (2.0 * ch.sigma_n2)
                data = ch.x @ phi_k - recon[ch.name] @ phi_k + nu[:, k] * phi_k2
                zeta += data / ch.sigma_n2
            if self.penalty > 0.0:
                for p in np.flatnonzero((self.pair_sf == k) & pair_unsat):
                    rows = self.bag_rows(int(self.pair_bag[p]))
                    zeta[rows] += self.penalty * nu[rows, self.pair_af[p]]
                for p in np.flatnonzero((self.pair_af == k) & pair_unsat):
                    rows = self.bag_rows(int(self.pair_bag[p]))
                    zeta[rows] += self.penalty * nu[rows, self.pair_sf[p]]
                if k < labeled:
                    zeta += self.penalty * single_unsat[self.bag_of_track, k]
            zeta = np.clip(zeta, -ZETA_CLIP, ZETA_CLIP)
            scratch.zeta[:, k] = zeta
            new = self.track_mask[:, k] / (1.0 + np.exp(-zeta))
            delta = new - nu[:, k]
            for ch in self.channels:
                recon[ch.name] += np.outer(delta, state.phi[ch.name][k])
            nu[:, k] = new

    # -- objective --------------------------------------------------------------

    def u_matrix(self, state: VariationalState, channel: str) -> np.ndarray:
        """Second moment of the appearance rows: off-diagonal phi_j phi_k^T,
        diagonal dim*sigma_k2 + ||phi_k||^2."""
        phi = state.phi[channel]
        u = phi @ phi.T
        d = self._channel(channel).dim
        np.fill_diagonal(u, d * state.sigma_k2[channel] + (phi * phi).sum(axis=1))
        return u

    def objective_components(
        self, state: VariationalState, scratch: Optional[InferenceScratch] = None
    ) -> dict[str, float]:
        if scratch is None:
            scratch = self.refresh_scratch(state)
        with np.errstate(over="ignore", invalid="ignore"):
            return self._objective_components(state, scratch)

    def _objective_components(
        self, state: VariationalState, scratch: InferenceScratch
    ) -> dict[str, float]:
        # overflow here surfaces as a non-finite component and a clean abort
        tau = state.tau
        nu = state.nu
        d1, d2, d12 = _stick_digammas(tau)
        t1, t2 = tau[..., 0], tau[..., 1]
        kl_beta = (
            (t1 - self.alpha) * (d1 - d12)
            + (t2 - 1.0) * (d2 - d12)
            - (gammaln(t1) + gammaln(t2) - gammaln(t1 + t2))
        ).sum() - self.num_bags * self.k_max * math.log(self.alpha)

        stick = log_stick_expectations(tau)
        bounds = lower_bounds_from_q(tau, scratch.q)
        entropy = xlogy(nu, nu) + xlogy(1.0 - nu, 1.0 - nu)
        kl_bern = (
            entropy.sum()
            - (nu * stick[self.bag_of_track]).sum()
            - ((1.0 - nu) * bounds[self.bag_of_track]).sum()
        )

        comps = {"kl_beta": float(kl_beta), "kl_bernoulli": float(kl_bern)}
        for ch in self.channels:
            phi = state.phi[ch.name]
            sk2 = state.sigma_k2[ch.name]
            phi_sq = (phi * phi).sum(axis=1)
            kl_gauss = (
                (ch.dim * sk2 + phi_sq) / (2.0 * ch.sigma_a2)
                - 0.5 * ch.dim * (1.0 + np.log(sk2 / ch.sigma_a2))
            ).sum()
            comps[f"kl_gaussian_{ch.name}"] = float(kl_gauss)

            recon = nu @ phi
            e_quad = (
                (recon * recon).sum(axis=1)
                - (nu * nu) @ phi_sq
                + nu @ (ch.dim * sk2 + phi_sq)
            )
            sq_err = (ch.x * ch.x).sum(axis=1) - 2.0 * (recon * ch.x).sum(axis=1) + e_quad
            loglik = (-sq_err / (2.0 * ch.sigma_n2)).sum() - 0.5 * self.n_total * ch.dim * math.log(
                2.0 * math.pi * ch.sigma_n2
            )
            comps[f"likelihood_{ch.name}"] = float(loglik)

        hinge = 0.0
        if self.penalty > 0.0:
            for p in range(len(self.pair_bag)):
                rows = self.bag_rows(int(self.pair_bag[p]))
                total = float(nu[rows, self.pair_sf[p]] @ nu[rows, self.pair_af[p]])
                hinge += max(0.0, 1.0 - total)
            for s in range(len(self.sing_bag)):
                rows = self.bag_rows(int(self.sing_bag[s]))
                total = float(nu[rows, self.sing_factor[s]].sum())
                hinge += max(0.0, 1.0 - total)
        comps["hinge"] = float(self.penalty * hinge)
        return comps

    def objective(self, state: VariationalState, scratch: Optional[InferenceScratch] = None) -> float:
        """Surrogate objective: KL terms minus expected log-likelihood plus penalties."""
        return self.objective_from_components(self.objective_components(state, scratch))

    def _check_finite(self, state: VariationalState, scratch: InferenceScratch, where: str) -> float:
        comps = self.objective_components(state, scratch)
        for name, value in comps.items():
            if not math.isfinite(value):
                raise NumericalError(f"non-finite objective component {name!r} at {where}")
        total = self.objective_from_components(comps)
        if not math.isfinite(total):
            raise NumericalError(f"non-finite objective at {where}")
        return total

    @staticmethod
    def objective_from_components(comps: dict[str, float]) -> float:
        total = comps["kl_beta"] + comps["kl_bernoulli"] + comps["hinge"]
        for name, value in comps.items():
            if name.startswith("kl_gaussian_"):
                total += value
            elif name.startswith("likelihood_"):
                total -= value
        return total

    # -- hyperparameter re-estimation -------------------------------------------

    def update_hyperparams(self, state: VariationalState) -> dict[str, tuple[float, float]]:
        """Empirical-Bayes update of the appearance/noise variances per channel.

        Returns ``{channel: (sigma_a2, sigma_n2)}`` and installs the values.
        A degenerate all-zero fit clamps the noise variance to a tiny floor.
        """
        out = {}
        nu = state.nu
        for ch in self.channels:
            phi = state.phi[ch.name]
            sk2 = state.sigma_k2[ch.name]
            phi_sq = (phi * phi).sum(axis=1)
            sigma_a2 = float((ch.dim * sk2 + phi_sq).sum() / (self.k_max * ch.dim))
            recon = nu @ phi
            e_quad = (
                (recon * recon).sum(axis=1)
                - (nu * nu) @ phi_sq
                + nu @ (ch.dim * sk2 + phi_sq)
            )
            resid = (ch.x * ch.x).sum(axis=1) - 2.0 * (recon * ch.x).sum(axis=1) + e_quad
            sigma_n2 = float(resid.sum() / (self.n_total * ch.dim))
            if sigma_n2 < VARIANCE_FLOOR:
                warnings.warn(
                    f"noise variance for channel {ch.name!r} degenerated to {sigma_n2:.3e}; "
                    f"clamped to {VARIANCE_FLOOR}"
                )
                sigma_n2 = VARIANCE_FLOOR
            ch.sigma_a2 = sigma_a2
            ch.sigma_n2 = sigma_n2
            out[ch.name] = (sigma_a2, sigma_n2)
        return out

    # -- main loops ---------------------------------------------------------------

    def _inner_loop(
        self,
        state: VariationalState,
        scratch: InferenceScratch,
        trace: list[float],
        update_globals: bool,
    ) -> bool:
        prev = None
        converged = False
        for t in range(self.opts.inner_max_iters):
            if update_globals:
                self._sweep_sigma_phi(state)
            self.refresh_scratch(state, scratch)
            self._sweep_tau(state, scratch)
            self.refresh_bounds(state, scratch)
            self._sweep_nu(state, scratch)
            obj = self._check_finite(state, scratch, f"inner sweep {len(trace)}")
            trace.append(obj)
            if prev is not None and abs(prev - obj) <= self.opts.inner_rel_tol * max(abs(obj), 1e-300):
                converged = True
                break
            prev = obj
        return converged

    def fit(self) -> tuple[VariationalState, "FitReport"]:
        """Run the full training loop and decode the result."""
        state = self.init_state()
        scratch = self.new_scratch()
        trace: list[float] = []
        inner_converged = False
        outer_converged = False
        outer_rounds = self.opts.outer_max_iters if self.hp.estimate_variances else 1
        prev_outer = None
        rounds_run = 0
        for _ in range(outer_rounds):
            rounds_run += 1
            inner_converged = self._inner_loop(state, scratch, trace, update_globals=True)
            if not self.hp.estimate_variances:
                break
            self.update_hyperparams(state)
            obj = self._check_finite(state, scratch, "hyperparameter update")
            if prev_outer is not None and abs(prev_outer - obj) <= self.opts.outer_rel_tol * max(
                abs(obj), 1e-300
            ):
                outer_converged = True
                break
            prev_outer = obj
        report = self._build_report(state, scratch, trace, inner_converged, outer_converged, rounds_run)
        return state, report

    def predict(
        self,
        state: VariationalState,
        test_dataset: Dataset,
        mode: str = MODE_WITH_LABELS,
    ) -> VariationalState:
        """Infer tau/nu for held-out bags under this engine's trained globals."""
        return predict(self.to_model(state), test_dataset, self.opts, mode)

    # -- reporting -----------------------------------------------------------------

    def constraint_violations(self, state: VariationalState) -> dict[str, int]:
        """Count expectation constraints whose nu totals fall short of 1."""
        nu = state.nu
        bad_bags: set[int] = set()
        pair_bad = 0
        single_bad = 0
        for p in range(len(self.pair_bag)):
            i = int(self.pair_bag[p])
            rows = self.bag_rows(i)
            if float(nu[rows, self.pair_sf[p]] @ nu[rows, self.pair_af[p]]) < 1.0:
                pair_bad += 1
                bad_bags.add(i)
        for s in range(len(self.sing_bag)):
            i = int(self.sing_bag[s])
            rows = self.bag_rows(i)
            if float(nu[rows, self.sing_factor[s]].sum()) < 1.0:
                single_bad += 1
                bad_bags.add(i)
        return {
            "bags_with_violation": len(bad_bags),
            "pair": pair_bad,
            "singleton": single_bad,
            "bags_with_constraints": len(
                set(self.pair_bag.tolist()) | set(self.sing_bag.tolist())
            ),
        }

    def _build_report(
        self,
        state: VariationalState,
        scratch: InferenceScratch,
        trace: list[float],
        inner_converged: bool,
        outer_converged: bool,
        outer_rounds: int,
    ) -> "FitReport":
        from .decode import decode_dataset, score

        decoded = decode_dataset(state, self.dataset)
        decoded_rows = []
        for bag, dec in zip(self.dataset.videos, decoded):
            decoded_rows.append(
                {
                    "id": bag.id,
                    "subject_labels": dec.track_subject_labels,
                    "action_labels": dec.track_action_labels,
                    "localization": [
                        [tup.subject, tup.action, j] for tup, j in dec.localization.items()
                    ],
                }
            )
        metrics = None
        if self.dataset.has_ground_truth():
            metrics = score(state, self.dataset, decoded=decoded)
        return FitReport(
            variant=self.variant,
            seed=self.opts.seed,
            objective_trace=trace,
            inner_iterations=len(trace),
            outer_iterations=outer_rounds,
            inner_converged=inner_converged,
            outer_converged=outer_converged,
            final_objective=trace[-1] if trace else float("nan"),
            sigma_n2={ch.name: ch.sigma_n2 for ch in self.channels},
            sigma_a2={ch.name: ch.sigma_a2 for ch in self.channels},
            constraint_violations=self.constraint_violations(state),
            decoded=decoded_rows,
            metrics=metrics,
        )

    def to_model(self, state: VariationalState) -> "TrainedModel":
        return TrainedModel(
            space=self.space,
            variant=self.variant,
            alpha=self.alpha,
            penalty_c=self.hp.penalty_c,
            k_max=self.k_max,
            channels=[
                {"name": ch.name, "dim": ch.dim, "sigma_n2": ch.sigma_n2, "sigma_a2": ch.sigma_a2}
                for ch in self.channels
            ],
            phi={name: p.copy() for name, p in state.phi.items()},
            sigma_k2={name: s.copy() for name, s in state.sigma_k2.items()},
            meta={"seed": self.opts.seed},
        )


@dataclass
class FitReport:
    """Everything a training run leaves behind besides the state itself."""

    variant: str
    seed: int
    objective_trace: list[float]
    inner_iterations: int
    outer_iterations: int
    inner_converged: bool
    outer_converged: bool
    final_objective: float
    sigma_n2: dict[str, float]
    sigma_a2: dict[str, float]
    constraint_violations: dict[str, int]
    decoded: list[dict]
    metrics: Optional[object] = None


@dataclass
class TrainedModel:
    """Frozen globals of a fitted engine: enough to run test-time inference."""

    space: ConceptSpace
    variant: str
    alpha: float
    penalty_c: float
    k_max: int
    channels: list[dict]
    phi: dict[str, np.ndarray]
    sigma_k2: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def fit(
    dataset: Dataset,
    hp: HyperParams,
    opts: Optional[FitOptions] = None,
    space: Optional[ConceptSpace] = None,
) -> tuple[VariationalState, FitReport]:
    """Fit the selected variant on a dataset; returns (state, report)."""
    if space is not None and space != dataset.space:
        raise ValidationError("explicit space disagrees with dataset.space")
    engine = InferenceEngine(dataset, hp, opts)
    return engine.fit()


def predict(
    model: TrainedModel,
    test_dataset: Dataset,
    opts: Optional[FitOptions] = None,
    mode: str = MODE_WITH_LABELS,
) -> VariationalState:
    """Test-time inference: optimize tau/nu of held-out bags under frozen globals.

    ``with_labels`` builds constraints from the test bags' label tuples just
    like training; ``free_annotation`` admits every factor and applies no
    location penalties.
    """
    if mode not in (MODE_WITH_LABELS, MODE_FREE_ANNOTATION):
        raise ValidationError(f"unknown mode {mode!r}")
    if test_dataset.space != model.space:
        raise ValidationError("test dataset concept space differs from the model's")
    base = opts or FitOptions()
    opts = FitOptions(
        inner_max_iters=base.inner_max_iters,
        outer_max_iters=base.outer_max_iters,
        inner_rel_tol=base.inner_rel_tol,
        outer_rel_tol=base.outer_rel_tol,
        seed=base.seed,
        variant=model.variant,
        threads=base.threads,
    )
    k_max = model.k_max
    if not test_dataset.videos:
        return VariationalState(
            tau=np.zeros((0, k_max, 2)),
            nu=np.zeros((0, k_max)),
            offsets=np.zeros(1, dtype=np.int64),
            phi={name: p.copy() for name, p in model.phi.items()},
            sigma_k2={name: s.copy() for name, s in model.sigma_k2.items()},
        )

    hp = HyperParams(
        alpha=model.alpha,
        penalty_c=model.penalty_c,
        k_max=k_max,
        sigma_n2={c: 1.0 for c in CONCEPTS},
        sigma_a2={c: 1.0 for c in CONCEPTS},
        estimate_variances=False,
    )
    engine = InferenceEngine(test_dataset, hp, opts)
    for ch in engine.channels:
        stored = next(c for c in model.channels if c["name"] == ch.name)
        if stored["dim"] != ch.dim:
            raise ValidationError(
                f"test feature dimension {ch.dim} differs from model dimension "
                f"{stored['dim']} on channel {ch.name!r}"
            )
        ch.sigma_n2 = float(stored["sigma_n2"])
        ch.sigma_a2 = float(stored["sigma_a2"])
    if mode == MODE_FREE_ANNOTATION:
        engine._free_annotation()

    state = engine.init_state()
    for name in state.phi:
        state.phi[name] = model.phi[name].copy()
        state.sigma_k2[name] = model.sigma_k2[name].copy()
    scratch = engine.new_scratch()
    trace: list[float] = []
    engine._inner_loop(state, scratch, trace, update_globals=False)
    return state
