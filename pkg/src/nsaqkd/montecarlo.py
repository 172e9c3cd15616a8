"""Pulse-level Monte Carlo simulator for the MDI and BB84 protocols.

Every shard of ``SHARD_SIZE`` consecutive pulses draws from its own PCG64
stream seeded by ``SeedSequence(seed, spawn_key=(stream, shard))``, so a run is
reproducible no matter how many worker threads process the shards.

Clicks use the detector model's marginal probabilities with an independent
draw per detector and pulse.  A detector fires when an Exp(1) variate falls
below ``psi^2 + noise_rate``, which is the same event as
``U < 1 - (1-Y0)(1-Pap) exp(-psi^2)``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .optics import (BASES, HOM_PHASE, INTENSITIES, PHASES, TWO_PI, OpticalLinkModel,
                     SourceSettings, psi_squared)
from .stats import Bb84Cell, MdiCell, ObservedStatisticsBB84, ObservedStatisticsMDI

log = logging.getLogger(__name__)

SHARD_SIZE = 1 << 18

# Stream ids keep different simulation kinds from sharing random numbers.
_STREAM_MDI, _STREAM_BB84, _STREAM_MDI_CELL, _STREAM_BB84_CELL, _STREAM_HOM = range(5)

# Receiver reference phase per basis for BB84 decoding.
_RECEIVER_PHASE = {"X": 0.0, "Y": math.pi / 2}


class LowStatisticsError(RuntimeError):
    """Too few coincidences for a meaningful estimate."""


@dataclass
class SessionConfig:
    n_pulses: int
    seed: int
    protocol: str
    source_a: SourceSettings
    link: OpticalLinkModel
    source_b: SourceSettings | None = None
    receiver_prob: dict | None = None
    workers: int = 1

    def __post_init__(self):
        if self.n_pulses < 1:
            raise ValueError(f"n_pulses must be >= 1, got {self.n_pulses}")
        if self.protocol not in ("MDI", "BB84"):
            raise ValueError(f"protocol must be MDI or BB84, got {self.protocol!r}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.protocol == "MDI" and self.source_b is None:
            self.source_b = self.source_a
        if self.protocol == "BB84" and self.receiver_prob is None:
            self.receiver_prob = {b: self.source_a.basis_probability(b) for b in BASES}


def _rng(seed: int, stream: int, shard: int, *extra: int) -> np.random.Generator:
    key = (stream, *extra, shard)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _shards(n: int):
    for k, start in enumerate(range(0, n, SHARD_SIZE)):
        yield k, min(SHARD_SIZE, n - start)


def _run_shards(fn, n: int, workers: int):
    """Apply ``fn(shard_index, size)`` over all shards and sum the count arrays."""
    shards = list(_shards(n))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda s: fn(*s), shards))
    else:
        parts = [fn(*s) for s in shards]
    # Integer sums are order independent; keep shard order anyway.
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total


def _choices(rng, probs: np.ndarray, n: int) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(n), side="right")


def _flat(source: SourceSettings) -> np.ndarray:
    """Joint (basis, intensity) probabilities, index = basis * 3 + intensity."""
    return np.array([source.prob[b][i] for b in BASES for i in INTENSITIES])


def _levels(source: SourceSettings) -> np.ndarray:
    return np.array([source.intensity(i) for i in INTENSITIES])


def _take(x, idx):
    return x[idx] if np.ndim(x) else x


def _pair_coincidence(rng, a_sq, b_sq, theta_a, theta_b, link: OpticalLinkModel, n: int,
                      interference=True):
    """Indices of the ``n`` simulated pulse pairs that give a coincidence.

    Detector D1's exponential variate is drawn first for every pair.  Phases
    and D2 are only evaluated where D1 can still fire, using the bound
    |psi|^2 <= 2A^2 + 2B^2 + 4AB.  Dropped pairs could never have clicked, so
    the thinning is exact.
    """
    lam = link.detector.noise_rate
    a_sq = np.asarray(a_sq, dtype=float)
    b_sq = np.asarray(b_sq, dtype=float)
    bound = 2 * (a_sq + b_sq) + 4 * np.sqrt(a_sq * b_sq) + lam
    e1 = rng.standard_exponential(n)
    idx = np.flatnonzero(e1 < bound)
    dphi = (rng.random(idx.size) - rng.random(idx.size)) * TWO_PI
    psi1, psi2 = psi_squared(_take(a_sq, idx), _take(b_sq, idx), _take(theta_a, idx),
                             _take(theta_b, idx), dphi, link.theta_c, interference)
    e2 = rng.standard_exponential(idx.size)
    return idx[(e1[idx] < psi1 + lam) & (e2 < psi2 + lam)]


def _mdi_errors(rng, basis_idx, theta_a, theta_b, e_d):
    """Error flags for coincident pairs, given their basis and phase settings."""
    wrong = np.where(basis_idx == 0, theta_a != theta_b, theta_a == theta_b)
    if e_d > 0:
        wrong = wrong ^ (rng.random(wrong.size) < e_d)
    return wrong


def _check_cells(source_a, source_b=None):
    for b in BASES:
        for i in INTENSITIES:
            if source_a.prob[b][i] == 0 or (source_b is not None and source_b.prob[b][i] == 0):
                log.warning("cell with basis %s intensity %s has zero probability; it stays empty", b, i)


def simulate_mdi(cfg: SessionConfig) -> ObservedStatisticsMDI:
    """Simulate ``cfg.n_pulses`` MDI pulse pairs and count sifted coincidences."""
    if cfg.protocol != "MDI":
        raise ValueError("simulate_mdi needs an MDI session")
    _check_cells(cfg.source_a, cfg.source_b)
    pa, pb = _flat(cfg.source_a), _flat(cfg.source_b)
    la, lb = _levels(cfg.source_a), _levels(cfg.source_b)
    link = cfg.link
    phases = np.array([PHASES[b] for b in BASES])  # [basis, bit]

    def shard(k, m):
        rng = _rng(cfg.seed, _STREAM_MDI, k)
        ca, cb = _choices(rng, pa, m), _choices(rng, pb, m)
        bits = rng.integers(0, 2, (2, m))
        basis_a, int_a = np.divmod(ca, 3)
        basis_b, int_b = np.divmod(cb, 3)
        keep = basis_a == basis_b
        basis = basis_a[keep]
        ia, ib = int_a[keep], int_b[keep]
        th_a = phases[basis, bits[0][keep]]
        th_b = phases[basis, bits[1][keep]]
        a_sq = la[ia] * link.eta_a / 4
        b_sq = lb[ib] * link.eta_b / 4
        hit = _pair_coincidence(rng, a_sq, b_sq, th_a, th_b, link, basis.size)
        err = hit[_mdi_errors(rng, basis[hit], th_a[hit], th_b[hit], link.e_d)]
        cell = basis * 9 + ia * 3 + ib
        out = np.zeros((4, 18), dtype=np.int64)
        out[0] = np.bincount(cell, minlength=18)
        out[1] = np.bincount(cell[hit], minlength=18)
        out[2] = np.bincount(cell[err], minlength=18)
        out[3, 0] = m - keep.sum()
        return out

    tot = _run_shards(shard, cfg.n_pulses, cfg.workers)
    cells = {}
    for bi, basis in enumerate(BASES):
        for ai, a in enumerate(INTENSITIES):
            for ci, b in enumerate(INTENSITIES):
                j = bi * 9 + ai * 3 + ci
                cells[(a, b, basis)] = MdiCell.from_counts(int(tot[0, j]), int(tot[1, j]), int(tot[2, j]))
    n_sifted = int(tot[0].sum())
    assert n_sifted + int(tot[3, 0]) == cfg.n_pulses
    return ObservedStatisticsMDI(cells, cfg.n_pulses, n_sifted, "montecarlo")


def simulate_mdi_cell(basis: str, iota_a: float, iota_b: float, link: OpticalLinkModel,
                      n_pairs: int, seed: int, workers: int = 1) -> MdiCell:
    """Simulate ``n_pairs`` basis-matched pairs with fixed intensities."""
    if basis not in BASES:
        raise ValueError(f"basis must be one of {BASES}")
    bi = BASES.index(basis)
    a_sq, b_sq = iota_a * link.eta_a / 4, iota_b * link.eta_b / 4
    phases = np.array(PHASES[basis])

    def shard(k, m):
        rng = _rng(seed, _STREAM_MDI_CELL, k, bi)
        bits = rng.integers(0, 2, (2, m))
        th_a, th_b = phases[bits[0]], phases[bits[1]]
        hit = _pair_coincidence(rng, a_sq, b_sq, th_a, th_b, link, m)
        err = _mdi_errors(rng, np.full(hit.size, bi), th_a[hit], th_b[hit], link.e_d)
        return np.array([hit.size, err.sum()], dtype=np.int64)

    c, e = _run_shards(shard, n_pairs, workers)
    return MdiCell.from_counts(n_pairs, int(c), int(e))


def _bb84_detect(rng, mean, cos_delta, bit, e_d, link: OpticalLinkModel, n: int):
    """Indices of detected pulses and of erroneous ones among ``n`` pulses.

    ``cos_delta`` is the cosine of the sender phase minus the receiver
    reference phase.  D1 decodes bit 0 and D2 bit 1; a double click gets a
    random bit.  Pulses where neither exponential falls below the total mean
    can never click and are skipped before the per-port intensities are built.
    """
    lam = link.detector.noise_rate
    e = rng.standard_exponential((2, n))
    top = np.asarray(mean, dtype=float) + lam
    idx = np.flatnonzero((e[0] < top) | (e[1] < top))
    m = _take(np.asarray(mean, dtype=float), idx)
    c = _take(np.asarray(cos_delta, dtype=float), idx)
    i1 = m * ((1 - e_d) * (1 + c) / 2 + e_d * (1 - c) / 2)
    d1 = e[0, idx] < i1 + lam
    d2 = e[1, idx] < (m - i1) + lam
    coin = rng.integers(0, 2, idx.size).astype(bool)
    decoded = np.where(d1 & d2, coin, d2)
    det = d1 | d2
    wrong = det & (decoded != _take(bit, idx).astype(bool))
    return idx[det], idx[wrong]


def simulate_bb84(cfg: SessionConfig) -> ObservedStatisticsBB84:
    """Simulate ``cfg.n_pulses`` BB84 pulses from one sender to the relay."""
    if cfg.protocol != "BB84":
        raise ValueError("simulate_bb84 needs a BB84 session")
    _check_cells(cfg.source_a)
    pa = _flat(cfg.source_a)
    la = _levels(cfg.source_a)
    pr = np.array([cfg.receiver_prob[b] for b in BASES])
    phases = np.array([PHASES[b] for b in BASES])
    recv = np.array([_RECEIVER_PHASE[b] for b in BASES])
    link = cfg.link

    def shard(k, m):
        rng = _rng(cfg.seed, _STREAM_BB84, k)
        ca = _choices(rng, pa, m)
        rb = _choices(rng, pr, m)
        bit = rng.integers(0, 2, m)
        basis, it = np.divmod(ca, 3)
        keep = basis == rb
        basis, it, bit = basis[keep], it[keep], bit[keep]
        cos_delta = np.cos(phases - recv[:, None])[basis, bit]
        det, err = _bb84_detect(rng, la[it] * link.eta_a, cos_delta, bit, link.e_d, link, basis.size)
        cell = basis * 3 + it
        out = np.zeros((4, 6), dtype=np.int64)
        out[0] = np.bincount(cell, minlength=6)
        out[1] = np.bincount(cell[det], minlength=6)
        out[2] = np.bincount(cell[err], minlength=6)
        out[3, 0] = m - keep.sum()
        return out

    tot = _run_shards(shard, cfg.n_pulses, cfg.workers)
    cells = {}
    for bi, basis in enumerate(BASES):
        for ii, i in enumerate(INTENSITIES):
            j = bi * 3 + ii
            cells[(i, basis)] = Bb84Cell.from_counts(int(tot[0, j]), int(tot[1, j]), int(tot[2, j]))
    n_sifted = int(tot[0].sum())
    assert n_sifted + int(tot[3, 0]) == cfg.n_pulses
    return ObservedStatisticsBB84(cells, cfg.n_pulses, n_sifted, "montecarlo")


def simulate_bb84_cell(basis: str, iota: float, link: OpticalLinkModel, n_pulses: int,
                       seed: int, workers: int = 1) -> Bb84Cell:
    """Simulate ``n_pulses`` basis-matched BB84 pulses of a fixed intensity."""
    if basis not in BASES:
        raise ValueError(f"basis must be one of {BASES}")
    phases = np.array(PHASES[basis])

    def shard(k, m):
        rng = _rng(seed, _STREAM_BB84_CELL, k, BASES.index(basis))
        bit = rng.integers(0, 2, m)
        cos_delta = np.cos(phases - _RECEIVER_PHASE[basis])[bit]
        det, err = _bb84_detect(rng, iota * link.eta_a, cos_delta, bit, link.e_d, link, m)
        return np.array([det.size, err.size], dtype=np.int64)

    d, e = _run_shards(shard, n_pulses, workers)
    return Bb84Cell.from_counts(n_pulses, int(d), int(e))


@dataclass(frozen=True)
class HomEstimate:
    visibility: float
    stderr: float
    coincidences_min: int
    coincidences_uncorrelated: int
    n_pairs: int


def _hom_counts(link, iota, n_pairs, seed, stream_shard, interference, workers):
    a_sq, b_sq = iota * link.eta_a / 4, iota * link.eta_b / 4

    def shard(k, m):
        rng = _rng(seed, _STREAM_HOM, k, stream_shard)
        hit = _pair_coincidence(rng, a_sq, b_sq, HOM_PHASE, HOM_PHASE, link, m, interference)
        return np.array([hit.size], dtype=np.int64)

    return int(_run_shards(shard, n_pairs, workers)[0])


def estimate_hom_visibility(link: OpticalLinkModel, iota: float, n_pairs: int, seed: int, *,
                            interference: bool = True, workers: int = 1,
                            min_coincidences: int = 100) -> HomEstimate:
    """HOM visibility from two simulated runs: zero delay and large delay.

    The zero-delay run interferes the pulses (unless ``interference`` is off);
    the large-delay run makes them distinguishable and gives the uncorrelated
    coincidence level.  The standard error treats both counts as independent
    binomials.
    """
    if iota < 0 or n_pairs < 1:
        raise ValueError("need non-negative intensity and at least one pair")
    c_min = _hom_counts(link, iota, n_pairs, seed, 0, interference, workers)
    c_unc = _hom_counts(link, iota, n_pairs, seed, 1, False, workers)
    if min(c_min, c_unc) < min_coincidences:
        raise LowStatisticsError(
            f"only {min(c_min, c_unc)} coincidences (< {min_coincidences}); increase n_pairs or intensity")
    a, b = c_min / n_pairs, c_unc / n_pairs
    ratio = a / b
    rel_var = (1 - a) / c_min + (1 - b) / c_unc
    return HomEstimate(1 - ratio, ratio * math.sqrt(rel_var), c_min, c_unc, n_pairs)
