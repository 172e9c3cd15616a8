"""Finite-key three-intensity decoy-state key rate for BB84.

Detection and error counts are widened with Hoeffding's inequality and fed to
the analytic vacuum / single-photon / phase-error estimators.  Intensity names
map as mu -> mu, nu -> nu1, omega -> nu2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from .optics import BASES, INTENSITIES, SourceSettings
from .report import KeyRateReport, binary_entropy
from .stats import ObservedStatisticsBB84


class EstimationError(ValueError):
    """A decoy estimate is undefined for the given statistics."""


def hoeffding_bounds(count: float, n_basis_total: float, epsilon_sec: float) -> tuple[float, float]:
    """Return ``(upper, lower)`` for ``count`` out of ``n_basis_total`` detections."""
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    if n_basis_total < count:
        raise ValueError(f"basis total {n_basis_total} smaller than count {count}")
    if not 0 < epsilon_sec <= 21:
        raise ValueError(f"epsilon_sec must be in (0, 21], got {epsilon_sec}")
    delta = math.sqrt(n_basis_total / 2 * math.log(21 / epsilon_sec))
    return count + delta, max(count - delta, 0.0)


def tau_n(n: int, intensities, probabilities) -> float:
    """Probability that a pulse of the mixed source carries ``n`` photons (n = 0, 1)."""
    if n not in (0, 1):
        raise ValueError(f"photon number must be 0 or 1, got {n}")
    total = 0.0
    for k, p in zip(intensities, probabilities):
        total += p * math.exp(-k) * k ** n
    return total


def gamma(a: float, b: float, c: float, d: float) -> float:
    """Finite-sampling correction to the phase-error rate.

    ``a`` security parameter, ``b`` observed single-photon bit-error ratio,
    ``c``/``d`` single-photon counts in the test and key bases.  The b -> 0
    and b -> 1 limits are zero.
    """
    if c <= 0 or d <= 0:
        raise EstimationError("single-photon counts must be positive for the phase-error correction")
    if b <= 0 or b >= 1:
        return 0.0
    arg = (c + d) / (c * d * (1 - b) * b) * 21 ** 2 / a ** 2
    lg = math.log2(arg)
    if lg <= 0:
        return 0.0
    return math.sqrt((c + d) * (1 - b) * b * math.log(2) / (c * d)) * math.sqrt(lg)


@dataclass
class Bb84KeyRateConfig:
    source: SourceSettings
    f_e: float = 1.16
    epsilon_sec: float = 1e-9
    epsilon_cor: float = 1e-15
    n_total: float | None = None
    receiver_prob: Mapping[str, float] | None = None
    key_basis: str = "X"
    asymptotic: bool = False

    def __post_init__(self):
        if self.f_e < 1:
            raise ValueError(f"error-correction efficiency must be >= 1, got {self.f_e}")
        for name in ("epsilon_sec", "epsilon_cor"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must be in (0, 1)")
        if self.key_basis not in BASES:
            raise ValueError(f"key basis must be one of {BASES}")
        if self.receiver_prob is None:
            # Receiver picks bases with the sender's marginal probabilities.
            self.receiver_prob = {b: self.source.basis_probability(b) for b in BASES}
        if abs(sum(self.receiver_prob.values()) - 1) > 1e-12:
            raise ValueError("receiver basis probabilities must sum to 1")

    @property
    def nu1(self) -> float:
        return self.source.nu

    @property
    def nu2(self) -> float:
        return self.source.omega

    def tau(self, n: int, basis: str) -> float:
        cond = self.source.conditional(basis)
        return tau_n(n, [self.source.intensity(i) for i in INTENSITIES], [cond[i] for i in INTENSITIES])


@dataclass
class Bb84Estimates:
    s0: dict = field(default_factory=dict)
    s1: dict = field(default_factory=dict)
    v1: dict = field(default_factory=dict)
    e1p: float = math.nan
    tau: dict = field(default_factory=dict)
    lambda_ec: float = math.nan
    warnings: list[str] = field(default_factory=list)


class _Counts:
    """Detection/error counts per (intensity, basis), with Hoeffding bounds."""

    def __init__(self, obs: ObservedStatisticsBB84, cfg: Bb84KeyRateConfig):
        self.obs, self.cfg = obs, cfg
        self.n: dict = {}
        self.m: dict = {}
        for basis in BASES:
            for i in INTENSITIES:
                key = (i, basis)
                cell = obs[key]
                if cell.has_counts:
                    n, m = float(cell.n_detected), float(cell.n_error)
                else:
                    if cfg.n_total is None:
                        raise ValueError(f"cell {key} carries no counts and n_total is not set")
                    sent = cfg.n_total * cfg.source.prob[basis][i] * cfg.receiver_prob[basis]
                    n = sent * cell.gain
                    m = n * cell.qber
                self.n[key], self.m[key] = n, m
        self.n_tot = {b: sum(self.n[(i, b)] for i in INTENSITIES) for b in BASES}
        self.m_tot = {b: sum(self.m[(i, b)] for i in INTENSITIES) for b in BASES}

    def _bound(self, count, total):
        if self.cfg.asymptotic:
            return count, count
        return hoeffding_bounds(count, total, self.cfg.epsilon_sec)

    def n_bound(self, i, basis):
        return self._bound(self.n[(i, basis)], self.n_tot[basis])

    def m_bound(self, i, basis):
        return self._bound(self.m[(i, basis)], self.m_tot[basis])


def _check_decoys(cfg: Bb84KeyRateConfig):
    if cfg.nu1 == cfg.nu2:
        raise EstimationError("degenerate decoys: nu1 == nu2")


def _s0(cnt: _Counts, basis: str, warnings=None) -> float:
    cfg = cnt.cfg
    _check_decoys(cfg)
    mu, nu1, nu2 = cfg.source.mu, cfg.nu1, cfg.nu2
    p = cfg.source.conditional(basis)
    if p["nu"] <= 0 or p["omega"] <= 0:
        raise EstimationError(f"decoy intensities never sent in basis {basis}")
    n_nu2_u = cnt.n_bound("omega", basis)[0]
    n_nu1_l = cnt.n_bound("nu", basis)[1]
    val = cfg.tau(0, basis) / (nu1 - nu2) * (
        math.exp(nu2) * nu1 * n_nu2_u / p["omega"] - math.exp(nu1) * nu2 * n_nu1_l / p["nu"])
    if val < 0 and warnings is not None:
        warnings.append(f"s0 in basis {basis} negative ({val:.3e}); clamped to 0")
    return max(val, 0.0)


def _s1(cnt: _Counts, basis: str, s0: float, warnings=None) -> float:
    cfg = cnt.cfg
    _check_decoys(cfg)
    mu, nu1, nu2 = cfg.source.mu, cfg.nu1, cfg.nu2
    p = cfg.source.conditional(basis)
    if min(p.values()) <= 0:
        raise EstimationError(f"some intensity is never sent in basis {basis}")
    tau0, tau1 = cfg.tau(0, basis), cfg.tau(1, basis)
    bracket = (math.exp(nu1) * cnt.n_bound("nu", basis)[1] / p["nu"]
               - math.exp(nu2) * cnt.n_bound("omega", basis)[0] / p["omega"]
               - (nu1 ** 2 - nu2 ** 2) / mu ** 2
               * (math.exp(mu) * cnt.n_bound("mu", basis)[0] / p["mu"] - s0 / tau0))
    val = mu * tau1 / (mu * nu1 - mu * nu2 - nu1 ** 2 + nu2 ** 2) * bracket
    if val < 0 and warnings is not None:
        warnings.append(f"s1 in basis {basis} negative ({val:.3e}); clamped to 0")
    return max(val, 0.0)


def _v1(cnt: _Counts, basis: str) -> float:
    cfg = cnt.cfg
    nu1, nu2 = cfg.nu1, cfg.nu2
    p = cfg.source.conditional(basis)
    val = cfg.tau(1, basis) / (nu1 - nu2) * (
        math.exp(nu1) * cnt.m_bound("nu", basis)[0] / p["nu"]
        - math.exp(nu2) * cnt.m_bound("omega", basis)[1] / p["omega"])
    return max(val, 0.0)


def estimate_s0(obs: ObservedStatisticsBB84, basis: str, cfg: Bb84KeyRateConfig) -> float:
    """Lower estimate of the vacuum-event count in ``basis``."""
    return _s0(_Counts(obs, cfg), basis)


def estimate_s1(obs: ObservedStatisticsBB84, basis: str, cfg: Bb84KeyRateConfig) -> float:
    """Lower estimate of the single-photon-event count in ``basis``."""
    cnt = _Counts(obs, cfg)
    return _s1(cnt, basis, _s0(cnt, basis))


def phase_error_bound(v1_conj: float, s1_conj: float, s1_key: float, epsilon_sec: float,
                      asymptotic: bool = False) -> tuple[float, float]:
    """Return ``(e1p, gamma)`` before clamping."""
    if s1_conj <= 0:
        raise EstimationError("conjugate-basis single-photon count is zero; phase error undefined")
    ratio = v1_conj / s1_conj
    corr = 0.0 if asymptotic else gamma(epsilon_sec, ratio, s1_conj, s1_key)
    return ratio + corr, corr


def estimate_phase_error(obs: ObservedStatisticsBB84, cfg: Bb84KeyRateConfig,
                         warnings: list[str] | None = None) -> float:
    """Phase-error upper bound for the key basis, from the conjugate basis."""
    cnt = _Counts(obs, cfg)
    key = cfg.key_basis
    conj = "Y" if key == "X" else "X"
    s1_key = _s1(cnt, key, _s0(cnt, key))
    s1_conj = _s1(cnt, conj, _s0(cnt, conj))
    e, _ = phase_error_bound(_v1(cnt, conj), s1_conj, s1_key, cfg.epsilon_sec, cfg.asymptotic)
    if not 0 <= e <= 0.5 and warnings is not None:
        warnings.append(f"phase error bound {e:.3e} outside [0, 0.5]; clamped")
    return min(max(e, 0.0), 0.5)


def bb84_secure_key_rate(obs: ObservedStatisticsBB84, cfg: Bb84KeyRateConfig) -> KeyRateReport:
    """Secure key rate per pulse sent, with every intermediate."""
    warnings: list[str] = []
    cnt = _Counts(obs, cfg)
    n_pulses = cfg.n_total if cfg.n_total is not None else obs.n_pulses
    if not n_pulses:
        raise ValueError("total pulse number unknown: set n_total or supply n_pulses")
    key = cfg.key_basis
    conj = "Y" if key == "X" else "X"
    inter: dict = {"f_e": cfg.f_e, "epsilon_sec": cfg.epsilon_sec, "epsilon_cor": cfg.epsilon_cor,
                   "n_total": n_pulses, "key_basis": key, "asymptotic": cfg.asymptotic,
                   "receiver_prob": dict(cfg.receiver_prob)}
    inter["tau"] = {b: {"tau0": cfg.tau(0, b), "tau1": cfg.tau(1, b)} for b in BASES}
    inter["counts"] = {f"{i}_{b}": {"n": cnt.n[(i, b)], "m": cnt.m[(i, b)],
                                    "n_upper": cnt.n_bound(i, b)[0], "n_lower": cnt.n_bound(i, b)[1],
                                    "m_upper": cnt.m_bound(i, b)[0], "m_lower": cnt.m_bound(i, b)[1]}
                       for b in BASES for i in INTENSITIES}

    s0 = {b: _s0(cnt, b, warnings) for b in BASES}
    s1 = {b: _s1(cnt, b, s0[b], warnings) for b in BASES}
    v1 = {b: _v1(cnt, b) for b in BASES}
    e_key = cnt.m_tot[key] / cnt.n_tot[key] if cnt.n_tot[key] else 0.0
    lam = cnt.n_tot[key] * cfg.f_e * binary_entropy(min(e_key, 1.0))
    inter.update(s0=s0, s1=s1, v1=v1, n_basis=cnt.n_tot, m_basis=cnt.m_tot,
                 qber_key=e_key, lambda_ec=lam)

    try:
        e1p, corr = phase_error_bound(v1[conj], s1[conj], s1[key], cfg.epsilon_sec, cfg.asymptotic)
    except EstimationError as exc:
        warnings.append(str(exc))
        inter.update(e1p=None, gamma=None, raw_rate=None)
        return KeyRateReport("BB84", 0.0, inter, warnings)
    if not 0 <= e1p <= 0.5:
        warnings.append(f"phase error bound {e1p:.3e} outside [0, 0.5]; clamped")
    e1p = min(max(e1p, 0.0), 0.5)

    if cfg.asymptotic:
        overhead = 0.0
    else:
        overhead = 6 * math.log2(21 / cfg.epsilon_sec) + math.log2(2 / cfg.epsilon_cor)
    bits = s0[key] + s1[key] * (1 - binary_entropy(e1p)) - lam - overhead
    raw = bits / n_pulses
    inter.update(e1p=e1p, gamma=corr, h2_e1p=binary_entropy(e1p), overhead_bits=overhead,
                 secure_bits=bits, raw_rate=raw)
    if not raw > 0:
        warnings.append(f"raw rate {raw:.3e} not positive; key rate set to 0")
    return KeyRateReport("BB84", raw if raw > 0 else 0.0, inter, warnings)
