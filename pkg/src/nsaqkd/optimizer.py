"""Particle-swarm optimisation of decoy intensities and emission probabilities.

The search space is encoded so that every particle decodes to valid source
settings.  Intensities are built as ``omega = x3``, ``nu = omega + x2`` and
``mu = nu + omega + x1`` with positive increments.  Probabilities come from
a softmax over K-1 free logits plus a fixed zero logit.  Infeasible moves are
repaired by clipping to the box.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bb84_keyrate import Bb84KeyRateConfig, bb84_secure_key_rate
from .mdi_keyrate import MdiKeyRateConfig, mdi_secure_key_rate
from .optics import (BASES, INTENSITIES, OpticalLinkModel, SourceSettings, bb84_gain_qber,
                     mdi_gain_table)
from .report import KeyRateReport
from .stats import Bb84Cell, MdiCell, ObservedStatisticsBB84, ObservedStatisticsMDI

log = logging.getLogger(__name__)

PROTOCOLS = ("MDI", "BB84")
MDI_PROB_NAMES = ("p_mu_x", "p_mu_y", "p_nu_x", "p_nu_y", "p_omega")
BB84_PROB_NAMES = tuple(f"p_{i}_{b.lower()}" for b in BASES for i in INTENSITIES)

# Smallest intensity gap kept by the encoding so that mu > nu + omega and
# nu > omega hold strictly.
MIN_GAP = 1e-6


class ConstraintError(ValueError):
    """A parameter vector violates a source-settings constraint."""


@dataclass(frozen=True)
class Mode:
    """Asymptotic (central values) or finite with ``n_total`` trials."""

    asymptotic: bool = True
    n_total: float | None = None

    def __post_init__(self):
        if not self.asymptotic and not (self.n_total and self.n_total > 0):
            raise ValueError("finite mode needs a positive n_total")

    @classmethod
    def finite(cls, n_total: float) -> "Mode":
        return cls(False, float(n_total))

    def __str__(self):
        return "asymptotic" if self.asymptotic else f"finite(n_total={self.n_total:g})"


ASYMPTOTIC = Mode()


@dataclass(frozen=True)
class ParameterVector:
    """Decoy intensities plus the emission probabilities.

    For MDI the probabilities are ``MDI_PROB_NAMES``; the weak intensity
    carries no basis.  For BB84 they are the six ``BB84_PROB_NAMES``.
    """

    protocol: str
    mu: float
    nu: float
    omega: float
    probs: tuple[float, ...]

    def check(self) -> None:
        """Raise ConstraintError naming the first violated constraint."""
        names = MDI_PROB_NAMES if self.protocol == "MDI" else BB84_PROB_NAMES
        if self.protocol not in PROTOCOLS:
            raise ConstraintError(f"unknown protocol {self.protocol!r}")
        if len(self.probs) != len(names):
            raise ConstraintError(f"{self.protocol} needs {len(names)} probabilities, got {len(self.probs)}")
        if self.omega < 0:
            raise ConstraintError(f"omega >= 0 violated (omega={self.omega})")
        if not self.nu > self.omega:
            raise ConstraintError(f"nu > omega violated (nu={self.nu}, omega={self.omega})")
        if not self.mu > self.nu + self.omega:
            raise ConstraintError(f"mu > nu + omega violated (mu={self.mu}, nu={self.nu}, omega={self.omega})")
        for n, p in zip(names, self.probs):
            if not 0 <= p <= 1:
                raise ConstraintError(f"{n} in [0, 1] violated ({p})")
        if abs(sum(self.probs) - 1) > 1e-12:
            raise ConstraintError(f"probabilities sum to one violated (sum={sum(self.probs)!r})")

    def source(self) -> SourceSettings:
        self.check()
        if self.protocol == "MDI":
            return SourceSettings.with_basisless_vacuum(self.mu, self.nu, self.omega, *self.probs)
        p = iter(self.probs)
        return SourceSettings(self.mu, self.nu, self.omega,
                              {b: {i: next(p) for i in INTENSITIES} for b in BASES})

    @classmethod
    def from_source(cls, protocol: str, src: SourceSettings) -> "ParameterVector":
        if protocol == "MDI":
            pr = src.prob
            probs = (pr["X"]["mu"], pr["Y"]["mu"], pr["X"]["nu"], pr["Y"]["nu"],
                     pr["X"]["omega"] + pr["Y"]["omega"])
        else:
            probs = tuple(src.prob[b][i] for b in BASES for i in INTENSITIES)
        return cls(protocol, src.mu, src.nu, src.omega, probs)

    def to_dict(self) -> dict:
        names = MDI_PROB_NAMES if self.protocol == "MDI" else BB84_PROB_NAMES
        return {"protocol": self.protocol, "mu": self.mu, "nu": self.nu, "omega": self.omega,
                **dict(zip(names, self.probs))}


@dataclass(frozen=True)
class SearchSpace:
    """Box for the encoded search vector ``[x1, x2, x3, logits...]``."""

    protocol: str
    mu_max: float = 1.0
    nu_max: float = 0.5
    omega_max: float = 0.05
    logit_bound: float = 8.0

    @property
    def n_probs(self) -> int:
        return len(MDI_PROB_NAMES if self.protocol == "MDI" else BB84_PROB_NAMES)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        k = self.n_probs - 1
        lo = np.array([MIN_GAP, MIN_GAP, 0.0] + [-self.logit_bound] * k)
        hi = np.array([self.mu_max, self.nu_max, self.omega_max] + [self.logit_bound] * k)
        return lo, hi

    def decode(self, x: Sequence[float]) -> ParameterVector:
        x = np.asarray(x, dtype=float)
        omega = float(x[2])
        nu = omega + float(x[1])
        mu = nu + omega + float(x[0])
        z = np.concatenate([x[3:], [0.0]])
        w = np.exp(z - z.max())
        p = w / w.sum()
        probs = tuple(float(v) for v in p[:-1])
        # Put the rounding residue on the last entry so the sum is exactly 1.
        probs = probs + (1.0 - math.fsum(probs),)
        return ParameterVector(self.protocol, mu, nu, omega, probs)

    def encode(self, pv: ParameterVector) -> np.ndarray:
        p = np.asarray(pv.probs, dtype=float)
        if np.any(p <= 0):
            raise ConstraintError("encoding needs strictly positive probabilities")
        logits = np.log(p[:-1] / p[-1])
        return np.concatenate([[pv.mu - pv.nu - pv.omega, pv.nu - pv.omega, pv.omega], logits])


@dataclass(frozen=True)
class PsoConfig:
    swarm: int = 50
    iterations: int = 200
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    seed: int = 0
    constraint_mode: str = "project"
    max_velocity_fraction: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if self.swarm < 2:
            raise ValueError("swarm size must be >= 2")
        if self.iterations < 1:
            raise ValueError("iteration budget must be >= 1")
        if min(self.inertia, self.cognitive, self.social) < 0:
            raise ValueError("PSO coefficients must be non-negative")
        if self.constraint_mode != "project":
            raise ValueError("only the 'project' constraint mode is supported")


@dataclass
class PsoResult:
    x: np.ndarray
    value: float
    trace: list[float]
    evaluations: int


def pso(objective: Callable[[np.ndarray], float], lower, upper, cfg: PsoConfig = PsoConfig(),
        initial: Sequence[Sequence[float]] = ()) -> PsoResult:
    """Maximise ``objective`` over the box ``[lower, upper]``.

    ``initial`` optionally replaces the first particles' random starting
    positions.  The returned trace holds the global best after every
    iteration, so it never decreases.
    """
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    if lower.shape != upper.shape or np.any(upper < lower):
        raise ValueError("invalid search box")
    rng = np.random.default_rng(cfg.seed)
    span = upper - lower
    vmax = cfg.max_velocity_fraction * span
    pos = lower + rng.random((cfg.swarm, lower.size)) * span
    for k, x0 in enumerate(initial[:cfg.swarm]):
        pos[k] = np.clip(x0, lower, upper)
    vel = (rng.random(pos.shape) - 0.5) * vmax

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def evaluate(points):
        if pool is None:
            vals = [objective(p) for p in points]
        else:
            vals = list(pool.map(objective, points))
        return np.array([v if math.isfinite(v) else -math.inf for v in vals])

    try:
        val = evaluate(pos)
        best_pos, best_val = pos.copy(), val.copy()
        g = int(np.argmax(best_val))
        g_pos, g_val = best_pos[g].copy(), float(best_val[g])
        trace = []
        for _ in range(cfg.iterations):
            r1, r2 = rng.random(pos.shape), rng.random(pos.shape)
            vel = (cfg.inertia * vel + cfg.cognitive * r1 * (best_pos - pos)
                   + cfg.social * r2 * (g_pos - pos))
            np.clip(vel, -vmax, vmax, out=vel)
            pos = pos + vel
            # Projection repair: clip to the box and stop motion into the wall.
            out = (pos < lower) | (pos > upper)
            pos = np.clip(pos, lower, upper)
            vel[out] = 0.0
            val = evaluate(pos)
            better = val > best_val
            best_pos[better], best_val[better] = pos[better], val[better]
            g = int(np.argmax(best_val))
            if best_val[g] > g_val:
                g_pos, g_val = best_pos[g].copy(), float(best_val[g])
            trace.append(g_val)
    finally:
        if pool is not None:
            pool.shutdown()
    return PsoResult(g_pos, g_val, trace, cfg.swarm * (cfg.iterations + 1))


# ---------------------------------------------------------------------------
# Objective: analytic channel feeding the key-rate engines.

def _zero_probability_cells(src: SourceSettings, protocol: str) -> list[str]:
    missing = [f"{b}/{i}" for b in BASES for i in INTENSITIES if src.prob[b][i] <= 0]
    return missing


def expected_statistics(protocol: str, src: SourceSettings, link: OpticalLinkModel,
                        n_total: float | None = None, gain_convention: str = "pair"):
    """Observed statistics the analytic channel model predicts for ``src``.

    ``gain_convention`` only affects MDI; see ``optics.GAIN_CONVENTIONS``.
    """
    if protocol == "MDI":
        table = mdi_gain_table(src.intensities, src.intensities, link, convention=gain_convention)
        cells = {k: MdiCell(g.gain, g.qber) for k, g in table.items()}
        return ObservedStatisticsMDI(cells, n_total, None, "analytic")
    if protocol == "BB84":
        cells = {}
        for basis in BASES:
            for i in INTENSITIES:
                g = bb84_gain_qber(basis, src.intensity(i), link)
                cells[(i, basis)] = Bb84Cell(g.gain, g.qber)
        return ObservedStatisticsBB84(cells, n_total, None, "analytic")
    raise ValueError(f"unknown protocol {protocol!r}")


def evaluate_report(params: ParameterVector, protocol: str, link: OpticalLinkModel,
                    mode: Mode = ASYMPTOTIC, keyrate_options: dict | None = None,
                    gain_convention: str = "pair") -> KeyRateReport:
    """Key-rate report for ``params``; the objective's full diagnostic form."""
    if params.protocol != protocol:
        raise ConstraintError(f"parameter vector is for {params.protocol}, not {protocol}")
    src = params.source()
    opts = dict(keyrate_options or {})
    missing = _zero_probability_cells(src, protocol)
    if missing:
        msg = f"decoy estimation impossible: zero emission probability for {', '.join(missing)}"
        return KeyRateReport(protocol, 0.0, {"zero_probability_cells": missing}, [msg])
    obs = expected_statistics(protocol, src, link, mode.n_total, gain_convention)
    if protocol == "MDI":
        cfg = MdiKeyRateConfig(src, n_total=mode.n_total, asymptotic=mode.asymptotic, **opts)
        return mdi_secure_key_rate(obs, cfg)
    # Asymptotic BB84 counts scale linearly with the pulse number, which then
    # cancels in the per-pulse rate; any positive value will do.
    n_total = mode.n_total if mode.n_total is not None else 1.0
    cfg = Bb84KeyRateConfig(src, n_total=n_total, asymptotic=mode.asymptotic, **opts)
    return bb84_secure_key_rate(obs, cfg)


def evaluate_objective(params: ParameterVector, protocol: str, link: OpticalLinkModel,
                       mode: Mode = ASYMPTOTIC, keyrate_options: dict | None = None,
                       gain_convention: str = "pair") -> float:
    """Secure key rate per pulse (pair) predicted for ``params``."""
    return evaluate_report(params, protocol, link, mode, keyrate_options, gain_convention).rate


@dataclass
class OptimizeResult:
    best: ParameterVector
    rate: float
    trace: list[float]
    zero_rate: bool
    evaluations: int
    mode: Mode = field(default=ASYMPTOTIC)

    def to_dict(self) -> dict:
        return {"best": self.best.to_dict(), "rate": self.rate, "zero_rate": self.zero_rate,
                "evaluations": self.evaluations, "mode": str(self.mode)}


def optimize(protocol: str, link: OpticalLinkModel, mode: Mode = ASYMPTOTIC,
             pso_cfg: PsoConfig = PsoConfig(), space: SearchSpace | None = None,
             initial: Sequence[ParameterVector] = (),
             keyrate_options: dict | None = None, gain_convention: str = "pair") -> OptimizeResult:
    """Search source settings that maximise the predicted key rate.

    A link that yields no key anywhere is not an error: the result carries
    ``zero_rate=True`` together with a feasible parameter vector.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    space = space or SearchSpace(protocol)
    if space.protocol != protocol:
        raise ValueError("search space protocol mismatch")
    lo, hi = space.bounds()

    def objective(x):
        try:
            return evaluate_objective(space.decode(x), protocol, link, mode, keyrate_options,
                                      gain_convention)
        except (ValueError, ArithmeticError) as exc:
            log.debug("objective failed at %s: %s", x, exc)
            return 0.0

    starts = [space.encode(p) for p in initial]
    res = pso(objective, lo, hi, pso_cfg, starts)
    best = space.decode(res.x)
    best.check()
    return OptimizeResult(best, res.value, res.trace, not res.value > 0, res.evaluations, mode)
