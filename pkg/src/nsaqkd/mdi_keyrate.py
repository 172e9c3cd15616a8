"""Finite-size three-intensity decoy-state key rate for MDI-QKD.

Observed gains are widened by multiplicative Chernoff bounds, the
single-photon-pair yield is bounded in both bases, the phase-flip error is
bounded from the Y basis, and the key is distilled from X-basis signal pairs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

from .optics import BASES, INTENSITIES, SourceSettings
from .report import KeyRateReport, binary_entropy
from .stats import ObservedStatisticsMDI

log = logging.getLogger(__name__)


class EstimationError(ValueError):
    """A decoy estimate is undefined for the given statistics."""


def chernoff_width(x: float) -> float:
    """Fluctuation width f(x) = sqrt(2 ln(1/x)) used in the Chernoff bounds.

    Kept as the single switch point for alternative width functions.
    """
    return math.sqrt(2.0 * math.log(1.0 / x))


FLUCTUATION_FUNCTIONS: dict[str, Callable[[float], float]] = {
    "sqrt_2ln": chernoff_width,
    "sqrt_ln": lambda x: math.sqrt(math.log(1.0 / x)),
    "ln": lambda x: math.log(1.0 / x),
    "none": lambda x: 0.0,
}


DEGENERATE_GAP = 1e-9


def upper_argument(epsilon: float) -> float:
    return (epsilon / 2) ** 4 / 16


def lower_argument(epsilon: float) -> float:
    return (epsilon / 2) ** 1.5


def chernoff_bounds(q: float, n: float, epsilon: float,
                    f: Callable[[float], float] = chernoff_width) -> tuple[float, float]:
    """Return ``(upper, lower)`` bounds on a rate ``q`` observed over ``n`` trials."""
    if not 0 <= q <= 1:
        raise ValueError(f"observed rate must be in [0, 1], got {q}")
    if not n >= 1:
        raise ValueError(f"trial count must be >= 1, got {n}")
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    if q == 0:
        # Zero observations: solve (1 - p)^n = x for the tail probability x.
        return -math.expm1(math.log(upper_argument(epsilon)) / n), 0.0
    root = math.sqrt(n * q)
    upper = q * (1 + f(upper_argument(epsilon)) / root)
    lower = q * (1 - f(lower_argument(epsilon)) / root)
    return upper, max(lower, 0.0)


@dataclass
class MdiKeyRateConfig:
    source_a: SourceSettings
    source_b: SourceSettings | None = None
    f_e: float = 1.16
    epsilon: float = 1e-10
    n_total: float | None = None
    asymptotic: bool = False
    fluctuation: Callable[[float], float] = chernoff_width

    def __post_init__(self):
        if self.source_b is None:
            self.source_b = self.source_a
        if self.f_e < 1:
            raise ValueError(f"error-correction efficiency must be >= 1, got {self.f_e}")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.n_total is not None and self.n_total <= 0:
            raise ValueError("n_total must be positive")

    def sifting_weight(self, a: str, b: str, basis: str) -> float:
        """Share of basis-matched pairs that fall in cell (a, b, basis)."""
        pa, pb = self.source_a.prob, self.source_b.prob
        matched = sum(pa[bs][x] * pb[bs][y] for bs in BASES for x in INTENSITIES for y in INTENSITIES)
        return pa[basis][a] * pb[basis][b] / matched


@dataclass
class DecoyBoundsMDI:
    y11_x_lower: float
    y11_y_lower: float
    e11_upper: float
    gain_bounds: dict = field(default_factory=dict)
    error_gain_bounds: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


class _Bounder:
    """Chernoff-bounded cell observables for one statistics/config pair."""

    def __init__(self, obs: ObservedStatisticsMDI, cfg: MdiKeyRateConfig, warnings: list[str]):
        self.obs, self.cfg, self.warnings = obs, cfg, warnings
        self.gain_bounds: dict = {}
        self.error_gain_bounds: dict = {}

    def trials(self, key) -> float:
        cell = self.obs[key]
        if cell.has_counts:
            return cell.n_pairs
        if self.cfg.n_total is None:
            raise ValueError(f"cell {key} carries no counts and n_total is not set")
        return self.cfg.n_total * self.cfg.sifting_weight(*key)

    def _cell(self, key):
        if key not in self.obs:
            a, b, basis = key
            if a == b == "omega":
                msg = f"cell ({a}, {b}, {basis}) absent; taken as zero"
                if msg not in self.warnings:
                    self.warnings.append(msg)
                return None
            raise KeyError(f"missing MDI cell ({a}, {b}, {basis})")
        return self.obs[key]

    def _bound(self, value: float, key) -> tuple[float, float]:
        if self.cfg.asymptotic:
            return value, value
        return chernoff_bounds(value, max(self.trials(key), 1.0), self.cfg.epsilon, self.cfg.fluctuation)

    def gain(self, key) -> tuple[float, float]:
        if key not in self.gain_bounds:
            cell = self._cell(key)
            self.gain_bounds[key] = (0.0, 0.0) if cell is None else self._bound(cell.gain, key)
        return self.gain_bounds[key]

    def error_gain(self, key) -> tuple[float, float]:
        if key not in self.error_gain_bounds:
            cell = self._cell(key)
            self.error_gain_bounds[key] = ((0.0, 0.0) if cell is None
                                           else self._bound(cell.gain * cell.qber, key))
        return self.error_gain_bounds[key]


def _levels(cfg: MdiKeyRateConfig):
    a, b = cfg.source_a, cfg.source_b
    return (a.mu, a.nu, a.omega), (b.mu, b.nu, b.omega)


def _y11(bnd: _Bounder, basis: str) -> float:
    (ma, na, wa), (mb, nb, wb) = _levels(bnd.cfg)
    # The estimator is a ratio of two differences that both vanish as the
    # decoy gaps close; below this relative gap the result is rounding noise.
    gaps = (ma - na, mb - nb, na - wa, nb - wb)
    if min(gaps) <= DEGENERATE_GAP * max(ma, mb):
        msg = f"Y11 in {basis} basis undefined: decoy intensities nearly degenerate (gaps {min(gaps):.3e})"
        if msg not in bnd.warnings:
            bnd.warnings.append(msg)
        return 0.0
    lvl_a = {"mu": ma, "nu": na, "omega": wa}
    lvl_b = {"mu": mb, "nu": nb, "omega": wb}

    def U(x, y):
        return bnd.gain((x, y, basis))[0] * math.exp(lvl_a[x] + lvl_b[y])

    def L(x, y):
        return bnd.gain((x, y, basis))[1] * math.exp(lvl_a[x] + lvl_b[y])

    weak = L("nu", "nu") + L("omega", "omega") - U("nu", "omega") - U("omega", "nu")
    strong = U("mu", "mu") + U("omega", "omega") - L("mu", "omega") - L("omega", "mu")
    num = (ma ** 2 - wa ** 2) * (mb - wb) * weak - (na ** 2 - wa ** 2) * (nb - wb) * strong
    den = (ma - wa) * (mb - wb) * (na - wa) * (nb - wb) * (ma - na)
    y = num / den
    if y < 0:
        bnd.warnings.append(f"Y11 lower bound in {basis} basis negative ({y:.3e}); clamped to 0")
    elif y > 1:
        bnd.warnings.append(f"Y11 lower bound in {basis} basis above 1 ({y:.3e}); clamped to 1")
    return min(max(y, 0.0), 1.0)


def _e11(bnd: _Bounder, y11_y: float) -> float:
    (_, na, wa), (_, nb, wb) = _levels(bnd.cfg)
    if y11_y <= 0:
        raise EstimationError("Y-basis single-photon yield bound is zero; e11 undefined")
    lvl_a = {"nu": na, "omega": wa}
    lvl_b = {"nu": nb, "omega": wb}

    def U(x, y):
        return bnd.error_gain((x, y, "Y"))[0] * math.exp(lvl_a[x] + lvl_b[y])

    def L(x, y):
        return bnd.error_gain((x, y, "Y"))[1] * math.exp(lvl_a[x] + lvl_b[y])

    num = U("nu", "nu") + U("omega", "omega") - L("nu", "omega") - L("omega", "nu")
    e = num / ((na - wa) * (nb - wb) * y11_y)
    if e < 0:
        bnd.warnings.append(f"e11 upper bound negative ({e:.3e}); clamped to 0")
    elif e > 0.5:
        bnd.warnings.append(f"e11 upper bound above 0.5 ({e:.3e}); clamped to 0.5")
    return min(max(e, 0.0), 0.5)


def estimate_y11_lower(obs: ObservedStatisticsMDI, basis: str, cfg: MdiKeyRateConfig,
                       warnings: list[str] | None = None) -> float:
    """Lower bound on the single-photon-pair yield in ``basis``."""
    if basis not in BASES:
        raise ValueError(f"basis must be one of {BASES}")
    return _y11(_Bounder(obs, cfg, [] if warnings is None else warnings), basis)


def estimate_e11_upper(obs: ObservedStatisticsMDI, cfg: MdiKeyRateConfig,
                       warnings: list[str] | None = None) -> float:
    """Upper bound on the single-photon-pair phase-flip error, from the Y basis."""
    bnd = _Bounder(obs, cfg, [] if warnings is None else warnings)
    return _e11(bnd, _y11(bnd, "Y"))


def decoy_bounds(obs: ObservedStatisticsMDI, cfg: MdiKeyRateConfig) -> DecoyBoundsMDI:
    warnings: list[str] = []
    bnd = _Bounder(obs, cfg, warnings)
    y_x = _y11(bnd, "X")
    y_y = _y11(bnd, "Y")
    e11 = _e11(bnd, y_y)
    return DecoyBoundsMDI(y_x, y_y, e11, dict(bnd.gain_bounds), dict(bnd.error_gain_bounds), warnings)


def _fmt_key(key) -> str:
    return "{}{}_{}".format(*key)


def mdi_secure_key_rate(obs: ObservedStatisticsMDI, cfg: MdiKeyRateConfig) -> KeyRateReport:
    """Secure key rate per emitted pulse pair, with every intermediate."""
    warnings: list[str] = []
    bnd = _Bounder(obs, cfg, warnings)
    a, b = cfg.source_a, cfg.source_b
    signal = obs[("mu", "mu", "X")]
    inter: dict = {"f_e": cfg.f_e, "epsilon": cfg.epsilon, "asymptotic": cfg.asymptotic,
                   "n_total": cfg.n_total}

    y_x = _y11(bnd, "X")
    y_y = _y11(bnd, "Y")
    inter.update(y11_x_lower=y_x, y11_y_lower=y_y)
    try:
        e11 = _e11(bnd, y_y)
    except EstimationError as exc:
        warnings.append(str(exc))
        e11 = math.nan

    ec = signal.gain * cfg.f_e * binary_entropy(signal.qber)
    inter.update(ec_cost=ec, h2_qber_signal=binary_entropy(signal.qber),
                 q_signal=signal.gain, e_signal=signal.qber)
    inter["gain_bounds"] = {_fmt_key(k): {"upper": u, "lower": l} for k, (u, l) in bnd.gain_bounds.items()}
    inter["error_gain_bounds"] = {_fmt_key(k): {"upper": u, "lower": l}
                                  for k, (u, l) in bnd.error_gain_bounds.items()}
    if not cfg.asymptotic:
        inter["trials"] = {_fmt_key(k): bnd.trials(k) for k in bnd.gain_bounds if k in obs}

    if math.isnan(e11):
        inter.update(e11_upper=None, h2_e11=None, privacy_term=None, raw_rate=None)
        return KeyRateReport("MDI", 0.0, inter, warnings)

    h2e = binary_entropy(e11)
    photon_pair = a.mu * b.mu * math.exp(-a.mu - b.mu)
    privacy = photon_pair * y_x * (1 - h2e)
    raw = a.prob["X"]["mu"] * b.prob["X"]["mu"] * (privacy - ec)
    inter.update(e11_upper=e11, h2_e11=h2e, privacy_term=privacy, raw_rate=raw)
    if not raw > 0:
        warnings.append(f"raw rate {raw:.3e} not positive; key rate set to 0")
    rate = raw if raw > 0 else 0.0
    return KeyRateReport("MDI", rate, inter, warnings)
