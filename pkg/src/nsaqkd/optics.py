"""Closed-form optical model of the three-interferometer NSA-MDI system.

Two weak-coherent senders (Alice, Bob) each encode a relative phase between
a short and a long time bin.  The relay (Charlie) runs the pulses through
its own asymmetric interferometer and detects the middle time bin with two
threshold detectors D1 and D2.  The same relay hardware doubles as the
decoder of a phase-encoded BB84 link.

All transmittances ``eta`` are end-to-end: fibre loss, the relay's internal
loss and the detector efficiency are multiplied in before any amplitude is
formed (see :meth:`OpticalLinkModel.from_db`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

BASES = ("X", "Y")
INTENSITIES = ("mu", "nu", "omega")

# Relative phases per basis and bit value.
PHASES = {"X": (0.0, math.pi), "Y": (math.pi / 2, 3 * math.pi / 2)}

TWO_PI = 2.0 * math.pi
HOM_PHASE = math.pi / 2
N_PHASE = 512
# "pair": probability per emitted pulse pair (the four phase settings of a
# basis averaged).  "setting_sum": coincidence probabilities summed over the
# four settings, the unit in which published MDI gain tables are quoted.
GAIN_CONVENTIONS = {"pair": 1.0, "setting_sum": 4.0}


def db_to_transmittance(loss_db: float) -> float:
    """Convert a loss in dB to a linear power transmittance."""
    if loss_db < 0:
        raise ValueError(f"loss must be non-negative, got {loss_db} dB")
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class SourceSettings:
    """Decoy intensities and joint (basis, intensity) emission probabilities.

    ``prob[basis][intensity]`` is the probability that one pulse is prepared in
    ``basis`` with ``intensity``; the nine-or-fewer entries sum to one.
    """

    mu: float
    nu: float
    omega: float
    prob: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if min(self.mu, self.nu, self.omega) < 0:
            raise ValueError("intensities must be non-negative")
        if not self.nu > self.omega:
            raise ValueError(f"decoy ordering requires nu > omega >= 0 (nu={self.nu}, omega={self.omega})")
        if not self.mu > self.nu + self.omega:
            raise ValueError(f"decoy ordering requires mu > nu + omega (mu={self.mu}, nu={self.nu}, omega={self.omega})")
        # Fill missing cells with zero so lookups never KeyError.
        full = {b: {i: float(self.prob.get(b, {}).get(i, 0.0)) for i in INTENSITIES} for b in BASES}
        unknown = set(self.prob) - set(BASES)
        if unknown:
            raise ValueError(f"unknown basis label(s) {sorted(unknown)}")
        for b, row in self.prob.items():
            extra = set(row) - set(INTENSITIES)
            if extra:
                raise ValueError(f"unknown intensity label(s) {sorted(extra)} in basis {b}")
        if any(p < 0 for row in full.values() for p in row.values()):
            raise ValueError("probabilities must be non-negative")
        total = sum(p for row in full.values() for p in row.values())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"emission probabilities sum to {total!r}, expected 1")
        object.__setattr__(self, "prob", full)

    def intensity(self, name: str) -> float:
        try:
            return {"mu": self.mu, "nu": self.nu, "omega": self.omega}[name]
        except KeyError:
            raise ValueError(f"unknown intensity {name!r}") from None

    @property
    def intensities(self) -> dict[str, float]:
        return {"mu": self.mu, "nu": self.nu, "omega": self.omega}

    def basis_probability(self, basis: str) -> float:
        return sum(self.prob[basis].values())

    def conditional(self, basis: str) -> dict[str, float]:
        """Intensity distribution conditioned on ``basis``."""
        pb = self.basis_probability(basis)
        if pb <= 0:
            raise ValueError(f"basis {basis} is never prepared")
        return {i: p / pb for i, p in self.prob[basis].items()}

    @classmethod
    def with_basisless_vacuum(cls, mu, nu, omega, p_mu_x, p_mu_y, p_nu_x, p_nu_y, p_omega):
        """Build settings where the weakest intensity carries no basis.

        The weak-decoy probability is split evenly between X and Y, which is
        how it enters basis sifting.
        """
        return cls(mu, nu, omega, {
            "X": {"mu": p_mu_x, "nu": p_nu_x, "omega": p_omega / 2},
            "Y": {"mu": p_mu_y, "nu": p_nu_y, "omega": p_omega / 2},
        })

    def to_dict(self) -> dict:
        return {"mu": self.mu, "nu": self.nu, "omega": self.omega,
                "prob": {b: dict(r) for b, r in self.prob.items()}}


@dataclass(frozen=True)
class DetectorModel:
    """Threshold single-photon detector with memoryless noise."""

    y0: float = 0.0
    p_ap: float = 0.0
    eta_d: float = 1.0

    def __post_init__(self):
        if not 0 <= self.y0 < 1:
            raise ValueError(f"dark-count probability must be in [0, 1), got {self.y0}")
        if not 0 <= self.p_ap < 1:
            raise ValueError(f"afterpulse probability must be in [0, 1), got {self.p_ap}")
        if not 0 < self.eta_d <= 1:
            raise ValueError(f"detection efficiency must be in (0, 1], got {self.eta_d}")

    @property
    def noise_rate(self) -> float:
        """Poisson-equivalent noise intensity, -ln((1-Y0)(1-Pap))."""
        return -math.log1p(-self.y0) - math.log1p(-self.p_ap)


@dataclass(frozen=True)
class OpticalLinkModel:
    """Transmittances and imperfections for both arms of the relay.

    ``eta_a`` doubles as the single-link transmittance for BB84.
    """

    eta_a: float
    eta_b: float
    e_d: float = 0.0
    detector: DetectorModel = field(default_factory=DetectorModel)
    theta_c: float = 0.0

    def __post_init__(self):
        for name in ("eta_a", "eta_b"):
            eta = getattr(self, name)
            if not 0 <= eta <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {eta}")
        if not 0 <= self.e_d < 0.5:
            raise ValueError(f"misalignment error must be in [0, 0.5), got {self.e_d}")

    @classmethod
    def from_db(cls, loss_a_db: float, loss_b_db: float | None = None, *,
                internal_loss_db: float = 0.0, detector: DetectorModel | None = None,
                e_d: float = 0.0, theta_c: float = 0.0) -> "OpticalLinkModel":
        """Build a link from losses in dB; detector efficiency is folded into eta."""
        detector = detector or DetectorModel()
        if loss_b_db is None:
            loss_b_db = loss_a_db
        eta_a = db_to_transmittance(loss_a_db + internal_loss_db) * detector.eta_d
        eta_b = db_to_transmittance(loss_b_db + internal_loss_db) * detector.eta_d
        return cls(eta_a, eta_b, e_d=e_d, detector=detector, theta_c=theta_c)

    def swapped(self) -> "OpticalLinkModel":
        return OpticalLinkModel(self.eta_b, self.eta_a, self.e_d, self.detector, self.theta_c)


@dataclass(frozen=True)
class PulsePairSettings:
    theta_a: float
    theta_b: float
    phi_a: float
    phi_b: float
    iota_a: float
    iota_b: float

    def __post_init__(self):
        if self.iota_a < 0 or self.iota_b < 0:
            raise ValueError("pulse intensities must be non-negative")
        for name in ("theta_a", "theta_b", "phi_a", "phi_b"):
            object.__setattr__(self, name, getattr(self, name) % TWO_PI)


@dataclass(frozen=True)
class ArrivalAmplitudes:
    """Squared amplitudes A^2 = mu_a eta_a / 4 and B^2 = mu_b eta_b / 4."""

    a_sq: float
    b_sq: float

    @classmethod
    def of(cls, iota_a: float, iota_b: float, link: OpticalLinkModel) -> "ArrivalAmplitudes":
        return cls(iota_a * link.eta_a / 4.0, iota_b * link.eta_b / 4.0)


@dataclass(frozen=True)
class GainErrorPoint:
    gain: float
    qber: float
    matched_gain: float
    mismatched_gain: float

    @property
    def error_gain(self) -> float:
        return self.gain * self.qber


def psi_squared(a_sq, b_sq, theta_a, theta_b, dphi, theta_c=0.0, interference=True):
    """Mean photon numbers reaching D1 and D2.

    Array-friendly; ``dphi`` is the global phase difference phi_a - phi_b.
    ``interference=False`` drops the cross terms, i.e. the two pulses are
    made distinguishable (e.g. by a large relative delay).
    """
    a_sq = np.asarray(a_sq, dtype=float)
    b_sq = np.asarray(b_sq, dtype=float)
    ab = np.sqrt(a_sq * b_sq) if interference else 0.0
    cos = np.cos
    psi1 = (a_sq * (1 + cos(theta_c - theta_a)) + b_sq * (1 - cos(theta_c - theta_b))
            + ab * (cos(dphi) + cos(dphi + theta_a - theta_c)
                    - cos(-dphi + theta_b - theta_c) - cos(dphi + theta_a - theta_b)))
    psi2 = (a_sq * (1 - cos(theta_c - theta_a)) + b_sq * (1 + cos(theta_c - theta_b))
            + ab * (cos(dphi) + cos(dphi + theta_c - theta_b)
                    - cos(-dphi + theta_c - theta_a) - cos(dphi + theta_a - theta_b)))
    # Cancellation can leave -1e-17 where the exact value is zero.
    return np.maximum(psi1, 0.0), np.maximum(psi2, 0.0)


def detection_intensities(p: PulsePairSettings, link: OpticalLinkModel) -> tuple[float, float]:
    amp = ArrivalAmplitudes.of(p.iota_a, p.iota_b, link)
    psi1, psi2 = psi_squared(amp.a_sq, amp.b_sq, p.theta_a, p.theta_b,
                             p.phi_a - p.phi_b, link.theta_c)
    return float(psi1), float(psi2)


def click_probability(psi_sq, d: DetectorModel):
    """Probability that a threshold detector fires given mean photon number ``psi_sq``."""
    psi_sq = np.asarray(psi_sq, dtype=float)
    if np.any(psi_sq < 0):
        raise ValueError("mean photon number must be non-negative")
    p = -np.expm1(-(psi_sq + d.noise_rate))
    return float(p) if p.ndim == 0 else p


def _phase_grid(n: int = N_PHASE) -> np.ndarray:
    return np.arange(n) * (TWO_PI / n)


def _coincidence(a_sq, b_sq, theta_a, theta_b, link, dphi, interference=True):
    psi1, psi2 = psi_squared(a_sq, b_sq, theta_a, theta_b, dphi, link.theta_c, interference)
    p1 = click_probability(psi1, link.detector)
    p2 = click_probability(psi2, link.detector)
    # Uniform trapezoid on a periodic integrand reduces to the sample mean.
    return float(np.mean(p1 * p2))


def _check_basis(basis: str) -> None:
    if basis not in BASES:
        raise ValueError(f"basis must be one of {BASES}, got {basis!r}")


def mdi_gain_qber(basis: str, iota_a: float, iota_b: float, link: OpticalLinkModel,
                  n_phase: int = N_PHASE, convention: str = "pair") -> GainErrorPoint:
    """Phase-averaged coincidence gain and QBER for one MDI basis cell.

    With ``convention="pair"`` the gain is a per-pulse-pair probability: the
    four key-phase settings of the basis are equiprobable and averaged.
    ``"setting_sum"`` sums the four settings instead (four times larger; the
    QBER is unchanged).  X-basis coincidences with equal phases count as
    correct; in Y the assignment is inverted.  Misalignment ``e_d`` mixes the
    two populations.
    """
    _check_basis(basis)
    try:
        scale = GAIN_CONVENTIONS[convention] / 4.0
    except KeyError:
        raise ValueError(f"unknown gain convention {convention!r}; use one of {sorted(GAIN_CONVENTIONS)}") from None
    if iota_a < 0 or iota_b < 0:
        raise ValueError("intensities must be non-negative")
    amp = ArrivalAmplitudes.of(iota_a, iota_b, link)
    dphi = _phase_grid(n_phase)
    matched = mismatched = 0.0
    for ta in PHASES[basis]:
        for tb in PHASES[basis]:
            c = _coincidence(amp.a_sq, amp.b_sq, ta, tb, link, dphi) * scale
            if ta == tb:
                matched += c
            else:
                mismatched += c
    gain = matched + mismatched
    correct, wrong = (matched, mismatched) if basis == "X" else (mismatched, matched)
    err = link.e_d * correct + (1 - link.e_d) * wrong
    qber = err / gain if gain > 0 else 0.0
    return GainErrorPoint(gain, qber, matched, mismatched)


def mdi_gain_table(levels_a: Mapping[str, float], levels_b: Mapping[str, float],
                   link: OpticalLinkModel, n_phase: int = N_PHASE,
                   convention: str = "pair") -> dict[tuple[str, str, str], GainErrorPoint]:
    """``mdi_gain_qber`` for every (intensity_a, intensity_b, basis) cell at once.

    ``levels_a`` and ``levels_b`` map intensity labels to mean photon numbers.
    Vectorised over cells, settings and the phase grid; results match the
    scalar routine to rounding.
    """
    try:
        scale = GAIN_CONVENTIONS[convention] / 4.0
    except KeyError:
        raise ValueError(f"unknown gain convention {convention!r}") from None
    la, lb = list(levels_a), list(levels_b)
    ia = np.array([levels_a[k] for k in la], dtype=float)
    ib = np.array([levels_b[k] for k in lb], dtype=float)
    if np.any(ia < 0) or np.any(ib < 0):
        raise ValueError("intensities must be non-negative")
    a_sq = (ia * link.eta_a / 4.0)[:, None, None, None]
    b_sq = (ib * link.eta_b / 4.0)[None, :, None, None]
    dphi = _phase_grid(n_phase)[None, None, None, :]
    out = {}
    for basis in BASES:
        settings = [(ta, tb) for ta in PHASES[basis] for tb in PHASES[basis]]
        ta = np.array([t[0] for t in settings])[None, None, :, None]
        tb = np.array([t[1] for t in settings])[None, None, :, None]
        psi1, psi2 = psi_squared(a_sq, b_sq, ta, tb, dphi, link.theta_c)
        p = click_probability(psi1, link.detector) * click_probability(psi2, link.detector)
        c = p.mean(axis=-1) * scale  # (a, b, setting)
        same = np.array([s[0] == s[1] for s in settings])
        matched = c[..., same].sum(axis=-1)
        mismatched = c[..., ~same].sum(axis=-1)
        gain = matched + mismatched
        correct, wrong = (matched, mismatched) if basis == "X" else (mismatched, matched)
        err = link.e_d * correct + (1 - link.e_d) * wrong
        for i, ka in enumerate(la):
            for j, kb in enumerate(lb):
                g = float(gain[i, j])
                out[(ka, kb, basis)] = GainErrorPoint(g, float(err[i, j]) / g if g > 0 else 0.0,
                                                      float(matched[i, j]), float(mismatched[i, j]))
    return out


def bb84_gain_qber(basis: str, iota: float, link: OpticalLinkModel) -> GainErrorPoint:
    """Sifted gain and QBER of a phase-encoded BB84 link (Alice -> relay).

    A double click is a valid detection with a random bit, so it carries a 1/2
    error probability.  ``matched_gain`` holds the single clicks on the correct
    port; ``mismatched_gain`` everything else.
    """
    _check_basis(basis)
    if iota < 0:
        raise ValueError("intensity must be non-negative")
    mean = iota * link.eta_a
    pc = click_probability(mean * (1 - link.e_d), link.detector)
    pw = click_probability(mean * link.e_d, link.detector)
    gain = 1 - (1 - pc) * (1 - pw)
    err = pw * (1 - pc) + 0.5 * pc * pw
    qber = err / gain if gain > 0 else 0.0
    correct_single = pc * (1 - pw)
    return GainErrorPoint(gain, qber, correct_single, gain - correct_single)


def hom_visibility(link: OpticalLinkModel, iota: float, *, interference: bool = True,
                   n_phase: int = N_PHASE) -> float:
    """Hong-Ou-Mandel dip visibility 1 - C(zero delay) / C(distinguishable).

    Both senders use the same phase (Y basis, theta = pi/2) so the relay acts
    as a balanced beam splitter for the two phase-randomised pulses.
    """
    if iota < 0:
        raise ValueError("intensity must be non-negative")
    amp = ArrivalAmplitudes.of(iota, iota, link)
    grid = _phase_grid(n_phase)
    c_dist = _coincidence(amp.a_sq, amp.b_sq, HOM_PHASE, HOM_PHASE, link, grid, interference=False)
    if c_dist == 0:
        return 0.0
    c_min = _coincidence(amp.a_sq, amp.b_sq, HOM_PHASE, HOM_PHASE, link, grid, interference)
    return 1.0 - c_min / c_dist
