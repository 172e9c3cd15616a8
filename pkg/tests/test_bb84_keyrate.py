import dataclasses
import math
from importlib.resources import files

import pytest
from hypothesis import given, settings, strategies as st

from nsaqkd.bb84_keyrate import (Bb84KeyRateConfig, EstimationError, bb84_secure_key_rate, estimate_phase_error,
                                 estimate_s0, estimate_s1, gamma, hoeffding_bounds, phase_error_bound, tau_n)
from nsaqkd.mdi_keyrate import MdiKeyRateConfig, mdi_secure_key_rate
from nsaqkd.optics import DetectorModel, OpticalLinkModel, SourceSettings
from nsaqkd.optimizer import expected_statistics
from nsaqkd.stats import Bb84Cell, ObservedStatisticsBB84, load_statistics

N_T = 1.16e9


def table(name):
    return load_statistics(files("nsaqkd.data") / name)


@pytest.fixture
def paper_cfg(paper_bb84_source):
    return Bb84KeyRateConfig(paper_bb84_source, f_e=1.16, epsilon_sec=1e-9, epsilon_cor=1e-15, n_total=N_T)


def with_cell(obs, key, **change):
    cells = dict(obs.cells)
    cells[key] = dataclasses.replace(cells[key], **change)
    return ObservedStatisticsBB84(cells, obs.n_pulses, obs.n_sifted, obs.source)


def photon_yields(link):
    """Exact vacuum and single-photon yields of the two-detector receiver.

    The no-click probability of a Poisson pulse is c^2 exp(-iota eta), so the
    n-photon yield is 1 - c^2 (1 - eta)^n.
    """
    c = (1 - link.detector.y0) * (1 - link.detector.p_ap)
    return 1 - c * c, 1 - c * c * (1 - link.eta_a)


class TestHoeffding:
    def test_worked_example(self):
        up, lo = hoeffding_bounds(1000, 1e6, 1e-9)
        assert up == pytest.approx(1000 + math.sqrt(5e5 * math.log(2.1e10)), rel=1e-14)
        assert abs(up - 4447) <= 1
        assert lo == 0.0

    def test_collapse_at_21(self):
        assert hoeffding_bounds(500, 1e6, 21) == (500, 500)

    def test_zero_count(self):
        assert hoeffding_bounds(0, 10, 1e-9)[1] == 0.0

    @pytest.mark.parametrize("args", [(-1, 10, 1e-9), (11, 10, 1e-9), (1, 10, 0.0), (1, 10, 22)])
    def test_domain(self, args):
        with pytest.raises(ValueError):
            hoeffding_bounds(*args)

    @given(st.floats(0, 1e9), st.floats(0, 1e9), st.floats(1e-20, 1))
    def test_ordering(self, a, b, eps):
        count, total = sorted((a, b))
        up, lo = hoeffding_bounds(count, total, eps)
        assert 0 <= lo <= count <= up


class TestTau:
    def test_trivial(self):
        assert tau_n(0, [0.0], [1.0]) == 1.0
        assert tau_n(1, [0.4], [1.0]) == pytest.approx(0.4 * math.exp(-0.4), rel=1e-15)
        with pytest.raises(ValueError):
            tau_n(2, [0.4], [1.0])

    def test_paper_mixture(self, paper_bb84_source):
        cfg = Bb84KeyRateConfig(paper_bb84_source, n_total=N_T)
        p = {"mu": 0.531, "nu": 0.209, "omega": 0.089}
        tot = sum(p.values())
        lv = {"mu": 0.538, "nu": 0.063, "omega": 0.003}
        t0 = sum(p[k] / tot * math.exp(-lv[k]) for k in p)
        t1 = sum(p[k] / tot * math.exp(-lv[k]) * lv[k] for k in p)
        assert cfg.tau(0, "X") == pytest.approx(t0, rel=1e-14)
        assert cfg.tau(1, "X") == pytest.approx(t1, rel=1e-14)

    @given(st.lists(st.tuples(st.floats(0, 5), st.floats(0.01, 1)), min_size=1, max_size=3))
    def test_at_most_one(self, comps):
        tot = sum(p for _, p in comps)
        ks, ps = [k for k, _ in comps], [p / tot for _, p in comps]
        s = tau_n(0, ks, ps) + tau_n(1, ks, ps)
        assert s <= 1 + 1e-12
        if all(k == 0 for k in ks):
            assert s == pytest.approx(1.0)
        elif any(k > 1e-3 for k in ks):
            assert s < 1


class TestGamma:
    def test_direct_arithmetic(self):
        a, b, c = 1e-9, 0.02, 1e6
        inner = (2 * c) / (c * c * 0.98 * 0.02) * 21 ** 2 / a ** 2
        want = math.sqrt(2 * c * 0.98 * 0.02 * math.log(2) / (c * c)) * math.sqrt(math.log2(inner))
        assert gamma(a, b, c, c) == pytest.approx(want, rel=1e-14)

    def test_limits(self):
        assert gamma(1e-9, 0.0, 1e6, 1e6) == 0.0
        assert gamma(1e-9, 1.0, 1e6, 1e6) == 0.0
        with pytest.raises(EstimationError):
            gamma(1e-9, 0.1, 0.0, 1e6)

    def test_error_free_conjugate_basis(self):
        # With zero observed errors the correction vanishes with b log(1/b);
        # any nonzero error ratio gives a strictly positive correction.
        e, corr = phase_error_bound(0.0, 1e6, 1e7, 1e-9)
        assert e == corr == 0.0
        e, corr = phase_error_bound(1.0, 1e6, 1e7, 1e-9)
        assert corr > 0 and e == pytest.approx(1e-6 + corr)
        with pytest.raises(EstimationError):
            phase_error_bound(0.0, 0.0, 1e7, 1e-9)


class TestTableIV:
    @pytest.mark.parametrize("name,paper,frozen", [("table4_ac.json", 6.289e-3, 6.332e-3),
                                                   ("table4_bc.json", 6.155e-3, 6.139e-3)])
    def test_reproduces_published_rates(self, paper_cfg, name, paper, frozen):
        rep = bb84_secure_key_rate(table(name), paper_cfg)
        assert rep.rate == pytest.approx(paper, rel=0.10)
        assert rep.rate == pytest.approx(frozen, rel=1e-3)
        assert rep.rate_per_second == pytest.approx(40e6 * rep.rate)

    def test_intermediates(self, paper_cfg):
        rep = bb84_secure_key_rate(table("table4_ac.json"), paper_cfg)
        it = rep.intermediates
        for b in "XY":
            assert it["tau"][b]["tau0"] + it["tau"][b]["tau1"] <= 1
        for c in it["counts"].values():
            assert c["n_lower"] <= c["n"] <= c["n_upper"]
            assert c["m_lower"] <= c["m"] <= c["m_upper"]
        assert 0 <= it["e1p"] <= 0.5
        n_key = it["n_basis"]["X"]
        assert it["lambda_ec"] == pytest.approx(n_key * 1.16 * _h2(it["qber_key"]))
        assert rep.rate == pytest.approx(it["secure_bits"] / N_T)

    def test_half_qber_everywhere(self, paper_cfg):
        obs = table("table4_ac.json")
        cells = {k: dataclasses.replace(c, qber=0.5) for k, c in obs.cells.items()}
        assert bb84_secure_key_rate(ObservedStatisticsBB84(cells), paper_cfg).rate == 0.0

    @pytest.mark.parametrize("key", [("mu", "X"), ("nu", "X"), ("omega", "X"), ("mu", "Y"), ("nu", "Y")])
    def test_error_monotone(self, paper_cfg, key):
        # (omega, Y) enters the phase-error estimate with a negative sign and is left out.
        obs = table("table4_ac.json")
        base = bb84_secure_key_rate(obs, paper_cfg).rate
        worse = with_cell(obs, key, qber=obs[key].qber * 1.5 + 1e-3)
        assert bb84_secure_key_rate(worse, paper_cfg).rate <= base

    def test_epsilon_monotone(self, paper_bb84_source):
        obs = table("table4_ac.json")
        def rate(**kw):
            return bb84_secure_key_rate(obs, Bb84KeyRateConfig(paper_bb84_source, n_total=N_T, **kw)).rate
        secs = [rate(epsilon_sec=e) for e in (1e-15, 1e-12, 1e-9, 1e-6, 1e-3)]
        cors = [rate(epsilon_cor=e) for e in (1e-20, 1e-15, 1e-10, 1e-5)]
        assert secs == sorted(secs) and cors == sorted(cors)

    def test_y_key_basis(self, paper_bb84_source):
        cfg = Bb84KeyRateConfig(paper_bb84_source, n_total=N_T, key_basis="Y")
        rep = bb84_secure_key_rate(table("table4_ac.json"), cfg)
        assert rep.intermediates["key_basis"] == "Y"
        assert 0 <= rep.rate < 6.289e-3

    def test_config_validation(self, paper_bb84_source):
        with pytest.raises(ValueError):
            Bb84KeyRateConfig(paper_bb84_source, key_basis="Z")
        with pytest.raises(ValueError):
            Bb84KeyRateConfig(paper_bb84_source, epsilon_sec=1.5)
        with pytest.raises(ValueError):
            Bb84KeyRateConfig(paper_bb84_source, receiver_prob={"X": 0.5, "Y": 0.6})

    def test_needs_pulse_count(self, paper_bb84_source):
        obs = ObservedStatisticsBB84({k: Bb84Cell.from_counts(1000, 10, 0)
                                      for k in [(i, b) for i in ("mu", "nu", "omega") for b in "XY"]})
        with pytest.raises(ValueError, match="pulse number"):
            bb84_secure_key_rate(obs, Bb84KeyRateConfig(paper_bb84_source))


def _h2(x):
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


class TestDecoyOracle:
    N = 1e10

    def setup(self, source, y0):
        link = OpticalLinkModel.from_db(1.96, internal_loss_db=4.2,
                                        detector=DetectorModel(y0=y0, eta_d=0.25), e_d=0.0015)
        obs = expected_statistics("BB84", source, link)
        cfg = Bb84KeyRateConfig(source, n_total=self.N, asymptotic=True)
        return link, obs, cfg

    @pytest.mark.parametrize("basis", "XY")
    def test_s0_and_s1_against_exact_yields(self, paper_bb84_source, basis):
        link, obs, cfg = self.setup(paper_bb84_source, 1e-4)
        y0, y1 = photon_yields(link)
        sent = self.N * paper_bb84_source.basis_probability(basis) * cfg.receiver_prob[basis]
        s0_true, s1_true = sent * cfg.tau(0, basis) * y0, sent * cfg.tau(1, basis) * y1
        s0, s1 = estimate_s0(obs, basis, cfg), estimate_s1(obs, basis, cfg)
        assert 0.85 * s0_true <= s0 <= s0_true
        assert 0.80 * s1_true <= s1 <= s1_true

    def test_s0_at_paper_dark_count(self, paper_bb84_source):
        # With Y0 = 7.5e-6 the second-order term nu1 nu2 Y2 / 2 is comparable
        # to Y0 itself, so the vacuum bound is valid but loose.
        link, obs, cfg = self.setup(paper_bb84_source, 7.5e-6)
        y0, _ = photon_yields(link)
        sent = self.N * paper_bb84_source.basis_probability("X") * cfg.receiver_prob["X"]
        ratio = estimate_s0(obs, "X", cfg) / (sent * cfg.tau(0, "X") * y0)
        assert ratio == pytest.approx(0.2362, abs=1e-3)

    def test_zero_data(self, paper_bb84_source):
        obs = ObservedStatisticsBB84({(i, b): Bb84Cell(0.0, 0.0) for i in ("mu", "nu", "omega") for b in "XY"})
        cfg = Bb84KeyRateConfig(paper_bb84_source, n_total=N_T)
        assert estimate_s0(obs, "X", cfg) == 0.0
        assert estimate_s1(obs, "X", cfg) == 0.0
        rep = bb84_secure_key_rate(obs, cfg)
        assert rep.rate == 0.0 and any("phase error undefined" in w for w in rep.warnings)

    def test_unsent_decoy(self):
        src = SourceSettings(0.5, 0.1, 0.0, {"X": {"mu": 0.4, "nu": 0.2, "omega": 0.2},
                                             "Y": {"mu": 0.1, "nu": 0.1, "omega": 0.0}})
        cfg = Bb84KeyRateConfig(src, n_total=1e9)
        obs = ObservedStatisticsBB84({(i, b): Bb84Cell(0.01, 0.01) for i in ("mu", "nu", "omega") for b in "XY"})
        with pytest.raises(EstimationError, match="never sent"):
            estimate_s0(obs, "Y", cfg)

    def test_phase_error_within_bounds(self, paper_cfg):
        w = []
        e = estimate_phase_error(table("table4_ac.json"), paper_cfg, w)
        assert 0 < e < 0.05 and not w


class TestConvergence:
    def test_finite_approaches_asymptotic(self, paper_bb84_source, paper_bb84_link):
        obs = expected_statistics("BB84", paper_bb84_source, paper_bb84_link)
        asym = bb84_secure_key_rate(obs, Bb84KeyRateConfig(paper_bb84_source, n_total=1.0, asymptotic=True)).rate
        fin = bb84_secure_key_rate(obs, Bb84KeyRateConfig(paper_bb84_source, n_total=1e16)).rate
        assert asym > 0
        assert abs(fin - asym) / asym < 0.01

    def test_bb84_beats_mdi_on_ideal_channel(self, paper_bb84_source, paper_mdi_source, ideal_link):
        bb = bb84_secure_key_rate(expected_statistics("BB84", paper_bb84_source, ideal_link),
                                  Bb84KeyRateConfig(paper_bb84_source, n_total=1.0, asymptotic=True)).rate
        mdi = mdi_secure_key_rate(expected_statistics("MDI", paper_mdi_source, ideal_link),
                                  MdiKeyRateConfig(paper_mdi_source, asymptotic=True)).rate
        assert bb > mdi > 0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 0.1), st.floats(0, 1)), min_size=6, max_size=6),
       st.floats(1e6, 1e16), st.booleans())
def test_never_negative_or_nan(values, n_total, asym):
    src = SourceSettings(0.538, 0.063, 0.003, {"X": {"mu": 0.531, "nu": 0.209, "omega": 0.089},
                                               "Y": {"mu": 0.110, "nu": 0.043, "omega": 0.018}})
    keys = [(i, b) for b in "XY" for i in ("mu", "nu", "omega")]
    obs = ObservedStatisticsBB84({k: Bb84Cell(g, e) for k, (g, e) in zip(keys, values)})
    rep = bb84_secure_key_rate(obs, Bb84KeyRateConfig(src, n_total=n_total, asymptotic=asym))
    assert rep.rate >= 0 and math.isfinite(rep.rate)
