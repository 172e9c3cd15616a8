import math

import numpy as np
import pytest
from scipy.stats import binomtest, chi2_contingency, norm

from nsaqkd.montecarlo import (LowStatisticsError, SessionConfig, estimate_hom_visibility, simulate_bb84,
                               simulate_bb84_cell, simulate_mdi, simulate_mdi_cell)
from nsaqkd.optics import (DetectorModel, OpticalLinkModel, bb84_gain_qber, hom_visibility,
                           mdi_gain_qber)


def within_3_sigma(k, n, p):
    """|k/n - p| < 3 sqrt(p(1-p)/n); a zero expectation demands zero counts."""
    if n == 0:
        return True
    if p == 0:
        return k == 0
    return abs(k / n - p) < 3 * math.sqrt(p * (1 - p) / n)


THREE_SIGMA_P = 2 * norm.sf(3)


def exact_3_sigma(k, n, p):
    """Exact binomial version of the 3 sigma rule, for cells with few counts."""
    if n == 0:
        return True
    if p == 0:
        return k == 0
    return binomtest(k, n, p).pvalue >= THREE_SIGMA_P


def mdi_cell_checks(cell, analytic, rule=within_3_sigma):
    return [rule(cell.n_coincidence, cell.n_pairs, analytic.gain),
            rule(cell.n_error, cell.n_coincidence, analytic.qber)]


class TestTrivialCases:
    def test_no_light_no_dark_counts(self):
        link = OpticalLinkModel(0.5, 0.5)
        for basis in "XY":
            assert simulate_mdi_cell(basis, 0.0, 0.0, link, 100_000, seed=1).n_coincidence == 0
            assert simulate_bb84_cell(basis, 0.0, link, 100_000, seed=1).n_detected == 0

    def test_x_basis_errors_suppressed(self):
        link = OpticalLinkModel(1.0, 1.0)
        cell = simulate_mdi_cell("X", 0.8, 0.8, link, 500_000, seed=3)
        assert cell.n_coincidence > 1000
        assert cell.n_error == 0

    def test_aligned_bb84_is_error_free(self):
        link = OpticalLinkModel(0.3, 0.3)
        for basis in "XY":
            cell = simulate_bb84_cell(basis, 0.5, link, 200_000, seed=4)
            assert cell.n_detected > 10_000 and cell.n_error == 0

    def test_rejects_bad_sessions(self, paper_mdi_source, paper_mdi_link):
        with pytest.raises(ValueError):
            SessionConfig(0, 1, "MDI", paper_mdi_source, paper_mdi_link)
        with pytest.raises(ValueError):
            SessionConfig(10, -1, "MDI", paper_mdi_source, paper_mdi_link)
        with pytest.raises(ValueError):
            SessionConfig(10, 1, "B92", paper_mdi_source, paper_mdi_link)
        cfg = SessionConfig(10, 1, "MDI", paper_mdi_source, paper_mdi_link)
        with pytest.raises(ValueError):
            simulate_bb84(cfg)
        with pytest.raises(ValueError):
            simulate_mdi_cell("Z", 0.1, 0.1, paper_mdi_link, 10, seed=0)


class TestReproducibility:
    def test_same_seed_identical(self, paper_mdi_source, paper_mdi_link):
        cfg = SessionConfig(300_000, 11, "MDI", paper_mdi_source, paper_mdi_link)
        assert simulate_mdi(cfg).to_dict() == simulate_mdi(cfg).to_dict()
        other = SessionConfig(300_000, 12, "MDI", paper_mdi_source, paper_mdi_link)
        assert simulate_mdi(other).to_dict() != simulate_mdi(cfg).to_dict()

    def test_worker_count_does_not_matter(self, paper_mdi_source, paper_mdi_link,
                                          paper_bb84_source, paper_bb84_link):
        # 3 shards of 2^18 plus a remainder
        n = 3 * (1 << 18) + 12345
        one = simulate_mdi(SessionConfig(n, 5, "MDI", paper_mdi_source, paper_mdi_link, workers=1))
        many = simulate_mdi(SessionConfig(n, 5, "MDI", paper_mdi_source, paper_mdi_link, workers=4))
        assert one.to_dict() == many.to_dict()
        one = simulate_bb84(SessionConfig(n, 5, "BB84", paper_bb84_source, paper_bb84_link, workers=1))
        many = simulate_bb84(SessionConfig(n, 5, "BB84", paper_bb84_source, paper_bb84_link, workers=3))
        assert one.to_dict() == many.to_dict()

    def test_bases_use_distinct_streams(self, paper_bb84_link):
        x = simulate_bb84_cell("X", 0.5, paper_bb84_link, 100_000, seed=9)
        y = simulate_bb84_cell("Y", 0.5, paper_bb84_link, 100_000, seed=9)
        assert x.n_detected != y.n_detected


class TestConservation:
    def test_mdi_counts(self, paper_mdi_source, paper_mdi_link):
        n = 400_000
        obs = simulate_mdi(SessionConfig(n, 2, "MDI", paper_mdi_source, paper_mdi_link))
        assert len(obs.cells) == 18
        assert sum(c.n_pairs for c in obs.cells.values()) == obs.n_sifted <= n
        assert obs.n_pulses == n
        for c in obs.cells.values():
            assert 0 <= c.n_error <= c.n_coincidence <= c.n_pairs
        # basis agreement happens with probability sum_b P_b^2
        pb = {b: paper_mdi_source.basis_probability(b) for b in "XY"}
        expect = n * sum(p * p for p in pb.values())
        assert abs(obs.n_sifted - expect) < 5 * math.sqrt(expect)

    def test_bb84_counts(self, paper_bb84_source, paper_bb84_link):
        n = 400_000
        obs = simulate_bb84(SessionConfig(n, 2, "BB84", paper_bb84_source, paper_bb84_link))
        assert sum(c.n_sent for c in obs.cells.values()) == obs.n_sifted <= n
        for c in obs.cells.values():
            assert 0 <= c.n_error <= c.n_detected <= c.n_sent

    def test_zero_probability_cell_warns(self, paper_mdi_link, caplog):
        from nsaqkd.optics import SourceSettings
        src = SourceSettings(0.4, 0.1, 0.0, {"X": {"mu": 0.5, "nu": 0.2, "omega": 0.0},
                                             "Y": {"mu": 0.2, "nu": 0.1, "omega": 0.0}})
        with caplog.at_level("WARNING"):
            obs = simulate_mdi(SessionConfig(10_000, 1, "MDI", src, paper_mdi_link))
        assert "zero probability" in caplog.text
        assert obs[("omega", "omega", "X")].n_pairs == 0


class TestSeedSplitting:
    def test_merged_shards_match_single_run(self, paper_mdi_source):
        link = OpticalLinkModel(0.5, 0.5, e_d=0.02, detector=DetectorModel(y0=1e-3))
        n = 800_000
        single = simulate_mdi(SessionConfig(n, 100, "MDI", paper_mdi_source, link))
        merged = None
        for s in range(4):
            part = simulate_mdi(SessionConfig(n // 4, 200 + s, "MDI", paper_mdi_source, link))
            merged = part if merged is None else merged.merge(part)
        assert merged.n_pulses == single.n_pulses
        keys = sorted(single.cells)
        for attr in ("n_pairs", "n_coincidence"):
            table = np.array([[getattr(single[k], attr) for k in keys],
                              [getattr(merged[k], attr) for k in keys]])
            table = table[:, table.sum(axis=0) > 0]
            assert chi2_contingency(table)[1] > 1e-3


class TestOracleAgreement:
    """Monte Carlo cells against the phase-averaged analytic model."""

    def test_mdi_cells_30_seeds(self, paper_mdi_link):
        # At 1e6 pairs the weak cells expect only a few coincidences, where the
        # Gaussian rule is miscalibrated; the exact binomial tail is used.
        levels = {"mu": 0.284, "nu": 0.057}
        checks = []
        for basis in "XY":
            for a in levels:
                for b in levels:
                    g = mdi_gain_qber(basis, levels[a], levels[b], paper_mdi_link)
                    for seed in range(30):
                        cell = simulate_mdi_cell(basis, levels[a], levels[b], paper_mdi_link,
                                                 1_000_000, seed=1000 + seed)
                        checks += mdi_cell_checks(cell, g, exact_3_sigma)
        assert np.mean(checks) >= 0.99

    def test_bb84_cells_30_seeds(self, paper_bb84_link):
        levels = {"mu": 0.538, "nu": 0.063, "omega": 0.003}
        checks = []
        for basis in "XY":
            for i, iota in levels.items():
                g = bb84_gain_qber(basis, iota, paper_bb84_link)
                for seed in range(30):
                    cell = simulate_bb84_cell(basis, iota, paper_bb84_link, 1_000_000, seed=seed)
                    checks.append(within_3_sigma(cell.n_detected, cell.n_sent, g.gain))
                    checks.append(within_3_sigma(cell.n_error, cell.n_detected, g.qber))
        assert np.mean(checks) >= 0.99

    def test_session_cells_track_analytic(self, paper_mdi_source):
        # A bright, noisy link keeps every cell well populated in a short run.
        link = OpticalLinkModel(0.8, 0.8, e_d=0.05, detector=DetectorModel(y0=5e-3, p_ap=0.01))
        obs = simulate_mdi(SessionConfig(1_000_000, 8, "MDI", paper_mdi_source, link))
        lv = paper_mdi_source.intensities
        checks = []
        for (a, b, basis), cell in obs.cells.items():
            checks += mdi_cell_checks(cell, mdi_gain_qber(basis, lv[a], lv[b], link))
        assert np.mean(checks) >= 0.9


class TestHom:
    def test_ideal_near_half(self, ideal_link):
        est = estimate_hom_visibility(ideal_link, 1.0, 1_000_000, seed=1)
        assert abs(est.visibility - hom_visibility(ideal_link, 1.0)) < 4 * est.stderr
        assert est.stderr < 0.005

    def test_distinguishable_is_zero(self, ideal_link):
        est = estimate_hom_visibility(ideal_link, 0.5, 1_000_000, seed=2, interference=False)
        assert abs(est.visibility) < 4 * est.stderr

    def test_low_statistics(self, paper_mdi_link):
        with pytest.raises(LowStatisticsError, match="coincidences"):
            estimate_hom_visibility(paper_mdi_link, 0.284, 10_000, seed=0)

    def test_rejects_bad_input(self, ideal_link):
        with pytest.raises(ValueError):
            estimate_hom_visibility(ideal_link, -0.1, 100, seed=0)

    def test_deterministic(self, ideal_link):
        a = estimate_hom_visibility(ideal_link, 0.5, 200_000, seed=3)
        b = estimate_hom_visibility(ideal_link, 0.5, 200_000, seed=3, workers=2)
        assert a == b
