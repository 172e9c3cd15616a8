import pytest

from nsaqkd.optics import DetectorModel, OpticalLinkModel, SourceSettings

PAPER_DETECTOR = DetectorModel(y0=7.5e-6, eta_d=0.25)


@pytest.fixture
def paper_mdi_link():
    return OpticalLinkModel.from_db(1.96, internal_loss_db=4.2, detector=PAPER_DETECTOR, e_d=0.02)


@pytest.fixture
def paper_bb84_link():
    return OpticalLinkModel.from_db(1.96, internal_loss_db=4.2, detector=PAPER_DETECTOR, e_d=0.0015)


@pytest.fixture
def ideal_link():
    return OpticalLinkModel(1.0, 1.0)


@pytest.fixture
def paper_mdi_source():
    return SourceSettings.with_basisless_vacuum(0.284, 0.057, 0.0, 0.466, 0.035, 0.076, 0.293, 0.130)


@pytest.fixture
def paper_bb84_source():
    return SourceSettings(0.538, 0.063, 0.003, {"X": {"mu": 0.531, "nu": 0.209, "omega": 0.089},
                                                 "Y": {"mu": 0.110, "nu": 0.043, "omega": 0.018}})


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
