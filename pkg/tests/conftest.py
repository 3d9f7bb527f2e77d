import numpy as np
import pytest

from nbhdrisk.ingest import FactorInfo, FactorTable


def make_table(factors, response, lat=None, lon=None, ids=None):
    """Small in-memory FactorTable built from a dict of factor arrays."""
    response = np.asarray(response, dtype=float)
    n = response.shape[0]
    ids = ids or tuple(f"N{i:03d}" for i in range(n))
    return FactorTable(
        ids=tuple(ids),
        names=tuple(f"hood {i}" for i in range(n)),
        lat=np.full(n, 43.7) if lat is None else lat,
        lon=np.full(n, -79.4) if lon is None else lon,
        response=response,
        factors={k: np.asarray(v, dtype=float) for k, v in factors.items()},
        info={k: FactorInfo(description=k) for k in factors},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS, TORONTO
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
    if not TORONTO:
        terminalreporter.write_line("[SKIP] criterion 11: Toronto data (conditional) | "
                                    "NBHDRISK_TORONTO_DIR not set")
