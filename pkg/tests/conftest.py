import pytest

from infcf import data


@pytest.fixture(scope="session")
def small_split():
    ds = data.synthetic_interactions(n_users=120, n_items=60, mean_activity=10, seed=1)
    return data.split_per_user(ds, seed=42)


@pytest.fixture(scope="session")
def medium_split():
    ds = data.synthetic_interactions(n_users=400, n_items=150, mean_activity=15, seed=2)
    return data.split_per_user(ds, seed=42)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line for the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, {})

    def record(n, ok, detail):
        lines[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(lines[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
