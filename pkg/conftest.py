"""
Session fixtures for the lab tests: a throwaway run ledger, one run row per
pytest session, START/END/FAIL rows per test and the --lab-seed option.
"""
import pytest

from config.config_assists import ConfigAssists
from core.helpers import Helpers


def pytest_addoption(parser):
    """
    --lab-seed feeds every randomized test. The same seed reproduces the same
    walks, fine paths and sample boxes.
    """
    parser.addoption("--lab-seed", action="store", type=int, default=20240531)


@pytest.fixture(scope="session")
def lab_seed(pytestconfig):
    return pytestconfig.getoption("--lab-seed")


@pytest.fixture(scope="session")
def ledger_path(tmp_path_factory):
    """Ledger DB of the test session, kept out of the user's output directory."""
    return tmp_path_factory.mktemp("ledger") / "etbsde_test_ledger.db"


@pytest.fixture(scope="session")
def config_assists(ledger_path):
    """ConfigAssists writing to the session ledger; acceptance tests log their cases through it."""
    ca = ConfigAssists(ledger_path)
    yield ca
    ca.db.close()


@pytest.fixture(scope="session", autouse=True)
def session_run(pytestconfig, config_assists, lab_seed):
    """Open the session's run row before the first test and close it with PASS or FAIL."""
    Helpers.configure_logging()
    run_id = config_assists.start_run(command="pytest", scheme="tests", seed=lab_seed,
                                      other_info={"args": list(pytestconfig.invocation_params.args)})
    print(f"\n[ETBSDE] run_id={run_id} seed={lab_seed}")

    yield

    failed = config_assists.db.failed_check_count(run_id)
    config_assists.finish_run("FAIL" if failed else "PASS")


@pytest.fixture(autouse=True)
def auto_log_test_lifecycle(request, config_assists):
    name = request.node.name
    config_assists.set_test_name(name)
    config_assists.add_log_start(message=f"START {name}")

    yield

    outcome = getattr(request.node, "rep_call", None)
    if outcome is not None and outcome.failed:
        config_assists.add_log_error(message=f"FAIL {name}")
    elif outcome is not None and outcome.skipped:
        config_assists.add_log_skip(message=f"SKIP {name}")
    else:
        config_assists.add_log_end(message=f"END {name}")
    config_assists.set_test_name(None)


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Keep each phase's report on the item as rep_setup / rep_call / rep_teardown."""
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
