import pytest
from hypothesis import settings

from rainforge.shapes import make_classification_data, make_detection_data
from rainforge.victim import train_victim

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line for the summary."""
    def record(number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def classifier_data():
    return make_classification_data(seed=0)


@pytest.fixture(scope="session")
def trained_classifier(classifier_data):
    train, test = classifier_data
    model, report = train_victim(train, epochs=20, seed=0, test=test)
    return model, report


@pytest.fixture(scope="session")
def detector_data():
    return make_detection_data(seed=0)


@pytest.fixture(scope="session")
def trained_detector(detector_data):
    train, test = detector_data
    model, report = train_victim(train, epochs=20, seed=0, test=test)
    return model, report
