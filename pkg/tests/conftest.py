import numpy as np
import pytest

from panoptrack.core import ClassEntry, ClassTable, PanopticMap, Sequence

ROAD, SKY, CAR, PERSON, VOID = 0, 1, 2, 3, 255


@pytest.fixture
def table():
    """Small table: two stuff, two thing classes and an ignore class."""
    return ClassTable(
        (
            ClassEntry(ROAD, "road", False),
            ClassEntry(SKY, "sky", False),
            ClassEntry(CAR, "car", True),
            ClassEntry(PERSON, "person", True),
            ClassEntry(VOID, "void", False),
        ),
        ignore_id=VOID,
    )


def pmap(classes, instances=None):
    classes = np.asarray(classes)
    if instances is None:
        instances = np.zeros_like(classes)
    return PanopticMap(classes, instances)


def seq(table, *frames):
    return Sequence(list(frames), table)


# acceptance criteria append "PASS name: detail" lines here
ACCEPTANCE_LOG = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LOG:
            terminalreporter.write_line(line)
