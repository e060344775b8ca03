"""Per-criterion pass/fail summary for tests marked ``@pytest.mark.criterion(n)``."""

from collections import defaultdict

CRITERIA = {
    1: "gradient correctness",
    2: "formula fidelity",
    3: "prox oracle",
    4: "compression-plan correctness",
    5: "end-to-end desk pipeline",
    6: "metric fidelity",
    7: "determinism and formats",
}

_owner: dict[str, int] = {}
_outcomes: dict[int, list[tuple[str, str]]] = defaultdict(list)
_notes: dict[int, list[str]] = defaultdict(list)


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _owner[item.nodeid] = int(mark.args[0])


def pytest_deselected(items):
    for item in items:
        _owner.pop(item.nodeid, None)


def pytest_runtest_logreport(report):
    n = _owner.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes[n].append((report.nodeid, report.outcome))
    if report.when == "call":
        _notes[n] += [f"{k}={v}" for k, v in report.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _owner:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n, [])
        if not results:
            if n in _owner.values():
                tr.write_line(f"criterion {n} NOT RUN  {title}")
            continue
        ok = all(outcome == "passed" for _, outcome in results)
        status = "PASS" if ok else "FAIL"
        tr.write_line(f"criterion {n} {status}  {title} ({len(results)} checks)")
        for note in _notes.get(n, []):
            tr.write_line(f"    {note}")
