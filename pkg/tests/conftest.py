"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
import pytest

_OUTCOMES = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    entry = _OUTCOMES.setdefault(key, {"title": props.get("title", ""), "ok": True, "ran": False, "notes": []})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["ok"] = False
    for name, value in props.items():
        if name.startswith("measured") and report.when == "call":
            entry["notes"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_OUTCOMES):
        e = _OUTCOMES[key]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] or not e["ok"] else "SKIP")
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {key} [{e['title']}]: {status}" + (f" ({notes})" if notes else ""))


@pytest.fixture
def criterion(request, record_property):
    """Tag a test with its acceptance criterion; returns a callback for measured values."""
    marker = request.node.get_closest_marker("acceptance")
    number, title = marker.args
    record_property("criterion", number)
    record_property("title", title)
    count = [0]

    def measured(text):
        count[0] += 1
        record_property(f"measured{count[0]}", text)

    return measured
