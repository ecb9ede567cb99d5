import pytest

from meddet_kit import gradsuite as gs


def test_cases_cover_every_module():
    assert set(gs.MODULES) == {"numcore", "nmode", "alignfuse", "aatm", "losses"}
    assert len({c.name for c in gs.CASES}) == len(gs.CASES)


@pytest.mark.parametrize("case", gs.CASES, ids=lambda c: c.name)
def test_case_passes_short_run(case):
    res = gs.check_case(case, trials=3, seed=7)
    assert res.passed, f"{case.name}: {res.max_error:.2e}"


def test_broken_backward_is_caught():
    res = gs.check_case(gs.BROKEN_CASE, trials=3)
    assert not res.passed and res.max_error > 10 * gs.TOL


def test_select_by_module_and_name():
    assert {c.module for c in gs.select("losses")} == {"losses"}
    assert [c.name for c in gs.select("giou")] == ["giou"]
    assert len(gs.select()) == len(gs.CASES)
    with pytest.raises(ValueError, match="unknown module"):
        gs.select("nope")


def test_format_table_marks_results():
    ok = gs.check_case(gs.select("sin")[0], trials=1)
    bad = gs.check_case(gs.BROKEN_CASE, trials=1)
    text = gs.format_table([ok, bad]).splitlines()
    assert text[1].endswith("PASS") and text[2].endswith("FAIL") and len(text) == 3
