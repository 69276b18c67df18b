import pytest

from nvrpg.audit import SCOPES, audit_invariants
from nvrpg.cli import main


def test_policy_scope_contents():
    report = audit_invariants("policy", budget=1000)
    names = {c.name for c in report.checks}
    assert {"score_mean_zero", "normalized_step_length", "is_weight_bound"} <= names
    assert report.passed


def test_estimator_scope_reports_sigma():
    report = audit_invariants("estimators", budget=4000)
    assert report.passed, report.render()
    assert all("sigma=" in c.detail for c in report.checks)
    assert all(c.tolerance == 4.0 for c in report.checks)


def test_render_lines_and_summary():
    report = audit_invariants("linfa", budget=500)
    text = report.render()
    assert text.splitlines()[-1] == f"{len(report.checks)}/{len(report.checks)} checks passed"
    assert all(line.startswith(("PASS", "FAIL")) for line in text.splitlines()[:-1])


def test_bad_arguments():
    with pytest.raises(ValueError, match="scope"):
        audit_invariants("everything")
    with pytest.raises(ValueError, match="budget"):
        audit_invariants("policy", budget=2)
    assert "all" in SCOPES


def test_cli_audit_exit_code(capsys):
    assert main(["audit", "--scope", "policy", "--budget", "1000"]) == 0
    assert "checks passed" in capsys.readouterr().out


@pytest.mark.slow
def test_full_audit_at_default_budget_is_green():
    report = audit_invariants("all")
    assert report.passed, report.render()
