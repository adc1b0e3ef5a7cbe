"""Tests for the run ledger."""

import json

from rotorguard.database import ScenarioRun, SuiteRun, get_session, init_db, recent_suites


def test_records_round_trip(tmp_path):
    init_db(str(tmp_path / "nested" / "ledger.db"))
    session = get_session()
    try:
        suite = SuiteRun(suite_id="tests1-4", repetitions=2, base_seed=7, status="running")
        session.add(suite)
        session.flush()
        run = ScenarioRun(suite_run_id=suite.id, case_name="test2_motor_tracking", run_index=1, seed=8,
                          scenario_name="tracking_motor_stop", metrics=json.dumps({"rmse": 0.12}))
        session.add(run)
        session.commit()
        assert run.status == "pending"
        out = run.to_dict()
        assert out["metrics"] == {"rmse": 0.12}
        assert out["completed_at"] is None
        assert out["created_at"] is not None
        assert suite.to_dict()["aggregate"] is None
        assert repr(suite) == f"<SuiteRun {suite.id} tests1-4 x2 [running]>"
    finally:
        session.close()


def test_recent_suites_newest_first(tmp_path):
    init_db(str(tmp_path / "ledger.db"))
    session = get_session()
    try:
        for seed in range(3):
            session.add(SuiteRun(suite_id="nav-forest", repetitions=1, base_seed=seed))
        session.commit()
    finally:
        session.close()
    recent = recent_suites(limit=2)
    assert [s["base_seed"] for s in recent] == [2, 1]
    assert all(s["status"] == "pending" for s in recent)
