"""Benchmark suites.

A suite is a fixed list of cases; each case turns a seed into a Scenario.
Run ``k`` of every case uses ``seed = base_seed + k``, so two invocations
with the same base seed produce the same aggregates (compute-time columns
excepted). Runs are independent and may be spread over worker processes;
aggregation happens after all of them finish.
"""

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable

import numpy as np

from rotorguard import settings
from rotorguard.database import ScenarioRun, SuiteRun, get_session
from rotorguard.errors import ConfigError, RotorguardError
from rotorguard.fdd import FddConfig
from rotorguard.runner import run_scenario
from rotorguard.scenario import MissionConfig, Scenario
from rotorguard.sim import FailureEvent, FailureMode, FailureSchedule
from rotorguard.world import WorldSpec

logger = logging.getLogger(__name__)

# lateral and angular acceleration thresholds sized above the default noise floor
TAKEOFF_GAMMA_Q = (0.3, 0.3, 3.0, 3.0)
AGGREGATE_COLUMNS = (
    "suite", "case", "runs", "sucr", "fdd_mean", "fdd_max", "mdr", "far",
    "mini_a", "rmse_mean", "tilt_recovery_mean", "nmpc_mean_ms",
)
TIMING_AGGREGATES = ("nmpc_mean_ms",)


def _tracking_case(mode: FailureMode) -> Callable[[int], Scenario]:
    def build(seed: int) -> Scenario:
        rng = np.random.default_rng(seed)
        injection = 3.0 + float(rng.uniform(0.0, 1.0))
        return Scenario(
            name=f"tracking_{mode.value}",
            duration=12.0,
            seed=seed,
            mission=MissionConfig(kind="lemniscate", start=(0.0, 0.0, 1.0), speed=1.0),
            failures=FailureSchedule((FailureEvent(injection, 0, mode),)),
        )

    return build


def _takeoff_case(mode: FailureMode) -> Callable[[int], Scenario]:
    def build(seed: int) -> Scenario:
        rng = np.random.default_rng(seed)
        injection = 0.5 + float(rng.uniform(0.0, 0.1))
        return Scenario(
            name=f"takeoff_{mode.value}",
            duration=8.0,
            seed=seed,
            mission=MissionConfig(kind="takeoff", start=(0.0, 0.0, 0.0), climb_height=1.0, climb_speed=1.0),
            failures=FailureSchedule((FailureEvent(injection, 0, mode),)),
            fdd=FddConfig(gamma_q=TAKEOFF_GAMMA_Q),
        )

    return build


def _navigation_case(kind: str, size: tuple, density: float) -> Callable[[int], Scenario]:
    def build(seed: int) -> Scenario:
        rng = np.random.default_rng(seed)
        injection = 4.0 + float(rng.uniform(0.0, 2.0))
        return Scenario(
            name=f"nav_{kind}",
            duration=25.0,
            seed=seed,
            mission=MissionConfig(kind="navigate"),
            world=WorldSpec(kind=kind, size=size, density=density, seed=seed),
            failures=FailureSchedule((FailureEvent(injection, 0, FailureMode.MOTOR_STOP),)),
        )

    return build


SUITES: dict[str, tuple] = {
    "tests1-4": (
        ("test1_propeller_tracking", _tracking_case(FailureMode.PROPELLER_LOSS)),
        ("test2_motor_tracking", _tracking_case(FailureMode.MOTOR_STOP)),
        ("test3_propeller_takeoff", _takeoff_case(FailureMode.PROPELLER_LOSS)),
        ("test4_motor_takeoff", _takeoff_case(FailureMode.MOTOR_STOP)),
    ),
    "nav-indoor": (("nav_indoor", _navigation_case("room", (8.0, 6.0, 2.5), 0.05)),),
    "nav-forest": (("nav_forest", _navigation_case("forest", (12.0, 8.0, 2.5), 0.15)),),
}


@dataclass
class RunOutcome:
    case: str
    index: int
    seed: int
    scenario_name: str
    metrics: dict | None = None
    log_path: str | None = None
    error: str | None = None

    @property
    def success(self) -> bool:
        return self.metrics is not None and bool(self.metrics.get("success"))


@dataclass
class SuiteResult:
    suite_id: str
    repetitions: int
    base_seed: int
    rows: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)
    paths: dict = field(default_factory=dict)
    ledger_id: int | None = None


def _execute(case: str, index: int, scenario: Scenario, out_dir: str | None) -> tuple:
    """Worker body; returns plain data so it crosses process boundaries."""
    try:
        result = run_scenario(scenario, out_dir)
    except ConfigError as e:
        return ("config", e.field_path, e.message)
    except RotorguardError as e:
        logger.error("Run %s #%d (seed %d) failed: %s", case, index, scenario.seed, e)
        return ("failed", None, str(e))
    return ("ok", result.metrics.to_dict(), result.paths.get("log"))


def _mean(values) -> float:
    values = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(values)) if values else float("nan")


def aggregate(outcomes: list[RunOutcome], suite_id: str, case: str) -> dict:
    """One aggregate row per case.

    Rates are percentages. MDR counts runs whose injected failure went
    unreported; FAR counts runs with any wrong or early report.
    """
    runs = len(outcomes)
    metrics = [o.metrics for o in outcomes if o.metrics is not None]
    latencies = [m["fdd_latency"] for m in metrics if m["fdd_latency"] is not None]
    injected = [m for m in metrics if m["injection_time"] is not None]
    minis = [m["mini_a"] for m in metrics if m["mini_a"] is not None]
    return {
        "suite": suite_id,
        "case": case,
        "runs": runs,
        "sucr": 100.0 * sum(o.success for o in outcomes) / runs if runs else float("nan"),
        "fdd_mean": _mean(latencies),
        "fdd_max": float(max(latencies)) if latencies else float("nan"),
        "mdr": 100.0 * sum(m["missed_detection"] for m in injected) / len(injected) if injected else float("nan"),
        "far": 100.0 * sum(m["false_alarm"] for m in metrics) / len(metrics) if metrics else float("nan"),
        "mini_a": float(min(minis)) if minis else float("nan"),
        "rmse_mean": _mean(m["rmse"] for m in metrics),
        "tilt_recovery_mean": _mean(m["tilt_recovery"] for m in metrics),
        "nmpc_mean_ms": _mean(m["nmpc_mean_ms"] for m in metrics),
    }


def format_summary(result: SuiteResult) -> str:
    """Human-readable aggregate table."""
    header = f"{'case':<26}{'runs':>5}{'SucR(%)':>9}{'FDD(s)':>9}{'FDDmax':>9}{'MDR(%)':>8}{'FAR(%)':>8}{'MiniA(m)':>10}{'RMSE(m)':>9}{'NMPC(ms)':>10}"
    lines = [
        f"Suite {result.suite_id}: {result.repetitions} repetition(s), base seed {result.base_seed}",
        header,
        "-" * len(header),
    ]

    def num(value, width, digits=3):
        return f"{'n/a':>{width}}" if value is None or not math.isfinite(value) else f"{value:>{width}.{digits}f}"

    for row in result.rows:
        lines.append(
            f"{row['case']:<26}{row['runs']:>5}{num(row['sucr'], 9, 1)}{num(row['fdd_mean'], 9)}"
            f"{num(row['fdd_max'], 9)}{num(row['mdr'], 8, 1)}{num(row['far'], 8, 1)}"
            f"{num(row['mini_a'], 10)}{num(row['rmse_mean'], 9)}{num(row['nmpc_mean_ms'], 10, 2)}"
        )
    return "\n".join(lines) + "\n"


def write_aggregate(result: SuiteResult, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {"aggregate": os.path.join(out_dir, "aggregate.csv"), "summary": os.path.join(out_dir, "summary.txt")}
    with open(paths["aggregate"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        f.write(f"# base_seed={result.base_seed}\n")
        writer.writerow(AGGREGATE_COLUMNS)
        for row in result.rows:
            writer.writerow([row[c] if isinstance(row[c], str) else format(row[c], ".17g") for c in AGGREGATE_COLUMNS])
    with open(paths["summary"], "w", encoding="utf-8") as f:
        f.write(format_summary(result))
    return paths


def _ledger_start(suite_id: str, repetitions: int, base_seed: int, out_dir: str | None, planned: list) -> tuple:
    session = get_session()
    try:
        suite = SuiteRun(suite_id=suite_id, repetitions=repetitions, base_seed=base_seed,
                         output_dir=out_dir, status="running")
        session.add(suite)
        session.flush()
        run_ids = {}
        for case, index, scenario in planned:
            row = ScenarioRun(suite_run_id=suite.id, case_name=case, run_index=index,
                              seed=scenario.seed, scenario_name=scenario.name, status="pending")
            session.add(row)
            session.flush()
            run_ids[(case, index)] = row.id
        session.commit()
        return suite.id, run_ids
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def _ledger_run(run_id: int, outcome: RunOutcome) -> None:
    session = get_session()
    try:
        row = session.get(ScenarioRun, run_id)
        row.status = "failed" if outcome.error else "completed"
        row.error_message = outcome.error
        row.metrics = json.dumps(outcome.metrics) if outcome.metrics is not None else None
        row.log_path = outcome.log_path
        row.completed_at = datetime.now(timezone.utc)
        session.commit()
    except Exception as e:
        session.rollback()
        logger.error("Could not record run %d: %s", run_id, e)
    finally:
        session.close()


def _ledger_finish(suite_run_id: int, status: str, rows: list | None = None, error: str | None = None) -> None:
    session = get_session()
    try:
        suite = session.get(SuiteRun, suite_run_id)
        suite.status = status
        suite.error_message = error
        if rows is not None:
            suite.aggregate = json.dumps(
                [{k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()} for row in rows]
            )
        suite.completed_at = datetime.now(timezone.utc)
        session.commit()
    except Exception as e:
        session.rollback()
        logger.error("Could not record suite %d: %s", suite_run_id, e)
    finally:
        session.close()


def plan_suite(suite_id: str, repetitions: int, base_seed: int,
               adjust: Callable[[Scenario], Scenario] | None = None) -> list[tuple]:
    """Build every scenario of a suite as ``(case, index, scenario)``.

    Raises:
        ConfigError: for an unknown suite id or a case that does not
            validate; the field path names the failing case and index.
    """
    if suite_id not in SUITES:
        raise ConfigError("suite", f"unknown suite {suite_id!r}; expected one of {tuple(SUITES)}")
    if repetitions < 1:
        raise ConfigError("suite.repetitions", f"must be at least 1, got {repetitions!r}")
    planned = []
    for case, build in SUITES[suite_id]:
        for k in range(repetitions):
            try:
                scenario = build(base_seed + k)
                if adjust is not None:
                    scenario = adjust(scenario)
            except ConfigError as e:
                raise ConfigError(f"{case}[{k}].{e.field_path}", e.message) from e
            planned.append((case, k, scenario))
    return planned


def run_suite(
    suite_id: str,
    repetitions: int = 20,
    base_seed: int = 0,
    out_dir: str | None = None,
    workers: int | None = None,
    adjust: Callable[[Scenario], Scenario] | None = None,
    record: bool = True,
) -> SuiteResult:
    """Run a benchmark suite and aggregate it per case.

    Args:
        suite_id: One of ``SUITES``.
        repetitions: Runs per case.
        base_seed: Run ``k`` uses ``base_seed + k``.
        out_dir: Where per-run logs, ``aggregate.csv`` and ``summary.txt``
            go; nothing is written when None.
        workers: Worker processes; defaults to ``ROTORGUARD_WORKERS``.
        adjust: Applied to every scenario before it runs (shorter runs,
            smaller horizons).
        record: Whether to write the suite to the run ledger.

    Raises:
        ConfigError: if any run's configuration is invalid; the suite stops
            and the error names the failing case and index.
    """
    planned = plan_suite(suite_id, repetitions, base_seed, adjust)
    workers = settings.worker_count() if workers is None else max(1, int(workers))
    logger.info("Suite %s: %d run(s), base seed %d, %d worker(s)", suite_id, len(planned), base_seed, workers)

    suite_run_id, run_ids = (None, {})
    if record:
        suite_run_id, run_ids = _ledger_start(suite_id, repetitions, base_seed, out_dir, planned)

    def run_dir(case, index):
        return os.path.join(out_dir, case, f"run_{index:03d}") if out_dir else None

    outcomes = []
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_execute, case, k, s, run_dir(case, k)) for case, k, s in planned]
                raw = [f.result() for f in futures]
        else:
            raw = []
            for case, k, s in planned:
                raw.append(_execute(case, k, s, run_dir(case, k)))
                if raw[-1][0] == "config":
                    break
        for (case, k, scenario), (kind, payload, detail) in zip(planned, raw):
            if kind == "config":
                raise ConfigError(f"{case}[{k}].{payload}", detail)
            outcome = RunOutcome(case, k, scenario.seed, scenario.name)
            if kind == "ok":
                outcome.metrics, outcome.log_path = payload, detail
                outcome.error = payload.get("error")
            else:
                outcome.error = detail
            outcomes.append(outcome)
            if record:
                _ledger_run(run_ids[(case, k)], outcome)
    except ConfigError as e:
        logger.error("Suite %s aborted: %s", suite_id, e)
        if record:
            _ledger_finish(suite_run_id, "failed", error=str(e))
        raise

    result = SuiteResult(suite_id, repetitions, base_seed, outcomes=outcomes, ledger_id=suite_run_id)
    for case, _ in SUITES[suite_id]:
        result.rows.append(aggregate([o for o in outcomes if o.case == case], suite_id, case))
    if out_dir:
        result.paths = write_aggregate(result, out_dir)
    if record:
        _ledger_finish(suite_run_id, "completed", result.rows)
    for row in result.rows:
        logger.info("Suite %s / %s: SucR %.1f%%, FDD %.3f s, MDR %.1f%%, FAR %.1f%%",
                    suite_id, row["case"], row["sucr"], row["fdd_mean"], row["mdr"], row["far"])
    return result
