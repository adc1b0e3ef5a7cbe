"""Run ledger: benchmark suites and their scenario runs in SQLite via SQLAlchemy."""

import json
import os
from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Enum, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import DeclarativeBase, Session, sessionmaker

from rotorguard import settings

RUN_STATUS = ("pending", "running", "completed", "failed")


class Base(DeclarativeBase):
    pass


def _iso(value: datetime | None) -> str | None:
    return value.isoformat() if value else None


def _json(value: str | None):
    return json.loads(value) if value else None


class SuiteRun(Base):
    """One benchmark invocation."""

    __tablename__ = "suite_runs"

    id = Column(Integer, primary_key=True)
    suite_id = Column(String(50), nullable=False, index=True)
    repetitions = Column(Integer, nullable=False)
    base_seed = Column(Integer, nullable=False)
    output_dir = Column(Text, nullable=True)
    status = Column(Enum(*RUN_STATUS, name="suite_status"), default="pending", nullable=False)
    error_message = Column(Text, nullable=True)
    aggregate = Column(Text, nullable=True)  # JSON list of aggregate rows
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
    completed_at = Column(DateTime, nullable=True)

    def __repr__(self):
        return f"<SuiteRun {self.id} {self.suite_id} x{self.repetitions} [{self.status}]>"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "suite_id": self.suite_id,
            "repetitions": self.repetitions,
            "base_seed": self.base_seed,
            "output_dir": self.output_dir,
            "status": self.status,
            "error_message": self.error_message,
            "aggregate": _json(self.aggregate),
            "created_at": _iso(self.created_at),
            "completed_at": _iso(self.completed_at),
        }


class ScenarioRun(Base):
    """One closed-loop run inside a suite."""

    __tablename__ = "scenario_runs"

    id = Column(Integer, primary_key=True)
    suite_run_id = Column(Integer, ForeignKey("suite_runs.id"), nullable=False, index=True)
    case_name = Column(String(100), nullable=False)
    run_index = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)
    scenario_name = Column(String(200), nullable=False)
    status = Column(Enum(*RUN_STATUS, name="run_status"), default="pending", nullable=False)
    error_message = Column(Text, nullable=True)
    metrics = Column(Text, nullable=True)  # JSON RunMetrics
    log_path = Column(Text, nullable=True)
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
    completed_at = Column(DateTime, nullable=True)

    def __repr__(self):
        return f"<ScenarioRun {self.id} {self.case_name}#{self.run_index} seed={self.seed} [{self.status}]>"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "suite_run_id": self.suite_run_id,
            "case_name": self.case_name,
            "run_index": self.run_index,
            "seed": self.seed,
            "scenario_name": self.scenario_name,
            "status": self.status,
            "error_message": self.error_message,
            "metrics": _json(self.metrics),
            "log_path": self.log_path,
            "created_at": _iso(self.created_at),
            "completed_at": _iso(self.completed_at),
        }


# Database engine and session factory
_engine = None
_SessionFactory = None


def init_db(db_path: str | None = None) -> None:
    """Initialize the database engine and create tables.

    Args:
        db_path: Path to the SQLite database file. Defaults to
            ``ROTORGUARD_DB`` or ``<output dir>/rotorguard.db``.
    """
    global _engine, _SessionFactory

    if db_path is None:
        db_path = settings.db_path()
    directory = os.path.dirname(os.path.abspath(db_path))
    os.makedirs(directory, exist_ok=True)

    if _engine is not None:
        _engine.dispose()
    _engine = create_engine(f"sqlite:///{db_path}", echo=False)
    Base.metadata.create_all(_engine)
    _SessionFactory = sessionmaker(bind=_engine)


def get_session() -> Session:
    """Get a new database session."""
    if _SessionFactory is None:
        init_db()
    return _SessionFactory()


def recent_suites(limit: int = 20) -> list[dict]:
    """Most recent suite runs, newest first."""
    session = get_session()
    try:
        rows = session.query(SuiteRun).order_by(SuiteRun.id.desc()).limit(limit).all()
        return [row.to_dict() for row in rows]
    finally:
        session.close()
