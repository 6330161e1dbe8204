"""
Run registry: a small SQL ledger of every CLI run and the artifacts it wrote.

Each run records its command, config digest, seed, output directory and
status; each artifact records its path, kind and SHA-256 so re-runs can be
checked for byte-identical output.
"""

import hashlib
import logging
import os
from datetime import datetime
from typing import List, Optional

from sqlalchemy import DateTime, ForeignKey, Integer, String, Text, create_engine, select
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column, relationship, sessionmaker

logger = logging.getLogger(__name__)


class Base(DeclarativeBase):
    pass


# Database Models
class ExperimentRun(Base):
    __tablename__ = "experiment_run"

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    command: Mapped[str] = mapped_column(String(40), nullable=False)
    config_digest: Mapped[str] = mapped_column(String(64), nullable=False, index=True)
    seed: Mapped[int] = mapped_column(Integer, nullable=False)
    run_dir: Mapped[str] = mapped_column(Text, nullable=False)
    status: Mapped[str] = mapped_column(String(20), default="running")
    message: Mapped[Optional[str]] = mapped_column(Text, nullable=True)
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
    finished_at: Mapped[Optional[datetime]] = mapped_column(DateTime, nullable=True)
    artifacts: Mapped[List["RunArtifact"]] = relationship(back_populates="run", cascade="all, delete-orphan")


class RunArtifact(Base):
    __tablename__ = "run_artifact"

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("experiment_run.id"), nullable=False)
    path: Mapped[str] = mapped_column(Text, nullable=False)
    kind: Mapped[str] = mapped_column(String(40), nullable=False)
    sha256: Mapped[str] = mapped_column(String(64), nullable=False)
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
    run: Mapped[ExperimentRun] = relationship(back_populates="artifacts")


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunRegistry:
    """Session factory bound to one database URL"""

    def __init__(self, url: str):
        if url.startswith("sqlite:///"):
            directory = os.path.dirname(url[len("sqlite:///"):])
            if directory:
                os.makedirs(directory, exist_ok=True)
        self.engine = create_engine(url)
        Base.metadata.create_all(self.engine)
        self.sessions = sessionmaker(self.engine, expire_on_commit=False)

    def start_run(self, command: str, config_digest: str, seed: int, run_dir: str) -> int:
        with self.sessions.begin() as session:
            run = ExperimentRun(command=command, config_digest=config_digest, seed=seed, run_dir=run_dir)
            session.add(run)
            session.flush()
            run_id = run.id
        logger.info(f"[Registry] run {run_id} started: {command} in {run_dir}")
        return run_id

    def add_artifact(self, run_id: int, path: str, kind: str) -> str:
        sha = file_sha256(path)
        with self.sessions.begin() as session:
            session.add(RunArtifact(run_id=run_id, path=path, kind=kind, sha256=sha))
        return sha

    def finish_run(self, run_id: int, status: str = "success", message: Optional[str] = None):
        with self.sessions.begin() as session:
            run = session.get(ExperimentRun, run_id)
            run.status = status
            run.message = message
            run.finished_at = datetime.utcnow()
        logger.info(f"[Registry] run {run_id} finished: {status}")

    def get_run(self, run_id: int) -> Optional[ExperimentRun]:
        with self.sessions() as session:
            return session.get(ExperimentRun, run_id)

    def artifacts(self, run_id: int) -> List[RunArtifact]:
        with self.sessions() as session:
            return list(session.scalars(select(RunArtifact).where(RunArtifact.run_id == run_id)
                                        .order_by(RunArtifact.id)))

    def runs_with_digest(self, config_digest: str) -> List[ExperimentRun]:
        with self.sessions() as session:
            return list(session.scalars(select(ExperimentRun).where(ExperimentRun.config_digest == config_digest)
                                        .order_by(ExperimentRun.id)))
