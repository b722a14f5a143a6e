from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import scoped_session, sessionmaker
from sqlalchemy.pool import StaticPool

_engine: Optional[Engine] = None
_engine_url: Optional[str] = None
_SessionFactory = None


def init_engine(database_url: str, echo: bool = False) -> Engine:
    """Create (or reuse) the run-store engine for ``database_url``.

    In-memory SQLite always gets a fresh engine on a single shared connection
    so every session sees the same database.
    """
    global _engine, _engine_url, _SessionFactory

    if database_url.startswith("sqlite:///:memory:") or database_url == "sqlite://":
        engine = create_engine(
            database_url,
            echo=echo,
            future=True,
            connect_args={"check_same_thread": False},
            poolclass=StaticPool,
        )
    elif _engine is not None and _engine_url == database_url:
        return _engine
    else:
        engine = create_engine(database_url, echo=echo, future=True)

    _engine, _engine_url = engine, database_url
    _SessionFactory = scoped_session(sessionmaker(bind=engine, autoflush=False, autocommit=False))
    return _engine


def get_session_factory():
    """Return the scoped_session factory. Raises if init_engine not called."""
    if _SessionFactory is None:
        raise RuntimeError("Engine/session factory not initialized. Call init_engine first.")
    return _SessionFactory
