from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional

from .config import Config
from .logger import setup_logging


@dataclass
class AppContext:
    config: Config
    session_factory: Optional[Callable] = None


def create_app(config: Optional[Dict[str, Any]] = None) -> AppContext:
    """Build the process context: configuration, logging and the optional run store."""
    cfg = Config()
    if config:
        cfg.from_mapping(config)

    setup_logging(cfg)

    session_factory = None
    if cfg.DATABASE_URL:
        from . import models
        from .db import get_session_factory, init_engine

        engine = init_engine(cfg.DATABASE_URL, echo=cfg.SQLALCHEMY_ECHO)
        models.Base.metadata.create_all(bind=engine)
        session_factory = get_session_factory()

    return AppContext(cfg, session_factory)
