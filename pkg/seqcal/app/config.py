"""Process-level configuration for seqcal (environment, logging, run store)."""

import os
from typing import Any, Dict, Mapping

from dotenv import load_dotenv

load_dotenv()

_LOG_LEVELS = ("error", "info", "debug")


class Config:
    # EIVAR_LOG=error|info|debug
    LOG_LEVEL = os.getenv("EIVAR_LOG", "info").lower()

    # Optional log file in addition to stderr
    LOG_FILENAME = os.getenv("SEQCAL_LOG_FILE") or None

    # SQLAlchemy URL of the run store; unset disables persistence
    DATABASE_URL = os.getenv("SEQCAL_DATABASE_URL") or None

    SQLALCHEMY_ECHO = False

    # Default concurrency for replicate sweeps
    JOBS = int(os.getenv("SEQCAL_JOBS", "1"))

    def __init__(self) -> None:
        # snapshot class defaults so overrides stay per instance
        for key in self._keys():
            setattr(self, key, getattr(type(self), key))

    @classmethod
    def _keys(cls):
        return [k for k, v in vars(cls).items() if k.isupper() and not isinstance(v, property)]

    def from_mapping(self, mapping: Mapping[str, Any]) -> "Config":
        for key, value in mapping.items():
            if key not in self._keys():
                raise KeyError(f"Unknown config key {key!r}")
            setattr(self, key, value)
        if self.LOG_LEVEL not in _LOG_LEVELS:
            raise ValueError(f"LOG_LEVEL must be one of {_LOG_LEVELS}, got {self.LOG_LEVEL!r}")
        return self

    def as_dict(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in self._keys()}

    @property
    def DEBUG(self) -> bool:
        return self.LOG_LEVEL == "debug"
