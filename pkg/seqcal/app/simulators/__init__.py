"""Child-process simulators bundled with seqcal, speaking the line-delimited JSON protocol."""

import sys
from pathlib import Path
from typing import List

_HERE = Path(__file__).resolve().parent
BUNDLED = ("echo", "fresco_like")


def bundled_command(name: str, *args: str) -> List[str]:
    """Command line that starts the bundled simulator ``name`` with the current interpreter."""
    if name not in BUNDLED:
        raise ValueError(f"unknown bundled simulator {name!r}; expected one of {BUNDLED}")
    return [sys.executable, str(_HERE / f"{name}.py"), *args]
