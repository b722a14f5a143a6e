"""Serves the bundled damped-sinusoid stand-in over the child-process protocol."""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from app.problems import fresco_like_eta  # noqa: E402


def main() -> int:
    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        try:
            eta = fresco_like_eta([req["theta"]])[0]
            reply = {"id": req["id"], "eta": [float(v) for v in eta]}
        except (ValueError, IndexError) as exc:
            reply = {"id": req["id"], "error": str(exc)}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
