"""Echo simulator: answers each request with theta zero-padded to ``d`` outputs.

Usage: echo.py [D] [--fail-on-negative]
"""

import json
import sys


def main(argv) -> int:
    d = int(argv[0]) if argv and not argv[0].startswith("--") else None
    fail_negative = "--fail-on-negative" in argv
    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        theta = [float(v) for v in req["theta"]]
        if fail_negative and any(v < 0 for v in theta):
            reply = {"id": req["id"], "error": "negative parameter"}
        else:
            width = d if d is not None else len(theta)
            reply = {"id": req["id"], "eta": (theta + [0.0] * width)[:width]}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
