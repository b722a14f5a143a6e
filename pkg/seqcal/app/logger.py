import logging
import sys

_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def setup_logging(config):
    """Route log records to stderr (and optionally a file); data never goes here."""
    level = _LEVELS.get(str(getattr(config, "LOG_LEVEL", "info")).lower(), logging.INFO)
    filename = getattr(config, "LOG_FILENAME", None)

    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        if getattr(handler, "_seqcal", False):
            root.removeHandler(handler)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(_FORMAT))
    console_handler._seqcal = True
    root.addHandler(console_handler)

    if filename:
        file_handler = logging.FileHandler(filename)
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(_FORMAT))
        file_handler._seqcal = True
        root.addHandler(file_handler)
