"""Console logging in the `[component] message` style."""

from __future__ import annotations
import logging
import sys

FORMAT = "[%(component)s] %(message)s"


class _ComponentFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        # geounify.train -> "train"
        record.component = record.name.rsplit(".", 1)[-1]
        return super().format(record)


def get_logger(name: str) -> logging.Logger:
    if not name.startswith("geounify"):
        name = f"geounify.{name}"
    return logging.getLogger(name)


def setup_logging(verbose: bool = False) -> None:
    root = logging.getLogger("geounify")
    if not root.handlers:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(_ComponentFormatter(FORMAT))
        root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False
