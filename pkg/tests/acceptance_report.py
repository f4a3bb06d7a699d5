"""Shared registry for the acceptance summary printed after a run."""
from contextlib import contextmanager

LINES = []


@contextmanager
def criterion(index: int, name: str):
    """Collect one pass/fail line for a headline guarantee.

    The body fills info["detail"]; an escaping exception records the
    criterion as failed before propagating.
    """
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        detail = info["detail"] or f"{type(exc).__name__}: {exc}"
        LINES.append((index, name, False, detail))
        raise
    LINES.append((index, name, True, info["detail"]))
