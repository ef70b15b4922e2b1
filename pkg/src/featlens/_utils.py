import copy
import time
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List

from ._io import json_dumps


def wrap_log_input(tag: str, settings: Dict[str, Any]) -> str:
    input_lines = [tag]
    input_lines.append(" SETTINGS START ".center(50, "-"))
    input_lines.append(json_dumps(copy.deepcopy(settings), indent=2, ensure_ascii=False))
    input_lines.append(" SETTINGS END ".center(50, "-"))
    return "\n".join(input_lines)


def log_result(logger, tag: str, duration: float, settings: Dict[str, Any], summary: List[str]):
    ## log this on result
    log_strs = []
    log_strs.append(f"{tag} result ({duration:.2f}s)")
    log_strs.append(wrap_log_input(tag, settings))
    log_strs.append(" SUMMARY START ".center(50, "-"))
    log_strs.extend(summary)
    log_strs.append(" SUMMARY END ".center(50, "-") + "\n")
    logger.info("\n".join(log_strs))


def log_exception(logger, tag: str, duration: float, settings: Dict[str, Any], err_msg: str):
    ## log this on exception
    log_strs = []
    log_strs.append(f"{tag} error ({duration:.2f}s)")
    log_strs.append(wrap_log_input(tag, settings))
    log_strs.append(" EXCEPTION START ".center(50, "-"))
    log_strs.append(err_msg)
    log_strs.append(" EXCEPTION END ".center(50, "-") + "\n")
    logger.error("\n".join(log_strs))


def exception2err_msg(exception: Exception):
    err_msg = f"Exception: {type(exception).__module__}.{type(exception).__name__}"
    err_msg += f"\nDetailed info: {repr(exception)}"
    if exception.args:
        err_msg += f"\nException arguments: {exception.args}"
    return err_msg


@contextmanager
def logged_run(logger, tag: str, settings: Dict[str, Any]) -> Iterator[List[str]]:
    """Time a run; the yielded list collects summary lines for the final record."""
    summary: List[str] = []
    start_time = time.perf_counter()
    try:
        yield summary
    except Exception as exception:
        duration = time.perf_counter() - start_time
        log_exception(logger, tag, duration, settings, exception2err_msg(exception))
        raise
    duration = time.perf_counter() - start_time
    log_result(logger, tag, duration, settings, summary)
