"""
Work pool for experiment cells.

Cells run in a ProcessPoolExecutor (or inline with one worker) and results are
handed back to the caller as they complete, so a single writer in the parent
process owns the result files. Ctrl+C stops scheduling new cells; a second
Ctrl+C quits immediately.
"""
import signal
import sys
import threading
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Callable, Iterator, Sequence, Tuple

from tqdm import tqdm

from core.exceptions import CellTimeoutError

# Global flag for graceful shutdown
interrupt_requested = False


def signal_handler(signum, frame):
    """Handle interrupt signal (Ctrl+C) gracefully"""
    global interrupt_requested
    if not interrupt_requested:
        tqdm.write("\n⚠️  Interrupt received! Will stop after the running cells finish...")
        tqdm.write("   Press Ctrl+C again to force quit immediately.")
        interrupt_requested = True
    else:
        tqdm.write("\n🛑 Force quit requested!")
        sys.exit(1)


def _raise_timeout(cell_id: str, seconds: float):
    def _handler(signum, frame):
        raise CellTimeoutError(cell_id, seconds)
    return _handler


def timed_call(worker: Callable[[Any], Any], cell: Any, cell_id: str, timeout_seconds: float) -> Any:
    """Runs worker(cell) under a SIGALRM budget where the platform provides one."""
    if (not timeout_seconds or not hasattr(signal, "SIGALRM")
            or threading.current_thread() is not threading.main_thread()):
        return worker(cell)
    previous = signal.signal(signal.SIGALRM, _raise_timeout(cell_id, timeout_seconds))
    signal.setitimer(signal.ITIMER_REAL, timeout_seconds)
    try:
        return worker(cell)
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)
        signal.signal(signal.SIGALRM, previous)


def run_cells(cells: Sequence[Tuple[str, Any]],
              worker: Callable[[Any], Any],
              max_workers: int = 1,
              timeout_seconds: float = 0.0,
              show_progress: bool = True) -> Iterator[Tuple[str, Any, BaseException]]:
    """Yields (cell_id, result, error) per cell in completion order; exactly one of result/error is None.

    worker must be a picklable top-level function when max_workers > 1.
    """
    global interrupt_requested
    interrupt_requested = False
    previous = _install_sigint(signal_handler)
    total = len(cells)
    progress = tqdm(total=total, desc="cells", disable=not show_progress or total == 0)
    try:
        if max_workers <= 1:
            for cell_id, cell in cells:
                if interrupt_requested:
                    break
                try:
                    outcome = (cell_id, timed_call(worker, cell, cell_id, timeout_seconds), None)
                except Exception as e:
                    outcome = (cell_id, None, e)
                _report(progress, outcome)
                yield outcome
            return

        with ProcessPoolExecutor(max_workers=max_workers) as executor:
            future_to_cell = {executor.submit(timed_call, worker, cell, cell_id, timeout_seconds): cell_id
                              for cell_id, cell in cells}
            for future in as_completed(future_to_cell):
                cell_id = future_to_cell[future]
                try:
                    outcome = (cell_id, future.result(), None)
                except Exception as e:
                    outcome = (cell_id, None, e)
                _report(progress, outcome)
                yield outcome
                if interrupt_requested:
                    tqdm.write("\n🛑 Interrupt requested, cancelling remaining cells...")
                    executor.shutdown(wait=False, cancel_futures=True)
                    break
    finally:
        progress.close()
        if previous is not None:
            _install_sigint(previous)


def _install_sigint(handler):
    try:
        return signal.signal(signal.SIGINT, handler)
    except ValueError:
        # Not the main thread
        return None


def _report(progress: tqdm, outcome: Tuple[str, Any, BaseException]):
    cell_id, _, error = outcome
    progress.update(1)
    if error is None:
        progress.set_postfix_str(f"✓ {cell_id}")
    else:
        tqdm.write(f"✗ {cell_id}: {error}")
