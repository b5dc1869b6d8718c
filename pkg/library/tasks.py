import queue
import threading
import traceback
from typing import Callable, Generic, Iterable, Iterator, TypeVar

from loguru import logger

from library.exceptions import StopException

T = TypeVar("T")

_DONE = object()


class BatchPrefetcher(Generic[T]):

    """
    Runs `produce(step)` for every step on a background thread and hands the
    results over through a bounded queue, in step order. An exception raised by
    `produce` is re-raised in the consuming thread.
    """

    def __init__(self, produce: Callable[[int], T], steps: Iterable[int], depth: int = 2) -> None:
        self.produce = produce
        self.steps = list(steps)
        self.queue: queue.Queue = queue.Queue(maxsize=max(depth, 1))
        self.events: dict[int, threading.Event] = {}
        self.thread: threading.Thread | None = None

    def start(self) -> "BatchPrefetcher[T]":
        event = threading.Event()
        self.events[0] = event

        self.thread = threading.Thread(target=self._run, args=(event,), daemon=True)
        logger.debug(f"Starting prefetch thread for {len(self.steps)} step(s).")
        self.thread.start()

        return self

    def stop(self) -> None:
        for event in self.events.values():
            event.set()

        # Unblock a producer waiting on a full queue.
        while self.thread is not None and self.thread.is_alive():
            try:
                self.queue.get(timeout=0.05)
            except queue.Empty:
                pass

    def _put(self, event: threading.Event, item) -> None:
        while True:
            if event.is_set():
                raise StopException
            try:
                self.queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def _run(self, event: threading.Event) -> None:
        try:
            for step in self.steps:
                if event.is_set():
                    raise StopException
                try:
                    item = (step, self.produce(step), None)
                except Exception as error:
                    logger.debug(f"Batch for step {step} failed:\n{traceback.format_exc()}")
                    item = (step, None, error)

                self._put(event, item)
                if item[2] is not None:
                    return

            self._put(event, _DONE)
        except StopException:
            logger.debug("Prefetch thread stopping...")

    def __iter__(self) -> Iterator[tuple[int, T]]:
        if self.thread is None:
            self.start()

        try:
            while True:
                item = self.queue.get()
                if item is _DONE:
                    return

                step, value, error = item
                if error is not None:
                    raise error

                yield step, value
        finally:
            self.stop()
