import threading

import pytest

from library.tasks import BatchPrefetcher


class TestBatchPrefetcher:
    def test_steps_arrive_in_order(self):
        prefetcher = BatchPrefetcher(lambda step: step * step, range(3, 9), depth=2)
        assert list(prefetcher) == [(step, step * step) for step in range(3, 9)]

    def test_producer_runs_off_the_calling_thread(self):
        caller = threading.get_ident()
        threads = [ident for _, ident in BatchPrefetcher(lambda step: threading.get_ident(), range(3))]
        assert all(ident != caller for ident in threads)

    def test_error_is_raised_in_consumer(self):
        def produce(step):
            if step == 2:
                raise ValueError("bad batch")
            return step

        seen = []
        with pytest.raises(ValueError, match="bad batch"):
            for step, _ in BatchPrefetcher(produce, range(5)):
                seen.append(step)
        assert seen == [0, 1]

    def test_early_exit_stops_the_thread(self):
        prefetcher = BatchPrefetcher(lambda step: step, range(1000), depth=1)
        for step, _ in prefetcher:
            if step == 2:
                break
        assert not prefetcher.thread.is_alive()

    def test_no_steps(self):
        assert list(BatchPrefetcher(lambda step: step, [])) == []
