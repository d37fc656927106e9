import logging
import threading
import time

import pytest

from roi_cae.coordinator import ExperimentCoordinator, Job
from roi_cae.exceptions import RunFailedError, SplitError


def _fail(exc):
    def func():
        raise exc

    return func


def test_results_keep_job_order():
    def slow(value, delay):
        def func():
            time.sleep(delay)
            return value

        return func

    coordinator = ExperimentCoordinator(max_concurrent_runs=3)
    jobs = [Job("a", slow(1, 0.05)), Job("b", slow(2, 0.0)), Job("c", slow(3, 0.02))]
    assert coordinator.run_jobs(jobs) == [1, 2, 3]


def test_partial_failure_drops_the_failed_run(caplog):
    coordinator = ExperimentCoordinator(name="protocol")
    jobs = [
        Job("seed-1", lambda: "ok"),
        Job("seed-2", _fail(SplitError("no val"))),
        Job("seed-3", _fail(ValueError("boom"))),
    ]
    with caplog.at_level(logging.WARNING, logger="roi_cae.coordinator"):
        assert coordinator.run_jobs(jobs) == ["ok"]
    assert "2 of 3 run(s) of 'protocol' failed" in caplog.text


def test_all_failures_raise_with_details():
    coordinator = ExperimentCoordinator(name="ablation")
    jobs = [Job("a", _fail(SplitError("x"))), Job("b", _fail(RuntimeError("y")))]
    with pytest.raises(RunFailedError) as err:
        coordinator.run_jobs(jobs)
    assert err.value.error_details == "a: invalid_split; b: RuntimeError"


def test_timeout_counts_as_failure():
    coordinator = ExperimentCoordinator(max_concurrent_runs=2, run_timeout=0.05)
    jobs = [Job("fast", lambda: 1), Job("slow", lambda: time.sleep(0.5))]
    assert coordinator.run_jobs(jobs) == [1]


def test_concurrency_limit_is_respected():
    lock = threading.Lock()
    active = [0]
    peak = [0]

    def job():
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return True

    coordinator = ExperimentCoordinator(max_concurrent_runs=2)
    assert coordinator.run_jobs([Job(str(i), job) for i in range(6)]) == [True] * 6
    assert peak[0] <= 2


def test_empty_job_list_and_bad_limit():
    assert ExperimentCoordinator().run_jobs([]) == []
    with pytest.raises(ValueError):
        ExperimentCoordinator(max_concurrent_runs=0)
