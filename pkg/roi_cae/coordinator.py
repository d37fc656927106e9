# roi_cae/coordinator.py
"""Concurrent scheduling of independent experiment runs."""

import asyncio
import logging
from dataclasses import dataclass
from typing import Any, Callable, Generic, List, Optional, Sequence, TypeVar

import async_timeout

from .const import DEFAULT_MAX_CONCURRENT_RUNS
from .exceptions import RoiCaeError, RunFailedError

_LOGGER = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class Job(Generic[T]):
    """A named, self-contained run (one seed, variant or protocol)."""

    name: str
    func: Callable[[], T]


class ExperimentCoordinator:
    """Runs jobs in worker threads, at most ``max_concurrent_runs`` at a time.

    Each job gets its own ``run_timeout`` deadline. Results come back in job
    order; failed jobs are logged and dropped, and if every job fails a
    :class:`RunFailedError` is raised.
    """

    def __init__(
        self,
        max_concurrent_runs: int = DEFAULT_MAX_CONCURRENT_RUNS,
        run_timeout: Optional[float] = None,
        name: str = "experiment",
    ) -> None:
        if max_concurrent_runs < 1:
            raise ValueError("max_concurrent_runs must be >= 1")
        self.max_concurrent_runs = max_concurrent_runs
        self.run_timeout = run_timeout
        self.name = name
        _LOGGER.debug(
            "Initialized coordinator '%s' (concurrency %d, timeout %s)",
            name,
            max_concurrent_runs,
            run_timeout,
        )

    async def _async_run_job(self, job: Job, semaphore: asyncio.Semaphore) -> Any:
        async with semaphore:
            _LOGGER.info("Starting run '%s'", job.name)
            async with async_timeout.timeout(self.run_timeout):
                result = await asyncio.to_thread(job.func)
            _LOGGER.info("Finished run '%s'", job.name)
            return result

    async def async_run_jobs(self, jobs: Sequence[Job]) -> List[Any]:
        """Gather all jobs; returns successful results in job order."""
        if not jobs:
            return []
        semaphore = asyncio.Semaphore(self.max_concurrent_runs)
        results = await asyncio.gather(
            *(self._async_run_job(job, semaphore) for job in jobs),
            return_exceptions=True,
        )
        successes: List[Any] = []
        failures: List[str] = []
        for job, result in zip(jobs, results):
            if isinstance(result, asyncio.TimeoutError):
                _LOGGER.error(
                    "Run '%s' exceeded its %ss deadline", job.name, self.run_timeout
                )
                failures.append(f"{job.name}: timeout")
            elif isinstance(result, RoiCaeError):
                _LOGGER.error("Run '%s' failed: %s", job.name, result)
                failures.append(f"{job.name}: {result.error_key}")
            elif isinstance(result, BaseException):
                _LOGGER.error(
                    "Unexpected error in run '%s': %s", job.name, result, exc_info=result
                )
                failures.append(f"{job.name}: {type(result).__name__}")
            else:
                successes.append(result)

        if not successes:
            raise RunFailedError(
                f"All {len(jobs)} run(s) of '{self.name}' failed",
                error_details="; ".join(failures),
            )
        if failures:
            _LOGGER.warning(
                "%d of %d run(s) of '%s' failed; continuing with %d result(s)",
                len(failures),
                len(jobs),
                self.name,
                len(successes),
            )
        else:
            _LOGGER.info(
                "All %d run(s) of '%s' completed successfully", len(jobs), self.name
            )
        return successes

    def run_jobs(self, jobs: Sequence[Job]) -> List[Any]:
        """Blocking wrapper around :meth:`async_run_jobs`."""
        return asyncio.run(self.async_run_jobs(jobs))
