import logging
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Callable, Dict, List, Tuple

from core.config import Config

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Job:
    job_id: int
    scheme: str
    n: int
    params: Dict[str, Any] = field(default_factory=dict)


def build_lanes(jobs: List[Job], lanes: int) -> List[List[Job]]:
    """
    Returns lanes. Each lane is a list of Jobs that run serially.
    Lanes can run in parallel. Jobs are dealt round-robin so that the
    expensive large-n jobs do not all land in one lane.
    """
    lanes = max(1, min(lanes, len(jobs)))
    out: List[List[Job]] = [[] for _ in range(lanes)]
    # largest n first, dealt in turn
    for i, job in enumerate(sorted(jobs, key=lambda j: j.n, reverse=True)):
        out[i % lanes].append(job)
    return [lane for lane in out if lane]


def run_lane_serial(
    *,
    lane_id: int,
    jobs: List[Job],
    worker: Callable[[Job], Any],
) -> List[Tuple[Job, Any]]:
    results: List[Tuple[Job, Any]] = []
    for j in jobs:
        logger.info("lane %d running job %d: scheme=%s n=%d", lane_id, j.job_id, j.scheme, j.n)
        results.append((j, worker(j)))
    return results


def run_lanes_parallel(
    *,
    lanes: List[List[Job]],
    worker: Callable[[Job], Any],
    max_parallel_lanes: int = 10,
) -> List[Tuple[int, Job, Any]]:
    all_results: List[Tuple[int, Job, Any]] = []

    with ThreadPoolExecutor(max_workers=max_parallel_lanes) as ex:
        futures = {}
        for idx, lane_jobs in enumerate(lanes, start=1):
            futures[ex.submit(run_lane_serial, lane_id=idx, jobs=lane_jobs, worker=worker)] = idx

        for fut in as_completed(futures):
            lane_id = futures[fut]
            for job, result in fut.result():
                all_results.append((lane_id, job, result))

    return all_results


def run_jobs(jobs: List[Job], worker: Callable[[Job], Any], threads: int | None = None) -> List[Any]:
    """Run every job and return the results in job_id order, whatever the lane timing."""
    if not jobs:
        return []
    threads = threads or Config.get_threads()
    if threads <= 1:
        results = [(0, job, result) for job, result in run_lane_serial(lane_id=1, jobs=jobs, worker=worker)]
    else:
        lanes = build_lanes(jobs, threads)
        print_plan(lanes)
        results = run_lanes_parallel(lanes=lanes, worker=worker, max_parallel_lanes=len(lanes))
    return [result for _, _, result in sorted(results, key=lambda r: r[1].job_id)]


def print_plan(lanes: List[List[Job]]):
    print("\n[ETBSDE] Execution plan:")
    for i, lane in enumerate(lanes, start=1):
        print(f"  Parallel lane {i}:")
        for j in lane:
            print(f"    job={j.job_id} scheme={j.scheme} n={j.n}")
