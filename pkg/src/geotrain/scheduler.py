"""Load-power quantification and the optimal matching planner.

A cloud's load power is its aggregate device power divided by its dataset
size. The planner finds the straggler (minimal full-allocation load power) and
shrinks every other cloud to the allocation whose load power is nearest to the
straggler's, so all partitions progress at roughly the same pace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .domain import CloudSpec, DevicePower, ResourcingPlan, Scenario, TimingConfig
from .errors import UnschedulableError

# brute-force search refuses cross-products larger than this
MAX_CANDIDATES = 10_000_000
# relative slack below which two distances count as a tie
TIE_RTOL = 1e-9

Allocation = Sequence[tuple[DevicePower, int]]


@dataclass(frozen=True)
class LoadPower:
    value: float
    cloud_id: str = ""

    def __float__(self) -> float:
        return self.value


def allocation_power(allocation: Allocation, column: str = "in") -> float:
    return math.fsum(units * device.power(column) for device, units in allocation)


def compute_load_power(allocation: Allocation, dataset_size: int, column: str = "in", cloud_id: str = "") -> LoadPower:
    if dataset_size <= 0:
        raise ValueError(f"empty partition {cloud_id!r}: load power undefined for dataset_size={dataset_size}")
    if any(units < 0 for _, units in allocation):
        raise ValueError("unit counts must be non-negative")
    return LoadPower(allocation_power(allocation, column) / dataset_size, cloud_id)


def search_optimal_plan(cloud: CloudSpec, target_lp: LoadPower | float, column: str = "in") -> tuple[tuple[str, int], ...]:
    """Brute-force the unit counts whose load power is nearest ``target_lp``.

    Ties (within a relative 1e-9) go to fewer total units, then to the
    lexicographically smallest count vector. Never exceeds availability.
    """
    target = float(target_lp)
    if target < 0:
        raise ValueError("target load power must be non-negative")
    if cloud.dataset_size <= 0:
        raise ValueError(f"empty partition {cloud.cloud_id!r}")
    ids = [d.device_id for d, _ in cloud.devices]
    if not ids:
        return ()
    shape = tuple(n + 1 for _, n in cloud.devices)
    n_candidates = math.prod(shape)
    if n_candidates > MAX_CANDIDATES:
        raise ValueError(f"{n_candidates} candidate allocations for {cloud.cloud_id!r} exceeds {MAX_CANDIDATES}")

    counts = np.indices(shape).reshape(len(shape), -1).T
    powers = np.array([d.power(column) for d, _ in cloud.devices])
    lp = counts @ powers / cloud.dataset_size
    dist = np.abs(lp - target)
    if target > 0:
        # an empty allocation only matches a zero target
        dist[0] = np.inf
    near = dist <= dist.min() + TIE_RTOL * max(target, dist.min())
    totals = np.where(near, counts.sum(axis=1), np.iinfo(np.int64).max)
    best = int(np.argmin(totals))  # argmin returns the first, i.e. lexicographically smallest
    return tuple(zip(ids, (int(c) for c in counts[best])))


def _resolve(cloud: CloudSpec, alloc: Iterable[tuple[str, int]]) -> list[tuple[DevicePower, int]]:
    by_id = {d.device_id: d for d, _ in cloud.devices}
    return [(by_id[d], n) for d, n in alloc]


def _check_schedulable(clouds: Sequence[CloudSpec]) -> None:
    for c in clouds:
        if c.total_units <= 0:
            raise UnschedulableError(f"unschedulable cloud {c.cloud_id!r}: no allocatable devices")
        if c.dataset_size <= 0:
            raise UnschedulableError(f"unschedulable cloud {c.cloud_id!r}: empty partition")


def greedy_plan(clouds: Sequence[CloudSpec], column: str = "in") -> ResourcingPlan:
    """Every available unit in every cloud, regardless of balance."""
    _check_schedulable(clouds)
    allocations = {c.cloud_id: tuple((d.device_id, n) for d, n in c.devices) for c in clouds}
    lps = {c.cloud_id: compute_load_power(c.devices, c.dataset_size, column).value for c in clouds}
    straggler = min(lps, key=lambda cid: (lps[cid], cid))
    return ResourcingPlan(allocations, lps, column, straggler)


def plan_resources(clouds: Sequence[CloudSpec], column: str = "in") -> ResourcingPlan:
    _check_schedulable(clouds)
    full = {c.cloud_id: compute_load_power(c.devices, c.dataset_size, column, c.cloud_id) for c in clouds}
    straggler = min(full, key=lambda cid: (full[cid].value, cid))
    min_lp = full[straggler]

    allocations: dict[str, tuple[tuple[str, int], ...]] = {}
    lps: dict[str, float] = {}
    for c in clouds:
        if c.cloud_id == straggler:
            alloc = tuple((d.device_id, n) for d, n in c.devices)
        else:
            alloc = search_optimal_plan(c, min_lp, column)
        allocations[c.cloud_id] = alloc
        lps[c.cloud_id] = compute_load_power(_resolve(c, alloc), c.dataset_size, column).value
    return ResourcingPlan(allocations, lps, column, straggler)


def plan_for_scenario(scenario: Scenario, greedy: bool = False) -> ResourcingPlan:
    fn = greedy_plan if greedy else plan_resources
    return fn(scenario.clouds, scenario.power_column)


def check_plan(clouds: Sequence[CloudSpec], plan: ResourcingPlan, tol: float = 1e-9) -> None:
    """Raise if the plan exceeds availability or its stored load powers are stale."""
    for c in clouds:
        avail = {d.device_id: n for d, n in c.devices}
        for device_id, units in plan.allocations[c.cloud_id]:
            if not 0 <= units <= avail.get(device_id, -1):
                raise ValueError(f"{c.cloud_id}: {units} units of {device_id!r} exceeds availability")
        lp = compute_load_power(_resolve(c, plan.allocations[c.cloud_id]), c.dataset_size, plan.power_column).value
        if abs(lp - plan.per_cloud_lp[c.cloud_id]) > tol:
            raise ValueError(f"{c.cloud_id}: stored load power {plan.per_cloud_lp[c.cloud_id]} != {lp}")


def planned_allocation(cloud: CloudSpec, plan: ResourcingPlan) -> list[tuple[DevicePower, int]]:
    return _resolve(cloud, plan.allocations[cloud.cloud_id])


# -- compute-time model ----------------------------------------------------


def relative_power(allocation: Allocation, timing: TimingConfig, column: str = "in") -> float:
    """Power relative to the reference allocation (``reference_units`` baseline units)."""
    return allocation_power(allocation, column) / timing.reference_units


def estimate_train_time(
    allocation: Allocation,
    dataset_size: int,
    iters_per_epoch: int = 1,
    timing: TimingConfig | None = None,
    column: str = "in",
) -> float:
    """Virtual seconds for ``iters_per_epoch`` iterations over a ``dataset_size`` partition.

    Each iteration costs ``reference_iter_time * (dataset_size / reference_dataset) / relative_power``,
    so training time grows with data and shrinks with allocated power.
    """
    timing = timing or TimingConfig()
    power = relative_power(allocation, timing, column)
    if power <= 0:
        raise ValueError("empty allocation: no compute power to train with")
    per_iter = timing.reference_iter_time_s * (dataset_size / timing.reference_dataset) / power
    return per_iter * iters_per_epoch
