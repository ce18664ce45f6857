"""Simulated control plane: schedule, plan the topology, assign communicator addresses.

It runs once before training. Afterwards partitions only talk to each other
through payloads, so nothing here is consulted during the event loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .domain import ResourcingPlan, Scenario, SyncStrategyConfig
from .scheduler import check_plan, plan_resources
from .sim import AddressTable, SimReport, register_communicators, resolve_strategy, run_simulation


@dataclass(frozen=True)
class WorkflowPlan:
    plan: ResourcingPlan
    topology: Mapping[str, str]
    addresses: Mapping[str, str]
    strategy: SyncStrategyConfig

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "topology": dict(self.topology),
            "addresses": dict(self.addresses),
            "strategy": {
                "kind": self.strategy.kind,
                "sync_frequency": self.strategy.sync_frequency,
                "accumulation_mode": self.strategy.accumulation_mode,
            },
        }


def orchestrate(scenario: Scenario) -> WorkflowPlan:
    """Compose scheduling, topology planning and address registration.

    Every step is computed before anything is returned, so a failure leaves
    nothing half-built.
    """
    plan = plan_resources(scenario.clouds, scenario.power_column)
    check_plan(scenario.clouds, plan)
    strategy = resolve_strategy(scenario)
    table = register_communicators(scenario.cloud_ids)
    senders = set(strategy.topology) | set(strategy.topology.values())
    unknown = senders - set(table.snapshot())
    if unknown:
        raise ValueError(f"topology names unregistered PS {sorted(unknown)}")
    return WorkflowPlan(plan, dict(strategy.topology), table.snapshot(), strategy)


def launch(scenario: Scenario, seed: int | None = None) -> tuple[WorkflowPlan, SimReport]:
    """Orchestrate, then hand the workflow to the physical plane (the simulator)."""
    wf = orchestrate(scenario)
    table = AddressTable()
    for pid in wf.addresses:
        table.register(pid)
    report = run_simulation(scenario, wf.plan, wf.strategy, seed, addresses=table)
    report.control_log[:0] = [(0.0, "register", pid) for pid in wf.addresses]
    return wf, report
