"""Deterministic discrete-event simulation of geo-distributed PS training.

Time is virtual. Compute time per iteration comes from the scheduler's timing
model, WAN/LAN transfers from link models; the numerics are real SGD on real
minibatches. Identical (scenario, plan, strategy, seed) give identical reports.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .domain import LinkModel, ModelState, ResourcingPlan, Scenario, SyncStrategyConfig
from .errors import RoutingError, SimulationError, SyncContractError
from .scheduler import estimate_train_time, greedy_plan, plan_resources, planned_allocation
from .sync import (
    PsState,
    check_sync_condition,
    drain_inbox,
    local_update,
    make_payload,
    plan_topology,
    release_barrier,
)
from .trainer import Dataset, accuracy, backward, build_dataset, epoch_batches, partition_dataset

EVENT_KINDS = (
    "workflow_start",
    "iteration_done",
    "model_load_done",
    "payload_sent",
    "payload_arrived",
    "partition_done",
    "teardown",
)


@dataclass(frozen=True, order=True)
class SimEvent:
    at: float
    seq: int
    kind: str = field(compare=False)
    subject: str = field(compare=False)


def wan_transfer_time(size_bytes: int, link: LinkModel, rng: np.random.Generator | None = None) -> float:
    """Latency plus serialization time, times a seeded log-normal factor when jitter is on."""
    if size_bytes < 0:
        raise ValueError("size_bytes must be non-negative")
    t = link.latency_s + 8.0 * size_bytes / link.bandwidth_bps
    if link.jitter is not None and rng is not None:
        t *= math.exp(rng.normal(0.0, link.jitter.sigma))
    return t


def allocation_cost(allocation, duration_s: float) -> float:
    """Cost of holding ``allocation`` (device, units) pairs for ``duration_s`` virtual seconds."""
    rate = math.fsum(n * d.price_per_unit_hour for d, n in allocation)
    return rate * duration_s / 3600.0


# -- communicator addressing -------------------------------------------------


class AddressTable:
    """Bijective map between PS identities and synthetic ``(ip, port)`` endpoints."""

    PORT = 50051

    def __init__(self):
        self._endpoint: dict[str, tuple[str, int]] = {}
        self._owner: dict[tuple[str, int], str] = {}
        self._slot: dict[str, int] = {}
        self._generation: dict[str, int] = {}

    def _assign(self, ps_id: str) -> tuple[str, int]:
        ep = (f"10.0.{self._slot[ps_id]}.{self._generation[ps_id] + 1}", self.PORT)
        self._endpoint[ps_id] = ep
        self._owner[ep] = ps_id
        return ep

    def register(self, ps_id: str) -> tuple[str, int]:
        if ps_id in self._endpoint:
            raise ValueError(f"duplicate registration of {ps_id!r}")
        self._slot[ps_id] = len(self._slot)
        self._generation[ps_id] = 0
        return self._assign(ps_id)

    def reregister(self, ps_id: str) -> tuple[str, int]:
        """Same identity, new endpoint (a restarted communicator function)."""
        old = self.resolve(ps_id)
        del self._owner[old]
        self._generation[ps_id] += 1
        return self._assign(ps_id)

    def resolve(self, ps_id: str) -> tuple[str, int]:
        try:
            return self._endpoint[ps_id]
        except KeyError:
            raise RoutingError(f"no endpoint registered for {ps_id!r}") from None

    def owner(self, endpoint: tuple[str, int]) -> str:
        try:
            return self._owner[endpoint]
        except KeyError:
            raise RoutingError(f"no PS listens on {endpoint[0]}:{endpoint[1]}") from None

    def __contains__(self, ps_id: str) -> bool:
        return ps_id in self._endpoint

    def __len__(self) -> int:
        return len(self._endpoint)

    def snapshot(self) -> dict[str, str]:
        return {pid: f"{ip}:{port}" for pid, (ip, port) in self._endpoint.items()}


def register_communicators(ps_ids: Iterable[str]) -> AddressTable:
    table = AddressTable()
    for pid in ps_ids:
        table.register(pid)
    return table


# -- report ------------------------------------------------------------------


@dataclass
class CloudTimes:
    t_load: float
    t_train: float
    t_wait: float
    t_total: float
    start: float
    teardown: float
    units: int
    cost: float
    iterations: int
    payloads_sent: int
    payloads_received: int
    final_accuracy: float
    final_loss: float


@dataclass
class SimReport:
    per_cloud: dict[str, CloudTimes]
    wan_bytes: int
    wan_bytes_received: int
    wan_time_s: float
    wan_size_time_s: float
    payloads_dropped: int
    cost: float
    makespan: float
    final_accuracy: float
    accuracy_trace: list[tuple[float, int, float, float, str]]
    seed: int
    strategy: dict
    plan: dict
    event_counts: dict[str, int]
    control_log: list[tuple[float, str, str]]
    events: list[SimEvent] = field(default_factory=list, repr=False)
    barrier_log: dict[int, dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def t_wait(self) -> float:
        return math.fsum(c.t_wait for c in self.per_cloud.values())

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "strategy": self.strategy,
            "plan": self.plan,
            "per_cloud": {cid: asdict(ct) for cid, ct in self.per_cloud.items()},
            "wan_bytes": self.wan_bytes,
            "wan_bytes_received": self.wan_bytes_received,
            "wan_time_s": self.wan_time_s,
            "wan_size_time_s": self.wan_size_time_s,
            "payloads_dropped": self.payloads_dropped,
            "cost": self.cost,
            "makespan": self.makespan,
            "t_wait": self.t_wait,
            "final_accuracy": self.final_accuracy,
            "accuracy_trace": [
                {"time_s": t, "epoch": e, "accuracy": a, "loss": l, "cloud_id": c} for t, e, a, l, c in self.accuracy_trace
            ],
            "event_counts": self.event_counts,
            "control_log": [list(x) for x in self.control_log],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def flat_rows(self) -> list[dict]:
        """Plot-ready rows: one per accuracy point and one per time-decomposition bar."""
        rows = []
        for t, e, a, l, c in self.accuracy_trace:
            rows.append({"record": "accuracy", "cloud_id": c, "time_s": t, "epoch": e, "accuracy": a, "loss": l})
        for cid, ct in self.per_cloud.items():
            for comp in ("t_load", "t_train", "t_wait", "t_total"):
                rows.append({"record": "time", "cloud_id": cid, "component": comp, "seconds": getattr(ct, comp)})
        return rows


# -- engine ------------------------------------------------------------------


@dataclass(eq=False)
class _Partition:
    cloud_id: str
    ps: PsState
    data: Dataset
    rng: np.random.Generator
    units: int
    alloc: list
    dt: float
    t_load: float
    total_iters: int
    it: int = 0
    phase: str = "idle"
    start: float = 0.0
    finish: float = 0.0
    teardown: float | None = None
    load_acc: float = 0.0
    train_acc: float = 0.0
    wait_acc: float = 0.0
    wait_since: float = 0.0
    expect: int = 0
    pending: np.ndarray | None = None
    batches: list = field(default_factory=list)
    sent: int = 0
    received: int = 0


class _Engine:
    def __init__(self, scenario, plan, strategy, seed, addresses, restarts, record_barriers):
        self.sc = scenario
        self.strategy = strategy
        self.seed = seed
        self.table = addresses
        self.restarts = set(restarts)
        self.record_barriers = record_barriers
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.events: list[SimEvent] = []
        self.control_log: list[tuple[float, str, str]] = []
        self.jitter_rng = np.random.default_rng([seed, 4])
        self.wan_bytes = self.wan_recv = self.dropped = 0
        self.wan_time = self.wan_size_time = 0.0
        self.trace: list = []
        self.barrier_log: dict[int, dict[str, np.ndarray]] = {}
        self.indegree = Counter(strategy.topology.values())
        self._build(plan)

    def _build(self, plan: ResourcingPlan):
        sc, seed = self.sc, self.seed
        sizes = [c.dataset_size for c in sc.clouds]
        if sc.data.mode == "replicate":
            self.eval_data = build_dataset(sc.data, max(sizes), [seed, 5])
            shares = [build_dataset(sc.data, n, [seed, 5]) for n in sizes]
        else:
            self.eval_data = build_dataset(sc.data, sum(sizes), [seed, 5])
            shares = partition_dataset(self.eval_data, sizes, [seed, 6])
        tr = sc.trainer
        self.iters_per_epoch = tr.iters_per_epoch or max(1, -(-max(sizes) // tr.batch_size))
        arch = tr.architecture(self.eval_data.dims)
        init = ModelState.initial(arch, np.random.default_rng([seed, 3]))
        model_bytes = 8 * arch.n_params

        self.parts: dict[str, _Partition] = {}
        for i, (cloud, share) in enumerate(zip(sc.clouds, shares)):
            alloc = planned_allocation(cloud, plan)
            units = sum(n for _, n in alloc)
            if units <= 0:
                raise SimulationError(f"cloud {cloud.cloud_id!r} has no allocated compute")
            dt = estimate_train_time(alloc, cloud.dataset_size, 1, sc.timing, plan.power_column)
            if sc.timing.load_time_s is not None:
                t_load = sc.timing.load_time_s
            else:
                t_load = wan_transfer_time(model_bytes, cloud.lan_model)
            stream = 0 if sc.data.mode == "replicate" else i
            ps = PsState(cloud.cloud_id, init, self.strategy, tr.learning_rate)
            self.parts[cloud.cloud_id] = _Partition(
                cloud_id=cloud.cloud_id,
                ps=ps,
                data=share,
                rng=np.random.default_rng([seed, 1, stream]),
                units=units,
                alloc=alloc,
                dt=dt,
                t_load=t_load,
                total_iters=tr.epochs * self.iters_per_epoch,
            )

    # event plumbing

    def push(self, at: float, kind: str, subject: str, data=None):
        heapq.heappush(self.heap, (at, self.seq, kind, subject, data))
        self.seq += 1

    def run(self) -> None:
        for pid in self.parts:
            self.push(self.sc.timing.startup_s, "workflow_start", pid)
        while self.heap:
            at, seq, kind, subject, data = heapq.heappop(self.heap)
            if at < self.now:
                raise SimulationError("virtual clock moved backwards")
            self.now = at
            self.events.append(SimEvent(at, seq, kind, subject))
            getattr(self, "_on_" + kind)(self.parts[subject], data)
        stuck = [p.cloud_id for p in self.parts.values() if p.teardown is None]
        if stuck:
            phases = ", ".join(f"{cid}={self.parts[cid].phase}@{self.parts[cid].it}" for cid in stuck)
            raise SimulationError(f"deadlock: no runnable events while partitions unfinished ({phases})")

    # partition lifecycle

    def _on_workflow_start(self, p: _Partition, _):
        p.start = self.now
        p.phase = "train"
        self._begin_iteration(p)

    def _begin_iteration(self, p: _Partition):
        if p.it == p.total_iters:
            p.finish = self.now
            p.phase = "done"
            self.push(self.now, "partition_done", p.cloud_id)
            return
        if p.it % self.strategy.sync_frequency == 0:
            # workers pull the model from the local PS at the start of each sync period
            p.load_acc += p.t_load
            self.push(self.now + p.t_load, "model_load_done", p.cloud_id)
        else:
            self._start_compute(p)

    def _on_model_load_done(self, p: _Partition, _):
        self._start_compute(p)

    def _start_compute(self, p: _Partition):
        if not p.batches:
            p.batches = epoch_batches(p.data, self.iters_per_epoch, p.rng)[::-1]
        batch = p.batches.pop()
        p.pending = backward(p.ps.model, batch)
        p.train_acc += p.dt
        self.push(self.now + p.dt, "iteration_done", p.cloud_id)

    def _on_iteration_done(self, p: _Partition, _):
        local_update(p.ps, p.pending)
        p.pending = None
        p.it += 1
        if p.it % self.iters_per_epoch == 0:
            acc, loss = accuracy(p.ps.model, self.eval_data)
            self.trace.append((self.now, p.it // self.iters_per_epoch, acc, loss, p.cloud_id))
        if (p.cloud_id, p.it) in self.restarts:
            self.table.reregister(p.cloud_id)
            self.control_log.append((self.now, "reregister", p.cloud_id))

        if self.strategy.kind == "sma":
            if p.ps.iters_since_sync >= self.strategy.sync_frequency:
                p.phase = "barrier"
                p.wait_since = self.now
                self._try_release()
                return
        elif p.ps.receiver is not None and check_sync_condition(p.ps):
            make_payload(p.ps)
            self._flush(p)
        self._begin_iteration(p)

    def _try_release(self):
        group = list(self.parts.values())
        if not all(q.phase == "barrier" for q in group):
            return
        release_barrier([q.ps for q in group])
        for q in group:
            self._flush(q)
        for q in group:
            q.expect = self.indegree[q.cloud_id]
            q.phase = "sync_wait"
            if q.expect == 0:
                self._resume(q)

    def _resume(self, p: _Partition):
        p.wait_acc += self.now - p.wait_since
        p.phase = "train"
        if self.record_barriers:
            self.barrier_log.setdefault(p.ps.rounds, {})[p.cloud_id] = p.ps.model.params.copy()
        self._begin_iteration(p)

    def _flush(self, p: _Partition):
        while p.ps.outbox:
            payload = p.ps.outbox.popleft()
            if p.ps.receiver is not None:
                self.push(self.now, "payload_sent", p.cloud_id, payload)

    def _on_payload_sent(self, p: _Partition, payload):
        receiver = p.ps.receiver
        try:
            endpoint = self.table.resolve(receiver)
        except RoutingError as exc:
            raise SimulationError(f"routing failed for payload from {p.cloud_id}: {exc}") from exc
        size = payload.size_bytes
        wt = wan_transfer_time(size, self.sc.wan, self.jitter_rng)
        self.wan_bytes += size
        self.wan_time += wt
        self.wan_size_time += 8.0 * size / self.sc.wan.bandwidth_bps
        p.sent += 1
        self.push(self.now + wt, "payload_arrived", receiver, (payload, endpoint))

    def _on_payload_arrived(self, q: _Partition, data):
        payload, _ = data
        # endpoints may have moved while in flight; route by the current table
        try:
            owner = self.table.owner(self.table.resolve(q.cloud_id))
        except RoutingError as exc:
            raise SimulationError(f"routing failed for payload to {q.cloud_id}: {exc}") from exc
        if owner != q.cloud_id:
            raise SimulationError(f"endpoint of {q.cloud_id} is owned by {owner}")
        self.wan_recv += payload.size_bytes
        q.received += 1
        if q.teardown is not None:
            self.dropped += 1
            return
        q.ps.inbox.append(payload)
        drain_inbox(q.ps)
        if q.phase == "sync_wait":
            q.expect -= 1
            if q.expect == 0:
                self._resume(q)

    def _on_partition_done(self, p: _Partition, _):
        if p.teardown is not None or any(q.phase != "done" for q in self.parts.values()):
            return
        for q in self.parts.values():
            q.wait_acc += self.now - q.finish
            q.teardown = self.now
            self.push(self.now, "teardown", q.cloud_id)

    def _on_teardown(self, p: _Partition, _):
        p.phase = "torn_down"

    def report(self, plan: ResourcingPlan) -> SimReport:
        per_cloud = {}
        for cid, p in self.parts.items():
            acc, loss = accuracy(p.ps.model, self.eval_data)
            total = p.teardown - p.start
            per_cloud[cid] = CloudTimes(
                t_load=p.load_acc,
                t_train=p.train_acc,
                t_wait=p.wait_acc,
                t_total=total,
                start=p.start,
                teardown=p.teardown,
                units=p.units,
                cost=allocation_cost(p.alloc, total),
                iterations=p.it,
                payloads_sent=p.sent,
                payloads_received=p.received,
                final_accuracy=acc,
                final_loss=loss,
            )
        s = self.strategy
        return SimReport(
            per_cloud=per_cloud,
            wan_bytes=self.wan_bytes,
            wan_bytes_received=self.wan_recv,
            wan_time_s=self.wan_time,
            wan_size_time_s=self.wan_size_time,
            payloads_dropped=self.dropped,
            cost=math.fsum(c.cost for c in per_cloud.values()),
            makespan=max(c.teardown for c in per_cloud.values()) - self.sc.timing.startup_s,
            final_accuracy=float(np.mean([c.final_accuracy for c in per_cloud.values()])),
            accuracy_trace=self.trace,
            seed=self.seed,
            strategy={
                "kind": s.kind,
                "sync_frequency": s.sync_frequency,
                "accumulation_mode": s.accumulation_mode,
                "topology": dict(s.topology),
            },
            plan=plan.to_dict(),
            event_counts=dict(sorted(Counter(e.kind for e in self.events).items())),
            control_log=self.control_log,
            events=self.events,
            barrier_log=self.barrier_log,
        )


def resolve_strategy(scenario: Scenario, strategy: SyncStrategyConfig | None = None) -> SyncStrategyConfig:
    """Fill in the ring topology when the strategy does not name one."""
    strategy = strategy or scenario.strategy
    ids = scenario.cloud_ids
    if not strategy.topology and len(ids) >= 2:
        strategy = SyncStrategyConfig(
            kind=strategy.kind,
            sync_frequency=strategy.sync_frequency,
            accumulation_mode=strategy.accumulation_mode,
            topology=plan_topology(ids),
            lr_sync=strategy.lr_sync,
            scale_by_window=strategy.scale_by_window,
        )
    for sender, receiver in strategy.topology.items():
        if sender not in ids or receiver not in ids:
            raise SimulationError(f"topology edge {sender}->{receiver} references a missing cloud")
    return strategy


def run_simulation(
    scenario: Scenario,
    plan: ResourcingPlan,
    strategy: SyncStrategyConfig | None = None,
    seed: int | None = None,
    *,
    addresses: AddressTable | None = None,
    restarts: Sequence[tuple[str, int]] = (),
    record_barriers: bool = False,
) -> SimReport:
    """Run one full training workflow and return its report.

    ``restarts`` lists ``(cloud_id, iteration)`` points after which that
    cloud's communicator re-registers under a new endpoint.
    """
    seed = scenario.seed if seed is None else seed
    missing = [cid for cid in scenario.cloud_ids if cid not in plan.allocations]
    if missing:
        raise SimulationError(f"plan does not cover clouds {missing}")
    strategy = resolve_strategy(scenario, strategy)
    control_log = []
    if addresses is None:
        addresses = register_communicators(scenario.cloud_ids)
        control_log = [(0.0, "register", cid) for cid in scenario.cloud_ids]
    engine = _Engine(scenario, plan, strategy, seed, addresses, restarts, record_barriers)
    engine.control_log = control_log
    try:
        engine.run()
    except (ValueError, SyncContractError) as exc:
        raise SimulationError(f"at t={engine.now:.6f}s: {exc}") from exc
    return engine.report(plan)


def run_baseline_comparison(scenario: Scenario, seed: int | None = None) -> tuple[SimReport, SimReport]:
    """(greedy-plan report, optimal-matching report) under identical seed and strategy."""
    greedy = greedy_plan(scenario.clouds, scenario.power_column)
    planned = plan_resources(scenario.clouds, scenario.power_column)
    return run_simulation(scenario, greedy, seed=seed), run_simulation(scenario, planned, seed=seed)


def reduction_pct(before: float, after: float) -> float:
    return 0.0 if before == 0 else 100.0 * (before - after) / before


def comparison_summary(greedy: SimReport, planned: SimReport) -> dict:
    return {
        "t_wait_greedy": greedy.t_wait,
        "t_wait_planned": planned.t_wait,
        "waiting_reduction_pct": reduction_pct(greedy.t_wait, planned.t_wait),
        "cost_greedy": greedy.cost,
        "cost_planned": planned.cost,
        "cost_reduction_pct": reduction_pct(greedy.cost, planned.cost),
        "makespan_greedy": greedy.makespan,
        "makespan_planned": planned.makespan,
    }

