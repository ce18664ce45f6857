"""Parameter-server state machine and the WAN synchronization strategies.

Per training iteration a PS (1) receives a worker gradient, (2) applies it with
SGD and merges it into the accumulator, (3) checks the strategy's sync
condition, (4) packs a payload for its single receiver, and (5) the receiver
merges that payload into its own model.

Strategies:

* ``baseline_asgd`` sends the raw gradient every iteration.
* ``asgd_ga`` sends the gradient accumulated over ``sync_frequency`` iterations;
  the receiver applies it as one SGD step.
* ``ama`` sends model parameters every ``sync_frequency`` iterations; the
  receiver averages them with its own.
* ``sma`` is ``ama`` behind a barrier: nobody sends until every partition has
  reached the same round boundary.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .domain import ModelState, SyncStrategyConfig
from .errors import SyncContractError
from .trainer import sgd_apply

# kind:1 + sender id:8 + version:8 + length:8
HEADER_BYTES = 25

ACCUMULATED_GRADIENT = "accumulated_gradient"
MODEL_PARAMETERS = "model_parameters"


def payload_size(n_values: int) -> int:
    return 8 * n_values + HEADER_BYTES


@dataclass(frozen=True, eq=False)
class SyncPayload:
    kind: str
    data: np.ndarray
    sender: str
    sender_version: int

    @property
    def size_bytes(self) -> int:
        return payload_size(self.data.shape[0])


@dataclass(eq=False)
class PsState:
    ps_id: str
    model: ModelState
    strategy: SyncStrategyConfig
    lr: float
    outbox: deque = field(default_factory=deque)
    inbox: deque = field(default_factory=deque)
    iters_since_sync: int = 0
    rounds: int = 0

    @property
    def receiver(self) -> str | None:
        return self.strategy.topology.get(self.ps_id)


def local_update(ps: PsState, grad: np.ndarray) -> PsState:
    """Apply a worker gradient locally and merge it into the accumulator."""
    model = sgd_apply(ps.model, grad, ps.lr)
    count = model.accum_count + 1
    grad = np.asarray(grad, dtype=np.float64)
    if ps.strategy.accumulation_mode == "sum":
        accum = model.accum_grad + grad
    else:
        accum = model.accum_grad + (grad - model.accum_grad) / count
    ps.model = model.evolve(accum_grad=accum, accum_count=count)
    ps.iters_since_sync += 1
    return ps


def check_sync_condition(ps: PsState, barrier_group: Sequence[PsState] | None = None) -> bool:
    k = ps.strategy.sync_frequency
    if ps.strategy.kind != "sma":
        return ps.iters_since_sync >= k
    group = barrier_group if barrier_group is not None else [ps]
    # barrier: everyone must sit at the same round boundary
    return all(p.iters_since_sync >= k and p.rounds == ps.rounds for p in group)


def make_payload(ps: PsState, barrier_group: Sequence[PsState] | None = None) -> SyncPayload:
    """Pack the state to send, queue it on the outbox, and reset the sync window."""
    if not check_sync_condition(ps, barrier_group):
        raise SyncContractError(f"{ps.ps_id}: sync condition not met ({ps.iters_since_sync} iterations since last sync)")
    model = ps.model
    if ps.strategy.sends_gradients:
        payload = SyncPayload(ACCUMULATED_GRADIENT, model.accum_grad.copy(), ps.ps_id, model.version)
    else:
        payload = SyncPayload(MODEL_PARAMETERS, model.params.copy(), ps.ps_id, model.version)
    ps.model = model.evolve(accum_grad=np.zeros_like(model.accum_grad), accum_count=0)
    ps.iters_since_sync = 0
    ps.rounds += 1
    ps.outbox.append(payload)
    return payload


def release_barrier(group: Sequence[PsState]) -> list[SyncPayload]:
    """Pack every member's parameters once all of them reached the barrier."""
    if not group or not all(check_sync_condition(p, group) for p in group):
        raise SyncContractError("barrier released before every partition arrived")
    return [make_payload(p) for p in group]


def apply_remote(ps: PsState, payload: SyncPayload) -> PsState:
    """Merge a remote payload: SGD step for gradients, pairwise mean for parameters."""
    data = np.asarray(payload.data, dtype=np.float64)
    params = ps.model.params
    if data.shape != params.shape:
        raise ValueError(f"payload length {data.shape[0]} != model length {params.shape[0]}")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"non-finite payload from {payload.sender}")
    if payload.kind == ACCUMULATED_GRADIENT:
        strategy = ps.strategy
        lr = strategy.lr_sync if strategy.lr_sync is not None else ps.lr
        if strategy.scale_by_window and strategy.accumulation_mode == "sum":
            lr = lr / strategy.sync_frequency
        new = params - lr * data
    elif payload.kind == MODEL_PARAMETERS:
        new = (params + data) / 2.0
    else:
        raise ValueError(f"unknown payload kind {payload.kind!r}")
    ps.model = ps.model.evolve(params=new, version=ps.model.version + 1)
    return ps


def drain_inbox(ps: PsState) -> int:
    """Apply queued payloads in arrival order; returns how many were applied."""
    n = 0
    while ps.inbox:
        apply_remote(ps, ps.inbox.popleft())
        n += 1
    return n


def plan_topology(ps_ids: Iterable[str]) -> dict[str, str]:
    """Ring over the sorted ids: each PS sends to its successor, the last to the first."""
    ids = sorted(ps_ids)
    if len(ids) < 2:
        raise ValueError("a topology needs at least two parameter servers")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate parameter server ids")
    return {a: b for a, b in zip(ids, ids[1:] + ids[:1])}
