"""Exception types shared across the package."""

from __future__ import annotations


class ScenarioError(ValueError):
    """A scenario failed validation. ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) if self.errors else "invalid scenario")


class UnschedulableError(ValueError):
    pass


class SyncContractError(RuntimeError):
    """A PS operation was invoked outside its contract (e.g. packing before the condition holds)."""


class RoutingError(LookupError):
    pass


class SimulationError(RuntimeError):
    pass
