"""Exception types shared across the toolkit."""


class DhnError(Exception):
    """Base class for all toolkit errors."""


class TopologyError(DhnError):
    """The network description violates a structural requirement."""


class FlowSolveError(DhnError):
    """The mass-flow split system could not be solved."""


class SimulationError(DhnError):
    """A simulation step failed; carries the step index when known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class DesignError(DhnError):
    """Layout optimization failed (infeasible instance or internal check)."""


class CandidateLimitError(DesignError):
    """Candidate split-node generation exceeded the configured cap."""

    def __init__(self, limit: int, generated: int):
        super().__init__(
            f"candidate generation exceeded the cap of {limit} nodes "
            f"({generated} generated so far); raise the cap to continue"
        )
        self.limit = limit
        self.generated = generated
