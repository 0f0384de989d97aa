"""Exception types shared across the package."""


class AnticausalError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(AnticausalError):
    """A graph/model/generator specification violates its preconditions."""


class ShapeError(AnticausalError):
    """Array dimensions do not match the declared interface."""


class ContractError(AnticausalError):
    """An operation was called outside its contract (wrong arity, empty batch, ...)."""


class TaskIndexError(AnticausalError):
    """Task index outside 0..K-1."""


class CyclicGraphError(AnticausalError):
    """A hardened adjacency matrix contains a directed cycle."""

    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("directed cycle: " + " -> ".join(str(v) for v in self.cycle))


class DivergedError(AnticausalError):
    """An optimization produced a non-finite objective."""


class IngestionError(AnticausalError):
    """A dataset file failed validation."""


class CheckpointError(AnticausalError):
    """A model checkpoint could not be written or read back."""
