"""Exception hierarchy.

Every error carries a stable ``code`` string (used by the CLI's structured
error report) plus optional context about where it happened.
"""

from __future__ import annotations


class ShardingError(Exception):
    """Base class. ``code`` defaults to the class name."""

    module = "hetshard"

    def __init__(self, message: str = "", *, node=None, tensor=None, op: str | None = None):
        super().__init__(message)
        self.message = message
        self.node = node
        self.tensor = tensor
        self.op = op

    @property
    def code(self) -> str:
        return type(self).__name__

    def report(self) -> dict:
        return {
            "module": self.module,
            "op": self.op,
            "code": self.code,
            "message": self.message,
            "node": self.node,
            "tensor": self.tensor,
        }


# annotation
class AnnotationError(ShardingError):
    module = "annotation"


class OverlappingSubgroups(AnnotationError):
    pass


class CardinalityMismatch(AnnotationError):
    pass


class BadSplitDim(AnnotationError):
    pass


class IndivisibleSplit(AnnotationError):
    pass


class DeviceNotInAnnotation(AnnotationError):
    pass


class NotRefinable(AnnotationError):
    pass


# graph
class GraphError(ShardingError):
    module = "graph"


class InexactDivision(GraphError):
    pass


class MissingSymbol(GraphError):
    pass


class NonPositive(GraphError):
    pass


class CycleDetected(GraphError):
    pass


class ShapeError(GraphError):
    pass


# deduction
class DeductionError(ShardingError):
    module = "deduction"


class DgUnionMismatch(DeductionError):
    pass


class UnderivableSharding(DeductionError):
    pass


class MissingAnnotation(DeductionError):
    pass


# resolve / bsr
class ResolveError(ShardingError):
    module = "resolve"


class PartialUnderBsr(ResolveError):
    pass


class UnsupportedHdimTransition(ResolveError):
    pass


class NoOwner(ResolveError):
    module = "bsr"


class UnknownDevice(ResolveError):
    module = "bsr"


# specialize
class SpecializeError(ShardingError):
    module = "specialize"


class ConflictingStageOrder(SpecializeError):
    pass


class SymbolBindingError(SpecializeError):
    pass


class ScheduleError(SpecializeError):
    pass


# switch
class UndeducedStrategy(ShardingError):
    module = "switch"


# sim
class SimulationError(ShardingError):
    module = "sim"


class MissingShard(SimulationError):
    pass


class ShapeMismatch(SimulationError):
    pass


class DeadlockDetected(SimulationError):
    pass


class UnsupportedOp(SimulationError):
    pass


class ReplicaDivergence(SimulationError):
    pass
