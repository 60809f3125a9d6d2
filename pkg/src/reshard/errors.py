"""Exception hierarchy shared by every reshard module."""


class ReshardError(Exception):
    """Base class for all errors raised by this package."""


# tensor core
class RangeOutOfBounds(ReshardError, IndexError):
    pass


class RankMismatch(ReshardError, ValueError):
    pass


class TilingGap(ReshardError, ValueError):
    pass


class TilingOverlap(ReshardError, ValueError):
    pass


class DtypeMismatch(ReshardError, TypeError):
    pass


class InvalidSplitPoint(ReshardError, ValueError):
    pass


class ShapeMismatch(ReshardError, ValueError):
    pass


class MalformedTensor(ReshardError, ValueError):
    pass


# parallel config
class IndivisibleLayerCount(ReshardError, ValueError):
    pass


class IndivisibleSliceDim(ReshardError, ValueError):
    pass


class DeviceCountMismatch(ReshardError, ValueError):
    pass


class MalformedConfig(ReshardError, ValueError):
    pass


class InconsistentBaseShape(ReshardError, ValueError):
    pass


class CoverageGap(ReshardError, ValueError):
    pass


class UnknownDevice(ReshardError, KeyError):
    pass


class IndivisibleBatch(ReshardError, ValueError):
    pass


# planner
class CatalogMismatch(ReshardError, ValueError):
    pass


class UnsatisfiableFragment(ReshardError):
    pass


class NoSource(ReshardError, ValueError):
    pass


# store / dataset
class NotFound(ReshardError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class StepBeyondEpoch(ReshardError, ValueError):
    pass


class InvalidReplicaCount(ReshardError, ValueError):
    pass


# transport
class MalformedFrame(ReshardError, ValueError):
    pass


class UnknownVerb(MalformedFrame):
    pass


class BadRange(ReshardError, ValueError):
    pass


class ConnectionFailed(ReshardError, ConnectionError):
    pass


class RemoteError(ReshardError):
    pass


# executor
class CheckpointRequired(ReshardError):
    def __init__(self, cells):
        self.cells = list(cells)
        super().__init__(f"{len(self.cells)} cell(s) have no surviving replica")


class LayoutMismatch(ReshardError, ValueError):
    pass


class ExecutionFailed(ReshardError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# scenario
class ScriptError(ReshardError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
