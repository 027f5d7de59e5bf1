"""Exception types shared across the toolkit."""


class QGraphError(Exception):
    """Base class for every error raised by qgraph."""


class DegenerateRange(QGraphError, ValueError):
    pass


class AsymmetricSignedRange(QGraphError, ValueError):
    pass


class EmptyTensor(QGraphError, ValueError):
    pass


class ShapeMismatch(QGraphError, ValueError):
    pass


class IndexOutOfBounds(QGraphError, IndexError):
    def __init__(self, index, shape):
        super().__init__(f"index {tuple(index)} out of bounds for shape {tuple(shape)}")
        self.index = tuple(index)
        self.shape = tuple(shape)


class CycleDetected(QGraphError):
    pass


class SchemaError(QGraphError, ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnknownTap(QGraphError, KeyError):
    pass


class EmptyHistogram(QGraphError, ValueError):
    pass


class SupportMismatch(QGraphError, ValueError):
    pass


class InsufficientMass(QGraphError, ValueError):
    pass


class MissingTapEntry(QGraphError, KeyError):
    pass


class ExecutionError(QGraphError, RuntimeError):
    """A kernel failed; ``node_id`` is the path of the failing node."""

    def __init__(self, node_id, cause):
        super().__init__(f"node {node_id!r}: {cause}")
        self.node_id = node_id
        self.cause = cause


class WorkerError(QGraphError, RuntimeError):
    def __init__(self, worker_id, batch_index, cause):
        super().__init__(f"worker {worker_id} failed on batch {batch_index}: {cause}")
        self.worker_id = worker_id
        self.batch_index = batch_index
        self.cause = cause
