"""Exception types shared across the toolkit."""


class CoforgeError(Exception):
    """Base class for all toolkit errors."""


class SchemeParseError(CoforgeError):
    """A quantization scheme string does not follow <net>-<A>-<D1D2D3D4>."""


class ModelFormatError(CoforgeError):
    """A model file is structurally invalid or violates graph invariants."""


class WeightFormatError(CoforgeError):
    """A weight payload does not match its header or the model graph."""


class DegenerateVectorError(CoforgeError):
    """An operation that needs a direction received a zero-norm vector."""


class DecompositionError(CoforgeError):
    """A graph cannot be grouped into bundle repetitions."""


class InfeasibleDesignError(CoforgeError):
    """No candidate satisfies the latency/resource constraints."""


class DivergenceError(CoforgeError):
    """A training or search loop exceeded the numeric divergence guard."""
