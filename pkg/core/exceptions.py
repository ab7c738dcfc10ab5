from typing import Optional


class LoraConstructionError(Exception):
    """Base class for every error raised by the adapter library."""


# --- Linear algebra ---

class MatrixError(LoraConstructionError):
    """Malformed matrix input (shape, finiteness)."""


class DimensionMismatchError(MatrixError):
    pass


class SvdConvergenceError(MatrixError):
    """The LAPACK SVD drivers failed to converge."""

    def __init__(self, matrix_name: str, condition: float):
        self.matrix_name = matrix_name
        self.condition = condition
        super().__init__(f"SVD did not converge for '{matrix_name}' (condition estimate {condition:.3e})")

    def __reduce__(self):
        return type(self), (self.matrix_name, self.condition)


class NonSingularityViolation(LoraConstructionError):
    """A matrix required to be invertible is numerically singular.

    Carries the name of the failing matrix and, when known, the layer, the
    cumulative rank r of the partial update and the block index.
    """

    def __init__(self,
                 matrix_name: str,
                 condition: float,
                 layer: Optional[int] = None,
                 r: Optional[int] = None,
                 block: Optional[int] = None):
        self.matrix_name = matrix_name
        self.condition = condition
        self.layer = layer
        self.r = r
        self.block = block
        super().__init__(self._describe())

    def __reduce__(self):
        return type(self), (self.matrix_name, self.condition, self.layer, self.r, self.block)

    def _describe(self) -> str:
        where = []
        if self.block is not None:
            where.append(f"block {self.block}")
        if self.layer is not None:
            where.append(f"layer {self.layer}")
        if self.r is not None:
            where.append(f"r={self.r}")
        location = f" ({', '.join(where)})" if where else ""
        return f"'{self.matrix_name}' is numerically singular{location}: condition estimate {self.condition:.3e}"

    def in_block(self, block: int) -> "NonSingularityViolation":
        """Returns a copy tagged with a block index."""
        return NonSingularityViolation(self.matrix_name, self.condition, self.layer, self.r, block)


# --- Training ---

class UnsupportedPrimitiveError(LoraConstructionError):
    pass


class TrainingDivergedError(LoraConstructionError):
    """Every run of a hyperparameter grid produced a non-finite loss."""


class PretrainingCapExceeded(LoraConstructionError):

    def __init__(self, ratio: float, iterations: int):
        self.ratio = ratio
        self.iterations = iterations
        super().__init__(f"Pretraining stopped after {iterations} iterations at MSE ratio {ratio:.4f}")

    def __reduce__(self):
        return type(self), (self.ratio, self.iterations)


# --- Harness ---

class ConfigError(LoraConstructionError):
    pass


class CellTimeoutError(LoraConstructionError):

    def __init__(self, cell_id: str, seconds: float):
        self.cell_id = cell_id
        self.seconds = seconds
        super().__init__(f"Cell '{cell_id}' exceeded its {seconds:.0f} s budget")

    def __reduce__(self):
        return type(self), (self.cell_id, self.seconds)
