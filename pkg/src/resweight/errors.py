"""Exception hierarchy.

Data problems and solver problems are kept apart so the CLI can map them
to distinct exit codes.
"""


class ResweightError(Exception):
    """Base class for all package errors."""

    code = "error"

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


class DataError(ResweightError, ValueError):
    code = "data_error"


class MissingColumnError(DataError):
    code = "missing_column"


class NonNumericError(DataError):
    code = "non_numeric"


class NonBinaryTreatmentError(DataError):
    code = "treatment_not_binary"


class GroupTooSmallError(DataError):
    code = "group_too_small"


class AlreadyCenteredError(DataError):
    code = "already_centered"


class SolverError(ResweightError, RuntimeError):
    code = "solver_error"


class InfeasibleError(SolverError):
    code = "infeasible"


class MaxIterationsError(SolverError):
    code = "max_iterations"


class RankDeficientError(SolverError):
    code = "rank_deficient"

    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = list(columns)

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["columns"] = self.columns
        return out
