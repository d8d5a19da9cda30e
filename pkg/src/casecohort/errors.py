"""Exception hierarchy shared by all casecohort modules."""


class CaseCohortError(Exception):
    """Base class for all casecohort errors."""


# --- data ingestion -------------------------------------------------------

class MissingColumn(CaseCohortError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"required column {column!r} not found in header")


class ParseError(CaseCohortError):
    def __init__(self, row, column, message):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: {message}")


class InvariantViolation(CaseCohortError):
    def __init__(self, where, reason):
        self.where = where
        self.reason = reason
        super().__init__(f"{where}: {reason}")


# --- sampling design ------------------------------------------------------

class DegenerateStratum(CaseCohortError):
    def __init__(self, stratum):
        self.stratum = stratum
        super().__init__(
            f"stratum {stratum}: fewer than 2 subcohort draws, joint "
            "inclusion weight for a non-case pair is undefined"
        )


class EmptyPhase3Stratum(CaseCohortError):
    def __init__(self, stratum):
        self.stratum = stratum
        super().__init__(f"phase-three stratum {stratum} has no observed subject")


class StratumTooSmall(CaseCohortError):
    def __init__(self, stratum, m, n):
        self.stratum = stratum
        super().__init__(f"stratum {stratum}: cannot draw {m} of {n} subjects")


# --- solvers --------------------------------------------------------------

class NoEvents(CaseCohortError):
    pass


class MonotoneLikelihood(CaseCohortError):
    """The partial-likelihood score does not vanish at any finite beta."""


class SingularInformation(CaseCohortError):
    pass


class MaxIterations(CaseCohortError):
    pass


class EmptyRiskSet(CaseCohortError):
    def __init__(self, time):
        self.time = time
        super().__init__(f"no active subject at risk at event time {time}")


class BadInterval(CaseCohortError):
    pass


# --- calibration ----------------------------------------------------------

class RankDeficientAuxiliaries(CaseCohortError):
    pass


class NonConvergence(CaseCohortError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class RankDeficient(CaseCohortError):
    pass


class Separation(CaseCohortError):
    pass


class MissingCategory(CaseCohortError):
    def __init__(self, category):
        self.category = category
        super().__init__(f"category {category} never observed")


class SingularCalibrationGram(CaseCohortError):
    pass


# --- influences / variance ------------------------------------------------

class RegimeMismatch(CaseCohortError):
    def __init__(self, expected, got):
        super().__init__(f"expected influence regime {expected}, got {got}")


class NegativeVariance(CaseCohortError):
    pass


class NonPositiveEstimate(CaseCohortError):
    pass
