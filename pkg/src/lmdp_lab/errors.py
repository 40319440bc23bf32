"""Exception types shared across the package."""


class LMDPError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LMDPError, ValueError):
    """Inputs are inconsistent (dimension mismatch, bad parameter range, missing file)."""


class EnumerationTooLarge(LMDPError):
    """An exhaustive oracle would have to visit too many objects."""

    def __init__(self, size, limit):
        super().__init__(f"enumeration size {size:.3g} exceeds limit {limit:.3g}")
        self.size = size
        self.limit = limit


class RankDeficiencyError(LMDPError):
    """The M-th singular value of a joint probability matrix is below the floor."""

    def __init__(self, state, sigma, floor):
        super().__init__(
            f"rank deficient at ending state {state}: sigma_M={sigma:.3e} < floor {floor:.1e}"
        )
        self.state = state
        self.sigma = sigma
        self.floor = floor


class VanishingNormalizer(LMDPError):
    """A PSR state update hit a (near) zero normalizer."""


class InfeasibleError(LMDPError):
    """A random construction could not satisfy its constraints within budget."""


class IncompleteModelError(LMDPError):
    """Assembled model lacks some (state, context) pairs."""

    def __init__(self, gaps):
        super().__init__(f"missing (state, context) coverage: {gaps}")
        self.gaps = gaps


class ContractViolation(LMDPError):
    """The environment violates an algorithm's structural precondition."""


class StageError(LMDPError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause, diagnostics=None):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.diagnostics = diagnostics or []


class LabelingFailure(LMDPError):
    """Cross-state label linking merged two centers of the same state."""

    def __init__(self, conflicts):
        super().__init__(f"inconsistent context relabeling: {conflicts}")
        self.conflicts = conflicts
