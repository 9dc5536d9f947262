"""Exception types shared across the package."""


class DDNLabError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(DDNLabError):
    """Bad user input: malformed config, missing file, inconsistent flags."""


class GenerationFailed(DDNLabError):
    """Procedural generation could not satisfy its constraints after bounded retries."""


class SteppedAfterDone(DDNLabError):
    """step() was called on an episode state that is already terminated."""


class NotVisible(DDNLabError):
    """Bounding-box projection requested for an object outside the view frustum."""


class UnknownId(DDNLabError):
    """Demand or category id not present in the universe."""


class InsufficientDemands(DDNLabError):
    """Requested train/test split exceeds the number of demands."""


class DimMismatch(DDNLabError):
    """Feature vector dimensions do not match the declared layout."""


class InsufficientNegatives(DDNLabError):
    """No negative pair of any requested type exists for an anchor."""


class InvalidTemperature(DDNLabError):
    """Contrastive temperature must be strictly positive."""


class DivergenceDetected(DDNLabError):
    """Training loss became non-finite."""


class NoPath(DDNLabError):
    """Planner found no action sequence reaching the goal set."""


class NoSatisfier(DDNLabError):
    """No object in the scene satisfies the demand."""


class EmptySplit(DDNLabError):
    """An evaluation split contains no episodes."""


class MissingResults(DDNLabError):
    """report was invoked on a directory without any results files."""
