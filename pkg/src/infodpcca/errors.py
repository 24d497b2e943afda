"""Exception types shared across the package."""


class InfoDpccaError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(InfoDpccaError):
    """Operands have incompatible shapes."""


class DivergentOrbit(InfoDpccaError):
    """A generated orbit left the admissible region and retries ran out."""


class InvalidSplit(InfoDpccaError):
    """A dataset split would leave one side empty."""


class FormatError(InfoDpccaError):
    """On-disk dataset/checkpoint payload is missing, truncated or inconsistent."""


class InvalidSpec(InfoDpccaError):
    """A model specification is internally inconsistent."""


class NonFiniteLoss(InfoDpccaError):
    """An objective produced NaN/Inf; carries the offending term names."""

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})


class StageMismatch(InfoDpccaError):
    """Requested extraction/prediction stage is unavailable for this checkpoint."""


class DegenerateVariance(InfoDpccaError):
    """A pooled latent dimension is constant; correlation undefined."""


class InvalidK(InfoDpccaError):
    """k-means called with an unusable cluster count."""


class LengthMismatch(InfoDpccaError):
    """Paired label arrays differ in length."""


class SingleCluster(InfoDpccaError):
    """Silhouette needs at least two distinct clusters."""


class IndexOutOfRange(InfoDpccaError):
    """Sequence or dimension index outside the dataset."""
