"""Exception types shared across the package."""


class ScemosError(Exception):
    """Base class for all package-specific errors."""


class DegenerateRotation(ScemosError):
    """6D rotation input has near-zero or parallel basis vectors."""


class NotARotation(ScemosError):
    """Matrix fails the orthonormality check."""


class LengthMismatch(ScemosError):
    """Sequence/array lengths disagree."""


class ShapeMismatch(ScemosError):
    """Tensor shape does not match the contract."""


class StatsMismatch(ScemosError):
    """Normalization stats dimensionality does not match the feature width."""


class FeatureShapeMismatch(ScemosError):
    """Conditioning feature tensor has the wrong shape."""


class FileCorrupt(ScemosError):
    """Binary file failed magic/size validation."""


class UnknownPrompt(ScemosError):
    """Prompt hash not present in a prompt-feature file."""


class EmptyCodebook(ScemosError):
    """Quantization requested against a codebook with no entries."""


class HeightmapCountMismatch(ScemosError):
    """Number of heightmaps does not match the number of latent tokens."""


class ContextOverflow(ScemosError):
    """Token sequence exceeds the planner's context length."""


class PathNotFound(ScemosError):
    """No collision-free path exists for the requested task."""


class GenerationRetryExceeded(ScemosError):
    """Procedural generation failed to satisfy constraints within the retry budget."""


class DatasetMissing(ScemosError):
    """Training requested but the dataset manifest is absent."""


class NaNLoss(ScemosError):
    """Training loss became non-finite."""


class IncompatibleCheckpoints(ScemosError):
    """Checkpoints disagree on shared dimensions or data provenance."""


class SpawnInvalid(ScemosError):
    """Requested start position collides with scene geometry."""


class CovarianceFailure(ScemosError):
    """Matrix square root in the FID computation did not converge."""
