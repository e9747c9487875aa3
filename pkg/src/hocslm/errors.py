"""Exception types shared across the package."""


class HocslmError(Exception):
    """Base class; ``category`` is the machine-readable CLI error tag."""

    category = "internal"


class ShapeMismatch(HocslmError, ValueError):
    category = "shape"


class NonFiniteActivation(HocslmError, FloatingPointError):
    category = "numeric"


# --- skeleton parsing ---------------------------------------------------------

class SkeletonParseError(HocslmError, ValueError):
    category = "parse"


class MalformedHeader(SkeletonParseError):
    pass


class JointCountMismatch(SkeletonParseError):
    pass


class TruncatedFile(SkeletonParseError):
    pass


class TooFewFrames(HocslmError, ValueError):
    category = "data"


class EmptySequence(HocslmError, ValueError):
    category = "data"


class CacheFormatError(HocslmError, ValueError):
    category = "io"


# --- language side ------------------------------------------------------------

class EmptyCaption(HocslmError, ValueError):
    category = "data"


class DecoderUnavailable(HocslmError, RuntimeError):
    category = "model"


class AllMaskedWarning(UserWarning):
    """Every label in a batch was the ignore index; the generation loss is 0."""


# --- training / evaluation ----------------------------------------------------

class DivergedLoss(HocslmError, FloatingPointError):
    category = "numeric"


class EmptyDataset(HocslmError, ValueError):
    category = "data"


class LengthMismatch(HocslmError, ValueError):
    category = "data"


class ConfigError(HocslmError, ValueError):
    category = "usage"


# --- checkpoints / cli --------------------------------------------------------

class CheckpointVersionMismatch(HocslmError, ValueError):
    category = "checkpoint"


class CheckpointLacksSsf(HocslmError, ValueError):
    category = "checkpoint"


class SampleNotFound(HocslmError, KeyError):
    category = "data"
