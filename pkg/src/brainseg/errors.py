"""Exception types shared across the pipeline."""


class BrainsegError(Exception):
    """Base class for all brainseg errors."""


# --- volume I/O ---

class MissingFile(BrainsegError):
    """Input file does not exist."""


class CorruptHeader(BrainsegError):
    """File is not a readable single-file NIfTI-1 volume."""


class NonFiniteData(BrainsegError):
    """Volume contains NaN or Inf voxels."""


class ToolNotFound(BrainsegError):
    """External executable could not be resolved."""


class ToolFailure(BrainsegError):
    """External tool exited nonzero or violated its output contract."""


class ToolTimeout(BrainsegError):
    """External tool exceeded its configured timeout."""


class MapShapeMismatch(BrainsegError):
    """Probability maps failed validation (shape or value range)."""


class DegenerateInput(BrainsegError):
    """Not enough distinct intensities to cluster into three tissues."""


class InvalidRange(BrainsegError):
    """Threshold interval has low > high."""


# --- dataset building ---

class ShapeMismatch(BrainsegError):
    """Arrays that must agree in shape do not."""


class EmptySlice(BrainsegError):
    """Slice has zero size along some axis."""


class DuplicateIds(BrainsegError):
    """Subject id list contains duplicates."""


class ManifestWriteFailure(BrainsegError):
    """Manifest could not be written or references missing files."""


class MissingManifest(BrainsegError):
    """Expected manifest file is absent."""


# --- model ---

class IncompatibleCheckpoint(BrainsegError):
    """Checkpoint file is unreadable or does not match the declared variant."""


class MissingKeys(BrainsegError):
    """Checkpoint lacks weights outside the (expected-missing) new head."""


class NonFiniteActivation(BrainsegError):
    """Model produced NaN or Inf outputs."""


# --- training / evaluation ---

class EmptyDataset(BrainsegError):
    """Training or validation manifest has no entries."""


class DivergedLoss(BrainsegError):
    """Loss became NaN/Inf during training."""


class NonFiniteLoss(BrainsegError):
    """Loss evaluated to a non-finite value."""


class EmptyManifest(BrainsegError):
    """Evaluation manifest has no entries."""


class OutOfRange(BrainsegError):
    """Values fall outside the documented input range."""


class ConfigError(BrainsegError):
    """Pipeline config file is invalid."""
