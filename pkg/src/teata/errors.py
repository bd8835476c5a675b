"""Exception hierarchy shared by all teata modules.

CLI exit-code mapping: ConfigError -> 2, data-layer errors -> 3,
everything else derived from TeataError -> 4.
"""


class TeataError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TeataError):
    """Invalid, unknown, or inconsistent configuration."""


# --- data layer -------------------------------------------------------------

class MissingFile(TeataError):
    """A manifest, metadata, image, or checkpoint file is absent."""


class SchemaError(TeataError):
    """A manifest or metadata record violates the on-disk schema."""


class ProtocolError(TeataError):
    """A dataset violates its declared clothing-state protocol."""


class InvalidArgument(TeataError):
    """Arguments that cannot satisfy an operation's guarantees."""


class DataLeakError(TeataError):
    """A completed domain's train split was accessed after its step."""


# --- tensors and losses -----------------------------------------------------

class ShapeError(TeataError):
    """Tensor shape incompatible with the operation's contract."""


class NonFiniteError(TeataError):
    """NaN or infinity where finite values are required."""


class LabelOutOfRange(TeataError):
    """A label falls outside the classifier's class range."""


class DegenerateBatch(TeataError):
    """Batch composition cannot support the loss (e.g. one identity)."""


# --- prompts and adaptation ---------------------------------------------------

class AlreadyInitialized(TeataError):
    """Prompt tokens for a domain step were initialized twice."""


class MissingSource(TeataError):
    """Classifier initialization lacks its required source tensor."""


class EmptyIdentity(TeataError):
    """An identity has no images where at least one is required."""


class InvalidEpoch(TeataError):
    """Epoch index outside the learning-rate plan's window."""


# --- evaluation ---------------------------------------------------------------

class EmptyGallery(TeataError):
    """Ranking requested against an empty gallery."""


class MissingReports(TeataError):
    """A run directory lacks the per-step reports needed for summaries."""


# --- checkpoints --------------------------------------------------------------

class VersionMismatch(TeataError):
    """Checkpoint schema version incompatible with this build."""


class IntegrityError(VersionMismatch):
    """Checkpoint payload does not match its recorded checksum."""
