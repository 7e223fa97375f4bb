"""Exception taxonomy for the streaming memory engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class ConfigError(EngineError):
    """Invalid memory configuration or malformed config document."""


class InvalidFeatureError(EngineError):
    """Feature map rejected at the boundary (non-finite values, bad shape)."""


class TierMismatchError(EngineError):
    """A low-resolution slot received a high-resolution map, or vice versa."""


class SequencingError(EngineError):
    """Frame indices arrived out of order or with gaps."""


class NotFoundError(EngineError):
    """Requested frame index is beyond the committed count."""


class StorageError(EngineError):
    """Disk-level failure while offloading or reading bank records."""


class BankIntegrityError(EngineError):
    """Bank contents are inconsistent with the stream (missing record)."""


class ParseError(EngineError):
    """Malformed binary feature file.

    Carries the byte offset and record index where parsing failed.
    """

    def __init__(self, message, byte_offset=None, record_index=None):
        super().__init__(message)
        self.byte_offset = byte_offset
        self.record_index = record_index


class InvalidStateError(EngineError):
    """Memory states passed to assembly do not belong to one stream/config."""


class LifecycleError(EngineError):
    """Engine used outside its start/stop lifecycle."""
