"""Error taxonomy for the extraction pipeline.

Config problems mean the caller asked for something malformed; data problems
mean a source sample or file is unusable; model problems mean the requested
encoder or checkpoint could not be brought up.  Batch extraction treats data
problems as per-sample failures and everything else as fatal.
"""


class ExtractorError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigError(ExtractorError):
    pass


class SourceDataError(ExtractorError):
    """A source sample cannot be extracted: bad image, empty text, bad row."""


class ModelLoadError(ExtractorError):
    """The requested encoder id is unknown or its checkpoint is unusable."""
