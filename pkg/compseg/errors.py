#error types shared by the services, cli and api
from __future__ import annotations


class CompsegError(Exception):
    """Base class for every rejection raised by the toolkit."""


class ConfigError(CompsegError, ValueError):
    """Invalid configuration value or incompatible checkpoint/config pair."""


class ShapeError(CompsegError, ValueError):
    """Tensor shape, dimension or value-domain contract violated."""


class MissingArtifactError(CompsegError, FileNotFoundError):
    """Dataset, checkpoint or kernel bank file not found."""


class IngestionError(CompsegError, ValueError):
    """A NIfTI file could not be turned into a volume record."""
