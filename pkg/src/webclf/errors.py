"""Exception types shared across the pipeline stages."""


class WebclfError(Exception):
    """Base class for all package errors."""


class ManifestError(WebclfError):
    """Stream manifest could not be parsed or violates an invariant."""


class CrawlError(WebclfError):
    """Query execution failed in a non-recoverable way."""


class PlanRejected(CrawlError):
    """A query plan is incompatible with the adapter it was routed to."""


class FetchError(WebclfError):
    """An image download failed; ``reason`` is a short machine-readable tag."""

    def __init__(self, url: str, reason: str):
        super().__init__(f"{reason}: {url}")
        self.url = url
        self.reason = reason


class StorageError(WebclfError):
    """The image store could not persist bytes."""


class ArchiveError(WebclfError):
    """Feature archive is malformed, truncated, or inconsistent."""


class EmbeddingError(WebclfError):
    """An embedding backend failed or has no entry for the requested id."""


class CurationError(WebclfError):
    """Cleaning pass received an invalid pool (e.g. zero vectors)."""


class TrainingError(WebclfError):
    """Classifier state and data disagree (dims, duplicate classes, ...)."""


class ConfigError(WebclfError):
    """Run configuration is invalid or does not match a resumed run."""


class StageError(WebclfError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage
