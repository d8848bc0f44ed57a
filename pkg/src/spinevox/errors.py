"""Exception hierarchy shared by every spinevox module."""


class SpinevoxError(Exception):
    """Base class for all library errors."""


class FormatError(SpinevoxError):
    """A file does not follow the expected binary or text layout."""


class TruncationError(FormatError):
    """A binary payload is shorter than its header promises."""


class KindError(SpinevoxError):
    """An operation received a grid of the wrong kind (intensity vs label)."""


class GeometryError(SpinevoxError):
    """Dimensions or boxes cannot describe a valid region."""


class InsufficientSamplesError(SpinevoxError):
    """Too few slices along an axis for the requested operation."""


class EmptyMaskError(SpinevoxError):
    """A mask that must contain foreground is empty."""


class ArityError(SpinevoxError):
    """A sequence has the wrong number of elements."""


class CompletenessError(SpinevoxError):
    """A prediction table is missing rows required for aggregation."""


class StageError(SpinevoxError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class StageDependencyError(StageError):
    """A stage has neither an ingested prediction nor an oracle fallback."""
