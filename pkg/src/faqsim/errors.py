"""Exception types shared across the package."""


class FaqsimError(Exception):
    """Base class for all faqsim-specific errors."""


class FormatError(FaqsimError):
    """A serialized artifact is malformed, truncated, or fails validation."""


class ConfigError(FaqsimError):
    """Mismatched or invalid configuration between cooperating objects."""


class CapacityError(FaqsimError):
    """A requested table or buffer exceeds the supported size."""
