"""
Error Types
Exceptions raised across the hyperplace package
"""


class HyperplaceError(ValueError):
    """Base class for every error raised by hyperplace."""


class InvalidInputError(HyperplaceError):
    """A value violates an operation's precondition (non-finite, empty, out of range)."""


class ConfigurationError(HyperplaceError):
    """Configurations disagree with each other or with the data they are applied to."""


class FormatError(HyperplaceError):
    """
    A binary file does not follow its declared layout

    Args:
        message: What went wrong
        offset: Byte offset at which the problem was detected
    """

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
