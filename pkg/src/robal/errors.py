"""Exceptions shared by the binary readers."""


class FormatError(ValueError):
    """A file does not follow its declared binary layout."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    """Stored arrays do not fit the model they are loaded into."""


class ChecksumError(FormatError):
    """The trailing byte-length field does not match the bytes read."""
