"""Exception hierarchy shared by all densefp modules."""


class DensefpError(Exception):
    """Base class for all errors raised by this package."""


class InvalidPose(DensefpError):
    """Pose contains non-finite coordinates or orientation."""


class SizeMismatch(DensefpError):
    """Array/image dimensions do not satisfy an operation's contract."""


class NoForeground(DensefpError):
    """Foreground segmentation produced an empty mask."""


class EmptyOverlap(DensefpError):
    """Two masks that must intersect do not."""


class FormatError(DensefpError):
    """Malformed descriptor file: bad magic, truncation, checksum or dims."""


class DuplicateId(DensefpError):
    """The same subject id was enrolled twice."""


class InvalidArgument(DensefpError, ValueError):
    """A scalar argument is outside its documented domain."""


class EmptyScores(DensefpError):
    """A metric was requested on an empty genuine or impostor score set."""


class LabelError(DensefpError):
    """A query's true gallery entry is missing from the score matrix."""


class PoseMissing(DensefpError):
    """No pose entry was found for an image id."""


class ProtocolError(DensefpError):
    """Protocol members reference descriptors that do not exist."""


class RecipeError(DensefpError):
    """Degradation recipe file has unknown keys or bad values."""


class IoError(DensefpError):
    """Filesystem read/write failure surfaced by the CLI."""
