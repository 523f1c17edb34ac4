"""Exception hierarchy shared by all stfuse modules."""


class StfuseError(Exception):
    """Base class; the CLI maps these to exit code 2."""


# --- file / format errors ---

class MalformedHeader(StfuseError):
    pass


class OutOfBounds(StfuseError):
    pass


class NonMonotonicTime(StfuseError):
    pass


class DimensionMismatch(StfuseError):
    pass


class BadMagic(StfuseError):
    pass


class TruncatedFile(StfuseError):
    pass


class DuplicateName(StfuseError):
    pass


class BadConfig(StfuseError):
    pass


class MissingCheckpoint(StfuseError):
    pass


# --- numeric / model errors ---

class TooFewFrames(StfuseError):
    pass


class ShapeMismatch(StfuseError):
    pass


class NonFiniteInput(StfuseError):
    pass


class BadWindow(StfuseError):
    pass


class PatchSizeMismatch(StfuseError):
    pass


class InvalidCoordinate(StfuseError):
    pass


class InvalidBox(StfuseError):
    pass


class UnknownGroup(StfuseError):
    pass
