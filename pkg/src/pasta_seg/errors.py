"""Exception types raised across the package.

Everything derives from :class:`PastaError`. Validation problems also derive
from ``ValueError``; missing inputs derive from ``FileNotFoundError`` so the
CLI can map them onto distinct exit codes.
"""


class PastaError(Exception):
    pass


class ValidationError(PastaError, ValueError):
    pass


class MissingFile(PastaError, FileNotFoundError):
    pass


# tensor-io
class BadMagic(ValidationError):
    pass


class Truncated(ValidationError):
    pass


class NonFinite(ValidationError):
    pass


class UnsupportedFormat(ValidationError):
    pass


class ValueOutOfRange(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class EmptyManifest(ValidationError):
    pass


class Corrupt(ValidationError):
    pass


class VersionMismatch(Corrupt):
    pass


# clustering / distribution
class TooFewSamples(ValidationError):
    pass


class DegenerateData(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class KMismatch(ValidationError):
    pass


# segmentation / baseline / evaluation
class BadDims(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class BagTooSmall(ValidationError):
    pass


class AllClassesUndefined(ValidationError):
    pass


# synth
class InvalidConfig(ValidationError):
    pass


class PlacementFailure(ValidationError):
    pass
