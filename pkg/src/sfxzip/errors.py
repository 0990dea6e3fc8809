"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems -> 1, data/format -> 2,
numeric failures -> 3.
"""


class InvalidArgument(ValueError):
    pass


class FormatError(ValueError):
    pass


class UnsupportedEncoding(FormatError):
    pass


class CorruptStream(FormatError):
    pass


class NumericFailure(ArithmeticError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass
