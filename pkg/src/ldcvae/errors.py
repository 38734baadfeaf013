"""Exception hierarchy shared across the package."""


class LdCvaeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LdCvaeError, ValueError):
    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(LdCvaeError, ValueError):
    pass


class ContractError(LdCvaeError, ValueError):
    pass


class DimensionMismatch(LdCvaeError, ValueError):
    pass


class BinningError(LdCvaeError, ValueError):
    pass


class NoComparablePairs(LdCvaeError, ValueError):
    pass


class NoEventsError(LdCvaeError, ValueError):
    pass


class SchemaError(LdCvaeError, ValueError):
    pass


class EmptyInputError(LdCvaeError, ValueError):
    pass


class CohortSpecError(LdCvaeError, ValueError):
    pass


class FormatError(LdCvaeError, IOError):
    """Base for on-disk format problems."""


class HeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass
