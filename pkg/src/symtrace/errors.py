"""Exception types shared across the package.

Every error raised on a user-visible path derives from SymtraceError so the
CLI can catch one type and print the message without a traceback.
"""


class SymtraceError(Exception):
    pass


# --- symbolic dimensions ---

class DoubleShardError(SymtraceError):
    """A dimension (or tensor) was divided twice by the same parallel symbol."""


class UnboundSymbolError(SymtraceError):
    """A dimension references a symbol with no binding in the symbol table."""


class NonIntegralDimError(SymtraceError):
    """A dimension did not evaluate to a positive integer under the bindings."""


# --- graph construction / templates ---

class TemplateSyntaxError(SymtraceError):
    def __init__(self, msg, line=None, col=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", col {col}" if col is not None else "") + ")"
        super().__init__(msg + loc)
        self.line = line
        self.col = col


class UndefinedTensorError(SymtraceError):
    pass


class RankMismatchError(SymtraceError):
    pass


class ShapeConflictError(SymtraceError):
    pass


class CycleError(SymtraceError):
    def __init__(self, msg, cycle=None):
        super().__init__(msg)
        self.cycle = list(cycle or [])


# --- sharding / collectives ---

class RuleGapError(SymtraceError):
    """No sharding assignment covers an op touched by an enabled axis."""


class UnsupportedTargetError(SymtraceError):
    """A consumer asked for a distribution no collective sequence can produce."""


# --- model library ---

class UnknownComponentError(SymtraceError):
    pass


class InvalidSpecError(SymtraceError):
    pass


class NoLossError(SymtraceError):
    """Training-mode backward requested on a graph with no scalar loss output."""


class NonDifferentiableOpError(SymtraceError):
    pass


# --- partitioning ---

class TooManyStagesError(SymtraceError):
    pass


class UnplacedNodeError(SymtraceError):
    pass


# --- concrete / trace io ---

class MalformedCalibrationError(SymtraceError):
    pass


class VersionMismatchError(SymtraceError):
    pass


class CorruptRecordError(SymtraceError):
    pass


class EmptyGridError(SymtraceError):
    pass
