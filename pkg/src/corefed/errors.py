"""Exception types raised across the package."""


class CoreFedError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(CoreFedError, ValueError):
    pass


class UnsupportedForKind(CoreFedError, ValueError):
    pass


class EmptyDataset(CoreFedError, ValueError):
    pass


class NumericOverflow(CoreFedError, ArithmeticError):
    pass


class DegenerateDirection(CoreFedError, ValueError):
    pass


class NonPositiveUtility(CoreFedError, ValueError):
    """A utility ``M - loss`` fell to or below its floor ``M * epsilon``.

    ``agent_id`` and ``round_index`` are filled in when known so that callers
    (the CLI in particular) can report where the violation happened.
    """

    def __init__(self, message, agent_id=None, round_index=None):
        super().__init__(message)
        self.agent_id = agent_id
        self.round_index = round_index

    def __str__(self):
        msg = super().__str__()
        where = []
        if self.round_index is not None:
            where.append(f"round {self.round_index}")
        if self.agent_id is not None:
            where.append(f"agent {self.agent_id}")
        return f"{msg} ({', '.join(where)})" if where else msg


class EmptyProbeSet(CoreFedError, ValueError):
    pass


class InvalidShape(CoreFedError, ValueError):
    pass


class AgentWithNoData(CoreFedError, ValueError):
    pass


class MissingColumn(CoreFedError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing column"


class MalformedRow(CoreFedError, ValueError):
    def __init__(self, message, row_index):
        super().__init__(f"row {row_index}: {message}")
        self.row_index = row_index


class NonBinaryTarget(CoreFedError, ValueError):
    pass


class InvalidK(CoreFedError, ValueError):
    pass


class EmptyRound(CoreFedError, ValueError):
    pass


class NotConverged(CoreFedError, RuntimeError):
    """Solver exhausted its iteration budget; ``result`` holds the last iterate."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class TooManyAgents(CoreFedError, ValueError):
    pass


class LengthMismatch(CoreFedError, ValueError):
    pass


class InvalidParams(CoreFedError, ValueError):
    pass
