"""Exception hierarchy shared by all subsystems."""


class UsageError(Exception):
    """Base class for every domain error raised by this package."""


# record editing

class RoleNotAuthorized(UsageError):
    pass


class DuplicateFactId(UsageError):
    pass


class NotOriginalAuthor(UsageError):
    pass


class AlreadySuperseded(UsageError):
    pass


class UnknownFact(UsageError):
    pass


# policy language

class PolicySyntaxError(UsageError, SyntaxError):
    """Malformed policy text. ``lineno`` and ``offset`` are 1-based."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.msg = message
        self.lineno = line
        self.offset = column


class PolicyTypeError(UsageError, TypeError):
    """Operator applied to a parameter of an incompatible type."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.msg = message
        self.lineno = line
        self.offset = column


# licensing

class StaticScopeMismatch(UsageError):
    pass


class ExpiredTerms(UsageError):
    pass


class ConflictError(UsageError):
    """A composition was refused; ``conflicts`` lists (policy_id, Decision)."""

    def __init__(self, message, conflicts=()):
        super().__init__(message)
        self.conflicts = list(conflicts)

    @property
    def denying_policies(self) -> list[str]:
        return [pid for pid, decision in self.conflicts if not decision.permitted]


class AggregationDenied(ConflictError):
    pass


class RedistributionDenied(ConflictError):
    pass


# negotiation

class NegotiationError(UsageError):
    pass


class SelfNegotiation(NegotiationError):
    pass


class MalformedProposal(NegotiationError):
    pass


class WrongTurn(NegotiationError):
    pass


class SessionClosed(NegotiationError):
    pass


class StaleRound(NegotiationError):
    pass


class StrategyTimeout(NegotiationError):
    pass


class NotAgreed(NegotiationError):
    pass


# marketplace

class EmptyQuery(UsageError):
    pass


class StoreError(UsageError):
    pass


class StoreCorrupt(StoreError):
    pass


class VersionMismatch(StoreError):
    pass


class StoreLocked(StoreError):
    pass


class BindFailure(UsageError):
    pass
