"""Exception types shared across the engine."""

from __future__ import annotations


class TokenMapError(Exception):
    """Base class for every error raised by this package."""


class ZeroDenominator(TokenMapError):
    """Proportional split requested against a zero share denominator."""


class ParseError(TokenMapError):
    """An input file line could not be parsed."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateEvent(TokenMapError):
    """Two events share the same (block, log_index, kind) key."""


class SchemaError(TokenMapError):
    """A registry entry violates the file schema."""

    def __init__(self, address: str, reason: str):
        super().__init__(f"{address}: {reason}")
        self.address = address
        self.reason = reason


class NegativeBalance(TokenMapError):
    """A transfer exceeds the sender's running balance."""

    def __init__(self, address: str, block: int):
        super().__init__(f"balance of {address} would go negative at block {block}")
        self.address = address
        self.block = block


class NegativePosition(TokenMapError):
    """An unstake/repay/withdraw exceeds the owner's running position."""

    def __init__(self, owner: str, detail: str = ""):
        super().__init__(f"position of {owner} would go negative{': ' + detail if detail else ''}")
        self.owner = owner


class EmptyPool(TokenMapError):
    """A pool holds funds but its share token has no supply."""


class InsolventPool(TokenMapError):
    """Recorded claims against a contract exceed what it holds."""


class OverAllocated(TokenMapError):
    """Explicit owner amounts exceed the contract balance."""


class CycleDetected(TokenMapError):
    """The contract dependency graph contains a remapping cycle."""

    def __init__(self, path: tuple[str, ...]):
        super().__init__("remapping cycle: " + " -> ".join(path))
        self.path = path


class IterationLimitExceeded(TokenMapError):
    """The mapping loop did not reach a fixpoint within the configured cap."""


class UnresolvedMajorHolder(TokenMapError):
    """An uncategorized contract holds more than the coverage threshold."""

    def __init__(self, address: str, share: float):
        super().__init__(f"unidentified contract {address} holds {share:.4%} of relevant supply")
        self.address = address
        self.share = share


class NonPositiveSupply(TokenMapError):
    """A metric over relevant supply was requested for a non-positive total."""


class InsufficientHistory(TokenMapError):
    """Trend statistics need at least twelve monthly observations."""


class ConfigError(TokenMapError):
    """A run configuration file is invalid."""
