class ArchlessError(Exception):
    """Base class for all errors raised by the kernel."""


class EmptyProgram(ArchlessError):
    pass


class MalformedProgram(ArchlessError):
    pass


class WrongPartition(ArchlessError):
    """An event reached a storage AC that does not own its record (routing bug)."""


class DuplicateKey(ArchlessError):
    pass


class KeyNotFound(ArchlessError):
    pass


class UnknownTable(ArchlessError):
    pass


class UnknownAc(ArchlessError):
    pass


class QueueDisconnected(ArchlessError):
    pass


class InvalidPhaseState(ArchlessError):
    pass


class InsufficientAcs(ArchlessError):
    pass


class InvalidItemCount(ArchlessError):
    pass


class UnexpectedAck(ArchlessError):
    pass


class BuildIncomplete(ArchlessError):
    pass


class OrderViolation(ArchlessError):
    """A conflicting event was applied out of global sequence order."""


class ConfigError(ArchlessError):
    pass


class InvariantViolation(ArchlessError):
    pass
