"""Exception hierarchy.

Every error raised by the package derives from :class:`SMCError` so callers
(and the CLI) can separate domain failures from programming bugs.
"""


class SMCError(ValueError):
    """Base class for all package errors."""


# -- model validation -------------------------------------------------------

class RowNotStochastic(SMCError):
    def __init__(self, time, row, total=None):
        self.time, self.row, self.total = time, row, total
        msg = f"kernel {time} row {row} is not a probability vector"
        if total is not None:
            msg += f" (sum={total!r})"
        super().__init__(msg)


class PotentialOutOfRange(SMCError):
    def __init__(self, time, state, value=None):
        self.time, self.state, self.value = time, state, value
        super().__init__(
            f"potential {time} at state {state} is {value!r}, must lie in (0, 1)")


class InitialNotNormalized(SMCError):
    def __init__(self, index=None, total=None):
        self.index, self.total = index, total
        if index is not None:
            msg = f"initial law has invalid entry at index {index}"
        else:
            msg = f"initial law sums to {total!r}, not 1"
        super().__init__(msg)


class StateOutOfRange(SMCError):
    def __init__(self, position, state, num_states):
        self.position, self.state = position, state
        super().__init__(
            f"state {state!r} at position {position} outside 0..{num_states - 1}")


class LengthMismatch(SMCError):
    pass


# -- exact oracle -------------------------------------------------------------

class DegenerateExpectation(SMCError):
    pass


class DegenerateThreshold(SMCError):
    def __init__(self, block, time, value):
        self.block, self.time, self.value = block, time, value
        super().__init__(
            f"criterion at block {block}, time {time} equals its threshold {value!r}")


class EnumerationCapExceeded(SMCError):
    def __init__(self, block, required, cap):
        self.block, self.required, self.cap = block, required, cap
        super().__init__(
            f"block {block} needs {required} path enumerations, cap is {cap}")


# -- particle engine ----------------------------------------------------------

class HorizonExhausted(SMCError):
    pass


class EmptyBlock(SMCError):
    pass


class AllWeightsUnderflow(SMCError):
    pass


class WeightNotInUnitInterval(SMCError):
    pass


class InvalidInterval(SMCError):
    pass


# -- configuration ------------------------------------------------------------

class ConfigError(SMCError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{message}: {key}")


class UnknownKey(ConfigError):
    def __init__(self, key):
        super().__init__(key, "unknown configuration key")


class MissingField(ConfigError):
    def __init__(self, key):
        super().__init__(key, "missing required field")


class TypeMismatch(ConfigError):
    def __init__(self, key, expected):
        self.expected = expected
        super().__init__(key, f"expected {expected}")
