"""Exception hierarchy shared by all derlab modules."""


class DerlabError(Exception):
    pass


class DimensionError(DerlabError, ValueError):
    """Tensor shapes do not line up with a layer or a parameter."""


class InputError(DerlabError, ValueError):
    """An argument is outside the operation's domain."""


class StateError(DerlabError, RuntimeError):
    """An object is not in a state that allows the requested operation."""


class ContractError(DerlabError, RuntimeError):
    """A caller violated a precondition of the differentiation core."""


class FormatError(DerlabError, ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(DerlabError, ValueError):
    """An experiment config is malformed. ``key`` names the offending entry."""

    def __init__(self, message, key=None, line=None):
        where = ""
        if key is not None:
            where += f"key '{key}'"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}" if where else message)
        self.key = key
        self.line = line
