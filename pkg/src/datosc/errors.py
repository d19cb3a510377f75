"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates an operation's preconditions."""


class FormatError(ValueError):
    """A file or byte stream does not match its declared format."""


class AllocationError(ValueError):
    """A symbol stream or plan violates the channel-use / power budget."""


class InfeasibleAllocationError(AllocationError):
    """No candidate plan satisfies the constraints; message names the binding one."""


class ConfigError(ValueError):
    """A config file contains unknown keys or unparseable values."""
