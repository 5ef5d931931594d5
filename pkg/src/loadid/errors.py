"""Exception types shared across the toolkit.

Each class carries the process exit code the command-line front end uses
when the error escapes a subcommand.
"""


class LoadIdError(Exception):
    exit_code = 1


class ParameterError(LoadIdError, ValueError):
    exit_code = 2


class FormatError(LoadIdError):
    exit_code = 3


class DegenerateInputError(LoadIdError, ValueError):
    exit_code = 4


class EmptyInputError(DegenerateInputError):
    pass


class NoCrossingError(DegenerateInputError):
    pass


class StateError(LoadIdError, RuntimeError):
    exit_code = 4
