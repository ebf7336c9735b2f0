"""Exception hierarchy shared by the services, the CLI and the API."""


class ShatterError(Exception):
    """Base error. `exit_code` is what the CLI exits with."""

    exit_code = 1


class ConfigError(ShatterError):
    exit_code = 2


class DataError(ShatterError):
    exit_code = 3


class NumericError(ShatterError):
    """Non-finite loss or gradient."""

    exit_code = 4


class ShapeError(ShatterError, ValueError):
    exit_code = 2


class VariantContractError(ShatterError, ValueError):
    """Parameters do not match what an attention variant requires."""

    exit_code = 2
