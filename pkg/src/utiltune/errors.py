"""Error categories shared by the library and the command line.

Every error carries a category prefix (``CONFIG/``, ``IO/``, ``SCHEMA/``,
``NUMERIC/``) and the process exit code the CLI should use for it.
"""


class UtilTuneError(Exception):
    category = "RUNTIME"
    exit_code = 1

    def __str__(self) -> str:
        return f"{self.category}/ {super().__str__()}"


class ConfigError(UtilTuneError, ValueError):
    category = "CONFIG"
    exit_code = 2


class InvalidActionError(ConfigError):
    pass


class SchemaError(UtilTuneError, ValueError):
    category = "SCHEMA"
    exit_code = 2


class CheckpointError(SchemaError):
    pass


class ContractError(UtilTuneError, ValueError):
    """A caller broke an operation precondition (e.g. batch size 1 in train mode)."""

    category = "CONFIG"
    exit_code = 2


class NumericError(UtilTuneError, ArithmeticError):
    category = "NUMERIC"
    exit_code = 1


class CollectionError(UtilTuneError, OSError):
    category = "IO"
    exit_code = 1

    def __init__(self, message: str, last_request_id: int | None = None):
        super().__init__(message)
        self.last_request_id = last_request_id


class IOFailure(UtilTuneError, OSError):
    category = "IO"
    exit_code = 1
