"""Exception hierarchy shared by the library and the CLI.

Each family maps to one CLI exit code so callers can tell configuration
mistakes apart from bad data or an unusable encoder backend.
"""


class CDULError(Exception):
    exit_code = 1


class ConfigError(CDULError, ValueError):
    exit_code = 2


class DataError(CDULError):
    exit_code = 3


class AnnotationParseError(DataError):
    pass


class UnknownClassError(DataError, KeyError):
    def __init__(self, name, source=None):
        self.name = name
        self.source = source
        where = f" in {source}" if source else ""
        super().__init__(f"unknown class name {name!r}{where}")

    def __str__(self):
        return self.args[0]


class MissingFileError(DataError, FileNotFoundError):
    pass


class CacheCorruptionError(DataError):
    pass


class CacheMismatchError(DataError):
    pass


class CacheConsistencyError(DataError):
    pass


class EntryNotFoundError(DataError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "entry not found"


class NumericError(DataError, ArithmeticError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class BackendError(CDULError, RuntimeError):
    exit_code = 4


class InputError(DataError, ValueError):
    pass
