"""Error types and exit codes."""

from abc import ABC
from inspect import isclass
from typing import Any, ClassVar, Mapping, NotRequired, TypedDict, TypeVar

__all__ = [
    "Error",
    "ErrorData",
    "ERRORS",
    "wrap_exception",
    "UsageError",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "GraphError",
    "DataError",
    "FormatError",
    "ParseError",
    "RenderError",
    "CheckpointError",
    "LabelError",
    "FileError",
    "NumericError",
    "NonFiniteError",
    "GradcheckFailed",
]


class _ErrorBaseData(TypedDict):
    code: int  #: error code
    type: str  #: error type name


class _ErrorDataData(TypedDict):
    code: int  #: error code
    type: str  #: error type name
    base: NotRequired[_ErrorBaseData]  #: error base type
    extra: NotRequired[Mapping[str, Any]]  #: additional info


class ErrorData(TypedDict):
    """Serializable error data format returned by :py:meth:`~vizecg.errors.Error.json_repr`."""

    code: int  #: unique integer error code
    message: str  #: human-readable message
    data: _ErrorDataData  #: error attributes


class Error(Exception, ABC):
    """A base class for all library error types.

    An error stores its message and any number of structured extra values. Extras are meant for values a
    program may want to inspect (shapes, byte offsets, row numbers) so they shouldn't be formatted into the
    message only.

    >>> error = FormatError('Truncated dataset file', offset=20, expected=98324, actual=1000)
    >>> error.extra['offset']
    20

    >>> error.json_repr()['data']['base']['type']
    'DataError'

    Each error type also defines :py:attr:`~vizecg.errors.Error.exit_code` which is used by the command line
    interface as the process exit status.

    .. code-block::

        0  success
        1  usage error (invalid flags or config values)
        2  data, format or contract error
        3  numeric failure (NaN loss, failed gradient check)

    """

    code: ClassVar[int] = -1
    exit_code: ClassVar[int] = 1

    def __init__(self, msg: str, /, **extra):
        Exception.__init__(self, msg)
        self.extra = extra

    def json_repr(self) -> ErrorData:
        data = _ErrorDataData(code=self.code, type=self.__class__.__name__)
        if self.__class__.__base__:
            data["base"] = _ErrorBaseData(
                code=getattr(self.__class__.__base__, "code", -1),
                type=self.__class__.__base__.__name__,
            )
        if self.extra:
            data["extra"] = self.extra
        return ErrorData(code=self.code, message=self.args[0], data=data)


class UsageError(Error):
    """Invalid command line flags or configuration values.

    **Range:** 100 to 199, exit code 1

    .. code-block::

        101  ConfigurationError

    """

    code = 100
    exit_code = 1


class ConfigurationError(UsageError):
    code = 101


class ContractError(Error):
    """A library call precondition is violated.

    **Range:** 200 to 299, exit code 2

    Contract errors are raised by the tensor engine and by the model when inputs have wrong shapes or when the
    autograd graph is misused.

    .. code-block::

        201  DimensionError
        202  GraphError

    """

    code = 200
    exit_code = 2


class DimensionError(ContractError):
    code = 201


class GraphError(ContractError):
    code = 202


class DataError(Error):
    """Error while reading, writing or producing data.

    **Range:** 300 to 399, exit code 2

    .. code-block::

        301  FormatError
        302  ParseError
        303  RenderError
        304  CheckpointError
        305  LabelError
        306  FileError

    """

    code = 300
    exit_code = 2


class FormatError(DataError):
    code = 301


class ParseError(DataError):
    code = 302


class RenderError(DataError):
    code = 303


class CheckpointError(DataError):
    code = 304


class LabelError(DataError):
    code = 305


class FileError(DataError):
    code = 306


class NumericError(Error):
    """Numeric failure during computation.

    **Range:** 400 to 499, exit code 3

    .. code-block::

        401  NonFiniteError
        402  GradcheckFailed

    """

    code = 400
    exit_code = 3


class NonFiniteError(NumericError):
    code = 401


class GradcheckFailed(NumericError):
    code = 402


ERRORS: dict[int, type[Error]] = {}  #: global registry of error types

for value in list(globals().values()):
    if isclass(value) and issubclass(value, Error) and value is not Error:
        ERRORS[value.code] = value


_Error = TypeVar("_Error", bound=Error)


def wrap_exception(exc: Exception, wrap_type: type[_Error] = Error) -> _Error:
    """Convert a Python exception to a library error.

    >>> wrap_exception(FileNotFoundError('no such file'), FileError).extra
    {'from_': 'FileNotFoundError'}

    """
    return wrap_type(str(exc), from_=exc.__class__.__name__)
