import pytest

from vizecg.errors import (
    ERRORS,
    CheckpointError,
    ConfigurationError,
    DimensionError,
    Error,
    FileError,
    GradcheckFailed,
    NonFiniteError,
    wrap_exception,
)


class TestErrors:

    def test_codes_are_unique(self):
        assert len(ERRORS) == len({cls.__name__ for cls in ERRORS.values()})
        assert ERRORS[304] is CheckpointError

    @pytest.mark.parametrize(
        ['error_type', 'exit_code'],
        [(ConfigurationError, 1), (DimensionError, 2), (FileError, 2), (NonFiniteError, 3), (GradcheckFailed, 3)],
        ids=lambda value: getattr(value, '__name__', str(value)),
    )
    def test_exit_codes(self, error_type, exit_code):
        assert error_type.exit_code == exit_code

    def test_json_repr(self):
        error = DimensionError('Shapes differ.', left=[2, 3], right=[4])
        data = error.json_repr()
        assert data['code'] == 201
        assert data['message'] == 'Shapes differ.'
        assert data['data']['base'] == {'code': 200, 'type': 'ContractError'}
        assert data['data']['extra'] == {'left': [2, 3], 'right': [4]}

    def test_json_repr_without_extra(self):
        assert 'extra' not in NonFiniteError('nan').json_repr()['data']

    def test_wrap_exception(self):
        error = wrap_exception(PermissionError('denied'), FileError)
        assert isinstance(error, FileError)
        assert str(error) == 'denied'
        assert error.extra == {'from_': 'PermissionError'}
        assert isinstance(wrap_exception(ValueError('x')), Error)
