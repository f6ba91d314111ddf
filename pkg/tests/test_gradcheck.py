import numpy as np
import pytest

import vizecg.gradcheck
from vizecg.gradcheck import GradcheckReport, gradcheck, model_case, op_cases, run_suite
from vizecg.tensor import Function, Tensor, matmul, softmax_rows


class _NegatedSigmoid(Function):

    def forward(self, x):
        self.y = 1.0 / (1.0 + np.exp(-x))
        return self.y

    def backward(self, grad):
        return (-grad * self.y * (1.0 - self.y),)


class TestGradcheck:

    @pytest.fixture
    def _rng(self):
        return np.random.default_rng(0)

    def test_matmul_passes(self, _rng):
        a = Tensor(_rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(_rng.normal(size=(4, 2)), requires_grad=True)
        report = gradcheck(matmul, [a, b], step=1e-6, tol=1e-6)
        assert report.passed
        assert len(report.errors) == 2

    def test_softmax_passes(self, _rng):
        assert gradcheck(softmax_rows, [Tensor(_rng.normal(size=(3, 5)), requires_grad=True)]).passed

    def test_wrong_adjoint_fails(self, _rng):
        report = gradcheck(_NegatedSigmoid.apply, [Tensor(_rng.normal(size=(4,)), requires_grad=True)], name='bad')
        assert not report.passed
        assert report.max_error > 1.0

    def test_inputs_without_grad_are_skipped(self, _rng):
        a = Tensor(_rng.normal(size=(2, 2)), requires_grad=True)
        b = Tensor(_rng.normal(size=(2, 2)))
        assert len(gradcheck(matmul, [a, b]).errors) == 1

    def test_inputs_are_restored(self, _rng):
        data = _rng.normal(size=(3, 3))
        x = Tensor(data.copy(), requires_grad=True)
        gradcheck(softmax_rows, [x])
        assert np.array_equal(x.data, data)

    @pytest.mark.parametrize('seed', range(10), ids=lambda seed: f'seed{seed}')
    def test_every_op(self, seed):
        rng = np.random.default_rng(seed)
        for name, op, inputs in op_cases(rng):
            report = gradcheck(op, inputs, 1e-6, 1e-6, seed=seed, name=name)
            assert report.passed, report.json_repr()

    @pytest.mark.parametrize('seed', range(10), ids=lambda seed: f'seed{seed}')
    def test_model_end_to_end(self, seed):
        op, params = model_case(seed)
        report = gradcheck(op, params, 1e-6, 1e-4, floor=1e-3, samples=3, seed=seed, name='model')
        assert len(report.errors) == len(params)
        assert report.passed, report.max_error

    def test_suite_reports_every_op_once(self):
        reports = run_suite(seeds=[0])
        names = [report.name for report in reports]
        assert len(names) == len(set(names))
        assert 'model' in names and 'conv2d_batched' in names
        assert all(report.passed for report in reports)

    def test_suite_checks_model_on_every_seed(self, monkeypatch):
        checked = []

        def _model_case(seed):
            checked.append(seed)
            return softmax_rows, [Tensor(np.random.default_rng(seed).normal(size=(2, 3)), requires_grad=True)]

        monkeypatch.setattr(vizecg.gradcheck, 'op_cases', lambda rng: [])
        monkeypatch.setattr(vizecg.gradcheck, 'model_case', _model_case)
        run_suite(seeds=[3, 4, 5])
        assert checked == [3, 4, 5]
        checked.clear()
        run_suite(seeds=[3, 4, 5], model_seeds=1)
        assert checked == [3]

    def test_unreachable_tolerance_fails(self):
        reports = run_suite(seeds=[0], tol=1e-15, model_tol=1e-15)
        assert not all(report.passed for report in reports)

    def test_report_repr(self):
        report = GradcheckReport('op', (1e-9, 1e-7), 1e-6)
        assert report.json_repr() == {'name': 'op', 'errors': [1e-9, 1e-7], 'max_error': 1e-7, 'passed': True}
