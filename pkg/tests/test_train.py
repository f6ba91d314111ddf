import csv
from dataclasses import replace

import numpy as np
import pytest

from vizecg.data import CLASS_NAMES, Dataset, SynthConfig, generate_dataset
from vizecg.errors import ConfigurationError, ContractError, NonFiniteError
from vizecg.model import ModelConfig, forward_distill, forward_infer, forward_train, init_model
from vizecg.train import (
    ABLATIONS,
    _InputCache,
    AdamState,
    MetricsReport,
    TrainConfig,
    adam_step,
    bce_multilabel,
    compute_metrics,
    cosine_lr,
    evaluate,
    fit,
    kd_kl,
    prepare_inputs,
    run_ablation,
    total_loss,
)
from vizecg.tensor import Tensor, backward, no_grad

SIGNAL_SIDE = ('signal.', 'cmam_s.', 'smam_s.', 'head_s.')


@pytest.fixture
def _model_config():
    return replace(ModelConfig.tiny(), image_height=96, image_width=32)


@pytest.fixture
def _dataset():
    return generate_dataset(SynthConfig(length=64), 10, 0)


@pytest.fixture
def _train_config():
    return TrainConfig(epochs=2, batch_size=4)


class TestLosses:

    def test_bce_perfect(self):
        assert bce_multilabel([True] * 3 + [False] * 3, Tensor([1.0] * 3 + [0.0] * 3)).item() < 1e-6

    def test_bce_uninformative(self):
        loss = bce_multilabel([True, False, True, False, True, False], Tensor([0.5] * 6)).item()
        assert abs(loss - 6 * np.log(2)) <= 1e-12

    def test_bce_gradient(self):
        t = np.array([True, False, True, False, True, True])
        p = Tensor(np.random.default_rng(0).uniform(0.05, 0.95, size=6), requires_grad=True)
        backward(bce_multilabel(t, p))
        expected = (p.data - t) / (p.data * (1 - p.data))
        assert np.abs(p.grad - expected).max() <= 1e-8

    def test_bce_monotone(self):
        values = [bce_multilabel([True] * 6, Tensor([p] * 6)).item() for p in np.linspace(0.01, 0.99, 50)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_kd_identical(self):
        p = Tensor(np.random.default_rng(1).uniform(size=6))
        assert kd_kl(p, p).item() == 0.0

    def test_kd_closed_form(self):
        expected = 0.8 * np.log(0.8 / 0.5) + 0.2 * np.log(0.2 / 0.5)
        assert abs(kd_kl(Tensor([0.8]), Tensor([0.5])).item() - expected) <= 1e-9
        assert abs(expected - 0.19274) < 1e-5

    def test_kd_non_negative(self):
        rng = np.random.default_rng(2)
        for _ in range(10_000):
            assert kd_kl(Tensor(rng.uniform(size=6)), Tensor(rng.uniform(size=6))).item() >= 0.0

    def test_kd_teacher_detach(self, _model_config):
        state = init_model(_model_config, seed=0)
        rng = np.random.default_rng(3)
        signals, image = rng.normal(size=(12, 64)), rng.uniform(size=(96, 32))
        p_s, p_i = forward_train(state, signals, image, enable_cmam=False)
        backward(kd_kl(p_s, p_i, teacher_detach=True))
        reached = {name for name, param in state.params.items() if param.grad is not None and param.grad.any()}
        assert not any(name.startswith(('signal.', 'smam_s.', 'head_s.')) for name in reached)
        assert 'head_i.b2' in reached

    def test_kd_teacher_detach_with_cmam(self, _model_config):
        state = init_model(_model_config, seed=0)
        rng = np.random.default_rng(4)
        p_s, p_i, p_student = forward_distill(state, rng.normal(size=(12, 64)), rng.uniform(size=(96, 32)))
        assert p_student.data.tobytes() == p_i.data.tobytes()
        backward(kd_kl(p_s, p_student, teacher_detach=True))
        reached = {name for name, param in state.params.items() if param.grad is not None and param.grad.any()}
        assert not any(name.startswith(SIGNAL_SIDE) for name in reached), sorted(reached)
        assert {'image.stem.w', 'cmam_i.w_v', 'smam_i.w_q', 'head_i.w1'} <= reached

    def test_kd_without_detach_reaches_signals(self, _model_config):
        state = init_model(_model_config, seed=0)
        rng = np.random.default_rng(4)
        p_s, p_i = forward_train(state, rng.normal(size=(12, 64)), rng.uniform(size=(96, 32)))
        backward(kd_kl(p_s, p_i))
        assert state.params['signal.stem.w'].grad.any()

    def test_total_loss(self):
        assert total_loss(Tensor(2.0), Tensor(3.0), 0.5, 2.0).item() == 7.0
        assert total_loss(1.0, 5.0, 1.0, 0.0).item() == 1.0


class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        grad = np.array([0.5, -2.0, 0.1, -0.3])
        param = Tensor(np.zeros(4), requires_grad=True)
        param.grad = grad.copy()
        adam_step({'w': param}, AdamState(), lr=1e-3)
        assert np.allclose(param.data, -1e-3 * np.sign(grad), rtol=0, atol=1e-9)

    def test_zero_gradient(self):
        param = Tensor(np.ones(3), requires_grad=True)
        param.grad = np.zeros(3)
        adam_step({'w': param}, AdamState(), lr=1e-3)
        assert param.data.tolist() == [1.0, 1.0, 1.0]

    def test_state_persists(self):
        state = AdamState()
        param = Tensor(np.zeros(2), requires_grad=True)
        for _ in range(3):
            param.grad = np.ones(2)
            adam_step({'w': param}, state, lr=1e-2)
        assert state.step == 3
        assert np.allclose(param.data, -3e-2, atol=1e-8)

    def test_missing_gradient(self):
        with pytest.raises(ContractError) as exc:
            adam_step({'w': Tensor(np.zeros(2), requires_grad=True)}, AdamState(), lr=1e-3)
        assert exc.value.extra['params'] == ['w']


class TestCosineLr:

    def test_endpoints(self):
        assert cosine_lr(0, 100) == 1e-3
        assert abs(cosine_lr(100, 100) - 1e-6) <= 1e-18

    def test_midpoint(self):
        assert abs(cosine_lr(50, 100) - 5.005e-4) <= 1e-15

    def test_monotone(self):
        values = [cosine_lr(step, 100) for step in range(101)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize(['step', 'total'], [(-1, 10), (11, 10), (0, 0)], ids=['negative', 'past_end', 'empty'])
    def test_out_of_range(self, step, total):
        with pytest.raises(ContractError):
            cosine_lr(step, total)


class TestMetrics:

    def test_matches_counting(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            predictions, labels = rng.uniform(size=(n, 6)), rng.uniform(size=(n, 6)) < 0.4
            threshold = float(rng.uniform(0.1, 0.9))
            report = compute_metrics(predictions, labels, threshold)
            expected = pytest.confusion_counts(predictions.tolist(), labels.tolist(), threshold)
            for key in ('tp', 'fp', 'fn', 'tn'):
                assert getattr(report, key).tolist() == expected[key]

    def test_threshold_inclusive(self):
        report = compute_metrics([[0.5] * 6], [[True] * 6])
        assert report.tp.tolist() == [1] * 6

    def test_perfect(self):
        labels = np.eye(6, dtype=bool)
        assert compute_metrics(labels.astype(float), labels).macro_f1 == 1.0

    def test_all_negative(self):
        report = compute_metrics(np.zeros((4, 6)), np.zeros((4, 6), dtype=bool))
        assert report.macro_f1 == 0.0
        assert report.tn.tolist() == [4] * 6

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            compute_metrics(np.zeros((3, 6)), np.zeros((2, 6), dtype=bool))

    def test_csv(self, tmp_path):
        path = tmp_path / 'metrics.csv'
        compute_metrics(np.eye(6), np.eye(6, dtype=bool)).write_csv(path)
        with open(path, newline='') as f:
            rows = list(csv.DictReader(f))
        assert [row['class'] for row in rows] == [*CLASS_NAMES, 'macro']
        assert float(rows[-1]['f1']) == 1.0

    def test_json_repr(self):
        report = MetricsReport(*(np.zeros(6, dtype=int) for _ in range(4)))
        assert len(report.json_repr()['classes']) == 6
        assert report.json_repr()['macro']['class'] == 'macro'


class TestTrainConfig:

    def test_presets(self):
        assert TrainConfig.from_dict({}).epochs == 30
        assert TrainConfig.from_dict({'preset': 'paper'}).epochs == 300

    @pytest.mark.parametrize(
        'settings',
        [{'preset': 'fast'}, {'lr': 1.0}, {'lr_min': 1e-2, 'lr_max': 1e-3}, {'batch_size': 0}, {'threshold': 1.0}],
        ids=['preset', 'unknown_key', 'lr_order', 'batch_size', 'threshold'],
    )
    def test_invalid(self, settings):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict(settings)


class TestFit:

    def test_inputs_are_quantized(self, _model_config, _dataset):
        record, image = prepare_inputs(init_model(_model_config), _dataset[0])
        assert image == image.quantized()
        assert (image.height, image.width) == (96, 32)
        assert abs(record.leads.mean()) <= 1e-9

    def test_log_structure(self, _model_config, _dataset, _train_config):
        log = fit(init_model(_model_config, seed=0), _dataset, _train_config)
        assert [record['epoch'] for record in log.epochs] == [0, 1, 2]
        assert [record['step'] for record in log.steps] == [0, 1, 2, 3]
        assert log.steps[0]['lr'] == _train_config.lr_max
        assert all(np.isfinite(record['total']) for record in log.steps)
        assert {'val_f1', 'val_signal_f1', 'val_kd_kl'} <= set(log.epochs[-1])

    def test_deterministic(self, _model_config, _dataset, _train_config):
        first, second = init_model(_model_config, seed=1), init_model(_model_config, seed=1)
        assert fit(first, _dataset, _train_config).dumps() == fit(second, _dataset, _train_config).dumps()
        assert all(first.params[name].data.tobytes() == param.data.tobytes() for name, param in second.params.items())

    def test_without_distillation(self, _model_config, _dataset, _train_config):
        plain, distilled = init_model(_model_config, seed=2), init_model(_model_config, seed=2)
        log = fit(plain, _dataset, replace(_train_config, lambda2=0.0))
        fit(distilled, _dataset, _train_config)
        assert all(record['kd'] == 0.0 for record in log.steps)
        assert not np.array_equal(plain.params['head_i.w2'].data, distilled.params['head_i.w2'].data)

    def test_disabled_modules_are_frozen(self, _model_config, _dataset, _train_config):
        state = init_model(_model_config, seed=3)
        before = state.params['cmam_s.w_q'].data.copy()
        fit(state, _dataset, replace(_train_config, enable_cmam=False, epochs=1))
        assert np.array_equal(state.params['cmam_s.w_q'].data, before)

    def test_teacher_detach_keeps_signal_stream(self, _model_config, _dataset, _train_config):
        state = init_model(_model_config, seed=4)
        before = {name: param.data.copy() for name, param in state.params.items()}
        fit(state, _dataset, replace(_train_config, lambda1=0.0, kd_teacher_detach=True))
        changed = {name for name, param in state.params.items() if not np.array_equal(param.data, before[name])}
        assert not any(name.startswith(SIGNAL_SIDE) for name in changed), sorted(changed)
        assert 'image.stem.w' in changed and 'cmam_i.w_q' in changed

    def test_records_trained_modules(self, _model_config, _dataset, _train_config):
        state = init_model(_model_config, seed=5)
        fit(state, _dataset, replace(_train_config, enable_smam=False, epochs=1))
        assert (state.enable_cmam, state.enable_smam) == (True, False)
        _, image = prepare_inputs(state, _dataset[0])
        with no_grad():
            served = forward_infer(state, image).data
            trained = forward_infer(state, image, enable_smam=False).data
            untrained = forward_infer(state, image, enable_smam=True).data
        assert served.tobytes() == trained.tobytes()
        assert served.tobytes() != untrained.tobytes()

    def test_converges_without_attention(self, _model_config):
        dataset = Dataset(generate_dataset(SynthConfig(length=64), 8, 1).records, fractions=(1.0, 0.0, 0.0))
        config = TrainConfig(epochs=60, batch_size=8, lr_max=1e-2, enable_cmam=False, enable_smam=False)
        log = fit(init_model(_model_config, seed=6), dataset, config)
        totals = [record['total'] for record in log.epochs]
        assert len(totals) == 60
        assert totals[-1] < 0.8 * totals[0]

    def test_input_cache_keeps_bytes(self, _model_config, _dataset):
        state = init_model(_model_config)
        cache = _InputCache(state, _dataset.records)
        first = cache[0]
        second = cache[0]
        assert cache.nbytes == 96 * 32
        assert first[1] == second[1] and first[0] == second[0]
        assert second[1] == prepare_inputs(state, _dataset[0])[1]

    def test_non_finite_loss(self, _model_config, _dataset, _train_config):
        state = init_model(_model_config, seed=0)
        state.params['head_i.b2'].data = np.full(6, np.nan)
        with pytest.raises(NonFiniteError) as exc:
            fit(state, _dataset, _train_config)
        assert exc.value.extra['step'] == 0
        assert exc.value.extra['epoch'] == 1

    def test_empty_train_split(self, _model_config, _dataset, _train_config):
        dataset = Dataset(_dataset.records[:2], fractions=(0.0, 0.5, 0.5))
        with pytest.raises(ContractError):
            fit(init_model(_model_config), dataset, _train_config)


class TestEvaluate:

    @pytest.mark.parametrize('mode', ['signal', 'image'], ids=str)
    def test_modes(self, _model_config, _dataset, mode):
        report = evaluate(init_model(_model_config), _dataset.records[:4], mode)
        assert int((report.tp + report.fp + report.fn + report.tn).sum()) == 4 * 6
        assert 0.0 <= report.macro_f1 <= 1.0

    def test_uninformative_model_scores_constant_guess_level(self, _model_config):
        dataset = generate_dataset(SynthConfig(length=64, prevalence=(0.5,) * 6, co_occurrence=1.0), 20, 2)
        state = init_model(_model_config, seed=0)
        for name in ('head_i.w2', 'head_i.b2'):
            state.params[name].data = np.zeros_like(state.params[name].data)
        report = evaluate(state, dataset.records, 'image')
        prevalence = dataset.labels.mean(axis=0)
        expected = np.mean(2 * prevalence / (1 + prevalence))
        assert report.tp.tolist() == dataset.labels.sum(axis=0).tolist()
        assert abs(report.macro_f1 - expected) <= 1e-12

    def test_uses_trained_modules(self, _model_config, _dataset):
        state = init_model(_model_config, seed=1)
        state.enable_cmam = False
        records = _dataset.records[:3]
        default = evaluate(state, records, 'signal')
        assert default.json_repr() == evaluate(state, records, 'signal', enable_cmam=False).json_repr()

    def test_unknown_mode(self, _model_config, _dataset):
        with pytest.raises(ContractError):
            evaluate(init_model(_model_config), _dataset.records[:1], 'audio')

    def test_ablation_rows(self, _model_config, _dataset):
        rows = run_ablation(_dataset, _model_config, TrainConfig(epochs=1, batch_size=8), seeds=[0, 1])
        assert [row.name for row in rows] == [name for name, _, _ in ABLATIONS]
        assert [(row.enable_cmam, row.enable_smam) for row in rows] == [(c, s) for _, c, s in ABLATIONS]
        assert all(len(row.f1) == 2 and 0.0 <= row.median_f1 <= 1.0 for row in rows)
