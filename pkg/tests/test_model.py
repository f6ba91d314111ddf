import inspect
import struct

import numpy as np
import pytest

from vizecg.data import EcgRecord
from vizecg.errors import CheckpointError, ConfigurationError, ContractError, DimensionError
from vizecg.model import (
    AttentionParams,
    HeadParams,
    ModelConfig,
    _extract,
    attention_matrix,
    cmam_forward,
    forward_infer,
    forward_train,
    head_forward,
    image_stream_forward,
    init_model,
    load_model,
    save_model,
    signal_stream_forward,
    smam_forward,
)
from vizecg.raster import EcgImage
from vizecg.tensor import Tensor, adaptive_avg_pool_tokens, mean_over_axis, no_grad


@pytest.fixture
def _state():
    return init_model(ModelConfig.tiny(), seed=0)


@pytest.fixture
def _inputs():
    rng = np.random.default_rng(1)
    return rng.normal(size=(12, 64)), EcgImage(rng.uniform(size=(16, 16)))


def _random_params(rng, c: int) -> AttentionParams:
    return AttentionParams(*(Tensor(rng.normal(scale=0.5, size=(c, c))) for _ in range(3)))


def _tokenized_lead(state, lead: np.ndarray) -> np.ndarray:
    features = mean_over_axis(_extract(state, 'signal', Tensor(lead.reshape(1, 1, -1))), 0)
    return adaptive_avg_pool_tokens(features, state.config.tokens).data


class TestSignalStream:

    def test_identical_leads(self, _state):
        lead = np.random.default_rng(2).normal(size=64)
        with no_grad():
            out = signal_stream_forward(_state, np.tile(lead, (12, 1))).data
            expected = _tokenized_lead(_state, lead)
        assert np.abs(out - expected).max() <= 1e-12

    def test_two_leads_average(self, _state):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=64), rng.normal(size=64)
        with no_grad():
            out = signal_stream_forward(_state, np.array([a, b] * 6)).data
            expected = (_tokenized_lead(_state, a) + _tokenized_lead(_state, b)) / 2
        assert np.abs(out - expected).max() <= 1e-12

    def test_permutation_invariance(self, _state, _inputs):
        signals, _ = _inputs
        order = np.random.default_rng(4).permutation(12)
        with no_grad():
            out = signal_stream_forward(_state, signals).data
            permuted = signal_stream_forward(_state, signals[order]).data
        assert np.abs(out - permuted).max() <= 1e-12

    def test_lead_count(self, _state):
        with pytest.raises(ContractError):
            signal_stream_forward(_state, np.zeros((11, 64)))

    def test_accepts_record(self, _state, _inputs):
        signals, _ = _inputs
        with no_grad():
            assert signal_stream_forward(_state, EcgRecord(signals)).shape == (4, 8)

    def test_single_shared_extractor(self, _state):
        assert _state.census('signal.') == 1136
        assert not any('lead' in name for name in _state.params)


class TestImageStream:

    def test_white_image(self, _state):
        image = EcgImage(np.ones((16, 16)))
        with no_grad():
            first = image_stream_forward(_state, image).data
            second = image_stream_forward(_state, image).data
        assert np.isfinite(first).all()
        assert first.tobytes() == second.tobytes()

    def test_token_shape_matches_signal(self):
        state = init_model(ModelConfig(channels=16, tokens=8, widths=(4, 8, 8), head_hidden=8), seed=0)
        with no_grad():
            z_s = signal_stream_forward(state, np.zeros((12, 512)))
            z_i = image_stream_forward(state, np.ones((128, 128)))
        assert z_s.shape == z_i.shape == (8, 16)

    def test_too_small(self, _state):
        with pytest.raises(DimensionError) as exc:
            image_stream_forward(_state, np.ones((1, 16)))
        assert exc.value.extra['min_size'] == _state.config.min_image_size()


class TestAttention:

    @pytest.fixture
    def _rng(self):
        return np.random.default_rng(5)

    def test_uniform_attention(self, _rng):
        params = _random_params(_rng, 8)
        z_n = Tensor(np.tile(_rng.normal(size=8), (4, 1)))
        z_m = Tensor(_rng.normal(size=(4, 8)))
        assert np.allclose(attention_matrix(z_n, params).data, 0.25, rtol=0, atol=1e-12)
        out = cmam_forward(z_m, z_n, params).data
        v = z_m.data @ params.w_v.data
        assert np.allclose(out, np.tile(v.mean(axis=0), (4, 1)), rtol=0, atol=1e-12)

    def test_zero_values(self, _rng):
        w_q, w_k, _ = _random_params(_rng, 8)
        params = AttentionParams(w_q, w_k, Tensor(np.zeros((8, 8))))
        out = cmam_forward(Tensor(_rng.normal(size=(4, 8))), Tensor(_rng.normal(size=(4, 8))), params)
        assert not out.data.any()

    def test_cmam_reference(self, _rng):
        params = _random_params(_rng, 8)
        z_m, z_n = _rng.normal(size=(2, 8)), _rng.normal(size=(2, 8))
        out = cmam_forward(Tensor(z_m), Tensor(z_n), params).data
        expected = pytest.attention_reference(z_n, z_m, *(w.data for w in params))
        assert np.abs(out - expected).max() <= 1e-12

    def test_cmam_token_mismatch(self, _rng):
        params = _random_params(_rng, 8)
        with pytest.raises(ContractError):
            cmam_forward(Tensor(np.zeros((3, 8))), Tensor(np.zeros((4, 8))), params)

    def test_smam_single_token(self, _rng):
        params = _random_params(_rng, 8)
        z = _rng.normal(size=(1, 8))
        assert np.allclose(smam_forward(Tensor(z), params).data, z @ params.w_v.data, rtol=0, atol=1e-12)

    def test_smam_equal_tokens(self, _rng):
        out = smam_forward(Tensor(np.tile(_rng.normal(size=8), (5, 1))), _random_params(_rng, 8)).data
        assert np.allclose(out, out[0], rtol=0, atol=1e-12)

    def test_smam_reference(self, _rng):
        params = _random_params(_rng, 8)
        z = _rng.normal(size=(3, 8))
        expected = pytest.attention_reference(z, z, *(w.data for w in params))
        assert np.abs(smam_forward(Tensor(z), params).data - expected).max() <= 1e-12

    def test_row_stochastic(self, _rng):
        for _ in range(100):
            z = Tensor(_rng.normal(size=(6, 8)))
            weights = attention_matrix(z, _random_params(_rng, 8), scale_attention=bool(_rng.integers(2))).data
            assert np.all(weights >= 0)
            assert np.abs(weights.sum(axis=1) - 1).max() <= 1e-12


class TestHead:

    def test_zero_weights(self):
        params = HeadParams(*(Tensor(np.zeros(shape)) for shape in [(8, 4), (4,), (4, 6), (6,)]))
        out = head_forward(Tensor(np.random.default_rng(0).normal(size=(3, 8))), params)
        assert out.data.tolist() == [0.5] * 6

    def test_bias(self):
        b2 = np.zeros(6)
        b2[0] = 10.0
        params = HeadParams(Tensor(np.zeros((8, 4))), Tensor(np.zeros(4)), Tensor(np.zeros((4, 6))), Tensor(b2))
        out = head_forward(Tensor(np.ones((3, 8))), params)
        assert abs(out.data[0] - 1 / (1 + np.exp(-10.0))) <= 1e-12
        assert abs(out.data[0] - 0.99995) < 1e-5


class TestForward:

    def test_train_deterministic(self, _state, _inputs):
        with no_grad():
            first = [p.data for p in forward_train(_state, *_inputs)]
            second = [p.data for p in forward_train(_state, *_inputs)]
        assert [p.shape for p in first] == [(6,), (6,)]
        assert all(a.tobytes() == b.tobytes() for a, b in zip(first, second))
        assert all(((p > 0) & (p < 1)).all() for p in first)

    def test_cmam_changes_outputs(self, _state, _inputs):
        with no_grad():
            full = forward_train(_state, *_inputs)[1].data
            bypass = forward_train(_state, *_inputs, enable_cmam=False)[1].data
        assert not np.array_equal(full, bypass)

    def test_infer_takes_no_signal(self):
        assert list(inspect.signature(forward_infer).parameters) == ['state', 'image', 'enable_smam']

    def test_infer_matches_signal_free_graph(self, _state, _inputs):
        _, image = _inputs
        with no_grad():
            out = forward_infer(_state, image).data
            z = smam_forward(image_stream_forward(_state, image), _state.attention('smam_i'))
            expected = head_forward(z, _state.head('head_i')).data
        assert out.shape == (6,)
        assert out.tobytes() == expected.tobytes()

    def test_infer_equals_train_without_cmam(self, _state, _inputs):
        with no_grad():
            p_i = forward_train(_state, *_inputs, enable_cmam=False)[1].data
            assert forward_infer(_state, _inputs[1]).data.tobytes() == p_i.tobytes()


class TestCheckpoint:

    @pytest.fixture
    def _path(self, tmp_path, _state):
        path = tmp_path / 'model.vzck'
        save_model(_state, path)
        return path

    def test_round_trip(self, _path, _state, _inputs):
        loaded = load_model(_path)
        assert loaded.config == _state.config
        assert loaded.layout == _state.layout
        with no_grad():
            before = [p.data.tobytes() for p in forward_train(_state, *_inputs)]
            after = [p.data.tobytes() for p in forward_train(loaded, *_inputs)]
        assert before == after

    @pytest.mark.parametrize(
        ['enable_cmam', 'enable_smam'],
        [(True, False), (False, True), (False, False)],
        ids=['no_smam', 'no_cmam', 'none'],
    )
    def test_round_trip_keeps_modules(self, tmp_path, _state, _inputs, enable_cmam, enable_smam):
        _state.enable_cmam, _state.enable_smam = enable_cmam, enable_smam
        save_model(_state, tmp_path / 'ablated.vzck')
        loaded = load_model(tmp_path / 'ablated.vzck')
        assert (loaded.enable_cmam, loaded.enable_smam) == (enable_cmam, enable_smam)
        with no_grad():
            served = forward_infer(loaded, _inputs[1]).data
            expected = forward_infer(_state, _inputs[1], enable_smam=enable_smam).data
            p_s = forward_train(loaded, *_inputs)[0].data
            expected_p_s = forward_train(_state, *_inputs, enable_cmam=enable_cmam, enable_smam=enable_smam)[0].data
        assert served.tobytes() == expected.tobytes()
        assert p_s.tobytes() == expected_p_s.tobytes()

    def test_wrong_magic(self, _path):
        _path.write_bytes(b'XXXX' + _path.read_bytes()[4:])
        with pytest.raises(CheckpointError):
            load_model(_path)

    def test_wrong_version(self, _path):
        data = _path.read_bytes()
        _path.write_bytes(data[:4] + struct.pack('<I', 7) + data[8:])
        with pytest.raises(CheckpointError):
            load_model(_path)

    def test_truncated(self, _path):
        _path.write_bytes(_path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_model(_path)

    def test_architecture_mismatch(self, _path):
        with pytest.raises(CheckpointError) as exc:
            load_model(_path, expected=ModelConfig.desk())
        assert 'channels' in exc.value.extra['fields']
        assert 'channels' in str(exc.value)


class TestModelConfig:

    def test_presets(self):
        assert ModelConfig.from_dict({'preset': 'tiny'}) == ModelConfig.tiny()
        assert ModelConfig.from_dict({'preset': 'paper'}).channels == 512
        assert ModelConfig.from_dict({}).channels == 64

    def test_round_trip(self):
        config = ModelConfig.tiny()
        assert ModelConfig.from_dict(config.json_repr()) == config

    @pytest.mark.parametrize(
        'settings', [{'preset': 'huge'}, {'channel': 8}, {'widths': [4, 4]}, {'tokens': 0}],
        ids=['preset', 'unknown_key', 'widths', 'tokens'],
    )
    def test_invalid(self, settings):
        with pytest.raises(ConfigurationError):
            ModelConfig.from_dict(settings)

    def test_minimum_sizes(self):
        config = ModelConfig.desk()
        assert config.feature_size(config.min_image_size(), 4, 4, config.image_strides) == 1
        assert config.min_signal_length() <= 4096
        assert ModelConfig.tiny().min_image_size() <= 16
