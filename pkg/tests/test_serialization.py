"""
Tests for the binary weight format.
"""
import io
import struct

import numpy as np
import pytest

from ..src.lanmsff.exceptions import (
    ChecksumError,
    ConfigMismatchError,
    SerializationError,
    TruncatedPayloadError,
)
from ..src.lanmsff.layers import state_arrays
from ..src.lanmsff.model import LANMSFFConfig, build_model
from ..src.lanmsff.serialization import MAGIC, decode_weights, encode_weights, load_weights, save_weights
from ..src.lanmsff.tensor import Tensor

MINI = dict(block_widths=(6, 12, 6, 12), input_size=16, num_classes=3, dropout_rate=0.0)


@pytest.fixture
def trained_model(mini_model):
    """A model whose BN running statistics moved away from their initial values."""
    mini_model(Tensor(np.random.default_rng(0).random((4, 1, 16, 16))), "train")
    return mini_model


class TestRoundTrip:
    def test_file_round_trip_is_bit_exact(self, trained_model, mini_config, tmp_path):
        path = tmp_path / "weights.bin"
        save_weights(trained_model, path)

        restored = load_weights(path, mini_config)

        before, after = state_arrays(trained_model), state_arrays(restored)
        assert list(before) == list(after)
        for name in before:
            np.testing.assert_array_equal(before[name], after[name], err_msg=name)

    def test_predictions_survive_round_trip(self, trained_model, mini_config):
        sink = io.BytesIO()
        save_weights(trained_model, sink)
        sink.seek(0)

        restored = load_weights(sink, mini_config)

        images = np.random.default_rng(1).random((3, 1, 16, 16))
        np.testing.assert_array_equal(restored.predict_proba(images), trained_model.predict_proba(images))

    def test_buffers_are_stored(self, trained_model, mini_config):
        arrays = decode_weights(encode_weights(trained_model), mini_config)

        assert "block1.bn.running_mean" in arrays
        np.testing.assert_array_equal(arrays["block1.bn.running_var"], trained_model.block1.bn.state.running_var)

    def test_float32_values_keep_their_width(self):
        config = LANMSFFConfig(**MINI, dtype="float32")
        model = build_model(config)

        arrays = decode_weights(encode_weights(model), config)

        assert arrays["classifier.weight"].dtype == np.float32

    def test_seed_does_not_affect_compatibility(self, trained_model):
        blob = encode_weights(trained_model)

        decode_weights(blob, LANMSFFConfig(**{**MINI, "seed": 99}))


class TestHeader:
    def test_layout(self, trained_model):
        blob = encode_weights(trained_model)
        magic, version, arch, length, count = struct.unpack_from("<8sH16sQI", blob)

        assert magic == MAGIC
        assert version == 1
        assert arch == trained_model.config.architecture_hash()
        assert len(blob) == struct.calcsize("<8sH16sQI") + length + 8
        assert count == len(state_arrays(trained_model))


class TestCorruption:
    def test_wrong_magic(self, trained_model, mini_config):
        blob = bytearray(encode_weights(trained_model))
        blob[:8] = b"NOTMAGIC"

        with pytest.raises(SerializationError, match="magic"):
            decode_weights(bytes(blob), mini_config)

    @pytest.mark.parametrize("keep", [10, 200])
    def test_truncated(self, trained_model, mini_config, keep):
        blob = encode_weights(trained_model)

        with pytest.raises(TruncatedPayloadError):
            decode_weights(blob[:keep], mini_config)

    def test_flipped_byte(self, trained_model, mini_config):
        blob = bytearray(encode_weights(trained_model))
        blob[len(blob) // 2] ^= 0xFF

        with pytest.raises(ChecksumError):
            decode_weights(bytes(blob), mini_config)

    def test_other_architecture(self, trained_model):
        blob = encode_weights(trained_model)

        with pytest.raises(ConfigMismatchError):
            decode_weights(blob, LANMSFFConfig(**{**MINI, "num_classes": 4}))

    def test_ablation_configs_are_distinguished(self, trained_model):
        blob = encode_weights(trained_model)

        with pytest.raises(ConfigMismatchError):
            load_weights(io.BytesIO(blob), LANMSFFConfig(**MINI, enable_massatt=False))
