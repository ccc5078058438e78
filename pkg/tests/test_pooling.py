import numpy as np
import pytest

from svkit.errors import DataError
from svkit.pooling import PoolingParams, mqmha_pooling, statistic_pooling


class TestStatisticPooling:
    def test_constant_frames(self):
        out = statistic_pooling(np.full((10, 3), 2.5))
        np.testing.assert_allclose(out[:3], 2.5, atol=1e-12)
        np.testing.assert_allclose(out[3:], 0.0, atol=2e-5)  # eps under the sqrt

    def test_hand_case(self):
        # frames [[0], [2]]: mean 1, population std 1
        out = statistic_pooling(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(out, [1.0, 1.0], atol=1e-9)

    def test_permutation_invariance(self, rng):
        frames = rng.standard_normal((20, 5))
        out1 = statistic_pooling(frames)
        out2 = statistic_pooling(frames[rng.permutation(20)])
        np.testing.assert_allclose(out1, out2, atol=1e-12)

    def test_output_length(self, rng):
        assert statistic_pooling(rng.standard_normal((7, 9))).shape == (18,)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            statistic_pooling(np.empty((0, 4)))


class TestMqmhaPooling:
    def test_reduces_to_statistic_pooling(self, rng):
        frames = rng.standard_normal((15, 8))
        params = PoolingParams.zeros(8, num_queries=1, num_heads=1)
        np.testing.assert_array_equal(mqmha_pooling(frames, params),
                                      statistic_pooling(frames))

    def test_permutation_invariance(self, rng):
        frames = rng.standard_normal((12, 8))
        params = PoolingParams.random(8, 2, 4, rng)
        out1 = mqmha_pooling(frames, params)
        out2 = mqmha_pooling(frames[rng.permutation(12)], params)
        np.testing.assert_allclose(out1, out2, atol=1e-12)

    def test_single_frame(self, rng):
        frame = rng.standard_normal((1, 8))
        params = PoolingParams.random(8, 3, 2, rng)
        out = mqmha_pooling(frame, params)
        # per (query, head): [slice || ~0]; weighted std hits the eps floor
        d = 4
        for block in out.reshape(3 * 2, 2 * d):
            np.testing.assert_allclose(block[d:], 0.0, atol=2e-5)
        np.testing.assert_allclose(out.reshape(3, 2, 2 * d)[0, 0, :d], frame[0, :d])

    def test_output_shape(self, rng):
        frames = rng.standard_normal((9, 12))
        params = PoolingParams.random(12, 4, 3, rng)
        assert mqmha_pooling(frames, params).shape == (4 * 3 * 2 * 4,)

    def test_attention_normalized(self, rng):
        # attention rows sum to 1: uniform weights reproduce plain moments scaled
        frames = rng.standard_normal((10, 6))
        params = PoolingParams.random(6, 1, 2, rng)
        from svkit.pooling import _softmax
        for h in range(2):
            piece = frames[:, h * 3:(h + 1) * 3]
            att = _softmax(piece @ params.score_weights[0, h] + params.score_bias[0, h])
            assert abs(att.sum() - 1.0) <= 1e-6

    def test_indivisible_heads_rejected(self, rng):
        with pytest.raises(DataError, match="divisible"):
            mqmha_pooling(rng.standard_normal((5, 7)), PoolingParams.zeros(8, 1, 2))
