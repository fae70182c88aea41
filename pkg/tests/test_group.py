"""Instant group co-segmentation versus the pairwise baseline."""

from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from coseg.config import ModelConfig
from coseg.group import (GroupAttention, generate_attention, instant_group_coseg, pairwise_group_coseg,
                         read_attention_export, reduce_attentions, segment_with_attention,
                         write_attention_export)
from coseg.network import CosegModel, logits_to_mask
from coseg.tensor import no_grad

SMALL = dict(stage_channels=(4, 8), convs_per_stage=1, input_size=16)


@pytest.fixture(params=["ca", "fca", "csa"])
def model(request):
    return CosegModel(ModelConfig(variant=request.param, **SMALL), seed=2, dtype=np.float64).eval()


@pytest.fixture
def images():
    rng = np.random.default_rng(5)
    return [rng.random((3, 16, 16)) for _ in range(5)]


class TestReduce:
    def test_average(self):
        g = reduce_attentions([np.array([0.2, 0.8]), np.array([0.6, 0.4])], "average")
        np.testing.assert_allclose(g.values, [0.4, 0.6], rtol=1e-15)
        assert g.count == 2

    def test_minimum(self):
        g = reduce_attentions([np.array([0.2, 0.8]), np.array([0.6, 0.4])], "minimum")
        np.testing.assert_array_equal(g.values, [0.2, 0.4])

    @pytest.mark.parametrize("mode", ["average", "minimum"])
    def test_single(self, mode):
        v = np.array([0.3, 0.1, 0.9])
        np.testing.assert_array_equal(reduce_attentions([v], mode).values, v)

    def test_minimum_dominated_by_one_vector(self):
        rng = np.random.default_rng(0)
        vs = [rng.uniform(0.5, 1, 8) for _ in range(6)]
        vs[3][2] = 1e-9
        assert reduce_attentions(vs, "minimum").values[2] == 1e-9

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 7), st.just(5)), elements=st.floats(0, 1)))
    def test_order_invariance_and_bounds(self, stack):
        vs = list(stack)
        for mode in ("average", "minimum"):
            a = reduce_attentions(vs, mode).values
            b = reduce_attentions(vs[::-1], mode).values
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
            assert np.all(a >= stack.min(0) - 1e-15) and np.all(a <= stack.max(0) + 1e-15)
        assert np.all(reduce_attentions(vs, "minimum").values <= reduce_attentions(vs, "average").values + 1e-15)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (4, 5), elements=st.floats(0, 1)), arrays(np.float64, (5,), elements=st.floats(0, 1)))
    def test_minimum_monotone_in_group_size(self, stack, extra):
        before = reduce_attentions(list(stack), "minimum").values
        after = reduce_attentions(list(stack) + [extra], "minimum").values
        assert np.all(after <= before)

    def test_errors(self):
        with pytest.raises(ValueError):
            reduce_attentions([], "average")
        with pytest.raises(ValueError):
            reduce_attentions([np.zeros(2), np.zeros(3)], "average")
        with pytest.raises(ValueError, match="mode"):
            reduce_attentions([np.zeros(2)], "median")


class TestAttentionPath:
    def test_deterministic(self, model, images):
        a1, _ = generate_attention(images[0], model)
        a2, _ = generate_attention(images[0], model)
        np.testing.assert_array_equal(a1, a2)

    def test_matches_pair_internal(self, model, images):
        alpha, _ = generate_attention(images[0], model)
        with no_grad():
            _, _, att = model.forward_pair(images[0], images[1], return_attention=True)
        np.testing.assert_array_equal(alpha, att.alpha_a.data[0])

    def test_ones_selector_is_objectness(self, images):
        m = CosegModel(ModelConfig(variant="ca", **SMALL), seed=2, dtype=np.float64).eval()
        mask = segment_with_attention(images[0], np.ones(8), m)
        with no_grad():
            ref = logits_to_mask(m.decode(m.encode(images[0])))[0]
        np.testing.assert_array_equal(mask, ref)

    def test_self_attention_equals_self_pair(self, model, images):
        alpha, _ = generate_attention(images[1], model)
        mask = segment_with_attention(images[1], reduce_attentions([alpha]), model)
        ma, _ = model.predict_pair(images[1], images[1])
        np.testing.assert_array_equal(mask, ma[0])

    def test_selector_length_checked(self, model, images):
        with pytest.raises(ValueError):
            segment_with_attention(images[0], np.ones(3), model)


class TestAlgorithm:
    @pytest.mark.parametrize("n", [2, 4, 8, 16])
    def test_counters(self, n):
        m = CosegModel(ModelConfig(**SMALL), seed=0, dtype=np.float64)
        imgs = [np.random.default_rng(i).random((3, 16, 16)) for i in range(n)]
        inst = instant_group_coseg(imgs, m)
        assert inst.counters == {"encoder": n, "attention": n, "decoder": n, "reduction": 1}
        pair = pairwise_group_coseg(imgs, m)
        assert pair.counters["encoder"] == 2 * comb(n, 2)
        assert pair.counters["decoder"] == 2 * comb(n, 2)

    def test_no_cache_encodes_twice(self, images):
        m = CosegModel(ModelConfig(**SMALL), seed=0, dtype=np.float64)
        a = instant_group_coseg(images, m, cache_features=False)
        b = instant_group_coseg(images, m)
        assert a.counters["encoder"] == 2 * len(images)
        for x, y in zip(a.masks, b.masks):
            np.testing.assert_array_equal(x, y)

    @pytest.mark.parametrize("mode", ["average", "minimum"])
    def test_identical_images_collapse(self, model, images, mode):
        group = [images[2].copy() for _ in range(4)]
        inst = instant_group_coseg(group, model, mode)
        pair = pairwise_group_coseg(group, model)
        ma, _ = model.predict_pair(images[2], images[2])
        for x, y in zip(inst.masks, pair.masks):
            np.testing.assert_array_equal(x, ma[0])
            np.testing.assert_array_equal(y, ma[0])

    def test_order_equivariance(self, model, images):
        fwd = instant_group_coseg(images, model)
        rev = instant_group_coseg(images[::-1], model)
        for x, y in zip(fwd.masks, rev.masks[::-1]):
            np.testing.assert_array_equal(x, y)

    def test_pairwise_base_case(self, model, images):
        res = pairwise_group_coseg(images[:2], model)
        ma, mb = model.predict_pair(images[0], images[1])
        np.testing.assert_array_equal(res.masks[0], ma[0])
        np.testing.assert_array_equal(res.masks[1], mb[0])

    def test_input_errors(self, model, images):
        with pytest.raises(ValueError):
            instant_group_coseg([], model)
        with pytest.raises(ValueError):
            instant_group_coseg(images, model, "median")
        with pytest.raises(ValueError):
            pairwise_group_coseg(images[:1], model)


def test_attention_export_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    alphas = [rng.random(6).astype(np.float32) for _ in range(3)]
    names = ["a/x.ppm", "b/y z.ppm", "c.ppm"]
    write_attention_export(tmp_path / "att.txt", names, alphas)
    got_names, got = read_attention_export(tmp_path / "att.txt")
    assert got_names == names
    np.testing.assert_array_equal(got.astype(np.float32), np.stack(alphas))
