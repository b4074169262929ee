import numpy as np
import pytest

from modroute import tensor as T
from modroute.exceptions import RoutingError, ShapeError
from modroute.router import (
    HARD_SELECT,
    SIMILARITY_MERGE,
    SOFT_MERGE,
    RouterParams,
    fuse,
    gumbel_noise,
    hard_select,
    one_hot_argmax,
    route,
    routing_entropy,
    similarity_merge,
    soft_merge,
)


def fixed_logits(params, logits):
    """Make the router MLP output ``logits`` for every input."""
    params.mlp_out.weight.assign(np.zeros(params.mlp_out.weight.shape))
    params.mlp_out.bias.assign(logits)


@pytest.fixture
def params(rng):
    return RouterParams(rng, d_brain=6, d_model=4, num_projectors=3, hidden=5)


class TestSoftMerge:
    def test_weights_are_a_distribution(self, params, rng):
        w = soft_merge(params, T.Tensor(rng.normal(size=(10, 6)))).weights.data
        assert np.all(w > 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)

    def test_zero_mlp_gives_uniform(self, params, rng):
        fixed_logits(params, np.zeros(3))
        w = soft_merge(params, T.Tensor(rng.normal(size=6))).weights.data
        np.testing.assert_allclose(w, 1.0 / 3.0, atol=1e-15)

    def test_known_logits(self, params, rng):
        fixed_logits(params, [1.0, 2.0, 3.0])
        w = soft_merge(params, T.Tensor(rng.normal(size=6))).weights.data
        np.testing.assert_allclose(w, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_shift_invariance(self, params, rng):
        b = T.Tensor(rng.normal(size=6))
        fixed_logits(params, [0.1, -0.4, 0.7])
        before = soft_merge(params, b).weights.data
        fixed_logits(params, [5.1, 4.6, 5.7])
        np.testing.assert_allclose(soft_merge(params, b).weights.data, before, atol=1e-12)


class TestHardSelect:
    def test_forward_is_exactly_one_hot(self, params, rng):
        b = T.Tensor(rng.normal(size=(20, 6)))
        decision = hard_select(params, b, 0.5, gumbel_noise(rng, (20, 3)))
        w = decision.weights.data
        assert set(np.unique(w)) <= {0.0, 1.0}
        np.testing.assert_array_equal(w.sum(axis=-1), np.ones(20))
        np.testing.assert_array_equal(np.argmax(w, axis=-1), np.argmax(decision.relaxed.data, axis=-1))

    def test_unit_temperature_without_noise_recovers_probabilities(self, params, rng):
        fixed_logits(params, np.log([0.5, 0.3, 0.2]))
        decision = hard_select(params, T.Tensor(rng.normal(size=6)), 1.0)
        np.testing.assert_allclose(decision.relaxed.data, [0.5, 0.3, 0.2], atol=1e-12)
        np.testing.assert_array_equal(decision.weights.data, [1.0, 0.0, 0.0])

    def test_low_temperature_picks_the_mode(self, params, rng):
        fixed_logits(params, np.log([0.7, 0.2, 0.1]))
        decision = hard_select(params, T.Tensor(rng.normal(size=6)), 1e-3)
        np.testing.assert_array_equal(decision.weights.data, [1.0, 0.0, 0.0])

    def test_injected_noise(self, params, rng):
        l = np.array([0.5, 0.3, 0.2])
        g = np.array([0.5, -0.3, 0.1])
        fixed_logits(params, np.log(l))
        decision = hard_select(params, T.Tensor(rng.normal(size=6)), 0.5, g)
        z = (np.log(l) + g) / 0.5
        y = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        np.testing.assert_allclose(decision.relaxed.data, y, atol=1e-12)
        np.testing.assert_array_equal(decision.weights.data, one_hot_argmax(y))

    def test_nonpositive_temperature(self, params, rng):
        with pytest.raises(RoutingError):
            hard_select(params, T.Tensor(rng.normal(size=6)), 0.0)

    def test_gradient_flows_through_the_relaxation(self, params, rng):
        decision = hard_select(params, T.Tensor(rng.normal(size=(4, 6))), 0.5, gumbel_noise(rng, (4, 3)))
        T.backward(T.tensor_sum(T.mul(decision.weights, T.Tensor(rng.normal(size=(4, 3))))))
        assert params.mlp_in.weight.grad is not None
        assert np.any(params.mlp_out.weight.grad != 0.0)

    def test_gumbel_max_selection_frequencies(self, params):
        # argmax(log l + g) ~ Categorical(l)
        l = np.array([0.5, 0.3, 0.2])
        fixed_logits(params, np.log(l))
        n = 100_000
        sampler = np.random.default_rng(7)
        with T.no_grad():
            decision = hard_select(params, T.Tensor(np.zeros((n, 6))), 0.1, gumbel_noise(sampler, (n, 3)))
        freq = np.bincount(decision.assignments(), minlength=3) / n
        np.testing.assert_allclose(freq, l, atol=0.01)


class TestSimilarityMerge:
    def test_identical_keys_give_uniform(self, params, rng):
        keys = np.tile(rng.normal(size=4), (3, 1))
        w = similarity_merge(params, T.Tensor(rng.normal(size=6)), T.Tensor(keys)).weights.data
        np.testing.assert_allclose(w, 1.0 / 3.0, atol=1e-12)

    def test_orthogonal_query_gives_uniform(self, params):
        keys = T.Tensor([[0.0, 1.0], [0.0, -2.0]])
        w = similarity_merge(params, None, keys, query=T.Tensor([1.0, 0.0])).weights.data
        np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)

    def test_known_scores(self, params):
        keys = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
        w = similarity_merge(params, None, keys, query=T.Tensor([1.0, 0.0])).weights.data
        np.testing.assert_allclose(w, [0.73106, 0.26894], atol=1e-5)

    def test_gradient_reaches_query_encoder_and_keys(self, params, rng):
        keys = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        decision = similarity_merge(params, T.Tensor(rng.normal(size=(2, 6))), keys)
        T.backward(T.tensor_sum(T.mul(decision.weights, T.Tensor(rng.normal(size=(2, 3))))))
        assert keys.grad is not None
        assert params.query_in.weight.grad is not None
        assert params.mlp_in.weight.grad is None

    def test_query_key_width_mismatch(self, params, rng):
        with pytest.raises(ShapeError):
            similarity_merge(params, None, T.Tensor(np.ones((3, 4))), query=T.Tensor(np.ones(2)))


class TestFuse:
    def test_hand_arithmetic(self):
        h = fuse(T.Tensor([0.25, 0.75]), T.Tensor([[0.0, 4.0], [4.0, 0.0]]))
        np.testing.assert_allclose(h.data, [3.0, 1.0])

    def test_one_hot_selects(self, rng):
        outputs = rng.normal(size=(3, 2, 4))
        h = fuse(T.Tensor([0.0, 1.0, 0.0]), T.Tensor(outputs))
        np.testing.assert_array_equal(h.data, outputs[1])

    def test_identical_outputs_are_preserved(self, rng):
        common = rng.normal(size=(2, 4))
        h = fuse(T.Tensor([0.2, 0.5, 0.3]), T.Tensor(np.stack([common] * 3)))
        np.testing.assert_allclose(h.data, common, atol=1e-12)

    def test_batched(self, rng):
        outputs = rng.normal(size=(5, 3, 2, 4))
        w = rng.dirichlet(np.ones(3), size=5)
        h = fuse(T.Tensor(w), T.Tensor(outputs))
        np.testing.assert_allclose(h.data, np.einsum("nm,nmqd->nqd", w, outputs), atol=1e-12)

    def test_projector_count_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(T.Tensor([0.5, 0.5]), T.Tensor(np.ones((3, 4))))


class TestRoute:
    def test_dispatch(self, params, rng):
        b = T.Tensor(rng.normal(size=(2, 6)))
        keys = T.Tensor(rng.normal(size=(2, 3, 4)))
        assert route(params, SOFT_MERGE, b).strategy == SOFT_MERGE
        assert route(params, HARD_SELECT, b, rng=rng).strategy == HARD_SELECT
        assert route(params, SIMILARITY_MERGE, b, keys).strategy == SIMILARITY_MERGE

    def test_unknown_strategy(self, params, rng):
        with pytest.raises(RoutingError):
            route(params, "top_k", T.Tensor(rng.normal(size=(2, 6))))

    def test_similarity_needs_keys(self, params, rng):
        with pytest.raises(RoutingError):
            route(params, SIMILARITY_MERGE, T.Tensor(rng.normal(size=(2, 6))))

    def test_inference_is_noise_free_by_default(self, params, rng):
        b = T.Tensor(rng.normal(size=(8, 6)))
        first = route(params, HARD_SELECT, b, rng=np.random.default_rng(1), training=False)
        second = route(params, HARD_SELECT, b, rng=np.random.default_rng(2), training=False)
        np.testing.assert_array_equal(first.weights.data, second.weights.data)
        np.testing.assert_array_equal(first.noise, np.zeros((8, 3)))

    def test_router_hidden_must_cover_projectors(self, rng):
        with pytest.raises(ShapeError):
            RouterParams(rng, d_brain=6, d_model=4, num_projectors=3, hidden=2)

    def test_single_sample_hard_select_with_noise(self, params, rng):
        decision = route(params, HARD_SELECT, T.Tensor(rng.normal(size=6)), rng=np.random.default_rng(1))
        assert decision.weights.shape == [3]
        assert decision.noise.shape == (3,)
        np.testing.assert_array_equal(np.sort(decision.weights.data), [0.0, 0.0, 1.0])

    @pytest.mark.parametrize("strategy", [SOFT_MERGE, HARD_SELECT, SIMILARITY_MERGE])
    def test_weights_sum_to_one_for_every_strategy(self, params, strategy):
        sampler = np.random.default_rng(11)
        brain = T.Tensor(sampler.normal(scale=3.0, size=(1000, 6)))
        keys = T.Tensor(sampler.normal(size=(1000, 3, 4)))
        with T.no_grad():
            decision = route(params, strategy, brain, keys, rng=sampler)
        w = decision.weights.data
        assert w.shape == (1000, 3)
        assert np.all(w >= 0.0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)


def test_routing_entropy():
    assert routing_entropy(np.full((4, 3), 1.0 / 3.0)) == pytest.approx(np.log(3.0))
    assert routing_entropy(np.tile([1.0, 0.0, 0.0], (4, 1))) == 0.0
