"""Model construction, parameter accounting, forward contracts, state handling."""

import numpy as np
import numpy.testing as npt
import pytest

import agnet.models as M
import agnet.tensor as T
from agnet.errors import CheckpointError, ShapeError
from agnet.tensor import Tensor


def x_batch(rng, n=2, h=32, w=32):
    return Tensor(rng.standard_normal((n, 1, h, w)))


class TestParamCounts:
    @pytest.mark.parametrize("variant", ["sononet", "ag"])
    @pytest.mark.parametrize("n_base,k", [(4, 6), (8, 14), (2, 3)])
    def test_registry_matches_closed_form(self, variant, n_base, k):
        spec = M.ModelSpec(variant=variant, num_classes=k, n_base=n_base)
        model = M.Model(spec, np.random.default_rng(0))
        assert model.param_count() == M.expected_param_count(spec)

    def test_ft_head_adds_k_by_3k_plus_k(self):
        base = M.ModelSpec(variant="ag", num_classes=6, n_base=4)
        ft = M.ModelSpec(variant="ag", num_classes=6, n_base=4, aggregation="ft")
        assert M.expected_param_count(ft) - M.expected_param_count(base) == 6 * 18 + 6

    def test_reference_configuration_counts(self):
        # 14-way classification at width 8: the small-capacity operating point
        sono = M.build_sononet(14, 8)
        ag = M.build_ag_sononet(14, 8)
        assert sono.param_count() == 161258
        assert ag.param_count() == 174060
        assert ag.param_count() - sono.param_count() == 12802
        # both within 10% of the nominal 0.16M / 0.18M budgets
        assert abs(sono.param_count() - 160_000) / 160_000 < 0.10
        assert abs(ag.param_count() - 180_000) / 180_000 < 0.10


class TestForwardContracts:
    def test_sononet_output_shapes(self, rng):
        model = M.build_sononet(6, 2).train(False)
        out = model(x_batch(rng, 2, 32, 48))
        assert out.logits.shape == (2, 6)
        assert len(out.scale_logits) == 1
        assert out.attention == []
        assert out.cam_features.shape == (2, 6, 2, 3)  # H/16, W/16
        npt.assert_array_equal(out.cam_weights, np.eye(6))

    def test_sononet_logits_are_map_means(self, rng):
        model = M.build_sononet(5, 2).train(False)
        out = model(x_batch(rng))
        npt.assert_allclose(
            out.logits.data, out.cam_features.data.mean(axis=(2, 3)), atol=1e-6
        )

    def test_ag_output_shapes(self, rng):
        model = M.build_ag_sononet(6, 2).train(False)
        out = model(x_batch(rng, 2, 32, 48))
        assert out.logits.shape == (2, 6)
        assert len(out.scale_logits) == 3
        assert out.attention[0].shape == (2, 1, 8, 12)   # H/4 tap
        assert out.attention[1].shape == (2, 1, 4, 6)    # H/8 tap
        assert out.cam_features.shape == (2, 16, 2, 3)   # top block, 8n channels
        assert out.cam_weights.shape == (6, 16)

    def test_ag_attention_maps_sum_to_one(self, rng):
        model = M.build_ag_sononet(6, 2).train(False)
        out = model(x_batch(rng))
        for a in out.attention:
            npt.assert_allclose(a.data.sum(axis=(2, 3)), 1.0, atol=1e-5)

    def test_paper_scale_tap_geometry(self, rng):
        # 208x272 input: gated maps land on 52x68 and 26x34 grids over a 13x17 gate
        model = M.build_ag_sononet(3, 1).train(False)
        out = model(Tensor(rng.standard_normal((1, 1, 208, 272))))
        assert out.attention[0].shape == (1, 1, 52, 68)
        assert out.attention[1].shape == (1, 1, 26, 34)
        assert out.cam_features.shape[2:] == (13, 17)

    def test_input_validation(self, rng):
        model = M.build_sononet(4, 2)
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((2, 3, 32, 32))))   # wrong channel count
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((2, 1, 30, 32))))   # height not /16
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 32, 32))))      # missing batch axis

    def test_eval_forward_is_repeatable(self, rng):
        model = M.build_ag_sononet(4, 2).train(False)
        x = x_batch(rng)
        l1 = model(x).logits.data
        l2 = model(x).logits.data
        npt.assert_array_equal(l1, l2)

    def test_training_forward_updates_running_stats(self, rng):
        model = M.build_sononet(4, 2)
        before = model.state_dict()["features.b1.c1.running_mean"]
        model.train(True)(x_batch(rng))
        after = model.state_dict()["features.b1.c1.running_mean"]
        assert not np.array_equal(before, after)
        model.train(False)(x_batch(rng))
        npt.assert_array_equal(model.state_dict()["features.b1.c1.running_mean"], after)


class TestAggregation:
    def test_mean_aggregation_recovers_average_distribution(self, rng):
        logits = [Tensor(rng.standard_normal((4, 5)) * 3) for _ in range(3)]
        agg = M.aggregate_mean(logits)
        with T.no_grad():
            probs = np.stack([T.softmax(z, axis=-1).data for z in logits]).mean(axis=0)
        npt.assert_allclose(T.softmax(agg, axis=-1).data, probs, atol=1e-6)

    def test_ft_init_equals_mean_aggregation(self, rng):
        mean_model = M.build_ag_sononet(5, 2, seed=7).train(False)
        ft_model = M.build_ag_sononet(5, 2, aggregation="ft", seed=7).train(False)
        x = x_batch(rng)
        p_mean = T.softmax(mean_model(x).logits, axis=-1).data
        p_ft = T.softmax(ft_model(x).logits, axis=-1).data
        npt.assert_array_equal(p_mean.argmax(axis=1), p_ft.argmax(axis=1))
        # ft at averaging init outputs the mean distribution directly
        npt.assert_allclose(ft_model(x).logits.data, p_mean, atol=1e-6)

    def test_with_aggregation_preserves_decision_function(self, rng):
        model = M.build_ag_sononet(4, 2, seed=3).train(False)
        x = x_batch(rng)
        before = T.softmax(model(x).logits, axis=-1).data
        ft = M.with_aggregation(model, "ft")
        assert ft.spec.aggregation == "ft"
        assert not ft.training
        # ft logits at averaging init ARE the mean distribution; predictions match
        npt.assert_allclose(ft(x).logits.data, before, atol=1e-6)
        npt.assert_array_equal(
            ft(x).logits.data.argmax(axis=1), before.argmax(axis=1)
        )

    def test_with_aggregation_carries_running_stats(self, rng):
        model = M.build_ag_sononet(4, 2)
        model.train(True)(x_batch(rng))  # move stats off their init
        ft = M.with_aggregation(model, "ft")
        s0, s1 = model.state_dict(), ft.state_dict()
        for key in s0:
            npt.assert_array_equal(s0[key], s1[key], err_msg=key)


class TestDeterminismAndState:
    def test_same_seed_same_weights(self):
        s0 = M.build_ag_sononet(4, 2, seed=11).state_dict()
        s1 = M.build_ag_sononet(4, 2, seed=11).state_dict()
        for key in s0:
            npt.assert_array_equal(s0[key], s1[key])

    def test_different_seed_different_weights(self):
        a = M.build_sononet(4, 2, seed=0).state_dict()["features.b1.c1.w"]
        b = M.build_sononet(4, 2, seed=1).state_dict()["features.b1.c1.w"]
        assert not np.array_equal(a, b)

    def test_variants_draw_independent_streams(self):
        a = M.build_sononet(4, 2, seed=5).state_dict()["features.b1.c1.w"]
        b = M.build_ag_sononet(4, 2, seed=5).state_dict()["features.b1.c1.w"]
        assert not np.array_equal(a, b)

    def test_state_dict_returns_snapshots(self, rng):
        model = M.build_sononet(4, 2)
        snap = model.state_dict()
        model._params["features.b1.c1.w"].data += 1.0
        assert not np.array_equal(snap["features.b1.c1.w"], model.state_dict()["features.b1.c1.w"])

    def test_roundtrip_restores_forward_bitwise(self, rng):
        model = M.build_ag_sononet(4, 2, seed=2).train(False)
        x = x_batch(rng)
        want = model(x).logits.data.copy()
        state = model.state_dict()
        for t in model._params.values():
            t.data = t.data + 0.1
        model.load_state_dict(state)
        npt.assert_array_equal(model(x).logits.data, want)

    def test_key_mismatch_rejected(self):
        model = M.build_sononet(4, 2)
        state = model.state_dict()
        state.pop("adapt.w")
        with pytest.raises(CheckpointError):
            model.load_state_dict(state)
        state = model.state_dict()
        state["bogus"] = np.zeros(1)
        with pytest.raises(CheckpointError):
            model.load_state_dict(state)

    def test_shape_mismatch_rejected(self):
        small = M.build_sononet(4, 2)
        big = M.build_sononet(4, 4)
        state = {k: big.state_dict()[k] for k in big.state_dict()}
        with pytest.raises(CheckpointError):
            small.load_state_dict(state)

    def test_zero_grad_clears_all(self, rng):
        model = M.build_sononet(4, 2)
        with T.recording() as tape:
            loss = T.tensor_sum(model(x_batch(rng)).logits)
        T.backward(loss, tape)
        assert any(t.grad is not None for t in model._params.values())
        model.zero_grad()
        assert all(t.grad is None for t in model._params.values())


class TestDonorInit:
    def test_copies_extractor_and_stats_only(self, rng):
        donor = M.build_sononet(4, 2, seed=1)
        donor.train(True)(x_batch(rng))  # give the donor non-trivial stats
        ag = M.build_ag_sononet(4, 2, seed=9)
        gate_before = ag._params["gate1.w_f"].data.copy()
        M.init_from_sononet(ag, donor)
        ds, ags = donor.state_dict(), ag.state_dict()
        for key in ags:
            if key.startswith("features."):
                npt.assert_array_equal(ags[key], ds[key], err_msg=key)
        npt.assert_array_equal(ag._params["gate1.w_f"].data, gate_before)


class TestSpecValidation:
    def test_bad_variant(self):
        with pytest.raises(ValueError):
            M.ModelSpec(variant="resnet")

    def test_bad_aggregation(self):
        with pytest.raises(ValueError):
            M.ModelSpec(variant="ag", aggregation="max")

    def test_too_few_classes(self):
        with pytest.raises(ValueError):
            M.ModelSpec(num_classes=1)
