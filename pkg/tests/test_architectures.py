"""Builders, parameter accounting, and forward contracts for all four kinds."""

import numpy as np
import pytest

from retinaforge.architectures import (
    ArchitectureSpec,
    build_itermiunet,
    build_iternet,
    build_miunet,
    build_model,
    build_unet,
    count_parameters,
    default_spec,
    structure,
)
from retinaforge.engine import ParamStore
from retinaforge.errors import ConfigError, ShapeError

TABLE_BUDGETS = {"unet": 7.8e6, "miunet": 0.069e6, "iternet": 8e6, "itermiunet": 0.15e6}


def double_conv_params(c_in, c_out):
    return 9 * c_in * c_out + c_out + 9 * c_out * c_out + c_out


class TestCountParameters:
    def test_single_conv_1_to_32(self):
        store = ParamStore()
        store.add("w", np.zeros((3, 3, 1, 32), np.float32))
        store.add("b", np.zeros(32, np.float32))
        assert count_parameters(store) == 9 * 1 * 32 + 32 == 320

    def test_conv1x1_32_to_1(self):
        store = ParamStore()
        store.add("w", np.zeros((1, 1, 32, 1), np.float32))
        store.add("b", np.zeros(1, np.float32))
        assert count_parameters(store) == 33

    def test_empty_store(self):
        assert count_parameters(ParamStore()) == 0


class TestDefaultBudgets:
    def test_unet_exact_closed_form(self):
        model = build_unet(default_spec("unet"))
        # closed-form ladder sum for encoder [32,64,128,256] + bottleneck 512
        expect = (
            double_conv_params(1, 32)
            + double_conv_params(32, 64)
            + double_conv_params(64, 128)
            + double_conv_params(128, 256)
            + double_conv_params(256, 512)
            + sum(
                (4 * a * b + b) + double_conv_params(2 * b, b)
                for a, b in [(512, 256), (256, 128), (128, 64), (64, 32)]
            )
            + 32 * 1 + 1
        )
        assert count_parameters(model) == expect == 7_759_521

    @pytest.mark.parametrize("kind", sorted(TABLE_BUDGETS))
    def test_within_15_percent_of_published(self, kind):
        count = count_parameters(build_model(default_spec(kind)))
        target = TABLE_BUDGETS[kind]
        assert abs(count - target) <= 0.15 * target

    def test_strict_ordering(self):
        counts = {k: count_parameters(build_model(default_spec(k))) for k in TABLE_BUDGETS}
        assert counts["miunet"] < counts["itermiunet"] < counts["unet"] < counts["iternet"]

    def test_headline_ratio_under_one_fiftieth(self):
        mini = count_parameters(build_model(default_spec("itermiunet")))
        big = count_parameters(build_model(default_spec("iternet")))
        assert mini * 50 < big

    def test_perturbing_any_scalar_changes_output(self):
        # counted parameters are all live: visible to the forward map.
        # all-positive weights (row sums normalized) and inputs make the
        # network a strictly monotone map, so the check exercises the wiring
        # rather than whether init luck left a relu dead
        spec = ArchitectureSpec("itermiunet", (4, 2, 2), (2, 2), 2)
        model = build_model(spec, seed=0)
        for name, tensor in model.store.items():
            if name.endswith(".b"):
                tensor.data[...] = 0.05
            else:
                w = np.abs(tensor.data)
                w /= max(1e-9, w.sum(axis=(0, 1, 2)).max())
                tensor.data[...] = 1.2 * w
        x = np.random.default_rng(0).random((1, 8, 8, 1)).astype(np.float32) + 0.25

        def outputs():
            res = model.forward(x)
            # the forward contract exposes the maps and the feature taps
            return np.concatenate(
                [m.data.ravel() for m in res.maps]
                + [t.data.ravel() for t in res.feature_taps]
            )

        base = outputs()
        touched = 0
        for name, tensor in model.store.items():
            flat = tensor.data.ravel()
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + 0.35
                out = outputs()
                flat[i] = old
                assert not np.array_equal(out, base), f"{name}[{i}] is dead"
                touched += 1
        assert touched == count_parameters(model)


class TestSpecValidation:
    def test_increasing_ladder_rejected_for_miunet(self):
        with pytest.raises(ConfigError):
            ArchitectureSpec("miunet", (8, 16, 32), (), 1)

    def test_decreasing_ladder_rejected_for_unet(self):
        with pytest.raises(ConfigError):
            ArchitectureSpec("unet", (32, 16, 8), (), 1)

    def test_iterative_kinds_need_n_at_least_two(self):
        with pytest.raises(ConfigError):
            ArchitectureSpec("iternet", (32, 64, 128), (32, 32), 1)

    def test_plain_kinds_fixed_at_one_output(self):
        with pytest.raises(ConfigError):
            ArchitectureSpec("unet", (32, 64), (), 2)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            default_spec("resnet")

    def test_builders_check_kind(self):
        with pytest.raises(ConfigError):
            build_miunet(default_spec("unet"))


class TestForward:
    def test_output_shape_and_range(self):
        model = build_unet(default_spec("unet"), seed=1)
        out = model.forward(np.random.default_rng(0).random((2, 48, 48, 1)).astype(np.float32))
        assert len(out.maps) == 1
        assert out.maps[0].data.shape == (2, 48, 48, 1)
        assert (out.maps[0].data > 0).all() and (out.maps[0].data < 1).all()

    def test_itermiunet_four_maps(self):
        model = build_itermiunet(default_spec("itermiunet"), seed=2)
        out = model.forward(np.random.default_rng(1).random((1, 48, 48, 1)).astype(np.float32))
        assert len(out.maps) == 4
        assert all(m.data.shape == (1, 48, 48, 1) for m in out.maps)

    @pytest.mark.parametrize("kind", sorted(TABLE_BUDGETS))
    def test_iteration_count_matches_spec(self, kind):
        spec = default_spec(kind)
        model = build_model(spec, seed=0)
        out = model.forward(np.zeros((1, 48, 48, 1), np.float32))
        assert len(out.maps) == spec.iterations

    def test_eval_forward_bit_identical(self):
        model = build_iternet(default_spec("iternet"), seed=3)
        x = np.random.default_rng(2).random((1, 48, 48, 1)).astype(np.float32)
        a = model.forward(x).prediction.data
        b = model.forward(x).prediction.data
        assert np.array_equal(a, b)

    def test_other_divisible_size(self):
        model = build_itermiunet(default_spec("itermiunet"), seed=0)
        out = model.forward(np.zeros((1, 64, 80, 1), np.float32))
        assert out.prediction.data.shape == (1, 64, 80, 1)

    def test_indivisible_size_instructs_padding(self):
        model = build_miunet(default_spec("miunet"), seed=0)
        with pytest.raises(ShapeError) as exc:
            model.forward(np.zeros((1, 50, 48, 1), np.float32))
        assert "pad" in str(exc.value)

    def test_same_seed_same_weights(self):
        a = build_model(default_spec("itermiunet"), seed=11)
        b = build_model(default_spec("itermiunet"), seed=11)
        for (na, ta), (nb, tb) in zip(a.store.items(), b.store.items()):
            assert na == nb and np.array_equal(ta.data, tb.data)


class TestWiring:
    def test_base_output_independent_of_minis(self):
        # map 1 comes from the base alone: equal base weights => equal map
        unet = build_unet(default_spec("unet"), seed=5)
        iternet = build_iternet(default_spec("iternet"), seed=6)
        values = {name: t.data.copy() for name, t in unet.store.items()}
        iternet.store.set_values(values | {
            name: t.data for name, t in iternet.store.items() if not name.startswith("base.")
        })
        x = np.random.default_rng(3).random((1, 48, 48, 1)).astype(np.float32)
        assert np.array_equal(
            unet.forward(x).maps[0].data, iternet.forward(x).maps[0].data
        )

    def test_depth_isomorphism(self):
        assert structure(default_spec("unet")) == structure(default_spec("miunet"))
        assert structure(default_spec("iternet")) == structure(default_spec("itermiunet"))
        assert structure(default_spec("unet")) != structure(default_spec("iternet"))

    def test_feature_taps_are_32_channels(self):
        model = build_itermiunet(default_spec("itermiunet"), seed=0)
        out = model.forward(np.zeros((1, 48, 48, 1), np.float32))
        assert out.low_level.data.shape[-1] == 32
        assert all(t.data.shape[-1] == 32 for t in out.feature_taps)
