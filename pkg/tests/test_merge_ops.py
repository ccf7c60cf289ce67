import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergelab.merge_ops import (
    MergeRecipe,
    apply_recipe,
    dare,
    recipe_bounds,
    slerp,
    ties_merge,
    weight_average,
)
from mergelab.taskvec import task_vector
from mergelab.weightspace import (
    ArchSpec,
    TaskVector,
    WeightSet,
    combine,
    flatten,
    unflatten,
)

ARCH = ArchSpec((2, 2), "relu")  # 6 parameters: 4 weights + 2 biases


def ws_from_flat(vals):
    return unflatten(ARCH, np.asarray(vals, dtype=float), like=WeightSet)


def tv_from_flat(vals):
    return unflatten(ARCH, np.asarray(vals, dtype=float), like=TaskVector)


def rand_ws(seed, arch=ARCH):
    rng = np.random.default_rng(seed)
    return unflatten(arch, rng.standard_normal(flatten_size(arch)), like=WeightSet)


def flatten_size(arch):
    return sum(
        arch.layer_shape(i)[0] * arch.layer_shape(i)[1] + arch.layer_widths[i]
        for i in range(1, arch.n_layers + 1)
    )


class TestWeightAverage:
    def test_identical_models(self):
        m = rand_ws(0)
        np.testing.assert_allclose(flatten(weight_average([m, m, m])), flatten(m))

    def test_two_models_elementwise_midpoint(self):
        a, b = rand_ws(1), rand_ws(2)
        out = weight_average([a, b])
        np.testing.assert_allclose(out and flatten(out), (flatten(a) + flatten(b)) / 2)

    def test_order_invariant(self):
        ms = [rand_ws(s) for s in (3, 4, 5)]
        o1 = flatten(weight_average(ms))
        o2 = flatten(weight_average(ms[::-1]))
        np.testing.assert_allclose(o1, o2, rtol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            weight_average([])


class TestSlerp:
    def test_endpoints(self):
        a, b = rand_ws(6), rand_ws(7)
        np.testing.assert_allclose(flatten(slerp(a, b, 0.0)), flatten(a), atol=1e-15)
        np.testing.assert_allclose(flatten(slerp(a, b, 1.0)), flatten(b), atol=1e-15)

    def test_orthonormal_midpoint(self):
        a = ws_from_flat([1, 0, 0, 0, 0, 0])
        b = ws_from_flat([0, 1, 0, 0, 0, 0])
        out = slerp(a, b, 0.5)
        np.testing.assert_allclose(
            flatten(out), (flatten(a) + flatten(b)) / np.sqrt(2), atol=1e-12
        )

    def test_collinear_falls_back_to_linear(self):
        a = rand_ws(8)
        b = combine([1.0], [a])  # same direction, same vector
        out = slerp(a, b, 0.3)
        np.testing.assert_allclose(flatten(out), flatten(a), rtol=1e-12)

    def test_norm_preserved_for_equal_norms(self):
        rng = np.random.default_rng(9)
        fa = rng.standard_normal(6)
        fb = rng.standard_normal(6)
        fb = fb / np.linalg.norm(fb) * np.linalg.norm(fa)
        a, b = ws_from_flat(fa), ws_from_flat(fb)
        out = slerp(a, b, 0.37)
        assert abs(np.linalg.norm(flatten(out)) - np.linalg.norm(fa)) <= 1e-9

    def test_zero_norm_rejected(self):
        z = ws_from_flat(np.zeros(6))
        with pytest.raises(ValueError):
            slerp(z, rand_ws(10), 0.5)


class TestTiesMerge:
    def test_single_task_full_keep(self):
        pre = rand_ws(11)
        tau = tv_from_flat([0.5, -2.0, 1.0, 0.0, 3.0, -1.0])
        out = ties_merge(pre, [tau], trim_frac=1.0, lam=0.7)
        np.testing.assert_allclose(
            flatten(out), flatten(pre) + 0.7 * flatten(tau), rtol=1e-15
        )

    def test_sign_tie_zeroes_coordinate(self):
        pre = ws_from_flat(np.zeros(6))
        t1 = tv_from_flat([1.0, 0, 0, 0, 0, 0])
        t2 = tv_from_flat([-1.0, 0, 0, 0, 0, 0])
        out = ties_merge(pre, [t1, t2], trim_frac=1.0, lam=1.0)
        assert flatten(out)[0] == 0.0

    def test_hand_traced_six_coordinates(self):
        pre = ws_from_flat(np.zeros(6))
        t1 = tv_from_flat([3.0, -1.0, 0.5, 2.0, -2.0, 0.1])
        t2 = tv_from_flat([-3.0, -2.0, 1.0, 0.5, -1.0, 0.05])
        # keep top-3 by magnitude: t1 -> idx {0,3,4}; t2 -> idx {0,1,2}
        # votes: 0 tie, - , + , + , - , none
        out = ties_merge(pre, [t1, t2], trim_frac=0.5, lam=0.5)
        np.testing.assert_allclose(
            flatten(out), 0.5 * np.array([0.0, -2.0, 1.0, 2.0, -2.0, 0.0])
        )

    def test_zeroed_count_exact(self):
        rng = np.random.default_rng(12)
        arch = ArchSpec((4, 5, 3), "relu")
        pre = unflatten(arch, np.zeros(flatten_size(arch)), like=WeightSet)
        tau = unflatten(arch, rng.standard_normal(flatten_size(arch)), like=TaskVector)
        for frac in (0.1, 0.33, 0.8):
            out = ties_merge(pre, [tau], trim_frac=frac, lam=1.0)
            p = flatten(tau).size
            kept = int(np.ceil(frac * p))
            assert int(np.count_nonzero(flatten(out))) == kept

    @given(frac=st.floats(0.05, 1.0), lam=st.floats(0.0, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_output_in_scaled_hull_of_agreeing_entries(self, frac, lam):
        rng = np.random.default_rng(13)
        pre = ws_from_flat(np.zeros(6))
        taus = [tv_from_flat(rng.standard_normal(6)) for _ in range(3)]
        out = (flatten(ties_merge(pre, taus, frac, lam)))
        stacked = np.stack([flatten(t) for t in taus])
        for j in range(6):
            lo = min(0.0, stacked[:, j].min()) * max(lam, 1e-12)
            hi = max(0.0, stacked[:, j].max()) * max(lam, 1e-12)
            assert lo - 1e-12 <= out[j] <= hi + 1e-12


class TestDare:
    def test_p_zero_identity(self):
        tau = tv_from_flat(np.random.default_rng(14).standard_normal(6))
        out = dare(tau, 0.0, seed=1)
        assert np.array_equal(flatten(out), flatten(tau))

    def test_same_seed_identical(self):
        tau = tv_from_flat(np.random.default_rng(15).standard_normal(6))
        a, b = dare(tau, 0.5, seed=42), dare(tau, 0.5, seed=42)
        assert np.array_equal(flatten(a), flatten(b))

    def test_monte_carlo_unbiased(self):
        tau = tv_from_flat([2.0, -1.5, 0.0, 0.7, -0.3, 1.1])
        p, n = 0.4, 10_000
        acc = np.zeros(6)
        for s in range(n):
            acc += flatten(dare(tau, p, seed=s))
        mean = acc / n
        vals = flatten(tau)
        stderr = np.abs(vals) * np.sqrt(p / (1 - p)) / np.sqrt(n)
        assert np.all(np.abs(mean - vals) <= 3 * stderr + 1e-12)


class TestApplyRecipe:
    def test_task_arithmetic_zero_lambdas_returns_pre(self):
        pre = rand_ws(16)
        models = [rand_ws(17), rand_ws(18)]
        recipe = MergeRecipe("task_arithmetic", (0.0, 0.0))
        out = apply_recipe(recipe, pre, models)
        np.testing.assert_allclose(flatten(out), flatten(pre), atol=1e-15)

    def test_ties_recipe_matches_direct_call(self):
        pre = rand_ws(19)
        models = [rand_ws(20), rand_ws(21)]
        taus = [task_vector(m, pre) for m in models]
        recipe = MergeRecipe("ties", (0.5, 0.8))
        out = apply_recipe(recipe, pre, models)
        direct = ties_merge(pre, taus, 0.5, 0.8)
        np.testing.assert_array_equal(flatten(out), flatten(direct))

    def test_dare_ta_p_zero_equals_task_arithmetic(self):
        pre = rand_ws(22)
        models = [rand_ws(23), rand_ws(24)]
        out_dare = apply_recipe(MergeRecipe("dare_ta", (0.4, 0.6, 0.0), seed=3), pre, models)
        out_ta = apply_recipe(MergeRecipe("task_arithmetic", (0.4, 0.6)), pre, models)
        np.testing.assert_allclose(flatten(out_dare), flatten(out_ta), rtol=1e-15)

    def test_slerp_requires_two_models(self):
        pre = rand_ws(25)
        with pytest.raises(ValueError):
            apply_recipe(MergeRecipe("slerp", (0.5,)), pre, [rand_ws(26)])

    def test_coefficient_count_validated(self):
        pre = rand_ws(27)
        with pytest.raises(ValueError):
            apply_recipe(MergeRecipe("task_arithmetic", (0.5,)), pre, [rand_ws(28), rand_ws(29)])

    def test_outputs_finite_and_arch_compatible(self):
        pre = rand_ws(30)
        models = [rand_ws(31), rand_ws(32)]
        for recipe in (
            MergeRecipe("average"),
            MergeRecipe("task_arithmetic", (0.3, 0.9)),
            MergeRecipe("slerp", (0.4,)),
            MergeRecipe("ties", (0.6, 0.5)),
            MergeRecipe("dare_ta", (0.3, 0.9, 0.5), seed=1),
            MergeRecipe("dare_ties", (0.6, 0.5, 0.5), seed=2),
        ):
            out = apply_recipe(recipe, pre, models)
            assert out.arch == ARCH
            assert np.isfinite(flatten(out)).all()


class TestMergeRecipe:
    def test_json_round_trip(self):
        r = MergeRecipe("dare_ties", (0.5, 0.5, 0.3), seed=7)
        assert MergeRecipe.from_json_dict(r.to_json_dict()) == r

    def test_seed_required_for_stochastic(self):
        with pytest.raises(ValueError):
            MergeRecipe("dare_ta", (0.5, 0.5, 0.3))

    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            MergeRecipe("task_arithmetic", (1.5,))
        with pytest.raises(ValueError):
            MergeRecipe("dare_ties", (0.5, 0.5, 0.999), seed=1)

    def test_recipe_bounds_shapes(self):
        assert recipe_bounds("task_arithmetic", 3) == [(0.0, 1.0)] * 3
        assert recipe_bounds("dare_ta", 2) == [(0.0, 1.0), (0.0, 1.0), (0.0, 0.99)]
