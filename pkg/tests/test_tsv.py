import numpy as np
import pytest

from mergelab.tsv import (
    bundle_tasks,
    equal_blocks_procrustes_error,
    hypothesis_rank_bound,
    layer_svd,
    load_bundle,
    merge_rank,
    procrustes,
    procrustes_error_compare,
    reconstruct,
    save_bundle,
    sti,
    storage_params,
    truncate,
    tsv_compress,
    tsv_merge,
    whiten,
)
from mergelab.weightspace import ArchSpec, TaskVector, WeightSet, flatten, unflatten

ARCH = ArchSpec((4, 6, 3), "relu")


def n_params(arch):
    return sum(
        arch.layer_shape(i)[0] * arch.layer_shape(i)[1] + arch.layer_widths[i]
        for i in range(1, arch.n_layers + 1)
    )


def rand_tau(seed, arch=ARCH, scale=1.0):
    rng = np.random.default_rng(seed)
    return unflatten(arch, scale * rng.standard_normal(n_params(arch)), like=TaskVector)


def rand_ws(seed, arch=ARCH):
    rng = np.random.default_rng(seed)
    return unflatten(arch, rng.standard_normal(n_params(arch)), like=WeightSet)


class TestLayerSvd:
    def test_diagonal_matrix(self):
        u, s, v = layer_svd(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(s, [3.0, 1.0])
        np.testing.assert_allclose(u, np.eye(2))
        np.testing.assert_allclose(v, np.eye(2))

    def test_reconstruction_and_eigen_oracle(self):
        rng = np.random.default_rng(0)
        delta = rng.standard_normal((5, 3))
        u, s, v = layer_svd(delta)
        np.testing.assert_allclose(u @ np.diag(s) @ v.T, delta, atol=1e-10)
        eigs = np.sort(np.linalg.eigvalsh(delta.T @ delta))[::-1]
        np.testing.assert_allclose(s, np.sqrt(np.maximum(eigs, 0)), atol=1e-10)

    def test_rank_one_outer_product(self):
        a = np.array([1.0, 2.0, -2.0])
        b = np.array([3.0, 4.0])
        u, s, v = layer_svd(np.outer(a, b))
        assert np.count_nonzero(s) == 1
        assert abs(s[0] - np.linalg.norm(a) * np.linalg.norm(b)) <= 1e-10

    def test_sign_convention_deterministic(self):
        rng = np.random.default_rng(1)
        delta = rng.standard_normal((6, 4))
        u, s, v = layer_svd(delta)
        for j in range(u.shape[1]):
            idx = int(np.argmax(np.abs(u[:, j])))
            assert u[idx, j] > 0
        u2, s2, v2 = layer_svd(delta.copy())
        assert np.array_equal(u, u2) and np.array_equal(v, v2)


class TestTruncate:
    def test_full_rank_reconstructs_exactly(self):
        tau = rand_tau(2)
        ranks = [min(ARCH.layer_shape(i)) for i in range(1, ARCH.n_layers + 1)]
        bundle = bundle_tasks(ARCH, [tau], ranks)
        back = reconstruct(bundle, 0)
        np.testing.assert_allclose(flatten(back), flatten(tau), atol=1e-9)

    def test_truncation_error_identity(self):
        rng = np.random.default_rng(3)
        delta = rng.standard_normal((6, 6))
        u, s, v = layer_svd(delta)
        for k in (1, 2, 4):
            approx = u[:, :k] @ np.diag(s[:k]) @ v[:, :k].T
            err2 = np.linalg.norm(delta - approx) ** 2
            assert abs(err2 - np.sum(s[k:] ** 2)) <= 1e-9

    def test_truncation_beats_random_rank_k(self):
        rng = np.random.default_rng(4)
        delta = rng.standard_normal((8, 5))
        u, s, v = layer_svd(delta)
        k = 2
        best = np.linalg.norm(delta - u[:, :k] @ np.diag(s[:k]) @ v[:, :k].T)
        for _ in range(200):
            a = rng.standard_normal((8, k))
            b = rng.standard_normal((k, 5))
            assert np.linalg.norm(delta - a @ b) >= best - 1e-12

    def test_out_of_range_rejected(self):
        tau = rand_tau(5)
        bundle = bundle_tasks(ARCH, [tau], [3, 3])
        with pytest.raises(ValueError):
            truncate(bundle, 5)


class TestSti:
    def orth_deltas(self):
        # tasks confined to disjoint coordinate subspaces at every layer
        t1 = [np.zeros((6, 4)), np.zeros((3, 6))]
        t2 = [np.zeros((6, 4)), np.zeros((3, 6))]
        t1[0][0, 0] = 2.0
        t2[0][1, 1] = 1.5
        t1[1][0, 0] = 1.0
        t2[1][1, 1] = 0.5
        return [t1, t2]

    def test_orthogonal_subspaces_zero(self):
        total, per_layer = sti(self.orth_deltas(), k=1)
        assert total <= 1e-10

    def test_collinear_rank_one_hand_value(self):
        u = np.array([1.0, 2.0, 0.5])
        u /= np.linalg.norm(u)
        v = np.array([0.3, -1.0])
        v /= np.linalg.norm(v)
        s1, s2 = 2.0, 0.7
        d1 = [s1 * np.outer(u, v)]
        d2 = [s2 * np.outer(u, -v)]
        total, _ = sti([d1, d2], k=1)
        # gram off-diagonals are +1 (left) and -1 (right); the weighted
        # product has entries (sigma2, sigma1) off the diagonal
        assert abs(total - (s1 + s2)) <= 1e-9

    def test_invariant_to_task_order(self):
        rng = np.random.default_rng(6)
        deltas = [[rng.standard_normal((6, 4)), rng.standard_normal((3, 6))] for _ in range(3)]
        t1, _ = sti(deltas, k=2)
        t2, _ = sti(deltas[::-1], k=2)
        assert abs(t1 - t2) <= 1e-9

    def test_non_negative(self):
        rng = np.random.default_rng(7)
        deltas = [[rng.standard_normal((5, 5))] for _ in range(4)]
        total, per_layer = sti(deltas, k=2)
        assert total >= 0 and all(x >= 0 for x in per_layer)


class TestProcrustesWhiten:
    def test_orthonormal_input_unchanged(self):
        rng = np.random.default_rng(8)
        q, _ = np.linalg.qr(rng.standard_normal((7, 3)))
        np.testing.assert_allclose(procrustes(q), q, atol=1e-10)

    def test_procrustes_equals_whiten(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((6, 3))
        np.testing.assert_allclose(procrustes(x), whiten(x), atol=1e-8)

    def test_output_has_orthonormal_columns(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((8, 4))
        out = procrustes(x)
        np.testing.assert_allclose(out.T @ out, np.eye(4), atol=1e-9)

    def test_equivalence_on_many_random_matrices(self):
        # full column rank, numerically: resample near-singular draws whose
        # conditioning would amplify the whitening eigenvalue floor
        rng = np.random.default_rng(11)
        drawn = 0
        while drawn < 100:
            rows = int(rng.integers(3, 65))
            cols = int(rng.integers(1, min(rows, 32) + 1))
            x = rng.standard_normal((rows, cols))
            sv = np.linalg.svd(x, compute_uv=False)
            if sv[-1] < 1e-2 * sv[0]:
                continue
            drawn += 1
            assert np.linalg.norm(procrustes(x) - whiten(x)) <= 1e-8


class TestTsvMerge:
    def test_single_task_full_rank_reduces_to_task_arithmetic(self):
        pre = rand_ws(12)
        tau = rand_tau(13)
        out = tsv_merge(pre, [tau], alpha=0.9)
        expected = flatten(pre) + 0.9 * flatten(tau)
        np.testing.assert_allclose(flatten(out), expected, atol=1e-9)

    def test_matches_literal_transcription(self):
        # oracle: an independent transcription of the merge recipe
        pre = rand_ws(14)
        taus = [rand_tau(s) for s in (15, 16)]
        alpha = 1.0
        out = tsv_merge(pre, taus, alpha=alpha)

        T = len(taus)
        for li in range(1, ARCH.n_layers + 1):
            k = max(1, min(ARCH.layer_shape(li)) // T)
            us, ss, vs = [], [], []
            for tau in taus:
                u, s, vh = np.linalg.svd(tau.weight(li), full_matrices=False)
                v = vh.T
                for j in range(u.shape[1]):
                    idx = int(np.argmax(np.abs(u[:, j])))
                    if u[idx, j] < 0:
                        u[:, j] *= -1
                        v[:, j] *= -1
                us.append(u[:, :k])
                ss.append(np.diag(s[:k]))
                vs.append(v[:, :k])
            U = np.hstack(us)
            V = np.hstack(vs)
            sigma = np.zeros((T * k, T * k))
            for t in range(T):
                sigma[t * k : (t + 1) * k, t * k : (t + 1) * k] = ss[t]
            pu, _, qu = np.linalg.svd(U, full_matrices=False)
            pv, _, qv = np.linalg.svd(V, full_matrices=False)
            merged = (pu @ qu) @ sigma @ (pv @ qv).T
            np.testing.assert_allclose(
                out.weight(li), pre.weight(li) + alpha * merged, atol=1e-9
            )
            np.testing.assert_allclose(
                out.bias(li),
                pre.bias(li) + (alpha / T) * sum(t.bias(li) for t in taus),
                atol=1e-12,
            )

    def test_duplicated_rank_one_tasks_hand_traceable(self):
        arch = ArchSpec((3, 4), "relu")
        pre = unflatten(arch, np.zeros(16), like=WeightSet)
        a = np.array([2.0, 1.0, -1.0, 0.5])
        b = np.array([1.0, 0.0, -2.0])
        delta = np.outer(a, b)
        tau = TaskVector(arch, ((delta, np.zeros(4)),))
        out = tsv_merge(pre, [tau, tau], alpha=1.0)
        assert np.isfinite(flatten(out)).all()

    def test_merge_rank_satisfies_error_bound_hypothesis_at_scale(self):
        for T in (8, 14, 20):
            for n in (32, 64, 100):
                assert n // T <= hypothesis_rank_bound(T, n)


class TestCompress:
    def test_storage_counts_match_formula(self):
        arch = ArchSpec((6, 6, 6), "relu")
        tau = rand_tau(17, arch)
        bundle = tsv_compress(tau, 2)
        stored = 0
        for row in bundle.triples:
            for u, s, v in row:
                stored += u.size + s.size + v.size
        for per_task in bundle.bias_deltas:
            stored += sum(b.size for b in per_task)
        report = storage_params(arch, 2)
        assert stored == report["params_tsv"]

    def test_reconstruct_error_matches_spectrum(self):
        tau = rand_tau(18)
        k = 2
        bundle = tsv_compress(tau, k)
        back = reconstruct(bundle, 0)
        for li in range(1, ARCH.n_layers + 1):
            _, s, _ = layer_svd(tau.weight(li))
            err2 = np.linalg.norm(tau.weight(li) - back.weight(li)) ** 2
            assert abs(err2 - np.sum(s[k:] ** 2)) <= 1e-9
            np.testing.assert_array_equal(back.bias(li), tau.bias(li))

    def test_unknown_task_id_rejected(self):
        bundle = tsv_compress(rand_tau(19), 1, task_id=5)
        with pytest.raises(KeyError):
            reconstruct(bundle, 0)
        assert reconstruct(bundle, 5) is not None


class TestStorageParams:
    def test_ten_by_ten_example(self):
        arch = ArchSpec((10, 10), "relu", has_bias=False)
        report = storage_params(arch, 1)
        assert report["params_nn"] == 100 + 10
        assert report["params_tsv"] == 10 + 1 + 10 + 10
        assert abs(report["k_bound"] - 100 / 21) <= 1e-12
        assert report["compresses"]

    def test_boundary_rank_does_not_compress(self):
        arch = ArchSpec((10, 10), "relu")
        k = int(np.ceil(100 / 21))
        assert not storage_params(arch, k)["compresses"]

    def test_rank_over_tasks_always_compresses_for_three_plus(self):
        for d in (9, 12, 30):
            arch = ArchSpec((d, d), "relu")
            for T in (3, 4, 8):
                k = max(1, d // T)
                assert storage_params(arch, k)["compresses"]


class TestProcrustesErrorCompare:
    def test_equal_blocks_closed_form(self):
        for T, n in ((5, 8), (9, 6)):
            err = equal_blocks_procrustes_error(T, n, seed=0)
            assert abs(err - np.sqrt(n) * (np.sqrt(T) - 1)) <= 1e-9

    def test_inequality_holds_within_hypothesis(self):
        res = procrustes_error_compare(T=5, n=16, k=1, trials=100, seed=1)
        assert res["theorem_holds"]
        assert all(f >= t - 1e-9 for f, t in zip(res["full_errors"], res["trunc_errors"]))

    def test_small_T_rejected(self):
        with pytest.raises(ValueError):
            procrustes_error_compare(T=4, n=8, k=1, trials=5, seed=0)

    def test_out_of_hypothesis_rank_refused(self):
        with pytest.raises(ValueError, match="hypothesis"):
            procrustes_error_compare(T=5, n=16, k=4, trials=5, seed=0)


class TestBundleIo:
    def test_round_trip(self, tmp_path):
        taus = [rand_tau(s) for s in (20, 21)]
        bundle = bundle_tasks(ARCH, taus, [2, 1], task_ids=(3, 7))
        path = tmp_path / "bundle.mws"
        save_bundle(bundle, path)
        back = load_bundle(path)
        assert back.task_ids == (3, 7)
        assert back.ranks == (2, 1)
        for li in range(ARCH.n_layers):
            for pos in range(2):
                for a, b in zip(back.triples[li][pos], bundle.triples[li][pos]):
                    assert np.array_equal(a, b)

    def test_single_task_bias_names(self, tmp_path):
        from mergelab.weightspace import read_container

        bundle = tsv_compress(rand_tau(22), 1)
        path = tmp_path / "c.mws"
        save_bundle(bundle, path)
        manifest, tensors = read_container(path)
        assert manifest["rank"] == 1 and manifest["tasks"] == 1
        assert "b.L1" in tensors and "b.L2" in tensors
