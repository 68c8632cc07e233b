from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgrl.data import Dataset
from pgrl.nn import Model, ModelConfig
from pgrl.transport import (ConsistencySplit, build_prototypes, lcv_split,
                            naive_cosine_label, pseudo_label, sinkhorn_assign,
                            sinkhorn_from_scores, sinkhorn_many)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --- independent oracles -----------------------------------------------------

def entropic_2x2_oracle(eps, grid=200001):
    """Maximize 2q + eps*H over the one-parameter 2x2 transport polytope
    Q = [[q, 1-q], [1-q, q]] by brute force over a fine grid of q."""
    q = np.linspace(1e-12, 1 - 1e-12, grid)
    ent = -2 * (q * np.log(q) + (1 - q) * np.log(1 - q))
    obj = 2 * q + eps * ent
    return q[np.argmax(obj)]


def balanced_assignments(n, k):
    """All hard assignments with exactly n/k samples per class (the vertices
    of the transport polytope with these integral marginals)."""
    base = tuple(np.repeat(np.arange(k), n // k))
    return [np.array(p) for p in sorted(set(permutations(base)))]


def lp_unique_argmax(scores, margin=1e-6):
    """Exact LP maximizer over the polytope via vertex enumeration, or None
    when the optimum is not unique (within margin)."""
    n, k = scores.shape
    best, second, arg = -np.inf, -np.inf, None
    for assign in balanced_assignments(n, k):
        val = scores[np.arange(n), assign].sum()
        if val > best:
            best, second, arg = val, best, assign
        elif val > second:
            second = val
    if best - second < margin:
        return None
    return arg


class TestSinkhorn:
    def test_zero_scores_give_uniform(self):
        Q = sinkhorn_from_scores(np.zeros((6, 3)), epsilon=0.05)
        assert np.abs(Q - 1.0 / 3.0).max() < 1e-9

    def test_identity_scores_small_epsilon_matches_lp(self):
        # oracle first: the 1-dof brute force puts essentially all mass on the
        # diagonal, so the expected assignment is the identity within 1e-3
        assert entropic_2x2_oracle(0.01) > 0.999
        Q = sinkhorn_from_scores(np.array([[1.0, 0.0], [0.0, 1.0]]), epsilon=0.01)
        assert np.abs(Q - np.eye(2)).max() < 1e-3

    def test_feasibility_on_random_instance(self, rng):
        n, k = 37, 5
        Q = sinkhorn_from_scores(rng.uniform(-1, 1, (n, k)), epsilon=0.05)
        assert np.abs(Q.sum(axis=1) - 1.0).max() < 1e-6
        assert np.abs(Q.sum(axis=0) - n / k).max() < 1e-4
        assert (Q >= 0).all()

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(2, 40), k=st.integers(2, 8),
           eps=st.sampled_from([0.01, 0.05, 1.0]), seed=st.integers(0, 10_000))
    def test_feasibility_property(self, n, k, eps, seed):
        scores = np.random.default_rng(seed).uniform(-1, 1, (n, k))
        Q = sinkhorn_from_scores(scores, epsilon=eps)
        assert np.abs(Q.sum(axis=1) - 1.0).max() < 1e-6
        assert np.abs(Q.sum(axis=0) - n / k).max() < 1e-4
        assert Q.min() >= 0

    def test_entropy_nondecreasing_in_epsilon(self, rng):
        scores = rng.uniform(-1, 1, (20, 4))
        ents = []
        for eps in (0.01, 0.05, 0.2, 1.0, 5.0):
            Q = sinkhorn_from_scores(scores, epsilon=eps)
            ents.append(-(Q * np.log(np.maximum(Q, 1e-300))).sum())
        assert all(a <= b + 1e-9 for a, b in zip(ents, ents[1:]))

    def test_large_epsilon_near_uniform(self, rng):
        # scores small relative to epsilon: the exact optimum itself deviates
        # from uniform by ~range/(2*k*eps), so full-range scores cannot meet
        # 1e-2 at eps=10 for k=2 no matter the solver
        n, k = 30, 4
        Q = sinkhorn_from_scores(rng.uniform(-0.15, 0.15, (n, k)), epsilon=10.0)
        assert np.abs(Q - 1.0 / k).max() < 1e-2

    def test_matches_lp_vertex_oracle_small_instances(self, rng):
        checked = matched = 0
        for _ in range(40):
            k = int(rng.integers(2, 4))
            n = k * int(rng.integers(1, 3))
            scores = rng.uniform(-1, 1, (n, k))
            arg = lp_unique_argmax(scores)
            if arg is None:
                continue
            Q = sinkhorn_from_scores(scores, epsilon=0.01)
            checked += 1
            matched += int(np.array_equal(Q.argmax(axis=1), arg))
        assert checked >= 20
        assert matched / checked >= 0.95

    def test_custom_column_marginals(self, rng):
        n, k = 12, 3
        col = np.array([6.0, 4.0, 2.0])
        Q = sinkhorn_from_scores(rng.uniform(-1, 1, (n, k)), epsilon=0.1,
                                 col_marginals=col)
        assert np.abs(Q.sum(axis=0) - col).max() < 1e-4

    def test_bad_marginals_rejected(self, rng):
        scores = rng.uniform(-1, 1, (6, 2))
        with pytest.raises(ValueError):
            sinkhorn_from_scores(scores, col_marginals=np.array([1.0, 1.0]))

    def test_nonpositive_epsilon_rejected(self):
        with pytest.raises(ValueError):
            sinkhorn_from_scores(np.zeros((2, 2)), epsilon=0.0)

    def test_nonconvergence_warns_not_fatal(self, rng):
        scores = rng.uniform(-1, 1, (40, 4))
        with pytest.warns(UserWarning, match="did not converge"):
            Q = sinkhorn_from_scores(scores, epsilon=0.01, max_iters=2)
        assert Q.shape == (40, 4)

    def test_extreme_scores_no_overflow(self):
        scores = np.array([[800.0, -800.0], [-800.0, 800.0]])
        Q = sinkhorn_from_scores(scores, epsilon=0.05)
        assert np.isfinite(Q).all()
        assert np.abs(Q - np.eye(2)).max() < 1e-6

    def test_many_matches_single(self, rng):
        # joint solve stops when the slowest view converges, so the faster
        # views get extra iterations; agreement is at the tolerance scale
        stack = rng.uniform(-1, 1, (3, 10, 4))
        Qs = sinkhorn_many(stack, epsilon=0.05)
        for v in range(3):
            single = sinkhorn_from_scores(stack[v], epsilon=0.05)
            assert np.abs(Qs[v] - single).max() < 1e-5

    def test_assign_requires_unit_rows(self, rng):
        protos = unit_rows(rng, 3, 8)
        with pytest.raises(ValueError):
            sinkhorn_assign(rng.normal(size=(5, 8)) * 3.0, protos)

    def test_assign_from_sphere_vectors(self, rng):
        S = unit_rows(rng, 9, 8)
        C = unit_rows(rng, 3, 8)
        Q = sinkhorn_assign(S, C, epsilon=0.05)
        ref = sinkhorn_from_scores(S @ C.T, epsilon=0.05)
        assert np.array_equal(Q, ref)


class TestPrototypes:
    def _val_set(self, k=3, per_class=4, seed=0):
        from pgrl.data import gen_synthetic
        return gen_synthetic(per_class, k, 16, seed=seed)

    def test_single_sample_prototype_is_its_sphere_vector(self, small_model):
        val = self._val_set(per_class=1)
        protos = build_prototypes(small_model, val)
        sphere = small_model.forward(val.x)[1]
        for j in range(3):
            assert np.abs(protos[j] - sphere[val.y == j][0]).max() < 1e-9

    def test_duplicated_samples_same_prototype(self, small_model):
        val = self._val_set(per_class=2)
        protos = build_prototypes(small_model, val)
        dup = Dataset(np.vstack([val.x, val.x]), np.hstack([val.y, val.y]),
                      np.hstack([val.flags, val.flags]),
                      np.hstack([val.original_label, val.original_label]), val.k)
        protos_dup = build_prototypes(small_model, dup)
        assert np.abs(protos - protos_dup).max() < 1e-9

    def test_rows_unit_norm(self, small_model):
        protos = build_prototypes(small_model, self._val_set(per_class=5))
        assert np.abs(np.linalg.norm(protos, axis=1) - 1.0).max() < 1e-12

    def test_empty_class_rejected(self, small_model):
        val = self._val_set(k=3, per_class=2)
        val = Dataset(val.x[val.y < 2], val.y[val.y < 2], val.flags[val.y < 2],
                      val.original_label[val.y < 2], k=3)
        with pytest.raises(ValueError):
            build_prototypes(small_model, val)


class TestPseudoLabel:
    def test_argmax_without_votes(self):
        Q = np.array([[0.1, 0.7, 0.2], [0.5, 0.2, 0.3]])
        assert np.array_equal(pseudo_label(Q), [1, 0])

    def test_majority_voting(self):
        # votes per view for one sample: 2, 2, 0, 2, 1, 2 -> majority 2
        def onehot(j, k=3):
            m = np.zeros((1, k))
            m[0, j] = 1.0
            return m

        votes = [onehot(j) for j in (2, 2, 0, 2, 1, 2)]
        assert pseudo_label(votes=votes) == np.array([2])

    def test_tie_breaks_to_lowest_class(self):
        def onehot(j, k=3):
            m = np.zeros((1, k))
            m[0, j] = 1.0
            return m

        votes = [onehot(j) for j in (2, 0, 2, 0, 2, 0)]  # 3-3 between 0 and 2
        assert pseudo_label(votes=votes) == np.array([0])


class TestLcvSplit:
    def test_all_consistent(self):
        split = lcv_split(np.array([0, 1, 2]), np.array([0, 1, 2]))
        assert split.untrusted.size == 0
        assert np.array_equal(split.trusted, [0, 1, 2])

    def test_all_inconsistent(self):
        split = lcv_split(np.array([1, 2, 0]), np.array([0, 1, 2]))
        assert split.trusted.size == 0

    def test_partition_covers_batch(self):
        p = np.array([0, 1, 1, 2, 0])
        y = np.array([0, 2, 1, 2, 1])
        split = lcv_split(p, y)
        assert len(split.trusted) + len(split.untrusted) == 5
        assert not set(split.trusted) & set(split.untrusted)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            lcv_split(np.array([0, 1]), np.array([0]))


class TestNaiveCosine:
    def test_exact_prototype_match(self, rng):
        C = unit_rows(rng, 3, 8)
        assert np.array_equal(naive_cosine_label(C, C), [0, 1, 2])

    def test_collapse_to_single_prototype(self, rng):
        C = unit_rows(rng, 3, 8)
        S = C[0] + 0.05 * rng.normal(size=(10, 8))
        S /= np.linalg.norm(S, axis=1, keepdims=True)
        assert (naive_cosine_label(S, C) == 0).all()

    def test_antipodal_two_class(self, rng):
        C = unit_rows(rng, 2, 8)
        S = -C  # antipodal to each prototype
        p = naive_cosine_label(S, C)
        # -c_0 is maximally far from c_0, so it cannot label as class 0
        assert p[0] != 0 and p[1] != 1
