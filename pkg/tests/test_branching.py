import numpy as np
import pytest

from taskfuse import tensor as T
from taskfuse.branching import (
    TASK_NAMES,
    Affine,
    BranchMLPParams,
    LinearBank,
    ModulatorParams,
    TaskPrior,
    drmlp_forward_train,
    drmlp_fuse,
    fuse_bank,
    fused_mlp_forward,
    init_branch_mlp,
    task_prior,
    tsm_weights,
    weight_similarity,
)
from taskfuse.tensor import ContractError, DimensionError, Tensor, finite_diff_check


def t(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=grad)


def rel_err(a, b):
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    return np.abs(a - b).max() / (np.abs(b).max() + 1e-8)


class TestTaskPrior:
    def test_known_names_map_to_stable_slots(self):
        for i, name in enumerate(TASK_NAMES):
            p = task_prior(name)
            assert p.index == i
            assert p.z.data.sum() == 1.0

    def test_rejects_unknown_task(self):
        with pytest.raises(ContractError):
            task_prior("sharpen")

    def test_rejects_non_one_hot(self):
        with pytest.raises(ContractError):
            TaskPrior(z=t([0.5, 0.5, 0.0]), task_name="x")
        with pytest.raises(ContractError):
            TaskPrior(z=t([1.0, 1.0, 0.0]), task_name="x")


class TestModulatorWeights:
    def test_zero_init_final_layer_gives_uniform(self):
        rng = np.random.default_rng(0)
        p = init_branch_mlp(rng, channels=4, expansion=2, bank_sizes=(4, 2), num_tasks=6)
        w1, w2 = tsm_weights(task_prior("derain"), p)
        np.testing.assert_allclose(w1.data, 0.25)
        np.testing.assert_allclose(w2.data, 0.5)

    def test_weights_on_simplex_after_perturbation(self):
        rng = np.random.default_rng(1)
        p = init_branch_mlp(rng, 4, 2, (4, 4), 6)
        for head in (p.modulator.bank1, p.modulator.bank2):
            head[1].weight.data[:] = rng.standard_normal(head[1].weight.shape)
        for name in TASK_NAMES:
            w1, w2 = tsm_weights(task_prior(name), p)
            for w in (w1, w2):
                assert (w.data >= 0).all()
                assert abs(float(w.data.sum(dtype=np.float64)) - 1.0) <= 1e-6

    def test_distinct_priors_give_distinct_weights(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            p = init_branch_mlp(rng, 4, 2, (4, 4), 6)
            for head in (p.modulator.bank1, p.modulator.bank2):
                head[1].weight.data[:] = rng.standard_normal(head[1].weight.shape)
            w1a, _ = tsm_weights(task_prior("denoise"), p)
            w1b, _ = tsm_weights(task_prior("dehaze"), p)
            if not np.allclose(w1a.data, w1b.data):
                hits += 1
        assert hits == 100

    def test_size_one_bank_weight_is_constant_one(self):
        rng = np.random.default_rng(2)
        p = init_branch_mlp(rng, 4, 2, (1, 1), 6)
        assert p.modulator.bank1 is None and p.modulator.bank2 is None
        w1, w2 = tsm_weights(task_prior("blind"), p)
        np.testing.assert_array_equal(w1.data, [1.0])
        np.testing.assert_array_equal(w2.data, [1.0])


class TestTrainForward:
    def test_degenerate_single_branch_is_plain_mlp(self):
        rng = np.random.default_rng(3)
        p = init_branch_mlp(rng, 3, 2, (1, 1), 6)
        x = t(rng.standard_normal((5, 3)))
        one = t([1.0])
        y = drmlp_forward_train(x, p, one, one)
        h = T.gelu(T.linear(x, p.bank1.branches[0].weight, p.bank1.branches[0].bias))
        ref = T.linear(h, p.bank2.branches[0].weight, p.bank2.branches[0].bias)
        np.testing.assert_allclose(y.data, ref.data)

    def test_identical_branches_make_weights_irrelevant(self):
        rng = np.random.default_rng(4)
        p = init_branch_mlp(rng, 3, 2, (2, 2), 6)
        for bank in (p.bank1, p.bank2):
            src = bank.branches[0]
            for br in bank.branches[1:]:
                br.weight.data[:] = src.weight.data
                br.bias.data[:] = src.bias.data
        x = t(rng.standard_normal((4, 3)))
        ya = drmlp_forward_train(x, p, t([0.1, 0.9]), t([0.7, 0.3]))
        yb = drmlp_forward_train(x, p, t([0.5, 0.5]), t([0.2, 0.8]))
        assert rel_err(ya.data, yb.data) <= 1e-6

    def test_inner_mixture_matches_direct_evaluation(self):
        rng = np.random.default_rng(5)
        p = init_branch_mlp(rng, 3, 2, (2, 1), 6)
        x = t(rng.standard_normal((4, 3)))
        w1 = t([0.25, 0.75])
        mixed = T.weighted_sum(
            [T.linear(x, br.weight, br.bias) for br in p.bank1.branches], w1
        )
        a = T.linear(x, p.bank1.branches[0].weight, p.bank1.branches[0].bias)
        b = T.linear(x, p.bank1.branches[1].weight, p.bank1.branches[1].bias)
        np.testing.assert_allclose(
            mixed.data, 0.25 * a.data + 0.75 * b.data, atol=1e-6
        )

    def test_weight_length_mismatch(self):
        rng = np.random.default_rng(6)
        p = init_branch_mlp(rng, 3, 2, (2, 2), 6)
        with pytest.raises(DimensionError):
            drmlp_forward_train(t(np.zeros(3)), p, t([1.0]), t([0.5, 0.5]))


class TestFusion:
    def test_one_hot_weight_selects_branch(self):
        rng = np.random.default_rng(7)
        bank = LinearBank(
            [Affine(t(rng.standard_normal((3, 2))), t(rng.standard_normal(3))) for _ in range(3)]
        )
        fused = fuse_bank(bank, t([0.0, 1.0, 0.0]))
        np.testing.assert_array_equal(fused.weight.data, bank.branches[1].weight.data)
        np.testing.assert_array_equal(fused.bias.data, bank.branches[1].bias.data)

    def test_two_branch_hand_example(self):
        bank = LinearBank(
            [Affine(t([[1.0]]), t([0.0])), Affine(t([[3.0]]), t([1.0]))]
        )
        w = t([0.25, 0.75])
        fused = fuse_bank(bank, w)
        np.testing.assert_allclose(fused.weight.data, [[2.5]])
        np.testing.assert_allclose(fused.bias.data, [0.75])
        x = t([2.0])
        via_fused = T.linear(x, fused.weight, fused.bias).data
        via_train = T.weighted_sum(
            [T.linear(x, br.weight, br.bias) for br in bank.branches], w
        ).data
        np.testing.assert_allclose(via_fused, [5.75], atol=1e-6)
        np.testing.assert_allclose(via_train, [5.75], atol=1e-6)

    def test_fusion_linear_in_weights(self):
        rng = np.random.default_rng(8)
        bank = LinearBank(
            [Affine(t(rng.standard_normal((2, 2))), t(rng.standard_normal(2))) for _ in range(2)]
        )
        base = fuse_bank(bank, t([0.5, 0.5]))
        bumped = fuse_bank(bank, t([0.5 + 0.25, 0.5]))
        np.testing.assert_allclose(
            bumped.weight.data - base.weight.data,
            0.25 * bank.branches[0].weight.data,
            atol=1e-6,
        )

    def test_length_mismatch(self):
        bank = LinearBank([Affine(t([[1.0]]), t([0.0]))])
        with pytest.raises(DimensionError):
            fuse_bank(bank, t([0.5, 0.5]))

    def test_fusion_equivalence_over_random_configurations(self):
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            C = int(rng.choice([4, 8, 16]))
            n1 = int(rng.choice([1, 2, 4]))
            n2 = int(rng.choice([1, 2, 4]))
            p = init_branch_mlp(rng, C, 2, (n1, n2), 6)
            for head in (p.modulator.bank1, p.modulator.bank2):
                if head is not None:
                    head[1].weight.data[:] = rng.standard_normal(head[1].weight.shape)
            prior = task_prior(TASK_NAMES[int(rng.integers(0, 6))])
            x = t(rng.standard_normal((6, C)))
            w1, w2 = tsm_weights(prior, p)
            y_train = drmlp_forward_train(x, p, w1, w2)
            y_fused = fused_mlp_forward(x, drmlp_fuse(p, prior))
            worst = max(worst, rel_err(y_train.data, y_fused.data))
        assert worst <= 1e-5

    def test_degenerate_bank_fuses_to_original(self):
        rng = np.random.default_rng(9)
        p = init_branch_mlp(rng, 4, 2, (1, 1), 6)
        fused = drmlp_fuse(p, task_prior("denoise"))
        np.testing.assert_array_equal(fused.fc1.weight.data, p.bank1.branches[0].weight.data)
        np.testing.assert_array_equal(fused.fc2.weight.data, p.bank2.branches[0].weight.data)

    def test_fused_op_count_independent_of_k_and_n(self):
        rng = np.random.default_rng(10)
        x = t(rng.standard_normal((4, 8)))
        counts = set()
        for n, k in (((1, 1), 6), ((2, 4), 6), ((4, 4), 6), ((4, 4), 3)):
            p = init_branch_mlp(np.random.default_rng(0), 8, 2, n, k)
            fused = drmlp_fuse(p, task_prior("denoise", num_tasks=k))
            before = T.op_count()
            fused_mlp_forward(x, fused)
            counts.add(T.op_count() - before)
        assert len(counts) == 1

    def test_convex_hull_per_entry(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            p = init_branch_mlp(rng, 4, 2, (4, 4), 6)
            for head in (p.modulator.bank1, p.modulator.bank2):
                head[1].weight.data[:] = rng.standard_normal(head[1].weight.shape)
            prior = task_prior("derain")
            fused = drmlp_fuse(p, prior)
            stack = np.stack([br.weight.data for br in p.bank1.branches])
            lo, hi = stack.min(axis=0), stack.max(axis=0)
            eps = 1e-6
            assert (fused.fc1.weight.data >= lo - eps).all()
            assert (fused.fc1.weight.data <= hi + eps).all()


class TestGradients:
    def test_train_path_gradients(self):
        rng = np.random.default_rng(11)
        p = init_branch_mlp(rng, 3, 2, (2, 2), 6)
        prior = task_prior("dehaze")
        x = t(rng.standard_normal((2, 3)), grad=True)
        head1a = p.modulator.bank1[0]
        inputs = [
            x,
            p.bank1.branches[0].weight,
            p.bank1.branches[1].bias,
            p.bank2.branches[0].weight,
            head1a.weight,
            p.modulator.bank1[1].weight,
        ]

        def probe(x_, bw0, bb1, cw0, hw, hw2):
            w1, w2 = tsm_weights(prior, p)
            y = drmlp_forward_train(x_, p, w1, w2)
            return T.mean_all(T.mul(y, y))

        assert finite_diff_check(probe, inputs) <= 1e-3


class TestWeightSimilarity:
    def _fusions(self, perturb):
        rng = np.random.default_rng(12)
        p = init_branch_mlp(rng, 4, 2, (4, 4), 6)
        if perturb:
            for head in (p.modulator.bank1, p.modulator.bank2):
                head[1].weight.data[:] = rng.standard_normal(head[1].weight.shape)
        return p, [drmlp_fuse(p, task_prior(n)) for n in TASK_NAMES]

    def test_same_prior_twice_is_exactly_one(self):
        p, _ = self._fusions(perturb=True)
        pair = [drmlp_fuse(p, task_prior("deblur")), drmlp_fuse(p, task_prior("deblur"))]
        sim = weight_similarity(pair, bank=1)
        assert sim[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self):
        _, fused = self._fusions(perturb=True)
        sim = weight_similarity(fused, bank=2)
        np.testing.assert_allclose(sim, sim.T, atol=1e-6)
        np.testing.assert_allclose(np.diag(sim), 1.0)

    def test_uniform_modulator_gives_all_ones(self):
        _, fused = self._fusions(perturb=False)
        for bank in (1, 2):
            sim = weight_similarity(fused, bank)
            np.testing.assert_allclose(sim, 1.0, atol=1e-12)

    def test_zero_norm_flagged(self):
        from taskfuse.branching import FusedAffine, FusedMLP

        zero = FusedMLP(
            fc1=FusedAffine(t(np.zeros((2, 2))), t(np.zeros(2))),
            fc2=FusedAffine(t(np.ones((2, 2))), t(np.zeros(2))),
        )
        live = FusedMLP(
            fc1=FusedAffine(t(np.ones((2, 2))), t(np.zeros(2))),
            fc2=FusedAffine(t(np.ones((2, 2))), t(np.zeros(2))),
        )
        sim = weight_similarity([zero, live], bank=1)
        assert np.isnan(sim[0, 0]) and np.isnan(sim[0, 1])
        assert sim[1, 1] == 1.0
