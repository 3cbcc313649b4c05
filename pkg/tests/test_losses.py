import numpy as np
import pytest

from atlasseg.errors import DataError, NumericalError, UsageError
from atlasseg.graph import Graph
from atlasseg.losses import (LossWeights, attach_cc_loss, attach_grad_loss,
                             attach_ls_loss, attach_variant_loss,
                             attach_wgrad_loss, combined_loss, loss_cc,
                             loss_grad, loss_ls, loss_wgrad, variant_terms)
from atlasseg.warp import DeformationField, field_gradient


class TestLossCC:
    def test_perfect_correlation(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(size=(4, 4, 4))
        assert loss_cc(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_perfect_anticorrelation(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(4, 4, 4))
        assert loss_cc(-a + 3.0, a) == pytest.approx(1.0, abs=1e-12)

    def test_matches_pearson_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            w = rng.uniform(size=(4, 4, 4))
            a = rng.uniform(size=(4, 4, 4))
            r = np.corrcoef(w.ravel(), a.ravel())[0, 1]
            assert loss_cc(w, a) == pytest.approx(0.5 - 0.5 * r, abs=1e-12)

    def test_affine_invariance(self):
        rng = np.random.default_rng(3)
        w = rng.uniform(size=(5, 5, 5))
        a = rng.uniform(size=(5, 5, 5))
        base = loss_cc(w, a)
        assert abs(loss_cc(2.5 * w + 1.0, a) - base) <= 1e-10
        assert abs(loss_cc(w, 0.3 * a - 7.0) - base) <= 1e-10

    def test_zero_variance_errors(self):
        with pytest.raises(NumericalError):
            loss_cc(np.ones((3, 3, 3)), np.random.default_rng(0).uniform(size=(3, 3, 3)))


def make_field(disp):
    return DeformationField(np.asarray(disp, dtype=np.float64), (1.0, 1.0, 1.0))


class TestLossGrad:
    def test_zero_field(self):
        jac = field_gradient(make_field(np.zeros((3, 4, 4, 4))))
        assert loss_grad(jac) == 0.0

    def test_linear_field_closed_form(self):
        c = 0.4
        n = 6
        disp = np.zeros((3, n, n, n))
        disp[0] = c * np.arange(n)[:, None, None]
        jac = field_gradient(make_field(disp))
        # forward differences give c at n-1 of n positions along x
        expected = (n - 1) / n * c * c
        assert loss_grad(jac) == pytest.approx(expected, rel=1e-12)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(4)
        disp = rng.uniform(-1, 1, (3, 5, 5, 5))
        jac = field_gradient(make_field(disp))
        total = 0.0
        for c in range(3):
            for axis in range(3):
                d = np.diff(disp[c], axis=axis)
                total += (d * d).sum()
        assert loss_grad(jac) == pytest.approx(total / 125.0, rel=1e-12)


class TestLossWGrad:
    def test_unit_weights_reduce_to_grad_over_three(self):
        rng = np.random.default_rng(5)
        disp = rng.uniform(-1, 1, (3, 5, 5, 5))
        jac = field_gradient(make_field(disp))
        w = np.ones((5, 5, 5))
        assert loss_wgrad(jac, w) == pytest.approx(loss_grad(jac) / 3.0, rel=1e-12)

    def test_zero_field(self):
        jac = field_gradient(make_field(np.zeros((3, 4, 4, 4))))
        assert loss_wgrad(jac, np.full((4, 4, 4), 0.7)) == 0.0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(6)
        disp = rng.uniform(-1, 1, (3, 4, 4, 4))
        w = rng.uniform(0.5, 1.0, (4, 4, 4))
        jac = field_gradient(make_field(disp))
        total = 0.0
        for c in range(3):
            for axis in range(3):
                total += (w * w * jac[c, axis] ** 2).sum()
        assert loss_wgrad(jac, w) == pytest.approx(total / (3 * 64), rel=1e-12)


class TestLossLS:
    def test_constant_image(self):
        mask = np.zeros((3, 3, 3))
        mask[1] = 1
        stats = loss_ls(np.full((3, 3, 3), 2.5), mask)
        assert stats.mu_int == stats.mu_ext == 2.5
        assert stats.loss == 0.0

    def test_mask_as_intensities(self):
        mask = np.zeros((4, 4, 4))
        mask[:2] = 1
        stats = loss_ls(mask.copy(), mask)
        assert stats.mu_int == 1.0
        assert stats.mu_ext == 0.0
        assert stats.loss == 0.0

    def test_worked_four_voxel_example(self):
        warped = np.array([0.9, 0.8, 0.1, 0.2]).reshape(1, 1, 4)
        mask = np.array([1.0, 1.0, 0.0, 0.0]).reshape(1, 1, 4)
        stats = loss_ls(warped, mask)
        assert stats.mu_int == pytest.approx(0.85, abs=1e-15)
        assert stats.mu_ext == pytest.approx(0.15, abs=1e-15)
        assert stats.var_int == pytest.approx(0.0025, abs=1e-15)
        assert stats.var_ext == pytest.approx(0.0025, abs=1e-15)
        assert stats.loss == pytest.approx(0.005, abs=1e-12)

    def test_shift_invariance_and_quadratic_scaling(self):
        rng = np.random.default_rng(7)
        w = rng.uniform(size=(4, 4, 4))
        mask = (rng.uniform(size=(4, 4, 4)) < 0.5).astype(float)
        mask.flat[0], mask.flat[1] = 1.0, 0.0
        base = loss_ls(w, mask).loss
        assert loss_ls(w + 5.0, mask).loss == pytest.approx(base, rel=1e-10)
        assert loss_ls(3.0 * w, mask).loss == pytest.approx(9.0 * base, rel=1e-10)

    def test_empty_region_errors(self):
        with pytest.raises(DataError):
            loss_ls(np.ones((2, 2, 2)), np.ones((2, 2, 2)))
        with pytest.raises(DataError):
            loss_ls(np.ones((2, 2, 2)), np.zeros((2, 2, 2)))


class TestCombinedLoss:
    def test_all_zero(self):
        out = combined_loss({"cc": 0.0, "wgrad": 0.0, "ls": 0.0}, LossWeights(), "new")
        assert out.total == 0.0

    def test_new_weighted_sum(self):
        out = combined_loss({"cc": 0.2, "wgrad": 0.1, "ls": 0.4}, LossWeights(), "new")
        assert out.total == pytest.approx(0.5, abs=1e-15)

    def test_vxm_weighted_sum(self):
        out = combined_loss({"cc": 0.3, "grad": 0.2}, LossWeights(), "vxm")
        assert out.total == pytest.approx(0.5, abs=1e-15)

    def test_dataset_variants_fixed_coefficients(self):
        values = {"cc": 0.3, "grad": 0.7, "wgrad": 0.2, "ls": 0.8}
        # published coefficients: cc + wgrad + 0.5 ls, or cc + grad + 0.5 ls
        weird = LossWeights(w_cc=9.0, w_grad=9.0, w_wgrad=9.0, w_ls=9.0)
        assert combined_loss(values, weird, "iac").total == pytest.approx(0.3 + 0.2 + 0.4)
        assert combined_loss(values, weird, "hkits21").total == pytest.approx(0.3 + 0.2 + 0.4)
        assert combined_loss(values, weird, "segthor").total == pytest.approx(0.3 + 0.7 + 0.4)

    def test_missing_term_errors(self):
        with pytest.raises(UsageError):
            combined_loss({"cc": 0.1}, LossWeights(), "segthor")

    def test_unknown_variant(self):
        with pytest.raises(UsageError):
            variant_terms("banana", LossWeights())

    def test_default_weights_match_published_table(self):
        w = LossWeights()
        assert (w.w_cc, w.w_grad, w.w_wgrad, w.w_ls) == (1.0, 1.0, 1.0, 0.5)

    def test_breakdown_total_is_weighted_sum(self):
        rng = np.random.default_rng(8)
        for variant in ("vxm", "new", "iac", "segthor", "hkits21"):
            w = LossWeights(*rng.uniform(0.1, 2.0, size=4))
            values = {t: float(v) for t, v in
                      zip(("cc", "grad", "wgrad", "ls"), rng.uniform(0, 1, 4))}
            out = combined_loss(values, w, variant)
            expected = sum(c * values[t] for t, c in variant_terms(variant, w).items())
            assert out.total == pytest.approx(expected, abs=1e-12)


class TestGraphEquivalence:
    """Graph fragments must match the standalone evaluators."""

    def _setup(self, seed, dims=(8, 8, 8)):
        rng = np.random.default_rng(seed)
        target = rng.uniform(size=dims)
        atlas = rng.uniform(size=dims)
        mask = (rng.uniform(size=dims) < 0.4).astype(float)
        mask.flat[0], mask.flat[1] = 1.0, 0.0
        weights = rng.uniform(0.5, 1.0, size=dims)
        disp = rng.uniform(-1.0, 1.0, size=(3, *dims))
        return target, atlas, mask, weights, disp

    def test_graph_values_match_references(self):
        from atlasseg.warp import warp_volume
        from atlasseg.volume import Volume
        for seed in range(100):
            target, atlas, mask, weights, disp = self._setup(seed)
            dims = target.shape
            g = Graph()
            d = g.input("disp", (3, *dims))
            vol = g.const(target.reshape(1, *dims))
            warped_node = g.grid_sample(vol, d)
            cc = attach_cc_loss(g, warped_node, atlas)
            gr = attach_grad_loss(g, d)
            wg = attach_wgrad_loss(g, d, weights)
            ls = attach_ls_loss(g, warped_node, mask)
            g.bind(d, disp)
            g.forward()

            f = DeformationField(disp, (1, 1, 1))
            warped = warp_volume(Volume(target, (1, 1, 1)), f).data
            jac = field_gradient(f)
            assert float(cc.value) == pytest.approx(loss_cc(warped, atlas), rel=1e-10)
            assert float(gr.value) == pytest.approx(loss_grad(jac), rel=1e-10)
            assert float(wg.value) == pytest.approx(loss_wgrad(jac, weights), rel=1e-10)
            assert float(ls.value) == pytest.approx(loss_ls(warped, mask).loss, rel=1e-10)

    def test_variant_totals_match_weighted_sums(self):
        target, atlas, mask, weights, disp = self._setup(12345)
        dims = target.shape
        lw = LossWeights(w_cc=1.3, w_grad=0.8, w_wgrad=0.6, w_ls=0.9)
        for variant in ("vxm", "new", "iac", "segthor", "hkits21"):
            g = Graph()
            d = g.input("disp", (3, *dims))
            vol = g.const(target.reshape(1, *dims))
            warped_node = g.grid_sample(vol, d)
            total, terms = attach_variant_loss(g, warped_node, d, atlas, mask,
                                               weights, lw, variant)
            g.bind(d, disp)
            g.forward()
            expected = sum(c * float(terms[t].value)
                           for t, c in variant_terms(variant, lw).items())
            assert float(total.value) == pytest.approx(expected, rel=1e-12)

    def test_perfect_alignment_is_cc_optimum(self):
        rng = np.random.default_rng(9)
        dims = (6, 6, 6)
        atlas = rng.uniform(size=dims)
        g = Graph()
        d = g.input("disp", (3, *dims))
        vol = g.const(atlas.reshape(1, *dims))
        warped_node = g.grid_sample(vol, d)
        cc = attach_cc_loss(g, warped_node, atlas)
        g.bind(d, np.zeros((3, *dims)))
        g.forward()
        assert float(cc.value) == pytest.approx(0.0, abs=1e-12)
        # any other probe field cannot go below 0 (r <= 1)
        for seed in range(5):
            g.bind(d, np.random.default_rng(seed).uniform(-1, 1, (3, *dims)))
            g.forward()
            assert float(cc.value) >= -1e-12


class TestLossGradientChecks:
    def test_all_loss_gradients_match_reference_fd(self):
        from atlasseg.gradcheck import check_loss_gradients
        for result in check_loss_gradients(seed=0):
            assert result.ok, f"{result.name}: {result.max_rel_err} > {result.tol}"
