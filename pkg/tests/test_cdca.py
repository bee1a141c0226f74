import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossimpute.cdca import AlignmentConfig, alignment_loss, discrepancy, total_loss
from crossimpute.data import Domain


class TestAlignmentConfig:
    def test_validation(self):
        AlignmentConfig(tau_l=0.05, tau_h=0.5, mu_align=1.0).validate()
        with pytest.raises(ValueError):
            AlignmentConfig(tau_l=-0.1).validate()
        with pytest.raises(ValueError):
            AlignmentConfig(tau_l=0.5, tau_h=0.5).validate()
        with pytest.raises(ValueError):
            AlignmentConfig(mu_align=-1.0).validate()


class TestDiscrepancy:
    def test_identical_predictions(self):
        eps = torch.randn(2, 3, 4)
        mask = torch.ones(2, 3, 4)
        assert discrepancy(eps, eps.clone(), mask).item() == 0.0

    def test_constant_offset(self):
        eps = torch.randn(2, 3, 4)
        mask = (torch.rand(2, 3, 4) > 0.5).float()
        if mask.sum() == 0:
            mask[0, 0, 0] = 1.0
        d = discrepancy(eps, eps + 0.37, mask)
        assert d.item() == pytest.approx(0.37, abs=1e-6)

    def test_hand_mean(self):
        # differences {0.1, 0.4, 0.1} at three masked positions -> 0.2
        a = torch.tensor([[[0.1, 0.4, 0.1, 99.0]]])
        b = torch.zeros(1, 1, 4)
        mask = torch.tensor([[[1.0, 1.0, 1.0, 0.0]]])
        assert discrepancy(a, b, mask).item() == pytest.approx(0.2)

    def test_swap_invariance(self):
        a = torch.randn(2, 2, 3)
        b = torch.randn(2, 2, 3)
        mask = torch.ones(2, 2, 3)
        assert discrepancy(a, b, mask).item() == pytest.approx(discrepancy(b, a, mask).item())

    def test_empty_mask_rejected(self):
        a = torch.randn(1, 2, 2)
        with pytest.raises(ValueError, match="empty"):
            discrepancy(a, a, torch.zeros(1, 2, 2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            discrepancy(torch.zeros(1, 2, 2), torch.zeros(1, 2, 3), torch.zeros(1, 2, 2))

    def test_per_sample_mode(self):
        a = torch.tensor([[[1.0, 1.0]], [[3.0, 5.0]]])
        b = torch.zeros(2, 1, 2)
        mask = torch.ones(2, 1, 2)
        d = discrepancy(a, b, mask, per_sample=True)
        assert d.tolist() == pytest.approx([1.0, 4.0])


class TestAlignmentLoss:
    CFG = AlignmentConfig(tau_l=0.1, tau_h=0.6, mu_align=1.0)

    def test_below_lower_threshold(self):
        assert alignment_loss(self.CFG.tau_l / 2, self.CFG) == 0.0

    def test_linear_region(self):
        delta = self.CFG.tau_l + 0.3 * self.CFG.tau_h
        assert alignment_loss(delta, self.CFG) == pytest.approx(0.3 * self.CFG.tau_h)

    def test_capped_region(self):
        delta = self.CFG.tau_l + 2.0 * self.CFG.tau_h
        assert alignment_loss(delta, self.CFG) == pytest.approx(self.CFG.tau_h)

    def test_continuity_at_breakpoints(self):
        eps = 1e-13
        low = self.CFG.tau_l
        hi = self.CFG.tau_l + self.CFG.tau_h
        assert abs(alignment_loss(low - eps, self.CFG) - alignment_loss(low + eps, self.CFG)) < 1e-12
        assert abs(alignment_loss(hi - eps, self.CFG) - alignment_loss(hi + eps, self.CFG)) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(a=st.floats(0.0, 10.0), b=st.floats(0.0, 10.0))
    def test_monotone_nondecreasing(self, a, b):
        lo, hi = sorted((a, b))
        assert alignment_loss(lo, self.CFG) <= alignment_loss(hi, self.CFG) + 1e-15

    def test_tensor_gradient_by_region(self):
        for delta_val, expected_grad in [(0.05, 0.0), (0.4, 1.0), (0.9, 0.0)]:
            delta = torch.tensor(delta_val, requires_grad=True)
            alignment_loss(delta, self.CFG).backward()
            assert delta.grad.item() == expected_grad


class TestGradientRouting:
    def test_source_branch_receives_no_alignment_gradient(self):
        from crossimpute.denoiser import ConditionalDenoiser, DenoiserSpec

        spec = DenoiserSpec(channels=4, n_layers=1, n_heads=1, time_emb_dim=8, feat_emb_dim=4, diffusion_emb_dim=8)
        torch.manual_seed(0)
        model = ConditionalDenoiser(spec, n_features=2, n_steps=4)
        with torch.no_grad():
            for p in model.parameters():
                p.uniform_(-0.5, 0.5)
        gen = torch.Generator().manual_seed(3)
        x_cond = torch.randn(2, 2, 3, generator=gen)
        x_noisy = torch.randn(2, 2, 3, generator=gen)
        cond = torch.ones(2, 2, 3)
        mask = torch.ones(2, 2, 3)
        cfg = AlignmentConfig(tau_l=0.0, tau_h=100.0, mu_align=1.0)  # force the linear region

        eps_tgt = model(x_cond, x_noisy, cond, 2, Domain.TARGET)
        with torch.no_grad():
            eps_src = model(x_cond, x_noisy, cond, 2, Domain.SOURCE)
        loss = alignment_loss(discrepancy(eps_tgt, eps_src, mask), cfg)
        loss.backward()

        for p in model.branch_parameters(Domain.SOURCE):
            assert p.grad is None
        target_grads = [p.grad for p in model.branch_parameters(Domain.TARGET)]
        assert any(g is not None and g.abs().sum() > 0 for g in target_grads)

    def test_flat_regions_give_zero_target_gradient(self):
        a = torch.randn(1, 2, 2, requires_grad=True)
        b = a.detach() + 0.01  # delta = 0.01 < tau_l
        cfg = AlignmentConfig(tau_l=0.05, tau_h=0.5, mu_align=1.0)
        loss = alignment_loss(discrepancy(a, b, torch.ones(1, 2, 2)), cfg)
        loss.backward()
        assert torch.all(a.grad == 0)


class TestTotalLoss:
    CFG = AlignmentConfig(tau_l=0.05, tau_h=0.5, mu_align=1.0)

    def test_zero_weight_reduces_to_sum(self):
        cfg = AlignmentConfig(tau_l=0.05, tau_h=0.5, mu_align=0.0)
        assert total_loss(1.0, 2.0, 123.0, cfg) == 3.0

    def test_hand_sum(self):
        assert total_loss(1.0, 2.0, 0.5, self.CFG) == pytest.approx(3.5)

    def test_cap_bound(self):
        l_align = alignment_loss(1e9, self.CFG)
        assert total_loss(1.0, 2.0, l_align, self.CFG) <= 1.0 + 2.0 + self.CFG.mu_align * self.CFG.tau_h

    def test_nonfinite_provenance(self):
        with pytest.raises(FloatingPointError, match="target"):
            total_loss(1.0, float("nan"), 0.0, self.CFG)
        with pytest.raises(FloatingPointError, match="source"):
            total_loss(torch.tensor(float("inf")), torch.tensor(0.0), torch.tensor(0.0), self.CFG)

    def test_torch_tensors(self):
        out = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(0.5), self.CFG)
        assert out.item() == pytest.approx(3.5)
