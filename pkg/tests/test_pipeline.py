"""End-to-end transmission pipeline: planning, normalization, losses, and
the feedback/no-feedback invariants."""

import math

import numpy as np
import pytest
import torch

from hjscc import channel as chan
from hjscc import rate_match as rm
from hjscc.config import RateConfig
from hjscc.codec import prefix_mask
from hjscc.pipeline import (
    MSE_SCALE,
    PSNR_CAP_DB,
    HJSCCModel,
    loss_feedback,
    loss_no_feedback,
    mse_255,
    normalize_per_image,
    plan_tensors,
    psnr,
)

from conftest import DYADIC_ALPHAS, dyadic_array, micro_model_config


class TestPlanTensors:
    """The torch plan must agree exactly with the numpy reference path."""

    @pytest.mark.parametrize("hw,patch", [
        ((8, 8), (2, 2)),
        ((5, 7), (2, 2)),
        ((6, 6), (2, 3)),
        ((9, 4), (4, 4)),
        ((7, 5), (3, 2)),
        ((8, 8), (1, 1)),
    ])
    def test_exact_match_with_reference(self, rng, hw, patch):
        c = 8
        options = torch.tensor(rm.default_option_set(c), dtype=torch.float64)
        for alpha in DYADIC_ALPHAS:
            nlp_np = dyadic_array(rng, (2, c) + hw, max_units=2 ** 14)
            nlp = torch.from_numpy(nlp_np)
            plan = plan_tensors(nlp, alpha, options, patch)
            for b in range(2):
                real = rm.lengths_from_prior(nlp_np[b], alpha)
                merged = rm.group_lengths(real, patch)
                quant = rm.quantize_length_map(merged, options.numpy(), c)
                masks = rm.masks_from_lengths(quant, c)
                np.testing.assert_array_equal(plan.real[b].numpy(), real)
                np.testing.assert_array_equal(plan.merged[b].numpy(), merged)
                np.testing.assert_array_equal(plan.quantized[b].numpy(), quant)
                np.testing.assert_array_equal(plan.masks[b].numpy(), masks)

    def test_rejects_bad_alpha(self):
        options = torch.tensor([0.0, 4.0, 8.0], dtype=torch.float64)
        with pytest.raises(ValueError, match="alpha"):
            plan_tensors(torch.zeros(1, 8, 4, 4), 0.0, options, (2, 2))

    def test_no_gradient_through_plan(self):
        options = torch.tensor(rm.default_option_set(4), dtype=torch.float64)
        nlp = torch.rand(1, 4, 4, 4, requires_grad=True) + 0.1
        plan = plan_tensors(nlp, 1.0, options, (2, 2))
        assert not plan.real.requires_grad
        assert not plan.masks.requires_grad


class TestNormalizePerImage:
    def test_agrees_with_single_image_op(self, torch_gen):
        r = torch.randn(5, 4, 6, 6, generator=torch_gen, dtype=torch.float64)
        mask = (torch.rand(5, 4, 6, 6, generator=torch_gen) > 0.4).double()
        mask[3] = 0  # one degenerate image in the batch
        out = normalize_per_image(r, mask, 1.0)
        for b in range(5):
            want, _ = chan.power_normalize(r[b], mask[b], 1.0)
            assert torch.equal(out[b], want)

    def test_mean_square_is_power(self, torch_gen):
        for power in (1.0, 2.5):
            r = torch.randn(3, 4, 8, 8, generator=torch_gen, dtype=torch.float64)
            mask = (torch.rand(3, 4, 8, 8, generator=torch_gen) > 0.5).double()
            out = normalize_per_image(r, mask, power)
            for b in range(3):
                live = mask[b].bool()
                assert float((out[b][live] ** 2).mean()) == pytest.approx(power, rel=1e-12)

    def test_masked_positions_zero(self, torch_gen):
        r = torch.randn(2, 4, 4, 4, generator=torch_gen)
        mask = (torch.rand(2, 4, 4, 4, generator=torch_gen) > 0.5).float()
        out = normalize_per_image(r, mask, 1.0)
        assert torch.equal(out[mask == 0], torch.zeros_like(out[mask == 0]))


class TestDistortionAndPsnr:
    def test_mse_255_exact_dyadic(self):
        x = torch.tensor([[[[0.5]]], [[[0.25]]]]).expand(2, 3, 1, 1)
        y = torch.zeros(2, 3, 1, 1)
        got = mse_255(x, y)
        assert float(got[0]) == 0.25 * MSE_SCALE
        assert float(got[1]) == 0.0625 * MSE_SCALE

    def test_psnr_cap_when_identical(self):
        x = torch.rand(2, 3, 4, 4)
        assert torch.equal(psnr(x, x), torch.full((2,), PSNR_CAP_DB))

    def test_psnr_known_values(self):
        x = torch.zeros(1, 3, 4, 4)
        y = torch.full((1, 3, 4, 4), 0.1)  # mse 0.01 -> 20 dB
        assert float(psnr(x, y)) == pytest.approx(20.0, abs=1e-5)
        y = torch.full((1, 3, 4, 4), 1.0 / 255.0)  # one 8-bit step everywhere
        assert float(psnr(x, y)) == pytest.approx(20 * math.log10(255.0), abs=1e-4)

    def test_shape_contract(self):
        with pytest.raises(ValueError, match="shape"):
            mse_255(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))
        with pytest.raises(ValueError, match="shape"):
            psnr(torch.zeros(1, 3, 4, 4), torch.zeros(2, 3, 4, 4))


class TestLosses:
    def test_no_feedback_arithmetic(self):
        as64 = lambda v: torch.tensor(v, dtype=torch.float64)
        total = loss_no_feedback(as64(5.0), as64(0.015), as64(0.005), 64.0, 1.0)
        assert float(total) == pytest.approx(6.28, abs=1e-12)
        total = loss_no_feedback(as64(10.0), as64(1.0), as64(2.0), 0.5, 2.0)
        assert float(total) == pytest.approx(2.0 * 10.0 + 0.5 * 3.0)

    def test_no_feedback_validation(self):
        one = torch.tensor(1.0)
        with pytest.raises(ValueError, match="rate_nats"):
            loss_no_feedback(torch.tensor(-1.0), one, one, 1.0, 1.0)
        with pytest.raises(ValueError, match="d_compress"):
            loss_no_feedback(one, torch.tensor(-1.0), one, 1.0, 1.0)
        with pytest.raises(ValueError, match="non-negative"):
            loss_no_feedback(one, one, one, -1.0, 1.0)

    def test_feedback_arithmetic(self):
        total = loss_feedback(torch.tensor(3.0), torch.tensor(0.5), 8.0)
        assert float(total) == pytest.approx(3.0 + 4.0)
        # beta shifts reported rates only, never the optimized total
        with_beta = loss_feedback(torch.tensor(3.0), torch.tensor(0.5), 8.0, beta=4.0)
        assert float(with_beta) == float(total)

    def test_gradient_weights_are_the_multipliers(self):
        rate = torch.tensor(2.0, requires_grad=True)
        d1 = torch.tensor(0.3, requires_grad=True)
        d2 = torch.tensor(0.4, requires_grad=True)
        loss_no_feedback(rate, d1, d2, lam=16.0, alpha=0.5).backward()
        assert float(rate.grad) == 0.5
        assert float(d1.grad) == 16.0
        assert float(d2.grad) == 16.0


@pytest.fixture
def micro_pipeline():
    torch.manual_seed(5)
    return HJSCCModel(micro_model_config(), RateConfig(patch=(2, 2)))


def _image(torch_gen, batch=2, hw=16):
    return torch.rand(batch, 3, hw, hw, generator=torch_gen)


class TestForwardNoFeedback:
    def test_shapes_and_ranges(self, micro_pipeline, torch_gen):
        x = _image(torch_gen)
        spec = chan.ChannelSpec(snr_db=10.0)
        with torch.no_grad():
            x_hat, x_hat_h, breakdown, report = micro_pipeline.forward_no_feedback(
                x, spec, alpha=1.0, lam=16.0, phase="eval", rng=torch_gen
            )
        assert x_hat.shape == x.shape and x_hat_h.shape == x.shape
        assert 0.0 <= float(x_hat.min()) and float(x_hat.max()) <= 1.0
        assert float(breakdown.rate_term) > 0
        assert report.psnr_db.shape == (2,)
        assert report.source_n == 3 * 16 * 16

    def test_report_bookkeeping(self, micro_pipeline, torch_gen):
        x = _image(torch_gen)
        spec = chan.ChannelSpec(snr_db=0.0)
        with torch.no_grad():
            _, _, _, report = micro_pipeline.forward_no_feedback(
                x, spec, alpha=1.0, lam=16.0, phase="eval", rng=torch_gen,
                keep_symbols=True,
            )
        # payload counts complex symbols: unmasked reals / 2
        total_reals = sum(f.mask.sum(dim=(1, 2, 3)) for f in report.symbol_frames)
        assert torch.equal(report.payload_complex, total_reals / 2)
        assert torch.allclose(report.cbr_total, report.cbr_payload + report.cbr_side)
        # side information charged at the 0 dB capacity of 1 bit/symbol
        want_side = 0.0
        for f, bits in zip(report.symbol_frames, micro_pipeline.side_bits):
            groups = rm.num_groups(tuple(f.mask.shape[-2:]), (2, 2))
            want_side += rm.side_info_overhead(groups, bits, 1.0)
        assert report.side_info_symbols == pytest.approx(want_side)

    def test_side_info_free_when_noiseless(self, micro_pipeline, torch_gen):
        x = _image(torch_gen)
        spec = chan.ChannelSpec(snr_db="noiseless")
        with torch.no_grad():
            _, _, _, report = micro_pipeline.forward_no_feedback(
                x, spec, alpha=1.0, lam=16.0, phase="eval", rng=torch_gen
            )
        assert report.side_info_symbols == 0.0
        assert report.symbol_frames is None

    def test_symbol_frame_invariants(self, micro_pipeline, torch_gen):
        x = _image(torch_gen)
        spec = chan.ChannelSpec(snr_db=5.0, power=2.0)
        with torch.no_grad():
            _, _, _, report = micro_pipeline.forward_no_feedback(
                x, spec, alpha=4.0, lam=16.0, phase="eval", rng=torch_gen,
                keep_symbols=True,
            )
        for f in report.symbol_frames:
            c = f.s.shape[1]
            assert torch.equal(f.mask, prefix_mask(f.lengths, c, dtype=f.mask.dtype))
            off = f.mask == 0
            assert torch.equal(f.s[off], torch.zeros_like(f.s[off]))
            assert torch.equal(f.s_tilde[off], torch.zeros_like(f.s_tilde[off]))
            for b in range(f.s.shape[0]):
                live = f.mask[b].bool()
                if live.any() and float((f.s[b][live] ** 2).sum()) > 0:
                    ms = float((f.s[b][live] ** 2).mean())
                    assert ms == pytest.approx(2.0, rel=1e-4)

    def test_noiseless_eval_is_rng_free(self, micro_pipeline, torch_gen):
        x = _image(torch_gen)
        spec = chan.ChannelSpec(snr_db="noiseless")
        with torch.no_grad():
            a = micro_pipeline.forward_no_feedback(
                x, spec, 1.0, 16.0, phase="eval",
                rng=torch.Generator().manual_seed(1))[1]
            b = micro_pipeline.forward_no_feedback(
                x, spec, 1.0, 16.0, phase="eval",
                rng=torch.Generator().manual_seed(999))[1]
        assert torch.equal(a, b)

    def test_alpha_moves_bandwidth(self, micro_pipeline, torch_gen):
        x = _image(torch_gen)
        spec = chan.ChannelSpec(snr_db="noiseless")
        payloads = []
        with torch.no_grad():
            for alpha in (0.25, 4.0):
                _, _, _, report = micro_pipeline.forward_no_feedback(
                    x, spec, alpha, 16.0, phase="eval", rng=torch_gen
                )
                payloads.append(float(report.payload_complex.sum()))
        assert payloads[0] < payloads[1]


class TestFeedbackInvariants:
    def test_noiseless_consistency_with_no_feedback_path(self, micro_pipeline, torch_gen):
        """With both links noiseless and conditioning withheld, the sequential
        variant must reproduce the one-shot variant bit for bit."""
        x = _image(torch_gen)
        spec = chan.ChannelSpec(snr_db="noiseless", feedback_snr_db="noiseless")
        with torch.no_grad():
            _, x_hat_h_plain, _, _ = micro_pipeline.forward_no_feedback(
                x, spec, 1.0, 16.0, phase="eval"
            )
            x_hat_h_fb, _, _ = micro_pipeline.forward_feedback(
                x, spec, 1.0, 16.0, phase="eval", condition_on_feedback=False
            )
        assert torch.equal(x_hat_h_plain, x_hat_h_fb)

    def test_conditioning_feels_channel_tamper(self, micro_pipeline, torch_gen):
        """Corrupting phase-0 symbols must change what phase 1 transmits when
        the transmitter conditions on feedback, and must not when it runs
        open loop."""
        x = _image(torch_gen)
        spec = chan.ChannelSpec(snr_db="noiseless", feedback_snr_db="noiseless")

        def tamper(level, s_tilde, mask):
            if level == 0:
                return s_tilde + 0.5 * mask
            return s_tilde

        outs = {}
        for conditioned in (True, False):
            with torch.no_grad():
                _, _, rep_clean = micro_pipeline.forward_feedback(
                    x, spec, 1.0, 16.0, phase="eval",
                    condition_on_feedback=conditioned, keep_symbols=True)
                _, _, rep_tamper = micro_pipeline.forward_feedback(
                    x, spec, 1.0, 16.0, phase="eval",
                    condition_on_feedback=conditioned,
                    post_channel_hook=tamper, keep_symbols=True)
            outs[conditioned] = (rep_clean, rep_tamper)

        clean, tampered = outs[True]
        assert not torch.equal(clean.symbol_frames[1].s, tampered.symbol_frames[1].s)
        clean, tampered = outs[False]
        assert torch.equal(clean.symbol_frames[1].s, tampered.symbol_frames[1].s)
        # the receiver state is corrupted either way
        assert not torch.equal(clean.psnr_db, tampered.psnr_db)

    def test_feedback_beta_only_shifts_reported_rate(self, micro_pipeline, torch_gen):
        x = _image(torch_gen)
        spec = chan.ChannelSpec(snr_db="noiseless", feedback_snr_db="noiseless")
        with torch.no_grad():
            _, bd1, rep1 = micro_pipeline.forward_feedback(
                x, spec, 1.0, 16.0, beta=1.0, phase="eval")
            _, bd2, rep2 = micro_pipeline.forward_feedback(
                x, spec, 1.0, 16.0, beta=4.0, phase="eval")
        assert torch.equal(bd1.total, bd2.total)
        shift = micro_pipeline.cfg.num_levels * math.log(4.0)
        assert torch.allclose(rep2.rate_nats, rep1.rate_nats - shift)

    def test_channel_sampling_term_has_zero_gradient(self, micro_pipeline, torch_gen):
        """The transmit noise enters as s_tilde = s + n with n independent of
        the parameters, so the -log q(s_tilde | s) penalty is quadratic in a
        graph constant: its gradient is exactly zero, and it is rightly
        absent from the optimized loss."""
        x = _image(torch_gen, batch=1)
        spec = chan.ChannelSpec(snr_db=5.0)
        micro_pipeline.zero_grad()
        _, _, report = micro_pipeline.forward_feedback(
            x, spec, 1.0, 16.0, phase="train",
            rng=torch.Generator().manual_seed(3), keep_symbols=True)
        q_term = torch.zeros(())
        for f in report.symbol_frames:
            assert f.s.requires_grad and f.s_tilde.requires_grad
            q_term = q_term + ((f.s_tilde - f.s) / spec.sigma_sq ** 0.5).pow(2).sum()
        q_term.backward()
        grads = [p.grad for p in micro_pipeline.parameters() if p.grad is not None]
        assert len(grads) > 0
        assert all(int(torch.count_nonzero(g)) == 0 for g in grads)


def test_train_phase_backward_reaches_all_heads(micro_pipeline, torch_gen):
    x = _image(torch_gen, batch=1)
    spec = chan.ChannelSpec(snr_db=10.0)
    micro_pipeline.zero_grad()
    _, _, breakdown, _ = micro_pipeline.forward_no_feedback(
        x, spec, alpha=0.5, lam=16.0, phase="train", rng=torch_gen
    )
    breakdown.total.backward()
    touched = sum(
        1 for p in micro_pipeline.parameters()
        if p.grad is not None and float(p.grad.abs().sum()) > 0
    )
    total = sum(1 for _ in micro_pipeline.parameters())
    assert touched / total > 0.9
