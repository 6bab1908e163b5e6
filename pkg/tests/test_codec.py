"""Per-level encoder/decoder: masking discipline and rate modulation."""

import pytest
import torch

from hjscc.codec import LayerDecoder, LayerEncoder, RateAttention, prefix_mask

from conftest import micro_model_config


class TestPrefixMask:
    def test_matches_loop_oracle(self, torch_gen):
        c = 6
        lengths = torch.randint(0, c + 1, (3, 4, 5), generator=torch_gen)
        mask = prefix_mask(lengths, c)
        for b in range(3):
            for i in range(4):
                for j in range(5):
                    L = int(lengths[b, i, j])
                    col = mask[b, :, i, j]
                    assert torch.equal(col[:L], torch.ones(L))
                    assert torch.equal(col[L:], torch.zeros(c - L))

    def test_popcount(self, torch_gen):
        c = 8
        lengths = torch.randint(0, c + 1, (2, 6, 6), generator=torch_gen)
        mask = prefix_mask(lengths, c)
        assert torch.equal(mask.sum(dim=1), lengths.to(mask.dtype))

    def test_contract(self):
        with pytest.raises(ValueError, match="B, H, W"):
            prefix_mask(torch.zeros(4, 4, dtype=torch.long), 4)
        with pytest.raises(ValueError, match="lie in"):
            prefix_mask(torch.full((1, 2, 2), 5, dtype=torch.long), 4)
        with pytest.raises(ValueError, match="lie in"):
            prefix_mask(torch.full((1, 2, 2), -1, dtype=torch.long), 4)

    def test_dtype_follows_request(self):
        lengths = torch.tensor([[[2]]])
        assert prefix_mask(lengths, 4).dtype == torch.float32
        assert prefix_mask(lengths, 4, dtype=torch.float64).dtype == torch.float64


class TestRateAttention:
    def test_identity_at_init(self, torch_gen):
        attn = RateAttention(dim=8, max_length=4)
        feats = torch.randn(2, 8, 5, 5, generator=torch_gen)
        real = torch.randint(0, 5, (2, 5, 5), generator=torch_gen)
        merged = torch.randint(0, 5, (2, 5, 5), generator=torch_gen)
        out = attn(feats, real, merged)
        assert torch.equal(out, feats)

    def test_lengths_become_live_after_perturbation(self, torch_gen):
        torch.manual_seed(0)
        attn = RateAttention(dim=8, max_length=4)
        with torch.no_grad():
            for p in attn.parameters():
                p.add_(torch.randn(p.shape, generator=torch_gen) * 0.1)
        feats = torch.randn(1, 8, 5, 5, generator=torch_gen)
        real_a = torch.full((1, 5, 5), 1)
        real_b = torch.full((1, 5, 5), 3)
        merged = torch.full((1, 5, 5), 2)
        out_a = attn(feats, real_a, merged)
        out_b = attn(feats, real_b, merged)
        assert not torch.equal(out_a, out_b)

    def test_shape_contract(self):
        attn = RateAttention(dim=4, max_length=4)
        feats = torch.zeros(1, 4, 3, 3)
        with pytest.raises(ValueError, match="share a shape"):
            attn(feats, torch.zeros(1, 3, 3), torch.zeros(1, 3, 4))
        with pytest.raises(ValueError, match="aligned"):
            attn(feats, torch.zeros(1, 4, 4), torch.zeros(1, 4, 4))


@pytest.fixture
def codec_pair():
    cfg = micro_model_config(rate_attention=True)
    torch.manual_seed(2)
    return LayerEncoder(cfg, 0), LayerDecoder(cfg, 0), cfg


def _encoder_inputs(torch_gen, batch=2, c=4, hw=4, w=12):
    mu = torch.randn(batch, c, hw, hw, generator=torch_gen)
    prior_info = torch.randn(batch, 2 * c, hw, hw, generator=torch_gen)
    real = torch.randint(0, c + 1, (batch, hw, hw), generator=torch_gen)
    merged = torch.randint(0, c + 1, (batch, hw, hw), generator=torch_gen)
    ctx = torch.randn(batch, w, hw, hw, generator=torch_gen)
    return mu, prior_info, real, merged, ctx


class TestLayerEncoder:
    def test_output_shape_and_determinism(self, codec_pair, torch_gen):
        enc, _, _ = codec_pair
        mu, prior_info, real, merged, ctx = _encoder_inputs(torch_gen)
        with torch.no_grad():
            r1 = enc(mu, prior_info, real, merged, context=ctx)
            r2 = enc(mu, prior_info, real, merged, context=ctx)
        assert r1.shape == mu.shape
        assert torch.equal(r1, r2)

    def test_context_matters(self, codec_pair, torch_gen):
        enc, _, _ = codec_pair
        mu, prior_info, real, merged, ctx = _encoder_inputs(torch_gen)
        with torch.no_grad():
            with_ctx = enc(mu, prior_info, real, merged, context=ctx)
            without = enc(mu, prior_info, real, merged)
        assert not torch.equal(with_ctx, without)

    def test_lengths_modulate_symbols_after_training_moves_attn(self, codec_pair, torch_gen):
        """With rate attention live, the same representation encodes
        differently under a different bandwidth allocation."""
        enc, _, _ = codec_pair
        with torch.no_grad():
            for p in enc.rate_attn.parameters():
                p.add_(torch.randn(p.shape, generator=torch_gen) * 0.1)
        mu, prior_info, _, _, ctx = _encoder_inputs(torch_gen)
        low = torch.full((2, 4, 4), 1)
        high = torch.full((2, 4, 4), 4)
        with torch.no_grad():
            r_low = enc(mu, prior_info, low, low, context=ctx)
            r_high = enc(mu, prior_info, high, high, context=ctx)
        assert not torch.equal(r_low, r_high)

    def test_shape_contracts(self, codec_pair, torch_gen):
        enc, _, _ = codec_pair
        mu, prior_info, real, merged, ctx = _encoder_inputs(torch_gen)
        with pytest.raises(ValueError, match="channels"):
            enc(mu[:, :2], prior_info, real, merged)
        with pytest.raises(ValueError, match="prior_info"):
            enc(mu, prior_info[:, :4], real, merged)
        with pytest.raises(ValueError, match="context"):
            enc(mu, prior_info, real, merged, context=ctx[..., :2, :2])


class TestLayerDecoder:
    def test_masked_slots_cannot_leak(self, codec_pair, torch_gen):
        """Bit-identical output when garbage fills the masked channel slots:
        the decoder must read only the unmasked prefix."""
        _, dec, _ = codec_pair
        s = torch.randn(2, 4, 4, 4, generator=torch_gen)
        lengths = torch.randint(0, 5, (2, 4, 4), generator=torch_gen)
        ctx = torch.randn(2, 12, 4, 4, generator=torch_gen)
        mask = prefix_mask(lengths, 4)
        garbage = torch.full_like(s, 1e6)
        tampered = s * mask + garbage * (1 - mask)
        with torch.no_grad():
            clean = dec(s * mask, lengths, context=ctx)
            dirty = dec(tampered, lengths, context=ctx)
        assert torch.equal(clean, dirty)

    def test_length_channel_is_input(self, codec_pair, torch_gen):
        """Zero-symbol input still decodes differently under different
        declared lengths; the allocation itself carries information."""
        _, dec, _ = codec_pair
        s = torch.zeros(1, 4, 4, 4)
        with torch.no_grad():
            a = dec(s, torch.full((1, 4, 4), 0))
            b = dec(s, torch.full((1, 4, 4), 4))
        assert not torch.equal(a, b)

    def test_shape_contracts(self, codec_pair, torch_gen):
        _, dec, _ = codec_pair
        s = torch.randn(1, 4, 4, 4, generator=torch_gen)
        with pytest.raises(ValueError, match="channels"):
            dec(s[:, :1], torch.zeros(1, 4, 4, dtype=torch.long))
        with pytest.raises(ValueError, match="lengths"):
            dec(s, torch.zeros(1, 3, 4, dtype=torch.long))
        with pytest.raises(ValueError, match="context"):
            dec(s, torch.zeros(1, 4, 4, dtype=torch.long), context=torch.zeros(1, 12, 2, 2))


def test_encoder_decoder_roundtrip_gradients(codec_pair, torch_gen):
    """Gradients flow end to end through encode, mask, decode."""
    enc, dec, _ = codec_pair
    mu = torch.randn(1, 4, 4, 4, generator=torch_gen, requires_grad=True)
    prior_info = torch.randn(1, 8, 4, 4, generator=torch_gen)
    lengths = torch.full((1, 4, 4), 2)
    r = enc(mu, prior_info, lengths, lengths)
    mask = prefix_mask(lengths, 4)
    out = dec(r * mask, lengths)
    out.sum().backward()
    assert mu.grad is not None
    assert float(mu.grad.abs().sum()) > 0


def test_attention_off_config_builds_plain_encoder():
    cfg = micro_model_config(rate_attention=False)
    enc = LayerEncoder(cfg, 0)
    assert enc.rate_attn is None
