"""Conversion decoder: conditional batch norm, GBlocks, speaker table, loss."""
import numpy as np
import pytest
import torch

from cotatron.errors import SpeakerLookupError, ValidationError
from cotatron.vc_decoder import (
    ConditionalBatchNorm, GBlock, VCDecoder, VCDecoderConfig, decoder_input, reconstruction_loss,
)


def _decoder(seed=0, **kw):
    torch.manual_seed(seed)
    return VCDecoder(VCDecoderConfig.toy(n_speakers=3, **kw))


class TestConditionalBatchNorm:
    def test_zero_init_is_plain_batch_norm(self):
        torch.manual_seed(0)
        cbn = ConditionalBatchNorm(6, 4)
        bn = torch.nn.BatchNorm1d(6, affine=False)
        x = torch.randn(3, 6, 11)
        y = torch.randn(3, 4)
        torch.testing.assert_close(cbn(x, y), bn(x), atol=1e-5, rtol=1e-5)
        torch.testing.assert_close(cbn.running_mean, bn.running_mean, atol=1e-6, rtol=1e-6)
        torch.testing.assert_close(cbn.running_var, bn.running_var, atol=1e-6, rtol=1e-6)

    def test_normalized_moments(self):
        cbn = ConditionalBatchNorm(5, 2)
        x = torch.randn(4, 5, 30) * 3 + 7
        z = cbn.normalize(x)
        torch.testing.assert_close(z.mean(dim=(0, 2)), torch.zeros(5), atol=1e-5, rtol=0)
        torch.testing.assert_close(z.var(dim=(0, 2), unbiased=False), torch.ones(5), atol=1e-3, rtol=0)

    def test_statistics_ignore_padding(self):
        cbn = ConditionalBatchNorm(2, 2)
        x = torch.randn(2, 2, 10)
        mask = torch.zeros(2, 10, dtype=torch.bool)
        mask[0, :7] = True
        mask[1, :4] = True
        a = cbn.normalize(x, mask)
        x2 = x.clone()
        x2[0, :, 7:] = 1e4
        x2[1, :, 4:] = -1e4
        b = cbn.normalize(x2, mask)
        torch.testing.assert_close(a[0, :, :7], b[0, :, :7])
        torch.testing.assert_close(a[1, :, :4], b[1, :, :4])

    def test_condition_changes_scale_and_shift(self):
        cbn = ConditionalBatchNorm(3, 2)
        torch.nn.init.normal_(cbn.gamma.weight)
        torch.nn.init.normal_(cbn.beta.weight)
        x = torch.randn(1, 3, 8).repeat(2, 1, 1)
        out = cbn(x, torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        assert (out[0] - out[1]).abs().mean() > 0

    def test_eval_uses_running_statistics(self):
        cbn = ConditionalBatchNorm(3, 2)
        for _ in range(50):
            cbn(torch.randn(4, 3, 20) * 2 + 1, torch.zeros(4, 2))
        cbn.eval()
        x = torch.randn(1, 3, 5)
        a = cbn(x, torch.zeros(1, 2))
        b = cbn(torch.cat([x, 100 * torch.ones(1, 3, 5)]), torch.zeros(2, 2))[:1]
        torch.testing.assert_close(a, b)
        assert float(cbn.running_mean.mean()) == pytest.approx(1.0, abs=0.2)

    def test_gradcheck(self):
        torch.manual_seed(0)
        cbn = ConditionalBatchNorm(3, 2).double()
        torch.nn.init.normal_(cbn.gamma.weight)
        x = torch.randn(2, 3, 5, dtype=torch.float64, requires_grad=True)
        y = torch.randn(2, 2, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda a, b: cbn(a, b), (x, y), eps=1e-6, atol=1e-6, rtol=1e-4)


class TestGBlock:
    def test_shapes_and_masking(self):
        torch.manual_seed(0)
        block = GBlock(8, 6, 4)
        x = torch.randn(2, 8, 12)
        mask = torch.ones(2, 12, dtype=torch.bool)
        mask[1, 9:] = False
        out = block(x, torch.randn(2, 4), mask)
        assert out.shape == (2, 6, 12)
        assert torch.all(out[1, :, 9:] == 0)

    def test_gradcheck(self):
        torch.manual_seed(0)
        block = GBlock(3, 2, 2).double()
        mask = torch.ones(2, 6, dtype=torch.bool)
        x = torch.randn(2, 3, 6, dtype=torch.float64, requires_grad=True)
        y = torch.randn(2, 2, dtype=torch.float64)
        assert torch.autograd.gradcheck(lambda a: block(a, y, mask), (x,), eps=1e-6, atol=1e-6, rtol=1e-4)


class TestDecoder:
    def test_full_size_shape(self):
        torch.manual_seed(0)
        dec = VCDecoder(VCDecoderConfig(n_speakers=2))
        assert dec.cfg.in_dim == 513
        assert [b.convs[0].out_channels for b in dec.blocks] == [512, 384, 256, 192]
        out = dec(torch.randn(1, 7, 513), torch.tensor([7]), torch.tensor([1]))
        assert out.shape == (1, 7, 80)

    def test_time_preserved_and_padding_zero(self):
        dec = _decoder()
        out = dec(torch.randn(2, 15, 65), torch.tensor([15, 9]), torch.tensor([0, 2]))
        assert out.shape == (2, 15, 80)
        assert torch.all(out[1, 9:] == 0)

    def test_eval_is_pure(self):
        dec = _decoder()
        dec(torch.randn(3, 10, 65), torch.tensor([10, 10, 10]), torch.tensor([0, 1, 2]))
        dec.eval()
        x = torch.randn(1, 10, 65)
        with torch.no_grad():
            a = dec(x, torch.tensor([10]), torch.tensor([1]))
            b = dec(x, torch.tensor([10]), torch.tensor([1]))
        assert torch.equal(a, b)

    def test_batched_equals_unbatched_in_eval(self):
        dec = _decoder()
        # move running statistics away from (0, 1) so padded frames normalize to nonzero values
        dec.train()
        with torch.no_grad():
            dec(torch.randn(3, 12, 65) * 2 + 1, torch.tensor([12, 12, 12]), torch.tensor([0, 1, 2]))
        dec.eval()
        x = torch.randn(2, 12, 65)
        with torch.no_grad():
            full = dec(x, torch.tensor([12, 8]), torch.tensor([0, 1]))
            one = dec(x[1:, :8], torch.tensor([8]), torch.tensor([1]))
        torch.testing.assert_close(full[1, :8], one[0], atol=1e-5, rtol=1e-5)

    @pytest.mark.parametrize("bad", [-1, 3])
    def test_unknown_speaker(self, bad):
        dec = _decoder()
        with pytest.raises(SpeakerLookupError):
            dec(torch.randn(1, 4, 65), torch.tensor([4]), torch.tensor([bad]))

    def test_wrong_width(self):
        with pytest.raises(ValidationError):
            _decoder()(torch.randn(1, 4, 64), torch.tensor([4]), torch.tensor([0]))

    def test_config_round_trip(self):
        cfg = VCDecoderConfig.toy(n_speakers=5)
        assert VCDecoderConfig.from_dict(cfg.to_dict()) == cfg


class TestInputAndLoss:
    def test_concat_order(self):
        l, r = torch.randn(1, 4, 6), torch.randn(1, 4, 1)
        x = decoder_input(l, r)
        assert x.shape == (1, 4, 7)
        assert torch.equal(x[..., :6], l) and torch.equal(x[..., 6:], r)
        with pytest.raises(ValidationError):
            decoder_input(l, r[:, :3])

    def test_loss_values(self):
        t = torch.randn(2, 5, 80)
        assert reconstruction_loss(t, t).item() == 0.0
        assert reconstruction_loss(t + 2, t).item() == pytest.approx(4.0)

    def test_loss_brute_force(self):
        rng = np.random.default_rng(3)
        p, t = rng.standard_normal((2, 6, 4)), rng.standard_normal((2, 6, 4))
        ref = sum((p[b, i, j] - t[b, i, j]) ** 2 for b in range(2) for i in range(6) for j in range(4)) / 48
        got = reconstruction_loss(torch.as_tensor(p), torch.as_tensor(t)).item()
        assert got == pytest.approx(ref, rel=1e-12)
        masked = reconstruction_loss(torch.as_tensor(p), torch.as_tensor(t), torch.tensor([6, 2])).item()
        ref_m = (((p[0] - t[0]) ** 2).sum() + ((p[1, :2] - t[1, :2]) ** 2).sum()) / (8 * 4)
        assert masked == pytest.approx(ref_m, rel=1e-12)

    def test_loss_shape_mismatch(self):
        with pytest.raises(ValidationError):
            reconstruction_loss(torch.zeros(1, 3, 80), torch.zeros(1, 4, 80))
