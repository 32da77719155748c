"""TTS encoder network: attention, shapes, masking, teacher forcing, loss."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import betabinom

from cotatron.errors import ValidationError
from cotatron.tts import (
    Cotatron, CotatronConfig, DynamicConvolutionAttention, beta_binomial_prior, cotatron_loss,
    masked_mse, per_item_mse, sequence_mask,
)


def _model(seed=0, **kw):
    torch.manual_seed(seed)
    return Cotatron(CotatronConfig.toy(n_speakers=3, **kw))


def _batch(b=2, t=(30, 22), n=(9, 6), seed=0):
    g = torch.Generator().manual_seed(seed)
    tm, nm = max(t), max(n)
    mel = torch.randn(b, tm, 80, generator=g) - 4.0
    ml = torch.tensor(t)
    text = torch.randint(3, 40, (b, nm), generator=g)
    tl = torch.tensor(n)
    for i in range(b):
        mel[i, t[i]:] = 0
        text[i, n[i]:] = 0
    return mel, ml, text, tl


class TestPrior:
    def test_matches_scipy(self):
        ours = beta_binomial_prior(11, 0.1, 0.9)
        ref = betabinom(10, 0.1, 0.9).pmf(np.arange(11))
        np.testing.assert_allclose(ours, ref, rtol=1e-12)
        assert ours.sum() == pytest.approx(1.0, abs=1e-12)

    def test_prior_term_is_causal_convolution(self):
        cfg = CotatronConfig.toy()
        att = DynamicConvolutionAttention(cfg.attention_rnn_dim, cfg).double()
        prev = torch.softmax(torch.randn(2, 15, dtype=torch.float64), -1)
        p = beta_binomial_prior(11, 0.1, 0.9)
        ref = np.zeros((2, 15))
        for b in range(2):
            for j in range(15):
                ref[b, j] = sum(p[k] * prev[b, j - k].item() for k in range(11) if j - k >= 0)
        np.testing.assert_allclose(att.prior_term(prev).numpy(), np.log(np.maximum(ref, 1e-6)), atol=1e-12)

    def test_support_window_with_zero_learned_term(self):
        # with v = 0 the energies are the log prior only; attention then moves forward
        # from the previous peak by 0..10 positions, other positions get only floor mass
        cfg = CotatronConfig.toy()
        att = DynamicConvolutionAttention(cfg.attention_rnn_dim, cfg).double()
        torch.nn.init.zeros_(att.v.weight)
        n, j0 = 30, 7
        prev = torch.zeros(1, n, dtype=torch.float64)
        prev[0, j0] = 1.0
        a = att(torch.randn(1, cfg.attention_rnn_dim, dtype=torch.float64), prev,
                torch.ones(1, n, dtype=torch.bool))[0].detach()
        p = beta_binomial_prior(11, 0.1, 0.9)
        expected = np.full(n, 1e-6)
        expected[j0:j0 + 11] = np.maximum(p, 1e-6)
        expected /= expected.sum()
        # the prior filter buffer is stored in float32
        np.testing.assert_allclose(a.numpy(), expected, rtol=1e-6)
        outside = a.sum() - a[j0:j0 + 11].sum()
        assert outside < (n - 11) * 1e-6


class TestAttentionRows:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 12), st.integers(2, 20))
    def test_rows_stochastic(self, seed, n, t):
        model = _model(seed % 3)
        g = torch.Generator().manual_seed(seed)
        mel = torch.randn(1, t, 80, generator=g)
        text = torch.randint(1, 60, (1, n), generator=g)
        model.eval()
        with torch.no_grad():
            out = model(mel, torch.tensor([t]), text, torch.tensor([n]))
        a = out.alignment[0]
        assert torch.all(a >= 0)
        torch.testing.assert_close(a.sum(-1), torch.ones(t), atol=1e-5, rtol=0)

    def test_padding_gets_zero_attention(self):
        model = _model()
        mel, ml, text, tl = _batch()
        model.eval()
        with torch.no_grad():
            out = model(mel, ml, text, tl)
        assert torch.all(out.alignment[1, :, 6:] == 0)


class TestForward:
    def test_shapes(self):
        model = _model()
        mel, ml, text, tl = _batch()
        out = model(mel, ml, text, tl, tf_rate=0.5, generator=torch.Generator().manual_seed(0))
        assert out.mel_pre.shape == mel.shape
        assert out.mel_post.shape == mel.shape
        assert out.alignment.shape == (2, 30, 9)
        assert out.speaker_rep.shape == (2, 32)
        assert out.speaker_logits.shape == (2, 3)
        assert out.contexts.shape == (2, 30, 64 + 32)

    def test_batched_equals_unbatched(self):
        model = _model()
        model.eval()
        mel, ml, text, tl = _batch()
        with torch.no_grad():
            full = model(mel, ml, text, tl)
            for i in range(2):
                one = model(mel[i:i + 1, :ml[i]], ml[i:i + 1], text[i:i + 1, :tl[i]], tl[i:i + 1])
                torch.testing.assert_close(full.mel_post[i, :ml[i]], one.mel_post[0], atol=1e-5, rtol=1e-5)
                torch.testing.assert_close(full.alignment[i, :ml[i], :tl[i]], one.alignment[0], atol=1e-5, rtol=1e-5)
                torch.testing.assert_close(full.speaker_rep[i], one.speaker_rep[0], atol=1e-5, rtol=1e-5)

    def test_full_teacher_forcing_feeds_ground_truth(self):
        model = _model()
        mel, ml, text, tl = _batch()
        out = model(mel, ml, text, tl, tf_rate=1.0, keep_inputs=True)
        assert torch.equal(out.input_frames[:, 1:], mel[:, :-1])
        assert torch.all(out.input_frames[:, 0] == 0)

    def test_no_teacher_forcing_feeds_predictions(self):
        model = _model()
        model.eval()
        mel, ml, text, tl = _batch()
        with torch.no_grad():
            out = model(mel, ml, text, tl, tf_rate=0.0, keep_inputs=True)
        # mel_pre is masked beyond each length, so compare valid steps only
        for i in range(2):
            n = int(ml[i])
            assert torch.equal(out.input_frames[i, 1:n], out.mel_pre[i, :n - 1])

    def test_seeded_teacher_forcing_is_deterministic(self):
        mel, ml, text, tl = _batch()
        outs = []
        for _ in range(2):
            model = _model()
            torch.manual_seed(5)
            outs.append(model(mel, ml, text, tl, tf_rate=0.5, generator=torch.Generator().manual_seed(3)))
        assert torch.equal(outs[0].mel_post, outs[1].mel_post)
        assert torch.equal(outs[0].alignment, outs[1].alignment)

    def test_eval_is_deterministic(self):
        model = _model()
        model.eval()
        mel, ml, text, tl = _batch()
        with torch.no_grad():
            a = model(mel, ml, text, tl).speaker_logits
            b = model(mel, ml, text, tl).speaker_logits
        assert torch.equal(a, b)

    def test_short_mel_for_speaker_encoder(self):
        model = _model()
        model.eval()
        with torch.no_grad():
            z = model.speaker_encoder(torch.randn(1, 5, 80), torch.tensor([5]))
        assert z.shape == (1, 32)
        assert model.speaker_encoder.output_shape(5) == model.speaker_encoder.output_shape(64)

    def test_validation(self):
        model = _model()
        mel, ml, text, tl = _batch()
        with pytest.raises(ValidationError):
            model(mel, ml, text, tl, tf_rate=1.5)
        with pytest.raises(ValidationError):
            model(mel[..., :79], ml, text, tl)
        with pytest.raises(ValidationError):
            model(mel, ml, torch.ones(2, 401, dtype=torch.long), torch.tensor([401, 401]))
        with pytest.raises(ValidationError):
            model.speaker_encoder(mel[:, :0], torch.tensor([0, 0]))

    def test_decoder_state_shape_check(self):
        model = _model()
        memory = torch.randn(1, 5, model.decoder.memory_dim)
        state = model.decoder.init_state(torch.randn(1, 4, model.decoder.memory_dim))
        with pytest.raises(ValidationError):
            model.decoder.step(torch.zeros(1, 80), state, memory, torch.ones(1, 5, dtype=torch.bool))

    def test_initial_attention_on_first_symbol(self):
        model = _model()
        state = model.decoder.init_state(torch.randn(2, 4, model.decoder.memory_dim))
        assert torch.equal(state.attention_weights[:, 0], torch.ones(2))


class TestLoss:
    def test_padding_contributes_nothing(self):
        model = _model()
        model.eval()
        mel, ml, text, tl = _batch()
        labels = torch.tensor([0, 2])
        with torch.no_grad():
            out = model(mel, ml, text, tl)
            base, _ = cotatron_loss(out, mel, labels, ml)
            target = mel.clone()
            target[1, ml[1]:] = 1e3
            out.mel_pre[1, ml[1]:] = -1e3
            poked, _ = cotatron_loss(out, target, labels, ml)
        assert base.item() == poked.item()

    def test_parts_sum(self):
        model = _model()
        mel, ml, text, tl = _batch()
        out = model(mel, ml, text, tl)
        total, parts = cotatron_loss(out, mel, torch.tensor([0, 1]), ml, id_weight=2.0)
        assert total.item() == pytest.approx(parts["mel_pre"] + parts["mel_post"] + 2 * parts["speaker_ce"], rel=1e-6)

    def test_masked_mse_is_mean_over_valid_elements(self):
        pred = torch.zeros(2, 3, 2)
        target = torch.ones(2, 3, 2)
        target[0, 2] = 100.0
        assert masked_mse(pred, target, torch.tensor([2, 3])).item() == pytest.approx(1.0)
        np.testing.assert_allclose(per_item_mse(pred, target, torch.tensor([2, 3])).numpy(), [1.0, 1.0])
        with pytest.raises(ValidationError):
            masked_mse(pred, target[:, :2])

    def test_sequence_mask(self):
        assert sequence_mask(torch.tensor([1, 3]), 4).tolist() == [[True, False, False, False],
                                                                  [True, True, True, False]]
