import numpy as np
import pytest
import torch

from more_asr.corpus import CorpusSpec, generate_corpus
from more_asr.errors import CheckpointError, InvalidConfig, InvalidInput, NumericalFailure
from more_asr.model import (ModelConfig, batch_features, decode_logits, encode, forward_teacher_forced,
                            greedy_decode, greedy_decode_batch, init_model, input_gradient, load_checkpoint,
                            save_checkpoint, train, transcribe, waveform_features)
from more_asr.signal import FrontendConfig
from more_asr.tokens import BOS, EOS

TINY = ModelConfig(n_enc=1, n_dec=1, d_model=8, heads=2, d_ff=12, vocab_size=10, max_len=12,
                   frontend=FrontendConfig(d_feat=6, gain=1.0))


@pytest.fixture(scope="module")
def tiny():
    return init_model(TINY)


@pytest.fixture(scope="module")
def wave():
    return np.random.default_rng(4).uniform(-0.5, 0.5, 64 + 32 * 9)


def hand_count(cfg):
    d, ff, V, s = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.stack
    ln = 2 * d
    attn = 4 * (d * d + d)
    mlp = ff * d + ff + d * ff + d
    enc = d * s * cfg.frontend.d_feat + d + cfg.n_enc * (2 * ln + attn + mlp) + ln
    dec = V * d + cfg.n_dec * (3 * ln + 2 * attn + mlp) + ln + V * d + V
    return enc + dec


@pytest.mark.parametrize("cfg", [ModelConfig(), TINY, ModelConfig(d_model=32, heads=2, n_enc=3, stack=1)])
def test_param_count_closed_form(cfg):
    assert init_model(cfg).param_count == hand_count(cfg)


def test_default_param_count_literal():
    # 32-wide, two layers each side, 64-token vocabulary, 16-dim features stacked by 4
    assert init_model(ModelConfig()).param_count == 49_120


def test_init_is_deterministic_and_validated():
    assert init_model(TINY).digest() == init_model(TINY).digest()
    assert init_model(TINY).digest() != init_model(ModelConfig(**{**TINY.__dict__, "init_seed": 1})).digest()
    with pytest.raises(InvalidConfig):
        ModelConfig(d_model=32, heads=3)
    with pytest.raises(InvalidConfig):
        ModelConfig(vocab_size=3)


def test_teacher_forced_shapes_and_normalisation(tiny, wave):
    feats = waveform_features(tiny, wave)
    assert forward_teacher_forced(tiny, feats, [BOS]).shape == (1, TINY.vocab_size)
    lg = forward_teacher_forced(tiny, feats, [BOS, 4, 5, 6])
    np.testing.assert_allclose(torch.softmax(lg, -1).sum(-1).numpy(), 1.0, atol=1e-12)
    with pytest.raises(InvalidInput):
        forward_teacher_forced(tiny, feats, [BOS] + [4] * TINY.max_len)
    with pytest.raises(InvalidInput):
        forward_teacher_forced(tiny, feats, [4, 5])


def test_causality(tiny, wave):
    feats = waveform_features(tiny, wave)
    a = forward_teacher_forced(tiny, feats, [BOS, 4, 5, 6, 7])
    b = forward_teacher_forced(tiny, feats, [BOS, 4, 5, 9, 3])
    torch.testing.assert_close(a[:3], b[:3], rtol=0, atol=1e-14)
    assert not torch.allclose(a[3:], b[3:])


def test_greedy_tokens_are_argmax_of_recorded_rows(tiny, wave):
    feats = waveform_features(tiny, wave)
    r1, r2 = greedy_decode(tiny, feats), greedy_decode(tiny, feats)
    assert r1.tokens == r2.tokens and len(r1.tokens) <= TINY.max_len
    assert list(r1.prob_rows.argmax(1)) == r1.tokens
    np.testing.assert_allclose(r1.prob_rows.sum(1), 1.0, atol=1e-9)
    assert r1.ended_by_eos == (r1.tokens[-1] == EOS)


def test_kv_cache_agrees_with_teacher_forcing(tiny, wave):
    feats = waveform_features(tiny, wave)
    r = greedy_decode(tiny, feats)
    tf = torch.softmax(forward_teacher_forced(tiny, feats, [BOS, *r.tokens[:-1]]), -1).numpy()
    np.testing.assert_allclose(r.prob_rows, tf, rtol=0, atol=1e-12)


def test_forced_eos_stops_after_one_token(tiny, wave):
    flat = tiny.flat.clone()
    bundle = tiny.with_flat(flat)
    bundle.params()["out.b"][EOS] = 1e3
    r = greedy_decode(bundle, waveform_features(bundle, wave))
    assert r.tokens == [EOS] and r.ended_by_eos


def test_batched_equals_unbatched(tiny):
    rng = np.random.default_rng(9)
    waves = [rng.uniform(-0.5, 0.5, n) for n in (160, 416, 288)]
    together = transcribe(tiny, waves, batch_size=3)
    for w, r in zip(waves, together):
        alone = greedy_decode(tiny, waveform_features(tiny, w))
        assert alone.tokens == r.tokens
        np.testing.assert_allclose(alone.prob_rows, r.prob_rows, atol=1e-12)


def test_padded_memory_is_ignored(tiny):
    rng = np.random.default_rng(2)
    x = torch.tensor(rng.uniform(-0.5, 0.5, 200))
    y = torch.tensor(rng.uniform(-0.5, 0.5, 500))
    feats, mask = batch_features([x, y], TINY.frontend)
    tokens = torch.tensor([[BOS, 4, 5]] * 2)
    mem, mmask = encode(tiny, feats, mask)
    batched = decode_logits(tiny, mem, tokens, mmask)[0]
    mem1, _ = encode(tiny, feats[:1, : int(mask[0].sum())])
    torch.testing.assert_close(batched, decode_logits(tiny, mem1, tokens[:1])[0], rtol=0, atol=1e-12)


def _ce_loss(target):
    def fn(bundle, feats):
        lg = forward_teacher_forced(bundle, feats, target[:-1])
        return torch.nn.functional.cross_entropy(lg, torch.tensor(target[1:]))
    return fn


def test_input_gradient_matches_finite_differences(tiny, wave):
    loss = _ce_loss([BOS, 4, 5, EOS])
    delta = np.random.default_rng(1).uniform(-1e-3, 1e-3, wave.size)
    g = input_gradient(tiny, wave, delta, loss)
    h = 1e-5
    rng = np.random.default_rng(0)
    for i in rng.choice(wave.size, 25, replace=False):
        e = np.zeros(wave.size)
        e[i] = h
        lp = float(loss(tiny, torch.tensor(waveform_features(tiny, wave + delta + e))))
        lm = float(loss(tiny, torch.tensor(waveform_features(tiny, wave + delta - e))))
        fd = (lp - lm) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), abs(g[i]), 1e-8), i


def test_input_gradient_edge_cases(tiny, wave):
    zero = init_model(TINY).with_flat(torch.zeros(init_model(TINY).param_count, dtype=torch.float64))
    g = input_gradient(zero, wave, np.zeros(wave.size), _ce_loss([BOS, 4, EOS]))
    assert not g.any()
    with pytest.raises(NumericalFailure):
        input_gradient(tiny, wave, np.zeros(wave.size), lambda b, f: f.sum() * float("nan"))
    with pytest.raises(InvalidInput):
        input_gradient(tiny, wave, np.zeros(3), _ce_loss([BOS, 4, EOS]))


def test_training_loss_falls_and_zero_epochs_is_identity():
    corpus = generate_corpus(CorpusSpec(n_utterances=64, seed=3))
    start = init_model(ModelConfig())
    assert train(start, corpus, 0, 0.5).bundle is start
    res = train(start, corpus, 3, 0.5, seed=0)
    assert res.losses[0] >= res.losses[1] >= res.losses[2]
    again = train(start, corpus, 3, 0.5, seed=0)
    assert again.bundle.digest() == res.bundle.digest()
    with pytest.raises(NumericalFailure):
        train(start, corpus, 2, 1e12)


def test_checkpoint_round_trip(tiny, wave, tmp_path):
    path = save_checkpoint(tiny, tmp_path / "m.bin")
    back = load_checkpoint(path)
    assert back.config == tiny.config and back.digest() == tiny.digest()
    feats = waveform_features(tiny, wave)
    assert torch.equal(forward_teacher_forced(back, feats, [BOS, 4]), forward_teacher_forced(tiny, feats, [BOS, 4]))


def test_checkpoint_errors(tiny, tmp_path):
    blob = save_checkpoint(tiny, tmp_path / "m.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"X" + blob[1:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.bin")
    bad_version = bytearray(blob)
    bad_version[8] = 7
    (tmp_path / "v.bin").write_bytes(bytes(bad_version))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.bin")
    with pytest.raises(CheckpointError, match="frontend"):
        load_checkpoint(tmp_path / "m.bin", expect_frontend=FrontendConfig(d_feat=6, seed=99))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")
