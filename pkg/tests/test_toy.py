import math

import numpy as np
import pytest
import torch

from jumpsae.metrics import bf16_round
from jumpsae.store import SiteSpec
from jumpsae.toy import (
    BOS,
    EOS,
    PAD,
    MarkovSource,
    Splice,
    ToyConfig,
    ToyLm,
    generate_corpus,
    heldout_loss,
    lm_from_bytes,
    lm_to_bytes,
    loss_mask,
    train_toy_lm,
)

CFG = ToyConfig(n_layers=2, d_model=32, n_heads=2, head_dim=8, d_mlp=64, vocab=67, max_len=32)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(MarkovSource.random(64, seed=0), 64, 32, seed=1)


@pytest.fixture(scope="module")
def lm():
    torch.manual_seed(0)
    return ToyLm(CFG)


def test_corpus_layout(corpus):
    assert corpus.dtype == np.int32 and corpus.shape == (64, 32)
    assert np.all(corpus[:, 0] == BOS)
    for row in corpus:
        end = int(np.flatnonzero(row == EOS)[0])
        assert np.all(row[1:end] >= 3) and np.all(row[end + 1 :] == PAD)
    m = loss_mask(corpus)
    assert m.shape == (64, 31)
    assert not m[:, 0].any() or np.all(corpus[:, 1][m[:, 0]] >= 3)


def test_identity_splice_is_bitwise_noop(lm, corpus):
    base = lm.logits(corpus[:8]).numpy()
    for site in ("attn_out_pre_wo", "mlp_out_post_norm", "resid_post_mlp", "mlp_in_post_norm"):
        out = lm.logits(corpus[:8], Splice(SiteSpec(site, 0), lambda x: x)).numpy()
        assert out.tobytes() == base.tobytes()
    tc = lm.logits(corpus[:8], Splice(SiteSpec("mlp_out_post_norm", 1), lambda x: x, transcoder=True))
    assert not np.array_equal(tc.numpy(), base)  # input replaces output: a real change


def test_zero_splice_changes_downstream(lm, corpus):
    spec = SiteSpec("resid_post_mlp", 0)
    later = SiteSpec("resid_post_mlp", 1)
    (a,) = lm.capture(corpus[:4], [later])
    _, got = lm.forward(corpus[:4], Splice(spec, np.zeros_like), capture=(later,))
    assert not np.allclose(a, got[later].numpy())


def test_splice_shape_mismatch(lm, corpus):
    with pytest.raises(ValueError, match="shape"):
        lm.logits(corpus[:2], Splice(SiteSpec("resid_post_mlp", 0), lambda x: x[:, :3]))


def test_site_widths(lm, corpus):
    specs = [SiteSpec("attn_out_pre_wo", 1), SiteSpec("mlp_out_post_norm", 0)]
    a, m = lm.capture(corpus[:3], specs)
    assert a.shape == (3, 32, CFG.n_heads * CFG.head_dim) == (3, 32, CFG.site_width("attn_out_pre_wo"))
    assert m.shape[-1] == CFG.d_model


def test_untrained_loss_near_uniform(lm, corpus):
    assert abs(heldout_loss(lm, corpus) - math.log(CFG.vocab)) < 0.1 * math.log(CFG.vocab)


def test_training_is_seed_deterministic(corpus):
    a = train_toy_lm(corpus, 5, seed=3, cfg=CFG, batch_size=8)
    b = train_toy_lm(corpus, 5, seed=3, cfg=CFG, batch_size=8)
    assert lm_to_bytes(a) == lm_to_bytes(b)


def test_fold_rms_gains(lm, corpus):
    assert lm_to_bytes(lm.fold_rms_gains()) == lm_to_bytes(lm)

    g = lm.copy()
    gen = torch.Generator().manual_seed(1)
    for l in range(CFG.n_layers):
        g.weights[f"l{l}_mlp_pre"] = 0.5 + torch.rand(CFG.d_model, generator=gen)
    folded = g.fold_rms_gains()
    diff = (g.logits(corpus[:8]) - folded.logits(corpus[:8])).abs().max().item()
    assert diff < 1e-5
    assert torch.all(folded.weights["l0_mlp_pre"] == 1)

    # folded transcoder input: plain RMS-normalized residual, unit gains
    spec_in = SiteSpec("mlp_in_post_norm", 0)
    _, got = folded.forward(corpus[:2], capture=(spec_in,))
    x = got[spec_in].numpy()
    rms = np.sqrt(np.mean(x.astype(np.float64) ** 2, axis=-1))
    np.testing.assert_allclose(rms, 1.0, atol=1e-3)


def test_serialization_roundtrip(lm):
    again = lm_from_bytes(lm_to_bytes(lm))
    assert lm_to_bytes(again) == lm_to_bytes(lm)
    with pytest.raises(ValueError):
        lm_from_bytes(b"TOYL" + bytes(10))


def test_reduced_precision_weights_match_bit_rounding(lm):
    r = lm.to_reduced_precision()
    for name, w in lm.weights.items():
        assert r.weights[name].numpy().tobytes() == bf16_round(w.numpy()).tobytes()


def test_site_gradients_match_autograd_on_one_position(lm, corpus):
    spec = SiteSpec("resid_post_mlp", 0)
    tokens = corpus[:2]
    x, grads = lm.site_gradients(tokens, spec)
    assert x.shape == grads.shape == (2, 31, CFG.d_model)
    logits, got = lm.forward(tokens, grad_site=spec)
    pos = 5
    lg = logits[:, pos]
    tgt = torch.as_tensor(tokens[:, pos + 1], dtype=torch.long)
    centred = lg.gather(-1, tgt[:, None])[:, 0] - lg.mean(-1)
    (g,) = torch.autograd.grad(centred.sum(), got[spec])
    np.testing.assert_allclose(grads[:, pos], g[:, pos].numpy(), atol=1e-6)
