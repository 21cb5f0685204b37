import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpsae.core import SaeParams
from jumpsae.metrics import (
    EvalReport,
    attribution_r_l0,
    bf16_round,
    delta_loss,
    fvu,
    frequency_histogram,
    histogram_from_counts,
    histogram_table,
    identity_transform,
    mean_l0,
    per_position_curves,
    r_l0,
    reduced_precision_transform,
)
from jumpsae.standardize import fold_parameters
from jumpsae.store import SiteSpec
from jumpsae.toy import MarkovSource, ToyConfig, ToyLm, generate_corpus
from jumpsae.trainer import init_params

CFG = ToyConfig(n_layers=2, d_model=16, n_heads=2, head_dim=8, d_mlp=32, vocab=67, max_len=24)
SITE = SiteSpec("resid_post_mlp", 0)


@pytest.fixture(scope="module")
def host():
    torch.manual_seed(3)
    return ToyLm(CFG)


@pytest.fixture(scope="module")
def seqs():
    return generate_corpus(MarkovSource.random(64, seed=5), 10, 24, seed=6)


@pytest.fixture(scope="module")
def sae():
    p = init_params(16, 40, seed=2)
    rng = np.random.default_rng(4)
    return p.replace(b_enc=rng.normal(scale=0.3, size=40), theta=rng.uniform(0.05, 0.6, size=40),
                     b_dec=rng.normal(scale=0.1, size=16))


def test_mean_l0_cases(rng):
    eye = SaeParams(np.eye(4), np.zeros(4), np.eye(4), np.zeros(4), np.full(4, 0.5))
    assert mean_l0(eye, [np.eye(4)]) == 1.0
    high = eye.replace(theta=np.full(4, 10.0))
    assert mean_l0(high, [rng.normal(size=(9, 4))]) == 0.0
    with pytest.raises(ValueError):
        mean_l0(eye, [])

    p = init_params(6, 12, seed=1).replace(theta=np.full(12, 0.2))
    batches = [rng.normal(size=(7, 6)) for _ in range(3)]
    count = 0
    for b in batches:
        for row in b:
            for i in range(12):
                z = sum(p.w_enc[i, k] * (row[k] - p.b_dec[k]) for k in range(6)) + p.b_enc[i]
                count += z > p.theta[i]
    assert mean_l0(p, batches) == count / 21


def test_fvu_cases(rng):
    x = rng.normal(size=(100, 8))
    mean = x.mean(0)
    assert fvu(lambda b: np.broadcast_to(mean, b.shape), [x]) == 1.0
    assert fvu(identity_transform, [x]) == 0.0
    with pytest.raises(ValueError):
        fvu(identity_transform, [x[:1]])
    with pytest.raises(ValueError):
        fvu(identity_transform, [np.ones((5, 3))])

    recon = lambda b: 0.7 * b + 0.1
    got = fvu(recon, [x[:30], x[30:]])
    # two-pass scalar oracle
    num = sum((0.7 * v + 0.1 - v) ** 2 for row in x for v in row) / 100
    mu = [sum(x[i, j] for i in range(100)) / 100 for j in range(8)]
    den = sum((x[i, j] - mu[j]) ** 2 for i in range(100) for j in range(8)) / 100
    assert abs(got - num / den) < 1e-10


def test_fvu_with_targets(rng):
    x, t = rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
    assert fvu(lambda b: b, [x], [x]) == 0.0
    assert fvu(lambda b: np.zeros_like(b) + t.mean(0), [x], [t]) == pytest.approx(1.0, abs=1e-12)


def test_identity_delta_loss_is_exactly_zero(host, seqs):
    for site in ("attn_out_pre_wo", "mlp_out_post_norm", "resid_post_mlp"):
        d = delta_loss(host, identity_transform, SiteSpec(site, 1), seqs)
        assert d.delta == 0.0 and d.base == d.spliced


def test_training_sae_needs_norm(host, seqs, sae):
    with pytest.raises(ValueError, match="normalization"):
        delta_loss(host, sae, SITE, seqs)


def _naive_losses(host, seq, splice=None):
    """Per-position CE of one sequence, recomputed via log-softmax of the logits."""
    logits = host.logits(seq[None], splice)[0].numpy().astype(np.float64)
    out = []
    for t in range(seq.shape[0] - 1):
        row = logits[t]
        m = row.max()
        out.append(m + math.log(np.exp(row - m).sum()) - row[seq[t + 1]])
    return np.array(out)


def test_per_position_curves_match_naive(host, seqs, sae):
    from jumpsae.toy import Splice

    c = 1.7
    curves = per_position_curves(host, sae, SITE, seqs, norm=c, batch_seqs=4)
    folded = fold_parameters(sae, c)
    splice = Splice(SITE, lambda x: folded_reconstruct(folded, x))
    T = seqs.shape[1]
    rec_sum, rec_cnt = np.zeros(T), np.zeros(T, int)
    d_sum, d_cnt = np.zeros(T - 1), np.zeros(T - 1, int)
    for seq in seqs:
        (act,) = host.capture(seq[None], [SITE])
        for t in range(T):
            if seq[t] < 3:
                continue
            x = act[0, t].astype(np.float64)
            r = c * reconstruct_one(sae, x / c)
            rec_sum[t] += float(((r - x) ** 2).sum())
            rec_cnt[t] += 1
        base, spliced = _naive_losses(host, seq), _naive_losses(host, seq, splice)
        for t in range(T - 1):
            if seq[t] >= 3 and seq[t + 1] >= 3:
                d_sum[t] += spliced[t] - base[t]
                d_cnt[t] += 1
    np.testing.assert_array_equal(curves.recon_count, rec_cnt)
    np.testing.assert_array_equal(curves.delta_count, d_cnt)
    assert np.isnan(curves.recon_loss[0])  # BOS position is always masked
    ok = rec_cnt > 0
    np.testing.assert_allclose(curves.recon_loss[ok], rec_sum[ok] / rec_cnt[ok], rtol=1e-4)
    ok = d_cnt > 0
    np.testing.assert_allclose(curves.delta_loss[ok], d_sum[ok] / d_cnt[ok], atol=1e-4)

    # bookkeeping: count-weighted position means reproduce the aggregate delta
    agg = delta_loss(host, sae, SITE, seqs, norm=c)
    total = np.nansum(curves.delta_loss * curves.delta_count) / curves.delta_count.sum()
    assert total == pytest.approx(agg.delta, abs=1e-9)


def reconstruct_one(p, x):
    z = p.w_enc @ (x - p.b_dec) + p.b_enc
    f = np.where(z > p.theta, z, 0.0)
    return p.w_dec @ f + p.b_dec


def folded_reconstruct(p, x):
    z = x.astype(np.float64) @ p.w_enc.T + p.b_enc
    f = np.where(z > p.theta, z, 0.0)
    return f @ p.w_dec.T + p.b_dec


def test_frequency_histogram_brute_force(host, seqs, sae):
    c = 1.3
    hist = frequency_histogram(sae, seqs, host, SITE, norm=c, batch_seqs=3)
    fires = np.zeros(40, int)
    tokens = 0
    for seq in seqs:
        (act,) = host.capture(seq[None], [SITE])
        for t, tok in enumerate(seq):
            if tok < 3:
                continue
            tokens += 1
            x = act[0, t].astype(np.float64) / c
            z = sae.w_enc @ (x - sae.b_dec) + sae.b_enc
            fires += z > sae.theta
    assert hist.token_count == tokens
    np.testing.assert_array_equal(hist.fires, fires)
    assert np.array_equal(hist.frequencies, fires / tokens)
    assert hist.bin_counts.sum() + hist.zero_count == 40


def test_frequency_extremes(host, seqs):
    p = init_params(16, 3, seed=0).replace(theta=np.array([1e6, 0.1, 0.1]), b_enc=np.array([0.0, 1e6, 0.0]))
    p = p.replace(w_enc=p.w_enc * np.array([[1.0], [0.0], [1.0]]))
    hist = frequency_histogram(p, seqs, host, SITE, norm=1.0)
    assert hist.frequencies[0] == 0.0 and hist.frequencies[1] == 1.0
    assert hist.bin_counts[-1] >= 1 and hist.zero_count >= 1


def test_histogram_bins_partition():
    fires = np.array([0, 1, 10, 1000, 10**6, 10**6, 3])
    h = histogram_from_counts(fires, 10**6)
    assert h.bin_counts.sum() + h.zero_count == fires.size
    assert h.bin_counts[0] == 1  # frequency 1e-6 sits in the lowest bin
    assert h.bin_counts[-1] == 2
    assert histogram_table(h).count("\n") == 1 + 1 + 64


def test_r_l0_examples():
    assert r_l0([0.0, 2.0, 0.0]) == 1.0
    assert abs(r_l0([1.0, -1.0, 1.0, 1.0]) - 1.0) < 1e-12
    expected = math.exp(-0.9 * math.log(0.9) - 0.1 * math.log(0.1)) / 2
    assert r_l0([0.9, 0.1]) == pytest.approx(expected, rel=1e-12)
    assert abs(r_l0([0.9, 0.1]) - 0.6921) < 1e-3
    assert math.isnan(r_l0([0.0, 0.0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40))
def test_r_l0_bounds(values):
    k = sum(v != 0 for v in values)
    if k == 0:
        return
    r = r_l0(values)
    assert 1.0 / k - 1e-12 <= r <= 1.0 + 1e-12


def test_attribution_r_l0(host, seqs, sae):
    out = attribution_r_l0(host, sae, SITE, seqs[:3], norm=1.5)
    finite = out.values[np.isfinite(out.values)]
    assert finite.size > 0
    assert np.all(finite <= 1 + 1e-12) and np.all(finite * out.active[np.isfinite(out.values)] >= 1 - 1e-9)


def bits(x):
    return np.asarray(x, np.float32).view(np.uint32)


def test_bf16_examples(backend):
    one = np.float32(1.0)
    assert bf16_round([one])[0] == 1.0
    assert bf16_round([np.float32(1 + 2**-8)])[0] == 1.0
    assert bf16_round([np.float32(1 + 3 * 2**-9)])[0] == np.float32(1 + 2**-7)
    assert bf16_round([np.float32(1 + 2**-7 + 2**-8)])[0] == np.float32(1 + 2**-6)  # tie to even upward
    out = bf16_round(np.array([np.nan, np.inf, -np.inf], np.float32))
    assert np.isnan(out[0]) and out[1] == np.inf and out[2] == -np.inf


def test_bf16_against_bit_oracle_and_idempotent(backend, rng):
    x = rng.integers(0, 2**32, size=5000, dtype=np.uint32).view(np.float32)
    x = x[np.isfinite(x)]
    got = bits(bf16_round(x))
    for u, g in zip(bits(x)[:500].tolist(), got[:500].tolist()):
        low = u & 0xFFFF
        up = u & 0xFFFF0000
        if low > 0x8000 or (low == 0x8000 and (u >> 16) & 1):
            up = (up + 0x10000) & 0xFFFFFFFF
        assert g == up
    assert bits(bf16_round(bf16_round(x))).tobytes() == got.tobytes()
    t = torch.from_numpy(x.copy()).to(torch.bfloat16).to(torch.float32).numpy()
    assert bits(t).tobytes() == got.tobytes()


def test_reduced_precision_transform_close(rng, sae):
    x = rng.normal(size=(64, 16)).astype(np.float32)
    folded = fold_parameters(sae, 2.0)
    exact = folded_reconstruct(folded, x)
    approx = reduced_precision_transform(sae, 2.0)(x)
    assert np.max(np.abs(approx - exact)) < 0.1 * np.max(np.abs(exact)) + 1e-3


def test_report_serialization():
    rep = EvalReport(3.0, 0.1, 2.0, 2.1, 0.1, 4.0, metadata={"site": "resid_post_mlp"},
                     corpus_breakdown={"web": {"fvu": 0.2}})
    text = rep.to_kv()
    assert "mean_l0=3.0" in text and "corpus.web.fvu=0.2" in text and text.startswith("site=")
