"""Sparsity and fidelity metrics for trained SAEs.

Host-based metrics take any object with the toy host's interface:
``special_mask``, ``capture``, ``token_losses`` and (for attribution)
``site_gradients``. A ``sae`` argument is either :class:`SaeParams` (with
``norm`` required for training parameterization) or a plain callable mapping
raw site activations to their replacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .core import INFERENCE, SaeParams, decode, encode, reconstruct
from .io import dump_kv
from .standardize import raw_encoder, raw_transform
from .store import SiteSpec

N_FREQ_BINS = 64
FREQ_FLOOR = 1e-6


# --- reduced precision ----------------------------------------------------


def bf16_round(x) -> np.ndarray:
    """Round float32 values to the nearest bfloat16 (ties to even), returned as float32."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    bits = kernels.bf16_round_bits(arr.reshape(-1).view(np.uint32))
    return bits.view(np.float32).reshape(arr.shape)


def bf16_params(params: SaeParams) -> SaeParams:
    return params.replace(**{k: bf16_round(v) for k, v in params.arrays().items()})


def reduced_precision_transform(params: SaeParams, norm: float | None = None) -> Callable:
    """Raw-space reconstruction with weights, inputs, latents and outputs rounded to bfloat16."""
    p = bf16_params(params)
    c = 1.0 if p.parameterization == INFERENCE else float(norm)

    def transform(x):
        x = bf16_round(np.asarray(x, dtype=np.float32) / np.float32(c))
        f = bf16_round(encode(p, x))
        return bf16_round(np.float32(c) * decode(p, f))

    return transform


# --- transforms -----------------------------------------------------------


def as_transform(sae, norm: float | None = None) -> Callable:
    if isinstance(sae, SaeParams):
        return raw_transform(sae, norm)
    if callable(sae):
        return sae
    raise TypeError("sae must be SaeParams or a callable")


def identity_transform(x):
    return x


def mean_ablation_transform(mean: np.ndarray) -> Callable:
    mean = np.asarray(mean, dtype=np.float32)
    return lambda x: np.broadcast_to(mean, np.shape(x)).copy()


def site_mean(host, site_spec: SiteSpec, sequences, batch_seqs: int = 32) -> np.ndarray:
    """Mean site activation over non-special tokens."""
    total, count = None, 0
    for tokens in _chunks(sequences, batch_seqs):
        (act,) = host.capture(tokens, [site_spec])
        rows = act[~host.special_mask(tokens)].astype(np.float64)
        total = rows.sum(0) if total is None else total + rows.sum(0)
        count += rows.shape[0]
    return total / count


def _chunks(sequences, size):
    sequences = np.asarray(sequences)
    for start in range(0, sequences.shape[0], size):
        yield sequences[start : start + size]


# --- activation-level metrics --------------------------------------------


def mean_l0(params: SaeParams, batches: Iterable) -> float:
    """Average number of active latents per row; batches must match the SAE's input scaling."""
    active = 0
    rows = 0
    for batch in batches:
        f = encode(params, np.atleast_2d(batch))
        active += int(np.count_nonzero(f))
        rows += f.shape[0]
    if rows == 0:
        raise ValueError("mean_l0 needs at least one row")
    return active / rows


def fvu(params_or_transform, inputs: Iterable, targets: Iterable | None = None) -> float:
    """Mean squared reconstruction error over the error of predicting the target mean.

    ``params_or_transform`` is applied to each input batch as is; pass SaeParams
    with inputs already scaled for them, or a raw-space callable.
    """
    fn = params_or_transform
    if isinstance(fn, SaeParams):
        params = fn
        fn = lambda x: reconstruct(params, x)
    inputs = list(inputs)
    targets = inputs if targets is None else list(targets)
    err = 0.0
    sum_t = None
    sum_sq = 0.0
    rows = 0
    for x, t in zip(inputs, targets):
        x = np.atleast_2d(x)
        t = np.atleast_2d(t).astype(np.float64)
        r = np.asarray(fn(x), dtype=np.float64) - t
        err += float(np.einsum("ij,ij->", r, r))
        sum_t = t.sum(0) if sum_t is None else sum_t + t.sum(0)
        sum_sq += float(np.einsum("ij,ij->", t, t))
        rows += t.shape[0]
    if rows < 2:
        raise ValueError("fvu needs at least two rows")
    mean = sum_t / rows
    # second pass over the mean keeps the variance exact rather than sum_sq - n|mean|^2
    var = 0.0
    for t in targets:
        d = np.atleast_2d(t).astype(np.float64) - mean
        var += float(np.einsum("ij,ij->", d, d))
    if var == 0.0:
        raise ValueError("targets have zero variance")
    return err / var


# --- splice metrics -------------------------------------------------------


@dataclass
class DeltaLoss:
    base: float
    spliced: float
    delta: float
    tokens: int


def _splice(site_spec, transform, transcoder):
    from .toy import Splice

    return Splice(site_spec, transform, transcoder)


def _prediction_mask(host, tokens):
    s = host.special_mask(tokens)
    return ~s[:, :-1] & ~s[:, 1:]


def delta_loss(host, sae, site_spec: SiteSpec, sequences, norm: float | None = None,
               transcoder: bool = False, batch_seqs: int = 32) -> DeltaLoss:
    """Cross-entropy increase from splicing ``sae`` in at ``site_spec``.

    Averaged over next-token predictions whose input and target are both
    ordinary tokens.
    """
    transform = as_transform(sae, norm)
    splice = _splice(site_spec, transform, transcoder)
    base_sum = spliced_sum = 0.0
    count = 0
    for tokens in _chunks(sequences, batch_seqs):
        mask = _prediction_mask(host, tokens)
        base_sum += float(host.token_losses(tokens)[mask].sum())
        spliced_sum += float(host.token_losses(tokens, splice)[mask].sum())
        count += int(mask.sum())
    if count == 0:
        raise ValueError("no ordinary-token predictions in the evaluation sequences")
    base, spliced = base_sum / count, spliced_sum / count
    return DeltaLoss(base, spliced, spliced - base, count)


@dataclass
class PositionCurves:
    """Per-position means; positions with no ordinary tokens hold NaN."""

    recon_loss: np.ndarray
    delta_loss: np.ndarray
    recon_count: np.ndarray
    delta_count: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.recon_loss.shape[0])


def per_position_curves(host, sae, site_spec: SiteSpec, sequences, norm: float | None = None,
                        transcoder: bool = False, batch_seqs: int = 32) -> PositionCurves:
    transform = as_transform(sae, norm)
    splice = _splice(site_spec, transform, transcoder)
    source = SiteSpec("mlp_in_post_norm", site_spec.layer) if transcoder else site_spec
    seq_len = np.asarray(sequences).shape[1]
    recon_sum = np.zeros(seq_len)
    recon_cnt = np.zeros(seq_len, dtype=np.int64)
    delta_sum = np.zeros(seq_len - 1)
    delta_cnt = np.zeros(seq_len - 1, dtype=np.int64)
    for tokens in _chunks(sequences, batch_seqs):
        keep = ~host.special_mask(tokens)
        acts = host.capture(tokens, [source, site_spec])
        x, target = acts[0], acts[-1]
        rows = x[keep]
        err = np.asarray(transform(rows), dtype=np.float64) - target[keep].astype(np.float64)
        per_row = np.einsum("ij,ij->i", err, err)
        pos = np.nonzero(keep)[1]
        np.add.at(recon_sum, pos, per_row)
        np.add.at(recon_cnt, pos, 1)

        mask = _prediction_mask(host, tokens)
        diff = host.token_losses(tokens, splice) - host.token_losses(tokens)
        delta_sum += np.where(mask, diff, 0.0).sum(0)
        delta_cnt += mask.sum(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        recon = np.where(recon_cnt > 0, recon_sum / np.maximum(recon_cnt, 1), np.nan)
        delta = np.where(delta_cnt > 0, delta_sum / np.maximum(delta_cnt, 1), np.nan)
    return PositionCurves(recon, delta, recon_cnt, delta_cnt)


# --- firing frequencies ---------------------------------------------------


@dataclass
class FrequencyHistogram:
    frequencies: np.ndarray
    fires: np.ndarray
    token_count: int
    bin_edges: np.ndarray = field(repr=False)
    bin_counts: np.ndarray = field(repr=False)
    zero_count: int = 0


def log_bin_edges(n_bins: int = N_FREQ_BINS, floor: float = FREQ_FLOOR) -> np.ndarray:
    return np.logspace(np.log10(floor), 0.0, n_bins + 1)


def histogram_from_counts(fires: np.ndarray, token_count: int, n_bins: int = N_FREQ_BINS) -> FrequencyHistogram:
    """Bin k covers (edge_k, edge_k+1]; the first bin also takes anything in (0, floor]."""
    if token_count < 1:
        raise ValueError("token_count must be at least 1")
    fires = np.asarray(fires, dtype=np.int64)
    freq = fires / token_count
    edges = log_bin_edges(n_bins)
    nz = freq > 0
    idx = np.searchsorted(edges, freq[nz], side="left") - 1
    idx = np.clip(idx, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return FrequencyHistogram(freq, fires, int(token_count), edges, counts, int((~nz).sum()))


def frequency_histogram(sae: SaeParams, sequences, host, site_spec: SiteSpec, norm: float | None = None,
                        batch_seqs: int = 32, n_bins: int = N_FREQ_BINS) -> FrequencyHistogram:
    enc = raw_encoder(sae, norm)
    source = SiteSpec("mlp_in_post_norm", site_spec.layer) if sae.kind == "transcoder" else site_spec
    fires = np.zeros(sae.n_latents, dtype=np.int64)
    tokens_seen = 0
    for tokens in _chunks(sequences, batch_seqs):
        keep = ~host.special_mask(tokens)
        (act,) = host.capture(tokens, [source])
        f = enc(act[keep])
        fires += np.count_nonzero(f, axis=0)
        tokens_seen += int(keep.sum())
    return histogram_from_counts(fires, tokens_seen, n_bins)


# --- attribution uniformity -----------------------------------------------


def r_l0(y) -> float:
    """exp(entropy of |y| normalized over its nonzero entries) / number of nonzero entries.

    Returns NaN when ``y`` is all zero.
    """
    a = np.abs(np.asarray(y, dtype=np.float64))
    a = a[a > 0]
    if a.size == 0:
        return float("nan")
    p = a / a.sum()
    p = p[p > 0]  # denormal entries can underflow; their 0·log 0 terms vanish
    entropy = -float(np.sum(p * np.log(p)))
    return float(np.exp(entropy) / a.size)


@dataclass
class AttributionSummary:
    values: np.ndarray  # one entry per ordinary token prediction; NaN where undefined
    active: np.ndarray  # number of nonzero attribution entries per token

    @property
    def mean(self) -> float:
        ok = np.isfinite(self.values)
        return float(self.values[ok].mean()) if ok.any() else float("nan")

    @property
    def missing(self) -> int:
        return int((~np.isfinite(self.values)).sum())


def attribution_r_l0(host, sae: SaeParams, site_spec: SiteSpec, sequences, norm: float | None = None,
                     batch_seqs: int = 8) -> AttributionSummary:
    """r_L0 of y = f(x) * (W_dec^T grad_x L) per ordinary-token prediction.

    ``L`` is the correct next token's logit minus the mean logit; the gradient is
    taken through the host only. For training-parameterized SAEs the raw-space
    gradient is chain-ruled through the input scaling: the decoder output is
    multiplied by ``norm`` so W_dec^T picks up that factor.
    """
    enc = raw_encoder(sae, norm)
    scale = 1.0 if sae.parameterization == INFERENCE else float(norm)
    w_dec = np.asarray(sae.w_dec, dtype=np.float64) * scale
    values, active = [], []
    for tokens in _chunks(sequences, batch_seqs):
        x, grad = host.site_gradients(tokens, site_spec)
        mask = _prediction_mask(host, tokens)
        f = enc(x[mask]).astype(np.float64)
        y = f * (grad[mask].astype(np.float64) @ w_dec)
        for row in y:
            values.append(r_l0(row))
            active.append(int(np.count_nonzero(row)))
    return AttributionSummary(np.array(values), np.array(active))


# --- reports --------------------------------------------------------------


@dataclass
class EvalReport:
    mean_l0: float
    fvu: float
    base_loss: float
    spliced_loss: float
    delta_loss: float
    mean_ablation_loss: float
    metadata: dict = field(default_factory=dict)
    per_position: PositionCurves | None = None
    corpus_breakdown: dict = field(default_factory=dict)
    r_l0_mean: float | None = None
    histogram: FrequencyHistogram | None = None

    def to_kv(self) -> str:
        items = dict(self.metadata)
        items.update(mean_l0=self.mean_l0, fvu=self.fvu, base_loss=self.base_loss,
                     spliced_loss=self.spliced_loss, delta_loss=self.delta_loss,
                     mean_ablation_loss=self.mean_ablation_loss)
        if self.r_l0_mean is not None:
            items["r_l0_mean"] = self.r_l0_mean
        for tag, vals in sorted(self.corpus_breakdown.items()):
            for k, v in vals.items():
                items[f"corpus.{tag}.{k}"] = v
        return dump_kv(items)

    def position_table(self) -> str:
        if self.per_position is None:
            return ""
        c = self.per_position
        lines = ["position\trecon_loss\tdelta_loss\trecon_count\tdelta_count"]
        for t in range(c.recon_loss.shape[0]):
            d = c.delta_loss[t] if t < c.delta_loss.shape[0] else float("nan")
            dc = c.delta_count[t] if t < c.delta_count.shape[0] else 0
            lines.append(f"{t}\t{c.recon_loss[t]!r}\t{d!r}\t{c.recon_count[t]}\t{dc}")
        return "\n".join(lines) + "\n"


def histogram_table(hist: FrequencyHistogram) -> str:
    lines = ["bin_low\tbin_high\tcount", f"0\t0\t{hist.zero_count}"]
    for k, n in enumerate(hist.bin_counts):
        lines.append(f"{hist.bin_edges[k]!r}\t{hist.bin_edges[k + 1]!r}\t{n}")
    return "\n".join(lines) + "\n"


# --- full evaluation ------------------------------------------------------

FP32, BF16 = "fp32", "bf16"


def _site_rows(host, sequences, specs, batch_seqs=32):
    """Captured activations at ``specs`` for all non-special tokens, concatenated."""
    parts = [[] for _ in specs]
    for tokens in _chunks(sequences, batch_seqs):
        keep = ~host.special_mask(tokens)
        for acc, act in zip(parts, host.capture(tokens, specs)):
            acc.append(act[keep])
    return [np.concatenate(p) for p in parts]


def evaluate_sae(host, sae: SaeParams, site_spec: SiteSpec, sequences, norm: float | None = None,
                 precision: str = FP32, freq_sequences=None, attribution_sequences=None,
                 extra_corpora: dict | None = None, metadata: dict | None = None) -> EvalReport:
    """Every fidelity metric for one SAE at one site.

    In ``bf16`` mode the host runs with rounded weights and activations and
    the SAE's weights, inputs, latents and outputs are rounded too.
    """
    if precision not in (FP32, BF16):
        raise ValueError(f"precision must be {FP32} or {BF16}")
    if sae.parameterization != INFERENCE and norm is None:
        raise ValueError("training-parameterized SAE needs its normalization constant")
    transcoder = sae.kind == "transcoder"
    if transcoder and site_spec.site != "mlp_out_post_norm":
        raise ValueError("transcoders are evaluated at the mlp_out_post_norm site")
    source = SiteSpec("mlp_in_post_norm", site_spec.layer) if transcoder else site_spec
    c = 1.0 if sae.parameterization == INFERENCE else float(norm)

    if precision == BF16:
        host = host.to_reduced_precision()
        transform = reduced_precision_transform(sae, norm)
        p_eval = bf16_params(sae)
        scale_in = lambda x: bf16_round(x / np.float32(c))
    else:
        transform = raw_transform(sae, norm)
        p_eval = sae
        scale_in = lambda x: x / c

    def fidelity(seqs):
        x, t = _site_rows(host, seqs, [source, site_spec])
        l0 = mean_l0(p_eval, [scale_in(x)])
        fv = fvu(transform, [x], [t])
        dl = delta_loss(host, transform, site_spec, seqs, transcoder=transcoder)
        return l0, fv, dl

    l0, fv, dl = fidelity(sequences)
    mean = site_mean(host, site_spec, sequences)
    ablate = delta_loss(host, mean_ablation_transform(mean), site_spec, sequences)
    curves = per_position_curves(host, transform, site_spec, sequences, transcoder=transcoder)
    breakdown = {}
    for tag, seqs in (extra_corpora or {}).items():
        b_l0, b_fv, b_dl = fidelity(seqs)
        breakdown[tag] = {"mean_l0": b_l0, "fvu": b_fv, "delta_loss": b_dl.delta}

    meta = {"site": site_spec.site, "layer": site_spec.layer, "width": sae.n_latents, "kind": sae.kind,
            "precision": precision, "eval_sequences": int(np.asarray(sequences).shape[0])}
    meta.update(metadata or {})
    report = EvalReport(l0, fv, dl.base, dl.spliced, dl.delta, ablate.spliced, meta, curves, breakdown)
    if freq_sequences is not None:
        report.histogram = frequency_histogram(p_eval, freq_sequences, host, site_spec, norm)
        report.metadata["freq_tokens"] = report.histogram.token_count
        report.metadata["dead_latents"] = report.histogram.zero_count
    if attribution_sequences is not None and not transcoder:
        report.r_l0_mean = attribution_r_l0(host, sae, site_spec, attribution_sequences, norm).mean
    return report
