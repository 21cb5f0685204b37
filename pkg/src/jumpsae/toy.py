"""Small deterministic transformer host and synthetic Markov corpus.

Block layout follows the RMSNorm placement of Gemma 2 (a norm at the start
and end of both the attention and MLP sublayers), which makes the hook sites
meaningful:

* ``attn_out_pre_wo``: concatenated head outputs before ``W_O``
* ``mlp_in_post_norm``: MLP input just after the pre-MLP norm (transcoder input)
* ``mlp_out_post_norm``: MLP output after its post-norm
* ``resid_post_mlp``: residual stream after the MLP sublayer
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .io import atomic_write_bytes
from .store import SiteSpec

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
RMS_EPS = 1e-6


# --- corpus ---------------------------------------------------------------


@dataclass(frozen=True)
class MarkovSource:
    """Order-2 Markov chain over ``n_symbols`` symbols (token ids offset by the specials)."""

    n_symbols: int
    transitions: np.ndarray  # (S, S, S) next-symbol probabilities

    @classmethod
    def random(cls, n_symbols: int = 64, seed: int = 0, concentration: float = 0.05,
               second_order_weight: float = 0.5) -> MarkovSource:
        """Mixture of a previous-symbol table and a full two-symbol table."""
        rng = np.random.default_rng(seed)
        first = rng.dirichlet(np.full(n_symbols, concentration), size=n_symbols)
        second = rng.dirichlet(np.full(n_symbols, concentration), size=(n_symbols, n_symbols))
        t = (1 - second_order_weight) * first[None, :, :] + second_order_weight * second
        return cls(n_symbols, t)

    @property
    def vocab_size(self) -> int:
        return self.n_symbols + N_SPECIAL


def generate_corpus(source: MarkovSource, num_seqs: int, seq_len: int, seed: int, min_len: int | None = None):
    """Sequences ``BOS s_1..s_k EOS PAD...`` of fixed length; k varies per sequence."""
    rng = np.random.default_rng(seed)
    min_len = max(2, seq_len // 2) if min_len is None else min_len
    out = np.full((num_seqs, seq_len), PAD, dtype=np.int32)
    cum = np.cumsum(source.transitions, axis=-1)
    for i in range(num_seqs):
        k = int(rng.integers(min_len, seq_len - 1))
        syms = np.empty(k, dtype=np.int64)
        syms[:2] = rng.integers(0, source.n_symbols, size=2)
        u = rng.random(k)
        for j in range(2, k):
            syms[j] = min(int(np.searchsorted(cum[syms[j - 2], syms[j - 1]], u[j], side="right")), source.n_symbols - 1)
        out[i, 0] = BOS
        out[i, 1 : k + 1] = syms + N_SPECIAL
        out[i, k + 1] = EOS
    return out


def special_mask(tokens) -> np.ndarray:
    return np.asarray(tokens) < N_SPECIAL


def loss_mask(tokens) -> np.ndarray:
    """(B, T-1) mask of next-token predictions whose input and target are both ordinary tokens."""
    s = special_mask(tokens)
    return ~s[:, :-1] & ~s[:, 1:]


# --- model ----------------------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    d_mlp: int = 256
    vocab: int = 67
    max_len: int = 128

    def __post_init__(self):
        if not 1 <= self.n_layers <= 8 or self.vocab > 256:
            raise ValueError("toy host supports 1-8 layers and vocab <= 256")

    def site_width(self, site: str) -> int:
        return self.n_heads * self.head_dim if site == "attn_out_pre_wo" else self.d_model


def _weight_shapes(cfg: ToyConfig) -> dict[str, tuple]:
    h = cfg.n_heads * cfg.head_dim
    shapes = {"embed": (cfg.vocab, cfg.d_model), "pos": (cfg.max_len, cfg.d_model)}
    for l in range(cfg.n_layers):
        shapes.update({
            f"l{l}_attn_pre": (cfg.d_model,),
            f"l{l}_w_q": (h, cfg.d_model),
            f"l{l}_w_k": (h, cfg.d_model),
            f"l{l}_w_v": (h, cfg.d_model),
            f"l{l}_w_o": (cfg.d_model, h),
            f"l{l}_attn_post": (cfg.d_model,),
            f"l{l}_mlp_pre": (cfg.d_model,),
            f"l{l}_w_up": (cfg.d_mlp, cfg.d_model),
            f"l{l}_w_down": (cfg.d_model, cfg.d_mlp),
            f"l{l}_mlp_post": (cfg.d_model,),
        })
    shapes["final_norm"] = (cfg.d_model,)
    shapes["unembed"] = (cfg.vocab, cfg.d_model)
    return shapes


@dataclass
class Splice:
    """Replace a site activation by ``transform(activation)`` at non-special positions.

    With ``transcoder=True`` the site must be ``mlp_out_post_norm`` and the
    transform receives the ``mlp_in_post_norm`` activations instead, replacing
    the whole MLP sublayer.
    """

    site_spec: SiteSpec
    transform: Callable
    transcoder: bool = False

    def __post_init__(self):
        if self.transcoder and self.site_spec.site != "mlp_out_post_norm":
            raise ValueError("transcoder splices replace the mlp_out_post_norm site")


def _rms(x, gain):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + RMS_EPS) * gain


def _bf16(x):
    return x.to(torch.bfloat16).to(torch.float32)


class ToyLm:
    """Numerically plain transformer; weights live in ``self.weights`` (float32 tensors)."""

    def __init__(self, cfg: ToyConfig, weights: dict[str, torch.Tensor] | None = None, reduced: bool = False):
        self.cfg = cfg
        self.reduced = reduced
        shapes = _weight_shapes(cfg)
        if weights is None:
            weights = {}
            for name, shape in shapes.items():
                if len(shape) == 1:
                    weights[name] = torch.ones(shape)
                elif name in ("embed", "unembed", "pos"):
                    weights[name] = torch.randn(shape) * 0.02
                else:
                    weights[name] = torch.randn(shape) / math.sqrt(shape[1])
        for name, shape in shapes.items():
            if tuple(weights[name].shape) != shape:
                raise ValueError(f"weight {name} has shape {tuple(weights[name].shape)}, expected {shape}")
        self.weights = {k: weights[k].detach().to(torch.float32).contiguous() for k in shapes}

    # parameters ---------------------------------------------------------

    def parameters(self):
        return list(self.weights.values())

    def copy(self) -> ToyLm:
        return ToyLm(self.cfg, {k: v.clone() for k, v in self.weights.items()}, self.reduced)

    def to_reduced_precision(self) -> ToyLm:
        """Copy with bfloat16-rounded weights whose forward also rounds activations."""
        return ToyLm(self.cfg, {k: _bf16(v) for k, v in self.weights.items()}, reduced=True)

    # forward ------------------------------------------------------------

    def _splice_at(self, act, site, layer, splice, keep, source=None):
        if splice is None or splice.site_spec != SiteSpec(site, layer):
            return act
        src = act if source is None else source
        rows = src[keep].detach().cpu().numpy()
        new_rows = np.asarray(splice.transform(rows), dtype=np.float32)
        if new_rows.shape != tuple(act[keep].shape):
            raise ValueError(f"splice transform returned shape {new_rows.shape}, expected {tuple(act[keep].shape)}")
        out = act.clone()
        out[keep] = torch.from_numpy(new_rows)
        return out

    def forward(self, tokens, splice: Splice | None = None, capture=(), grad_site: SiteSpec | None = None):
        """Return ``(logits, captured)``; ``captured`` maps each requested SiteSpec to its tensor.

        ``grad_site`` detaches that site's activation into a leaf that requires
        grad (returned in ``captured``) so callers can differentiate with
        respect to it.
        """
        w, cfg = self.weights, self.cfg
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        b, t = tokens.shape
        if t > cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
        keep = torch.from_numpy(~special_mask(tokens.numpy()))
        rnd = _bf16 if self.reduced else (lambda x: x)
        wanted = set(capture) | ({grad_site} if grad_site else set())
        captured = {}

        def hook(site, layer, act, source=None):
            act = rnd(act)
            act = self._splice_at(act, site, layer, splice, keep, source)
            spec = SiteSpec(site, layer)
            if spec == grad_site:
                act = act.detach().requires_grad_(True)
            if spec in wanted:
                captured[spec] = act
            return act

        h = rnd(w["embed"][tokens] + w["pos"][:t])
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        for l in range(cfg.n_layers):
            a_in = _rms(h, w[f"l{l}_attn_pre"])
            q = (a_in @ w[f"l{l}_w_q"].T).view(b, t, cfg.n_heads, cfg.head_dim).transpose(1, 2)
            k = (a_in @ w[f"l{l}_w_k"].T).view(b, t, cfg.n_heads, cfg.head_dim).transpose(1, 2)
            v = (a_in @ w[f"l{l}_w_v"].T).view(b, t, cfg.n_heads, cfg.head_dim).transpose(1, 2)
            scores = (q @ k.transpose(-1, -2)) / math.sqrt(cfg.head_dim)
            att = torch.softmax(scores.masked_fill(~causal, float("-inf")), dim=-1)
            z = (att @ v).transpose(1, 2).reshape(b, t, cfg.n_heads * cfg.head_dim)
            z = hook("attn_out_pre_wo", l, z)
            h = rnd(h + _rms(z @ w[f"l{l}_w_o"].T, w[f"l{l}_attn_post"]))

            m_in = hook("mlp_in_post_norm", l, _rms(h, w[f"l{l}_mlp_pre"]))
            m = _rms(F.gelu(m_in @ w[f"l{l}_w_up"].T) @ w[f"l{l}_w_down"].T, w[f"l{l}_mlp_post"])
            m = hook("mlp_out_post_norm", l, m, source=m_in if splice is not None and splice.transcoder else None)
            h = hook("resid_post_mlp", l, rnd(h + m))
        logits = _rms(h, w["final_norm"]) @ w["unembed"].T
        return rnd(logits), captured

    def logits(self, tokens, splice: Splice | None = None) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(tokens, splice)[0]

    def token_losses(self, tokens, splice: Splice | None = None) -> np.ndarray:
        """(B, T-1) next-token cross-entropy, unmasked."""
        tokens = np.asarray(tokens)
        with torch.no_grad():
            logits, _ = self.forward(tokens, splice)
        target = torch.as_tensor(tokens[:, 1:], dtype=torch.long)
        ce = F.cross_entropy(logits[:, :-1].reshape(-1, self.cfg.vocab), target.reshape(-1), reduction="none")
        return ce.view(target.shape).numpy().astype(np.float64)

    # host interface used by collection and evaluation -------------------

    def special_mask(self, tokens) -> np.ndarray:
        return special_mask(tokens)

    def capture(self, tokens, site_specs) -> list[np.ndarray]:
        with torch.no_grad():
            _, got = self.forward(tokens, capture=tuple(site_specs))
        return [got[s].numpy() for s in site_specs]

    def site_gradients(self, tokens, site_spec: SiteSpec) -> tuple[np.ndarray, np.ndarray]:
        """Per-position gradient of the mean-centred correct-token logit w.r.t. the site.

        Returns ``(activations, grads)``, both (B, T-1, n): entry ``[b, t]`` is
        the derivative of position t's centred logit for token t+1 with respect
        to the site activation at position t.
        """
        tokens = np.asarray(tokens)
        logits, got = self.forward(tokens, grad_site=site_spec)
        x = got[site_spec]
        target = torch.as_tensor(tokens[:, 1:], dtype=torch.long)
        lg = logits[:, :-1]
        centred = lg.gather(-1, target[..., None])[..., 0] - lg.mean(-1)
        t = centred.shape[1]
        grads = torch.zeros(x.shape[0], t, x.shape[-1])
        for pos in range(t):
            (g,) = torch.autograd.grad(centred[:, pos].sum(), x, retain_graph=pos < t - 1)
            grads[:, pos] = g[:, pos]
        return x[:, :-1].detach().numpy(), grads.numpy()

    # transforms ---------------------------------------------------------

    def fold_rms_gains(self) -> ToyLm:
        """Fold each pre-MLP norm gain into the MLP input matrix; the model output is unchanged."""
        w = {k: v.clone() for k, v in self.weights.items()}
        for l in range(self.cfg.n_layers):
            g = w[f"l{l}_mlp_pre"]
            w[f"l{l}_w_up"] = w[f"l{l}_w_up"] * g[None, :]
            w[f"l{l}_mlp_pre"] = torch.ones_like(g)
        return ToyLm(self.cfg, w, self.reduced)


# --- training -------------------------------------------------------------


def train_toy_lm(corpus: np.ndarray, steps: int, seed: int, cfg: ToyConfig | None = None,
                 batch_size: int = 32, lr: float = 3e-3, log_every: int = 0) -> ToyLm:
    """Plain Adam on next-token cross-entropy (targets other than PAD)."""
    corpus = np.asarray(corpus)
    cfg = cfg or ToyConfig(max_len=corpus.shape[1])
    torch.manual_seed(seed)
    lm = ToyLm(cfg)
    params = lm.parameters()
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        batch = corpus[rng.integers(0, corpus.shape[0], size=batch_size)]
        logits, _ = lm.forward(batch)
        target = torch.as_tensor(batch[:, 1:], dtype=torch.long)
        mask = target != PAD
        ce = F.cross_entropy(logits[:, :-1].reshape(-1, cfg.vocab), target.reshape(-1), reduction="none")
        loss = (ce * mask.reshape(-1)).sum() / mask.sum()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"toy LM training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            print(f"step {step} loss {loss.item():.4f}", flush=True)
    for p in params:
        p.requires_grad_(False)
    return lm


def heldout_loss(lm: ToyLm, corpus: np.ndarray) -> float:
    tokens = np.asarray(corpus)
    ce = lm.token_losses(tokens)
    mask = tokens[:, 1:] != PAD
    return float(ce[mask].mean())


# --- serialization --------------------------------------------------------

MAGIC = b"TOYL"
VERSION = 1
_HEAD = struct.Struct("<4sI7I")


def lm_to_bytes(lm: ToyLm) -> bytes:
    c = lm.cfg
    head = _HEAD.pack(MAGIC, VERSION, c.n_layers, c.d_model, c.n_heads, c.head_dim, c.d_mlp, c.vocab, c.max_len)
    return head + b"".join(lm.weights[k].numpy().astype("<f4").tobytes() for k in _weight_shapes(c))


def lm_from_bytes(data: bytes, source: str = "<bytes>") -> ToyLm:
    if len(data) < _HEAD.size:
        raise ValueError(f"{source}: truncated toy LM header")
    magic, version, *fields = _HEAD.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{source}: not a toy LM file (magic {magic!r}, version {version})")
    cfg = ToyConfig(*fields)
    shapes = _weight_shapes(cfg)
    need = _HEAD.size + 4 * sum(math.prod(s) for s in shapes.values())
    if len(data) != need:
        raise ValueError(f"{source}: expected {need} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEAD.size)
    weights, pos = {}, 0
    for name, shape in shapes.items():
        size = math.prod(shape)
        weights[name] = torch.from_numpy(flat[pos : pos + size].reshape(shape).astype(np.float32))
        pos += size
    return ToyLm(cfg, weights)


def save_lm(lm: ToyLm, path) -> None:
    atomic_write_bytes(path, lm_to_bytes(lm))


def load_lm(path) -> ToyLm:
    path = Path(path)
    return lm_from_bytes(path.read_bytes(), str(path))


def config_dict(lm: ToyLm) -> dict:
    return asdict(lm.cfg)

