"""Adam training loop for JumpReLU SAEs and transcoders."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .core import AUTOENCODER, DEFAULT_BANDWIDTH, INFERENCE, TRANSCODER, Gradients, SaeParams, loss_and_gradients
from .io import atomic_write_text, dump_kv, read_kv

log = logging.getLogger(__name__)

THETA_FLOOR = 1e-9
INIT_THRESHOLD = 0.001
UNIT_NORM_TOL = 1e-4


class NumericError(RuntimeError):
    pass


class ConstraintError(ValueError):
    pass


@dataclass
class TrainPlan:
    eta: float = 7e-5
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    lr_warmup_steps: int = 1000
    lambda_warmup_steps: int = 10000
    lambda_final: float = 1e-3
    epsilon_bandwidth: float = DEFAULT_BANDWIDTH
    total_steps: int = 10000
    seed: int = 0
    n_latents: int = 256
    kind: str = AUTOENCODER

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not math.isfinite(value):
                raise ValueError(f"{f.name} must be finite")
        if self.lr_warmup_steps > self.total_steps or self.lambda_warmup_steps > self.total_steps:
            raise ValueError("warmup steps must not exceed total_steps")
        if self.lambda_final < 0:
            raise ValueError("lambda_final must be non-negative")
        if self.epsilon_bandwidth <= 0:
            raise ValueError("epsilon_bandwidth must be positive")
        if self.batch_size < 1 or self.n_latents < 1:
            raise ValueError("batch_size and n_latents must be positive")
        if self.kind not in (AUTOENCODER, TRANSCODER):
            raise ValueError(f"unknown kind {self.kind!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, items: dict) -> TrainPlan:
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(items) - set(types)
        if unknown:
            raise KeyError(f"unknown TrainPlan key(s): {', '.join(sorted(unknown))}")
        casts = {"float": float, "int": int, "str": str}
        return cls(**{k: casts[types[k]](v) for k, v in items.items()})


@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: SaeParams) -> OptimizerState:
        arrays = params.arrays()
        return cls(
            {k: np.zeros_like(v, dtype=np.float64) for k, v in arrays.items()},
            {k: np.zeros_like(v, dtype=np.float64) for k, v in arrays.items()},
        )


@dataclass
class StepMetrics:
    step: int
    lr: float
    lam: float
    recon_loss: float
    mean_l0: float
    total_loss: float = field(init=False)

    def __post_init__(self):
        self.total_loss = self.recon_loss + self.lam * self.mean_l0


def lr_at(plan: TrainPlan, step: int) -> float:
    """Cosine warmup from 0.1*eta to eta, then constant."""
    warm = plan.lr_warmup_steps
    if warm <= 0 or step >= warm:
        return plan.eta
    return plan.eta * (0.1 + 0.9 * (1.0 - math.cos(math.pi * step / warm)) / 2.0)


def lambda_at(plan: TrainPlan, step: int) -> float:
    warm = plan.lambda_warmup_steps
    if warm <= 0:
        return plan.lambda_final
    return min(step / warm, 1.0) * plan.lambda_final


def decoder_column_norms(w_dec: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->j", w_dec, w_dec, dtype=np.float64))


def project_and_constrain(params: SaeParams, grads: Gradients) -> Gradients:
    """Remove the component of each decoder-column gradient along its column."""
    w_dec = np.asarray(params.w_dec, dtype=np.float64)
    norms = decoder_column_norms(w_dec)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        raise ConstraintError(f"decoder column {bad[0]} has norm {norms[bad[0]]:.6g}, expected 1")
    along = np.einsum("ij,ij->j", grads.w_dec, w_dec)
    return grads.replace(w_dec=grads.w_dec - w_dec * along)


def init_params(n: int, m: int, seed: int, kind: str = AUTOENCODER) -> SaeParams:
    """He-uniform decoder with unit-norm columns; encoder is its transpose for autoencoders."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    rng = np.random.default_rng(seed)
    limit = math.sqrt(6.0 / m)
    w_dec = rng.uniform(-limit, limit, size=(n, m))
    w_dec /= decoder_column_norms(w_dec)
    if kind == TRANSCODER:
        enc_limit = math.sqrt(6.0 / n)
        w_enc = rng.uniform(-enc_limit, enc_limit, size=(m, n))
    else:
        w_enc = w_dec.T.copy()
    return SaeParams(
        w_enc=w_enc,
        b_enc=np.zeros(m),
        w_dec=w_dec,
        b_dec=np.zeros(n),
        theta=np.full(m, INIT_THRESHOLD),
        kind=kind,
    )


def train_step(params: SaeParams, opt: OptimizerState, batch, plan: TrainPlan, step: int, targets=None):
    """One Adam update. Returns ``(params, opt, metrics)``; inputs are not mutated."""
    if params.parameterization == INFERENCE:
        raise ValueError("cannot train folded (inference) parameters")
    if params.kind == TRANSCODER and targets is None:
        raise ValueError("transcoder training needs target activations")
    lam = lambda_at(plan, step)
    lr = lr_at(plan, step)
    target = batch if targets is None else targets
    with np.errstate(over="ignore", invalid="ignore"):
        return _adam_update(params, opt, batch, target, plan, step, lam, lr)


def _adam_update(params, opt, batch, target, plan, step, lam, lr):
    (recon, l0), grads = loss_and_gradients(params, batch, target, lam, plan.epsilon_bandwidth)
    grads = project_and_constrain(params, grads)

    t = opt.step + 1
    bc1 = 1.0 - plan.beta1**t
    bc2 = 1.0 - plan.beta2**t
    new_arrays, m1, m2 = {}, {}, {}
    for name, value in params.arrays().items():
        g = getattr(grads, name)
        m = plan.beta1 * opt.first_moment[name] + (1.0 - plan.beta1) * g
        v = plan.beta2 * opt.second_moment[name] + (1.0 - plan.beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + plan.adam_eps)
        new_arrays[name] = value - update
        m1[name], m2[name] = m, v

    w_dec = new_arrays["w_dec"]
    new_arrays["w_dec"] = w_dec / decoder_column_norms(w_dec)
    new_arrays["theta"] = np.maximum(new_arrays["theta"], THETA_FLOOR)
    for name, value in new_arrays.items():
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite {name} after step {step} (lr={lr:g}, lambda={lam:g}, recon={recon:g})")

    metrics = StepMetrics(step=step, lr=lr, lam=lam, recon_loss=recon, mean_l0=l0)
    return params.replace(**new_arrays), OptimizerState(m1, m2, t), metrics


def train(
    plan: TrainPlan,
    batches: Iterable,
    n_inputs: int,
    params: SaeParams | None = None,
    log_every: int = 0,
    callback: Callable[[StepMetrics], None] | None = None,
):
    """Run ``plan.total_steps`` steps over ``batches``.

    ``batches`` yields input matrices, or ``(inputs, targets)`` pairs for
    transcoders. Returns the trained parameters and the last step's metrics.
    """
    if params is None:
        params = init_params(n_inputs, plan.n_latents, plan.seed, plan.kind)
    opt = OptimizerState.zeros_like(params)
    metrics = None
    it = iter(batches)
    for step in range(plan.total_steps):
        try:
            item = next(it)
        except StopIteration:
            raise RuntimeError(f"batch stream ended after {step} of {plan.total_steps} steps") from None
        batch, targets = item if isinstance(item, tuple) else (item, None)
        params, opt, metrics = train_step(params, opt, batch, plan, step, targets)
        if callback is not None:
            callback(metrics)
        if log_every and (step % log_every == 0 or step == plan.total_steps - 1):
            log.info(
                "step %d lr %.3g lambda %.3g recon %.5f l0 %.2f", step, metrics.lr, metrics.lam,
                metrics.recon_loss, metrics.mean_l0,
            )
    return params, metrics


# --- checkpoints ----------------------------------------------------------


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def save_checkpoint(path, params: SaeParams, plan: TrainPlan, step: int, norm_constant: float, extra=None):
    from .core import save_params

    meta = {"step": step, "norm_constant": float(norm_constant), "kind": params.kind,
            "parameterization": params.parameterization}
    meta.update({f"plan.{k}": v for k, v in plan.to_dict().items()})
    if extra:
        meta.update(extra)
    save_params(params, path)
    atomic_write_text(sidecar_path(path), dump_kv(meta))


def load_checkpoint(path):
    """Return ``(params, meta)`` where meta values are strings except ``norm_constant``."""
    from .core import load_params

    params = load_params(path)
    meta = read_kv(sidecar_path(path)) if sidecar_path(path).exists() else {}
    if "norm_constant" in meta:
        meta["norm_constant"] = float(meta["norm_constant"])
    return params, meta


def plan_from_meta(meta: dict) -> TrainPlan:
    return TrainPlan.from_dict({k[5:]: v for k, v in meta.items() if k.startswith("plan.")})
