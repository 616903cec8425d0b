"""Training loop: missing-value substitution, Adam, freezing, checkpoints.

Randomness is split per (seed, step, purpose), so a resumed run replays the
exact stream of every later step without tracking generator state.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NonFiniteGradientError
from .heads import flatten, sample_t_given_ck
from .model import TzkModel
from .objective import Batch, PreparedBatch, total_objective
from .rng import stream
from .tensor import Tape, Tensor, backward, index_rows, put_rows, reparam_sample

FREEZE_POLICIES = ("t_only", "any_substitution")


def substitute_missing(batch: Batch, model: TzkModel, rng: np.random.Generator,
                       freeze_policy="t_only") -> PreparedBatch:
    """Fill latent values by sampling from the current learned priors.

    Latent characteristics with presence observed or latent are drawn from
    the conditional p(C|T, presence); with presence observed absent, from the
    characteristic prior (the decoder needs some value for its discriminator
    term). Missing observations are drawn from a conditional prior of an
    involved head, which freezes that head's discriminators for the step;
    under the "any_substitution" policy a head's discriminators freeze
    whenever any of its latent continuous values was sampled.
    """
    if freeze_policy not in FREEZE_POLICIES:
        raise ContractViolation(f"freeze_policy must be one of {FREEZE_POLICIES}")
    batch.validate()
    if batch.size < 1:
        raise ContractViolation("cannot substitute into an empty batch")
    if set(batch.sup) != set(model.heads):
        raise ContractViolation("batch supervision heads do not match the model head registry")
    b = batch.size
    dtype = model.dtype
    freeze = []

    images = batch.images.astype(dtype, copy=False)
    if batch.t_missing is not None and batch.t_missing.any():
        miss = np.flatnonzero(batch.t_missing)
        obs = np.flatnonzero(~batch.t_missing)
        by_head: dict[str, list[int]] = {}
        for r in miss:
            involved = [hid for hid in model.heads if batch.sup[hid].kappa[r] == 1]
            if not involved:
                raise ContractViolation(f"row {r}: a missing observation needs a present knowledge type")
            pick = involved[int(rng.integers(len(involved)))]
            by_head.setdefault(pick, []).append(r)
            for hid in involved:
                freeze.extend(model.disc_group_prefixes(hid))
        parts = []
        if obs.size:
            parts.append(put_rows(Tensor(images[obs]), obs, b))
        for hid, rows in by_head.items():
            head = model.heads[hid]
            hs = batch.sup[hid]
            c_np = np.where(hs.c_observed[rows, None], hs.c_value[rows],
                            rng.standard_normal((len(rows), head.c_dim))).astype(dtype)
            noise = Tensor(rng.standard_normal((len(rows), head.z_dim)).astype(dtype))
            t_rows = sample_t_given_ck(Tensor(c_np), head, model.flow, noise)
            parts.append(put_rows(t_rows, np.asarray(rows), b))
        t = parts[0]
        for p in parts[1:]:
            t = t + p
    else:
        t = Tensor(images)

    z_img, ld_inv = model.flow.inverse(t)
    z = flatten(z_img)
    # per-sample (B,) even when every layer's logdet is data-independent
    ld_inv = ld_inv + Tensor(np.zeros(b, dtype=dtype))
    log_pt = model.base.logpdf(z) + ld_inv

    c_sub = {}
    for hid in model.heads:
        head = model.heads[hid]
        hs = batch.sup[hid]
        parts = []
        obs_rows = np.flatnonzero(hs.c_observed)
        if obs_rows.size:
            parts.append(put_rows(Tensor(hs.c_value[obs_rows].astype(dtype)), obs_rows, b))
        cond_rows = np.flatnonzero(~hs.c_observed & (hs.kappa != 0))
        if cond_rows.size:
            mu, ls = head.c_stats(index_rows(z, cond_rows))
            noise = Tensor(rng.standard_normal((cond_rows.size, head.c_dim)).astype(dtype))
            parts.append(put_rows(reparam_sample(mu, ls, noise), cond_rows, b))
        prior_rows = np.flatnonzero(~hs.c_observed & (hs.kappa == 0))
        if prior_rows.size:
            parts.append(put_rows(Tensor(rng.standard_normal((prior_rows.size, head.c_dim)).astype(dtype)),
                                  prior_rows, b))
        c = parts[0]
        for p in parts[1:]:
            c = c + p
        c_sub[hid] = c
        if freeze_policy == "any_substitution" and (cond_rows.size or prior_rows.size):
            freeze.extend(model.disc_group_prefixes(hid))

    return PreparedBatch(batch=batch, t=t, z=z, ld_inv=ld_inv, log_pt=log_pt,
                         c_sub=c_sub, freeze_groups=sorted(set(freeze)))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, frozen_prefixes=()) -> None:
    """One Adam update with bias correction; frozen groups skipped entirely."""
    frozen_prefixes = tuple(frozen_prefixes)
    live = {}
    for name, p in params.items():
        if any(name.startswith(f) for f in frozen_prefixes):
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        live[name] = (p, g)

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, (p, g) in live.items():
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        state.m[name] = m
        state.v[name] = v
        upd = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - upd).astype(p.data.dtype, copy=False)


def clip_gradients(params: dict, max_norm: float, frozen_prefixes=()) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    frozen_prefixes = tuple(frozen_prefixes)
    sq = 0.0
    live = []
    for name, p in params.items():
        if p.grad is None or any(name.startswith(f) for f in frozen_prefixes):
            continue
        flat = p.grad.reshape(-1)
        sq += float(np.dot(flat, flat))
        live.append(p)
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in live:
            p.grad = p.grad * scale
    return norm


@dataclass
class TrainResult:
    final_step: int
    aborted: bool
    last_checkpoint: str | None
    history: list  # (step, LossBreakdown)


def _log_header(model: TzkModel) -> str:
    cols = ["step", "log_enc", "log_dec", "consistency"]
    cols += [f"gap:{hid}" for hid in model.heads]
    cols.append("total")
    return "\t".join(cols)


def _log_line(step: int, br) -> str:
    vals = [str(step), f"{br.log_enc:.6f}", f"{br.log_dec:.6f}", f"{br.consistency:.6f}"]
    vals += [f"{br.gap[h]:.6f}" for h in br.gap]
    vals.append(f"{br.total:.6f}")
    return "\t".join(vals)


def train(model: TzkModel, get_batch, cfg, out_dir=None, start_step=0,
          adam: AdamState | None = None, log=None, save_checkpoint=None) -> TrainResult:
    """Run the optimization loop.

    get_batch(step) returns a Batch or None when the data stream is
    exhausted (normal completion). cfg provides seed, steps, lr, betas,
    adam_eps, grad_clip, lambda per head, gap_samples, freeze_policy,
    checkpoint_interval. save_checkpoint(step, adam) persists state and
    returns a path; it is called every checkpoint_interval steps, at exit,
    and before aborting on a non-finite loss.
    """
    if adam is None:
        adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    params = model.named_parameters()
    history = []
    lam = dict(cfg.lam())
    last_ckpt = None
    aborted = False
    step = start_step
    if log:
        log(_log_header(model))

    while step < cfg.steps:
        batch = get_batch(step)
        if batch is None:
            break
        model.zero_grad()
        with Tape() as tape:
            prep = substitute_missing(batch, model, stream(cfg.seed, "step", step, "subst"),
                                      freeze_policy=cfg.freeze_policy)
            frozen = prep.freeze_groups
            if frozen:
                tape.freeze([t for f in frozen for t in model.params_with_prefix(f)])
            br = total_objective(prep, model, lam, stream(cfg.seed, "step", step, "gap"),
                                 gap_samples=cfg.gap_samples or batch.size)
            if not np.isfinite(br.total):
                aborted = True
                break
            loss = -br.total_tensor
            backward(tape, loss)
        if cfg.grad_clip:
            clip_gradients(params, cfg.grad_clip, frozen)
        try:
            adam_step(params, adam, frozen)
        except NonFiniteGradientError:
            aborted = True
            break
        history.append((step, br))
        if log:
            log(_log_line(step, br))
        step += 1
        if save_checkpoint and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            last_ckpt = save_checkpoint(step, adam)

    if save_checkpoint:
        last_ckpt = save_checkpoint(step, adam)
    return TrainResult(final_step=step, aborted=aborted, last_checkpoint=last_ckpt, history=history)
