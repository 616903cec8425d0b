"""Encoder/decoder joint likelihoods, knowledge consistency, and the gap.

Conventions fixed here:
  * per head i, the encoder joint factor is
        kappa=1: log p(C_i|T,1) + log p(kappa=1|T)
        kappa=0: log p(kappa=0|T)
    and the decoder joint factor, expressed relative to log p(T), is
        kappa=1: [log p(T|C_i,1) - log p(T)] + log p(kappa=1|C_i) + log p(C_i)
        kappa=0: log p(kappa=0|C_i)
    with p(T|C_i,kappa=0) := p(T) (absent knowledge says nothing about T) and
    characteristic terms scored only on the presence branch. Summing factors
    and adding log p(T) once reproduces the N-type products with their
    1/p(T)^(N-1) normalization, and the zero-knowledge case is exactly p(T).
  * latent presence bits are handled by exact enumeration of both branches,
    weighted by the detached discriminator probability p(kappa|T).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractViolation
from .heads import KnowledgeHead, flatten, log_p_c_prior
from .model import TzkModel
from .tensor import Tensor, concat, gaussian_logpdf, index_rows, put_rows, reparam_sample

KAPPA_LATENT = -1
_VALID_KAPPA = (0, 1, KAPPA_LATENT)


@dataclass
class SupervisionRecord:
    """Per-datum supervision for one knowledge type."""

    kappa: int = KAPPA_LATENT          # 1, 0, or KAPPA_LATENT
    c_value: np.ndarray | None = None  # observed characteristic, else None

    def validate(self):
        if self.kappa not in _VALID_KAPPA:
            raise ContractViolation(f"kappa must be one of {_VALID_KAPPA}, got {self.kappa}")
        if self.c_value is not None and self.kappa != 1:
            raise ContractViolation("an observed characteristic requires kappa observed as 1")


@dataclass
class HeadSupervision:
    """Column-wise supervision for one head across a batch."""

    kappa: np.ndarray       # (B,) int8 in {1, 0, KAPPA_LATENT}
    c_value: np.ndarray     # (B, c_dim); meaningful where c_observed
    c_observed: np.ndarray  # (B,) bool

    def validate(self):
        if not np.all(np.isin(self.kappa, _VALID_KAPPA)):
            raise ContractViolation("kappa entries must be 1, 0, or latent")
        if np.any(self.c_observed & (self.kappa != 1)):
            raise ContractViolation("an observed characteristic requires kappa observed as 1")


@dataclass
class Batch:
    """Observations plus per-knowledge supervision flags and values."""

    images: np.ndarray                       # (B, C, H, W) float
    sup: dict[str, HeadSupervision] = field(default_factory=dict)
    t_missing: np.ndarray | None = None      # (B,) bool; rows to fill by sampling

    @property
    def size(self):
        return self.images.shape[0]

    def validate(self):
        for hs in self.sup.values():
            hs.validate()
            if hs.kappa.shape[0] != self.size:
                raise ContractViolation("supervision length does not match batch size")

    @classmethod
    def from_records(cls, images, records: list[dict[str, SupervisionRecord]], c_dims: dict[str, int]):
        b = images.shape[0]
        sup = {}
        for head_id, c_dim in c_dims.items():
            kappa = np.full(b, KAPPA_LATENT, dtype=np.int8)
            c_value = np.zeros((b, c_dim), dtype=images.dtype)
            c_obs = np.zeros(b, dtype=bool)
            for r, rec in enumerate(records):
                sr = rec.get(head_id)
                if sr is None:
                    continue
                sr.validate()
                kappa[r] = sr.kappa
                if sr.c_value is not None:
                    c_value[r] = sr.c_value
                    c_obs[r] = True
            sup[head_id] = HeadSupervision(kappa, c_value, c_obs)
        batch = cls(images=images, sup=sup)
        batch.validate()
        return batch


@dataclass
class PreparedBatch:
    """A batch after missing-value substitution, sharing one flow inversion."""

    batch: Batch
    t: Tensor                    # (B, C, H, W)
    z: Tensor                    # (B, D) flat latent
    ld_inv: Tensor               # (B,) inverse-direction log-determinant
    log_pt: Tensor               # (B,) unconditional log-density
    c_sub: dict[str, Tensor]     # per head: (B, c_dim) observed/substituted values
    freeze_groups: list[str] = field(default_factory=list)


@dataclass
class LossBreakdown:
    log_enc: float
    log_dec: float
    consistency: float
    gap: dict[str, float]
    lam: dict[str, float]
    total: float
    total_tensor: Tensor
    gap_draws: dict[str, np.ndarray] = field(default_factory=dict)


def _head_factors(prep: PreparedBatch, head: KnowledgeHead):
    """Per-sample encoder and decoder factors for one head, shape (B,) each."""
    b = prep.batch.size
    kappa = prep.batch.sup[head.id].kappa
    rows1 = np.flatnonzero(kappa == 1)
    rows0 = np.flatnonzero(kappa == 0)
    rows_l = np.flatnonzero(kappa == KAPPA_LATENT)

    c_all = prep.c_sub[head.id]
    logit_t = head.logit_t(prep.z)
    logit_c = head.logit_c(c_all)
    lp_k1_t = logit_t.log_sigmoid()
    lp_k0_t = (-logit_t).log_sigmoid()
    lp_k1_c = logit_c.log_sigmoid()
    lp_k0_c = (-logit_c).log_sigmoid()

    rows1l = np.concatenate([rows1, rows_l])
    if rows1l.size:
        z_rows = index_rows(prep.z, rows1l)
        c_rows = index_rows(c_all, rows1l)
        mu_c, ls_c = head.c_stats(z_rows)
        lp_c_given_t = gaussian_logpdf(c_rows, mu_c, ls_c)
        lp_t_cond = head.log_p_t_given_c_from_z(z_rows, index_rows(prep.ld_inv, rows1l), c_rows)
        lp_c_prior = log_p_c_prior(c_rows)
        e1 = lp_c_given_t + index_rows(lp_k1_t, rows1l)
        d1 = (lp_t_cond - index_rows(prep.log_pt, rows1l)) + index_rows(lp_k1_c, rows1l) + lp_c_prior

    n1 = rows1.size
    enc_parts, dec_parts = [], []
    if n1:
        enc_parts.append(put_rows(e1[:n1], rows1, b))
        dec_parts.append(put_rows(d1[:n1], rows1, b))
    if rows0.size:
        enc_parts.append(put_rows(index_rows(lp_k0_t, rows0), rows0, b))
        dec_parts.append(put_rows(index_rows(lp_k0_c, rows0), rows0, b))
    if rows_l.size:
        # exact expectation over the binary variable, weighted by the frozen
        # discriminator probability p(kappa|T)
        w1 = Tensor(expit(logit_t.data[rows_l]))
        w0 = Tensor(1.0 - w1.data)
        e_l = w1 * e1[n1:] + w0 * index_rows(lp_k0_t, rows_l)
        d_l = w1 * d1[n1:] + w0 * index_rows(lp_k0_c, rows_l)
        enc_parts.append(put_rows(e_l, rows_l, b))
        dec_parts.append(put_rows(d_l, rows_l, b))

    enc = enc_parts[0] if enc_parts else Tensor(np.zeros(b, dtype=prep.z.dtype))
    dec = dec_parts[0] if dec_parts else Tensor(np.zeros(b, dtype=prep.z.dtype))
    for p in enc_parts[1:]:
        enc = enc + p
    for p in dec_parts[1:]:
        dec = dec + p
    return enc, dec


def _joints(prep: PreparedBatch, model: TzkModel):
    enc = dec = prep.log_pt
    for head in model.heads.values():
        e, d = _head_factors(prep, head)
        enc = enc + e
        dec = dec + d
    return enc, dec


def log_enc_joint(prep: PreparedBatch, model: TzkModel) -> Tensor:
    """Per-sample log p_enc(T, all knowledge); latent C must be substituted."""
    return _joints(prep, model)[0]


def log_dec_joint(prep: PreparedBatch, model: TzkModel) -> Tensor:
    return _joints(prep, model)[1]


def knowledge_consistency(prep: PreparedBatch, model: TzkModel) -> Tensor:
    """Per-sample log of the geometric mean of encoder and decoder joints."""
    enc, dec = _joints(prep, model)
    return (enc + dec) * 0.5


def knowledge_gap_mc(head: KnowledgeHead, model: TzkModel, n_samples: int,
                     rng: np.random.Generator, return_draws=False):
    """Monte Carlo estimate of KL(decoder joint || encoder joint) for one head.

    Draws follow the decoder: c from its prior, the presence bit by exact
    enumeration of both branches weighted by p(kappa|c), T from the matching
    conditional. Both joints are scored in latent space: the shared-flow
    log-determinant appears with equal sign in log p_dec(T|...) and
    log p_enc(T) and cancels in the ratio, so T itself is never materialized.
    """
    if n_samples < 1:
        raise ContractViolation("knowledge_gap_mc needs n_samples >= 1")
    dtype = model.dtype
    c = Tensor(rng.standard_normal((n_samples, head.c_dim)).astype(dtype))
    logit_c = head.logit_c(c)
    w1 = logit_c.sigmoid()

    # presence branch: z0 ~ N(mu(c), sigma(c)), z = private_flow(z0)
    mu_z, ls_z = head.z_prior_stats(c)
    z0 = reparam_sample(mu_z, ls_z, Tensor(rng.standard_normal((n_samples, head.z_dim)).astype(dtype)))
    z_img, ld_priv_fwd = head.private_flow.forward(z0.reshape(n_samples, *head.z_shape))
    z = flatten(z_img)
    dec1 = gaussian_logpdf(z0, mu_z, ls_z) - ld_priv_fwd + logit_c.log_sigmoid() + log_p_c_prior(c)
    mu_c, ls_c = head.c_stats(z)
    enc1 = gaussian_logpdf(c, mu_c, ls_c) + head.logit_t(z).log_sigmoid() + model.base.logpdf(z)
    r1 = dec1 - enc1

    # absence branch: T ~ p(T), i.e. z ~ base; p(T) cancels in the ratio
    zb = model.base.sample(Tensor(rng.standard_normal((n_samples, head.z_dim)).astype(dtype)))
    r0 = (-logit_c).log_sigmoid() - (-head.logit_t(zb)).log_sigmoid()

    draws = w1 * r1 + (1.0 - w1) * r0
    gap = draws.mean()
    if return_draws:
        return gap, draws.data.copy()
    return gap


def total_objective(prep: PreparedBatch, model: TzkModel, lam: dict, rng: np.random.Generator,
                    gap_samples: int | None = None, keep_gap_draws=False) -> LossBreakdown:
    """Mean knowledge consistency minus the weighted knowledge gaps.

    The returned total is the maximization objective; the training loss is
    its negation. Scalar fields are derived so the documented identities
    (consistency = (enc+dec)/2, total = consistency - sum lam*gap) hold
    exactly on the reported floats.
    """
    if prep.batch.size < 1:
        raise ContractViolation("total_objective needs a non-empty batch")
    enc, dec = _joints(prep, model)
    enc_mean = enc.mean()
    dec_mean = dec.mean()
    cons_mean = (enc_mean + dec_mean) * 0.5

    n = gap_samples if gap_samples is not None else prep.batch.size
    total_t = cons_mean
    gaps, draws_out, lam_out = {}, {}, {}
    for head_id, head in model.heads.items():
        lam_i = float(lam.get(head_id, 1.0)) if isinstance(lam, dict) else float(lam)
        lam_out[head_id] = lam_i
        # heads consume the step stream in registration order, deterministically
        g, draws = knowledge_gap_mc(head, model, n, rng, return_draws=True)
        gaps[head_id] = g.item()
        if keep_gap_draws:
            draws_out[head_id] = draws
        total_t = total_t - g * lam_i

    log_enc = enc_mean.item()
    log_dec = dec_mean.item()
    consistency = 0.5 * (log_enc + log_dec)
    total = consistency - sum(lam_out[h] * gaps[h] for h in gaps)
    return LossBreakdown(log_enc=log_enc, log_dec=log_dec, consistency=consistency,
                         gap=gaps, lam=lam_out, total=total, total_tensor=total_t,
                         gap_draws=draws_out)
