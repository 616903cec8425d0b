"""Evaluation: bits/dim, discriminator accuracy, sample grids, report files.

Reports are written twice next to each other: a tab-separated table for
machines and a rendered matplotlib figure for humans. Sample grids go
through a hand-rolled PNG/PGM writer so identical seeds give byte-identical
files regardless of plotting-library versions.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .heads import flatten, sample_t_given_ck
from .model import TzkModel
from .rng import stream
from .tensor import Tensor, index_rows

LN2 = math.log(2.0)


def bits_per_dim(log_density_nats, dims: int) -> float:
    """Negative log-likelihood in bits per dimension for [0,1)-scaled data.

    The +8 converts the continuous density on /256-scaled pixels back to
    per-discrete-level bits (the dequantization-bound convention).
    """
    return -np.asarray(log_density_nats, dtype=np.float64) / (dims * LN2) + 8.0


@dataclass
class ConditionStat:
    condition: str
    mean_bpd: float
    stderr_bpd: float
    count: int


@dataclass
class DiscStat:
    head_id: str
    accuracy: float
    balanced_accuracy: float
    count: int


@dataclass
class EvalReport:
    conditions: list = field(default_factory=list)   # ConditionStat
    discriminators: list = field(default_factory=list)  # DiscStat

    def condition(self, name) -> ConditionStat:
        for c in self.conditions:
            if c.condition == name:
                return c
        raise ContractViolation(f"no condition {name!r} in report")

    def to_tsv(self) -> str:
        lines = ["kind\tname\tvalue\tstderr\tcount"]
        for c in self.conditions:
            lines.append(f"bpd\t{c.condition}\t{c.mean_bpd:.6f}\t{c.stderr_bpd:.6f}\t{c.count}")
        for d in self.discriminators:
            lines.append(f"disc_accuracy\t{d.head_id}\t{d.accuracy:.6f}\t{d.balanced_accuracy:.6f}\t{d.count}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = ["condition            bits/dim   stderr      n"]
        for c in self.conditions:
            lines.append(f"{c.condition:<20s} {c.mean_bpd:8.4f} {c.stderr_bpd:8.4f} {c.count:6d}")
        if self.discriminators:
            lines.append("")
            lines.append("discriminator        accuracy  balanced      n")
            for d in self.discriminators:
                lines.append(f"{d.head_id:<20s} {d.accuracy:8.4f} {d.balanced_accuracy:9.4f} {d.count:6d}")
        return "\n".join(lines) + "\n"


def _batched(n, size):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _conditional_logp(model, head, z_rows, ld_rows, c_mode, is_samples, rng):
    if c_mode == "regressed_mean":
        mu_c, _ = head.c_stats(z_rows)
        return head.log_p_t_given_c_from_z(z_rows, ld_rows, mu_c).data
    # importance sampling over C ~ p(C|T, presence)
    mu_c, ls_c = head.c_stats(z_rows)
    n = z_rows.shape[0]
    terms = np.empty((is_samples, n), dtype=np.float64)
    for j in range(is_samples):
        eps = rng.standard_normal((n, head.c_dim)).astype(model.dtype)
        c = Tensor(mu_c.data + np.exp(ls_c.data) * eps)
        lp_cond = head.log_p_t_given_c_from_z(z_rows, ld_rows, c).data
        lp_prior = -0.5 * np.sum(c.data.astype(np.float64) ** 2, axis=1) - 0.5 * head.c_dim * math.log(2 * math.pi)
        lq = (-0.5 * np.sum(eps.astype(np.float64) ** 2, axis=1)
              - np.sum(ls_c.data.astype(np.float64), axis=1)
              - 0.5 * head.c_dim * math.log(2 * math.pi))
        terms[j] = lp_cond.astype(np.float64) + lp_prior - lq
    m = terms.max(axis=0)
    return m + np.log(np.exp(terms - m).mean(axis=0))


def evaluate(model: TzkModel, pixels, sources, labels, batch_size=128,
             c_mode="regressed_mean", is_samples=16, seed=0) -> EvalReport:
    """Score a held-out split: prior and conditional bits/dim, disc accuracy.

    pixels: (N, C, H, W) in [0,1); sources: per-record dataset id; labels:
    per-record digit or -1. Conditional scores use presence = 1 for the true
    head with the latent characteristic summarized per c_mode.
    """
    n = pixels.shape[0]
    dims = int(np.prod(pixels.shape[1:]))
    rng = stream(seed, "eval-is")
    sources = np.asarray(sources)
    labels = np.asarray(labels)

    lp_prior = np.empty(n, dtype=np.float64)
    lp_dataset = np.full(n, np.nan)
    lp_digit = np.full(n, np.nan)
    disc_scores = {hid: np.empty(n, dtype=np.float64) for hid in model.heads}

    for lo, hi in _batched(n, batch_size):
        t = Tensor(pixels[lo:hi].astype(model.dtype))
        z_img, ld = model.flow.inverse(t)
        z = flatten(z_img)
        lp_prior[lo:hi] = (model.base.logpdf(z) + ld).data.astype(np.float64)
        for hid, head in model.heads.items():
            disc_scores[hid][lo:hi] = head.logit_t(z).data.astype(np.float64)
        for hid, head in model.heads.items():
            kind, _, key = hid.partition(":")
            if kind == "dataset":
                rows = np.flatnonzero(sources[lo:hi] == key)
                out = lp_dataset
            elif kind == "digit":
                rows = np.flatnonzero(labels[lo:hi] == int(key))
                out = lp_digit
            else:
                continue
            if rows.size == 0:
                continue
            z_rows = index_rows(z, rows)
            ld_rows = index_rows(ld + Tensor(np.zeros(hi - lo, dtype=model.dtype)), rows)
            out[lo + rows] = _conditional_logp(model, head, z_rows, ld_rows, c_mode, is_samples, rng)

    report = EvalReport()

    def add_condition(name, lp):
        mask = np.isfinite(lp)
        if not mask.any():
            return
        bpd = bits_per_dim(lp[mask], dims)
        report.conditions.append(ConditionStat(
            name, float(bpd.mean()), float(bpd.std(ddof=1) / math.sqrt(mask.sum())) if mask.sum() > 1 else 0.0,
            int(mask.sum())))

    add_condition("prior", lp_prior)
    add_condition("dataset-conditional", lp_dataset)
    add_condition("digit-conditional", lp_digit)

    for hid in model.heads:
        kind, _, key = hid.partition(":")
        if kind == "dataset":
            truth = (sources == key)
            known = np.ones(n, dtype=bool)
        elif kind == "digit":
            truth = (labels == int(key))
            known = labels >= 0
        else:
            continue
        if not known.any():
            continue
        pred = disc_scores[hid][known] > 0.0
        tr = truth[known]
        acc = float((pred == tr).mean())
        accs = []
        for cls in (True, False):
            if (tr == cls).any():
                accs.append(float((pred[tr == cls] == cls).mean()))
        report.discriminators.append(DiscStat(hid, acc, float(np.mean(accs)), int(known.sum())))
    return report


# -- sampling ----------------------------------------------------------------


def presence_conditioned_c(head, n: int, rng, max_rounds=64) -> np.ndarray:
    """Draw characteristics from the prior, conditioned on knowledge presence.

    The decoder joint factors as p(T|C,k) p(k|C) p(C), so sampling an
    observation that carries the knowledge draws C from p(C|k=1), realized
    by rejection: propose from the prior, accept with the head's own
    discriminator probability. If acceptance is very low the best-scoring
    proposals are taken instead, keeping the draw total bounded.
    """
    from scipy.special import expit

    kept, pool_c, pool_w = [], [], []
    for _ in range(max_rounds):
        c = rng.standard_normal((4 * n, head.c_dim))
        w = expit(head.logit_c(Tensor(c)).data.astype(np.float64))
        acc = rng.random(4 * n) < w
        kept.append(c[acc])
        pool_c.append(c)
        pool_w.append(w)
        if sum(k.shape[0] for k in kept) >= n:
            return np.concatenate(kept)[:n]
    pool_c = np.concatenate(pool_c)
    pool_w = np.concatenate(pool_w)
    return pool_c[np.argsort(-pool_w)[:n]]


def sample_grid(model: TzkModel, head_id, rows: int, cols: int, rng) -> np.ndarray:
    """Draw rows*cols images and tile them into one u8 grid, deterministic
    under the supplied generator.

    Noise enters in float64 so the whole expansion runs at wide precision
    (numpy promotes through the float32 weights): the generative direction
    exponentiates per step, and prior draws from a partially trained
    conditional can otherwise overflow narrow floats before clamping.
    """
    n = rows * cols
    c, h, w = model.z_shape
    if head_id is None:
        z = (model.base.mu.data.astype(np.float64)
             + np.exp(model.base.log_sigma.data.astype(np.float64))
             * rng.standard_normal((n, model.z_dim)))
        t, _ = model.flow.forward(Tensor(z.reshape(n, c, h, w)))
    else:
        head = model.head(head_id)
        c_draw = Tensor(presence_conditioned_c(head, n, rng))
        noise = Tensor(rng.standard_normal((n, model.z_dim)))
        t = sample_t_given_ck(c_draw, head, model.flow, noise)
    imgs = np.clip(t.data.astype(np.float64), 0.0, np.nextafter(1.0, 0.0))
    quant = np.round(imgs * 255.0).astype(np.uint8)
    if c != 1:
        quant = quant.mean(axis=1).astype(np.uint8)
    else:
        quant = quant[:, 0]
    grid = quant.reshape(rows, cols, h, w).transpose(0, 2, 1, 3).reshape(rows * h, cols * w)
    return grid


def write_png(path, img: np.ndarray) -> None:
    """Minimal 8-bit grayscale PNG encoder (filter 0 rows, fixed zlib level)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape

    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    blob = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))
    with open(path, "wb") as fh:
        fh.write(blob)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def save_grid(path, img: np.ndarray, fmt=None) -> None:
    fmt = fmt or ("pgm" if str(path).lower().endswith(".pgm") else "png")
    if fmt == "pgm":
        write_pgm(path, img)
    else:
        write_png(path, img)


# -- report files -------------------------------------------------------------


def write_report(report: EvalReport, out_dir, stem="eval_report") -> tuple:
    """Write the delimited table and the rendered figure side by side."""
    os.makedirs(out_dir, exist_ok=True)
    tsv_path = os.path.join(out_dir, f"{stem}.tsv")
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv())
    fig_path = os.path.join(out_dir, f"{stem}.png")
    _report_figure(report, fig_path)
    return tsv_path, fig_path


def _report_figure(report: EvalReport, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_panels = 2 if report.discriminators else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(5.5 * n_panels, 3.6))
    axes = np.atleast_1d(axes)
    names = [c.condition for c in report.conditions]
    vals = [c.mean_bpd for c in report.conditions]
    errs = [c.stderr_bpd for c in report.conditions]
    axes[0].bar(names, vals, yerr=errs, color="#4878a8", capsize=4)
    axes[0].set_ylabel("bits/dim (lower is better)")
    axes[0].tick_params(axis="x", rotation=20)
    if report.discriminators:
        hids = [d.head_id for d in report.discriminators]
        axes[1].bar(hids, [d.accuracy for d in report.discriminators], color="#70a070")
        axes[1].axhline(0.5, color="gray", lw=0.8, ls="--")
        axes[1].set_ylim(0.0, 1.0)
        axes[1].set_ylabel("held-out presence accuracy")
        axes[1].tick_params(axis="x", rotation=60, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_loss_curve(history, out_dir, stem="loss_curve") -> str:
    """Render total and consistency against step from trainer history."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    steps = [s for s, _ in history]
    total = [b.total for _, b in history]
    cons = [b.consistency for _, b in history]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(steps, total, lw=0.7, label="objective", color="#4878a8")
    ax.plot(steps, cons, lw=0.7, label="consistency", color="#a85f48", alpha=0.8)
    if len(total) >= 100:
        k = np.ones(100) / 100.0
        ax.plot(steps[99:], np.convolve(total, k, mode="valid"), lw=1.6, color="#203858",
                label="objective (moving avg)")
    ax.set_xlabel("step")
    ax.set_ylabel("nats")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, f"{stem}.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
