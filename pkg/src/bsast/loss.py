"""SI-SDR, plain SDR and the L1-augmented training objective.

All ratios are clamped to [-60, 60] dB. Inside the clamp the functions are
smooth; in the clamped region their gradient is zero. Functions reduce over
the last axis, so batched inputs give per-item values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidArgument

MAX_DB = 60.0
MIN_DB = -60.0
PERFECT_RATIO = 1e-12


def _pair(est, ref):
    as_numpy = not (isinstance(est, torch.Tensor) or isinstance(ref, torch.Tensor))
    est_t = torch.as_tensor(np.asarray(est, dtype=np.float64)) if not isinstance(est, torch.Tensor) else est
    ref_t = torch.as_tensor(np.asarray(ref, dtype=np.float64), dtype=est_t.dtype) if not isinstance(ref, torch.Tensor) else ref
    if est_t.shape != ref_t.shape:
        raise InvalidArgument(f"length mismatch: {tuple(est_t.shape)} vs {tuple(ref_t.shape)}")
    return est_t, ref_t, as_numpy


def _out(value, as_numpy):
    if not as_numpy:
        return value
    value = value.detach().numpy()
    return float(value) if value.ndim == 0 else value


def _ratio_db(signal_power, residual_power):
    tiny = torch.finfo(signal_power.dtype).tiny
    db = 10.0 * (torch.log10(signal_power + tiny) - torch.log10(residual_power + tiny))
    perfect = (residual_power <= PERFECT_RATIO * signal_power) & (signal_power > 0)
    db = torch.where(perfect, torch.full_like(db, MAX_DB), db)
    db = torch.where(signal_power > 0, db, torch.full_like(db, MIN_DB))
    return db.clamp(MIN_DB, MAX_DB)


def si_sdr(est, ref):
    """Scale-invariant SDR in dB.

    ``alpha = <est, ref> / |ref|^2``; the ratio compares ``|alpha ref|^2`` to
    ``|est - alpha ref|^2``. An estimate orthogonal to the reference sits at
    the -60 dB floor.
    """
    est, ref, as_numpy = _pair(est, ref)
    ref_power = ref.pow(2).sum(-1)
    if bool((ref_power == 0).any()):
        raise InvalidArgument("SI-SDR undefined for an all-zero reference")
    alpha = (est * ref).sum(-1, keepdim=True) / ref_power.unsqueeze(-1)
    target = alpha * ref
    return _out(_ratio_db(target.pow(2).sum(-1), (est - target).pow(2).sum(-1)), as_numpy)


def sdr(est, ref):
    """Plain (scale-sensitive) SDR: ``10 log10(|ref|^2 / |est - ref|^2)``.

    This is not the BSS-Eval SDR; reports label it ``sdr_plain``.
    """
    est, ref, as_numpy = _pair(est, ref)
    ref_power = ref.pow(2).sum(-1)
    if bool((ref_power == 0).any()):
        raise InvalidArgument("SDR undefined for an all-zero reference")
    return _out(_ratio_db(ref_power, (est - ref).pow(2).sum(-1)), as_numpy)


def l1(est, ref):
    """Mean absolute error over samples."""
    est, ref, as_numpy = _pair(est, ref)
    return _out((est - ref).abs().mean(-1), as_numpy)


@dataclass
class LossBreakdown:
    si_sdr_db: float
    si_sdr_loss: float
    l1: float
    total: float
    lam: float

    def as_row(self):
        return {"si_sdr_loss": self.si_sdr_loss, "l1": self.l1, "total": self.total}


def total_loss_tensor(est, ref, lam: float = 100.0):
    """Batch-mean ``-SI-SDR + lam * L1`` plus the per-term means (tensors)."""
    s = si_sdr(est, ref)
    a = l1(est, ref)
    s_loss = -s.mean()
    l1_mean = a.mean()
    return s_loss + lam * l1_mean, s.mean(), l1_mean


def total_loss_difference(est_a, est_b, ref, lam: float = 100.0) -> float:
    """``total(est_a) - total(est_b)`` without subtracting two large totals.

    Finite-difference probes perturb the loss by far less than its magnitude,
    so differencing the totals loses most significant digits. Here the
    SI-SDR term is a difference of log ratios (via ``log1p``) and the L1 term
    a mean of elementwise differences. Items in a clamped region, or whose
    estimates differ by more than a small perturbation, fall back to the
    direct difference.
    """
    a, ref, _ = _pair(est_a, ref)
    b, _, _ = _pair(est_b, ref)
    if a.shape != b.shape:
        raise InvalidArgument(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        rr = ref.pow(2).sum(-1)
        if bool((rr == 0).any()):
            raise InvalidArgument("SI-SDR undefined for an all-zero reference")
        alpha_a = (a * ref).sum(-1) / rr
        alpha_b = (b * ref).sum(-1) / rr
        d_alpha = ((a - b) * ref).sum(-1) / rr
        res_a = a - alpha_a.unsqueeze(-1) * ref
        res_b = b - alpha_b.unsqueeze(-1) * ref
        d_res = (a - b) - d_alpha.unsqueeze(-1) * ref
        pr_a, pr_b = res_a.pow(2).sum(-1), res_b.pow(2).sum(-1)
        d_pr = (d_res * (res_a + res_b)).sum(-1)
        smooth = 2 * torch.log1p(d_alpha / alpha_b) - torch.log1p(d_pr / pr_b)
        d_si = 10.0 * smooth / torch.log(torch.tensor(10.0, dtype=smooth.dtype))
        s_a, s_b = si_sdr(a, ref), si_sdr(b, ref)

        def interior(v, pr, alpha):
            return (v > MIN_DB) & (v < MAX_DB) & (pr > 0) & (alpha != 0)

        small = ((d_alpha / alpha_b).abs() < 0.5) & ((d_pr / pr_b).abs() < 0.5)
        ok = interior(s_a, pr_a, alpha_a) & interior(s_b, pr_b, alpha_b) & small
        d_si = torch.where(ok, d_si, s_a - s_b)
        d_l1 = ((a - ref).abs() - (b - ref).abs()).mean(-1)
        return float((-d_si + lam * d_l1).mean())


def total_loss(est, ref, lam: float = 100.0) -> LossBreakdown:
    est, ref, _ = _pair(est, ref)
    total, s, a = total_loss_tensor(est, ref, lam)
    return LossBreakdown(float(s), float(-s), float(a), float(total), float(lam))
