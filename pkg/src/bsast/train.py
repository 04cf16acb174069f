"""Training, gradient verification and evaluation.

Gradients come from reverse-mode autodiff; central finite differences are
only used by :func:`grad_check` to verify them.
"""

from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import SynthConfig, TrainConfig
from .errors import InvalidArgument, NumericError, VerificationFailure
from .estimator import select_channels
from .loss import LossBreakdown, sdr, si_sdr, total_loss_difference, total_loss_tensor
from .model import BSAST, save_checkpoint
from .synth import generate_batch

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "si_sdr_loss", "l1", "total")


@dataclass
class OptimState:
    exp_avg: dict
    exp_avg_sq: dict
    step: int = 0
    lr: float = 3e-4
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


def init_optim(params: dict, lr=3e-4, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8) -> OptimState:
    return OptimState({k: torch.zeros_like(p) for k, p in params.items()},
                      {k: torch.zeros_like(p) for k, p in params.items()},
                      0, lr, weight_decay, tuple(betas), eps)


def optim_from_config(model, cfg: TrainConfig) -> OptimState:
    return init_optim(dict(model.named_parameters()), cfg.lr, cfg.weight_decay,
                      (cfg.beta1, cfg.beta2), cfg.adam_eps)


def optimizer_step(params: dict, grads: dict, state: OptimState) -> OptimState:
    """One AdamW update in place; decay is applied separately from the adaptive step."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError("optimizer", f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise InvalidArgument(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.mul_(1 - state.lr * state.weight_decay)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


def collate(examples, model):
    """Stack examples into (mixture B x C x L, query B x d, target B x L) tensors."""
    dtype = model.dtype
    cfg = model.config
    mix = np.stack([select_channels(ex.mixture.samples, cfg.channels) for ex in examples])
    query = np.stack([ex.query.vector for ex in examples])
    target = np.stack([ex.target for ex in examples])
    if query.shape[-1] != cfg.query_dim:
        raise InvalidArgument(f"query dimension {query.shape[-1]} != model query_dim {cfg.query_dim}")
    return (torch.as_tensor(mix, dtype=dtype), torch.as_tensor(query, dtype=dtype),
            torch.as_tensor(target, dtype=dtype))


def probe_loss(model, batch, lam: float = 100.0, check: bool = False):
    mix, query, target = batch
    est = model(mix, query, check=check)
    return total_loss_tensor(est, target, lam)


def loss_and_grads(model, examples, lam: float = 100.0, scale: float = 1.0):
    """Loss breakdown and ``{parameter path: gradient}`` for one batch.

    The backward pass is taken on ``scale * total`` so micro-batches can be
    accumulated into a mean over the effective batch.
    """
    batch = collate(examples, model)
    model.zero_grad(set_to_none=True)
    total, s, a = probe_loss(model, batch, lam)
    if not torch.isfinite(total):
        with torch.no_grad():
            probe_loss(model, batch, lam, check=True)
        raise NumericError("loss")
    (total * scale).backward()
    grads = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for name, p in model.named_parameters()}
    breakdown = LossBreakdown(s.item(), -s.item(), a.item(), total.item(), float(lam))
    return breakdown, grads


@dataclass
class GradCheckReport:
    checked: int
    tolerance: float
    eps: float
    worst: list = field(default_factory=list)     # (rel_err, path, index, analytic, numeric)
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_rel_err(self) -> float:
        return self.worst[0][0] if self.worst else 0.0

    def summary(self) -> str:
        lines = [f"grad_check: {self.checked} coordinates, eps={self.eps:g}, tol={self.tolerance:g}, "
                 f"max rel err={self.max_rel_err:.3e}, {'PASS' if self.passed else 'FAIL'}"]
        for rel, path, idx, ga, gn in self.worst[:5]:
            lines.append(f"  {path}[{idx}]: analytic={ga:.6e} numeric={gn:.6e} rel={rel:.3e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def projection_probe(shape, seed: int = 0, dtype=torch.float64):
    """Fixed unit-norm random direction ``r`` for the probe loss ``<r, est>``."""
    r = np.random.default_rng(seed).standard_normal(shape)
    return torch.as_tensor(r / np.linalg.norm(r), dtype=dtype)


def probe_gradients(model, examples, probe: str = "projection", lam: float = 100.0, seed: int = 0) -> dict:
    """Autodiff gradients of the scalar probe loss used by ``grad_check``."""
    if probe == "objective":
        return loss_and_grads(model, examples, lam)[1]
    if probe != "projection":
        raise InvalidArgument(f"unknown probe {probe!r}")
    mix, query, target = collate(examples, model)
    r = projection_probe(tuple(target.shape), seed, model.dtype)
    model.zero_grad(set_to_none=True)
    (model(mix, query) * r).sum().backward()
    return {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in model.named_parameters()}


def grad_check(model, examples, eps: float = 1e-5, tol: float = 1e-3, lam: float = 100.0,
               full: bool | None = None, sample: int = 1000, seed: int = 0,
               analytic: dict | None = None, raise_on_fail: bool = True,
               probe: str = "projection") -> GradCheckReport:
    """Compare analytic gradients with central differences of a scalar probe loss.

    The default probe is ``<r, est>`` for a fixed unit-norm random ``r``, which
    exercises every backward path of the model at unit output scale. With
    ``probe="objective"`` the training loss (``-SI-SDR + lam * L1``) is used
    instead; its gradient with respect to the estimate is checked separately
    in the loss tests. Either way the central difference is formed from the
    two perturbed estimates directly (``<r, plus - minus>`` or
    ``total_loss_difference``) so no large loss values are subtracted.

    Every coordinate is checked when the model has fewer than 10k parameters
    (or ``full=True``); otherwise ``sample`` random coordinates. ``analytic``
    replaces the autodiff gradients, which lets tests inject faults.
    """
    if model.dtype != torch.float64:
        raise InvalidArgument("grad_check needs a float64 model")
    if analytic is None:
        analytic = probe_gradients(model, examples, probe, lam, seed)
    mix, query, target = collate(examples, model)
    r = projection_probe(tuple(target.shape), seed, model.dtype) if probe == "projection" else None
    params = dict(model.named_parameters())
    n_total = sum(p.numel() for p in params.values())
    if full is None:
        full = n_total < 10_000
    if full:
        coords = [(name, i) for name, p in params.items() for i in range(p.numel())]
    else:
        rng = np.random.default_rng(seed)
        names = list(params)
        sizes = np.array([params[n].numel() for n in names])
        flat = rng.choice(n_total, size=min(sample, n_total), replace=False)
        offsets = np.cumsum(sizes)
        coords = []
        for f in np.sort(flat):
            k = int(np.searchsorted(offsets, f, side="right"))
            coords.append((names[k], int(f - (offsets[k] - sizes[k]))))
    results = []
    with torch.no_grad():
        for name, i in coords:
            flat_p = params[name].view(-1)
            orig = flat_p[i].item()
            flat_p[i] = orig + eps
            plus = model(mix, query)
            flat_p[i] = orig - eps
            minus = model(mix, query)
            flat_p[i] = orig
            if r is None:
                diff = total_loss_difference(plus, minus, target, lam)
            else:
                diff = float(((plus - minus) * r).sum())
            numeric = diff / (2 * eps)
            ga = analytic[name].reshape(-1)[i].item()
            results.append((relative_error(ga, numeric), name, i, ga, numeric))
    results.sort(key=lambda r: -r[0])
    report = GradCheckReport(len(results), tol, eps, results[:20], [r for r in results if r[0] > tol])
    if raise_on_fail and not report.passed:
        rel, path, idx, ga, gn = report.failures[0]
        raise VerificationFailure(
            f"gradient mismatch at {path}[{idx}]: analytic={ga:.6e} numeric={gn:.6e} rel={rel:.3e} "
            f"({len(report.failures)} coordinate(s) over tol {tol:g})", report)
    return report


@dataclass
class TrainResult:
    model: BSAST
    history: list
    steps: int
    checkpoint: Path | None = None


def _batch_stream(cfg: TrainConfig, synth_cfg: SynthConfig, corpus, examples, total_steps):
    """Yield the micro-batches of every optimizer step, in order."""
    per_step = cfg.batch_size * cfg.grad_accum
    for step in range(total_steps):
        micro = []
        for k in range(cfg.grad_accum):
            start = step * per_step + k * cfg.batch_size
            if examples is not None:
                micro.append([examples[(start + b) % len(examples)] for b in range(cfg.batch_size)])
            else:
                micro.append(generate_batch(corpus, synth_cfg, cfg.batch_size, cfg.seed, start))
        yield micro


def _prefetched(gen, capacity: int):
    """Run ``gen`` on a producer thread with a bounded handoff queue."""
    if capacity <= 0:
        yield from gen
        return
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()

    def produce():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # surface producer errors to the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def accumulate_grads(model, micro_batches, lam: float):
    """Gradients of the mean loss over the effective batch, one micro-batch at a time."""
    k = len(micro_batches)
    summed, parts = None, []
    for examples in micro_batches:
        breakdown, grads = loss_and_grads(model, examples, lam, scale=1.0 / k)
        parts.append(breakdown)
        summed = grads if summed is None else {n: summed[n] + grads[n] for n in summed}
    return summed, parts


def train_step(model, micro_batches, state: OptimState, lam: float):
    """Accumulate gradients over micro-batches (mean over the effective batch) and step."""
    summed, parts = accumulate_grads(model, micro_batches, lam)
    optimizer_step(dict(model.named_parameters()), summed, state)
    return LossBreakdown(*(float(np.mean([getattr(b, f) for b in parts]))
                           for f in ("si_sdr_db", "si_sdr_loss", "l1", "total")), lam)


def train_loop(cfg: TrainConfig, model: BSAST, corpus=None, synth_cfg: SynthConfig | None = None,
               examples=None, out_dir=None, progress=None) -> TrainResult:
    """Train ``model`` in place.

    Scenes are generated on the fly from ``corpus`` unless a fixed list of
    ``examples`` is given (overfit runs cycle through it). With ``out_dir``
    the final checkpoint and an append-only ``metrics.csv`` are written there.
    """
    if examples is None and corpus is None:
        raise InvalidArgument("train_loop needs a corpus or a fixed example list")
    if examples is None and synth_cfg is None:
        raise InvalidArgument("on-the-fly training needs a synthesis config")
    model.to(torch.float64 if cfg.dtype == "float64" else torch.float32)
    state = optim_from_config(model, cfg)
    total_steps = cfg.total_steps
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        fresh = not metrics_path.exists()
        metrics_fh = open(metrics_path, "a", newline="")
        writer = csv.writer(metrics_fh)
        if fresh:
            writer.writerow(METRIC_FIELDS)
    history = []
    try:
        stream = _prefetched(_batch_stream(cfg, synth_cfg, corpus, examples, total_steps), cfg.prefetch)
        for step, micro in enumerate(stream, start=1):
            breakdown = train_step(model, micro, state, cfg.lambda_l1)
            epoch = (step - 1) // cfg.steps_per_epoch
            row = (step, epoch, breakdown.si_sdr_loss, breakdown.l1, breakdown.total)
            history.append(row)
            if writer is not None and (step % cfg.log_every == 0 or step == total_steps):
                writer.writerow([step, epoch] + [f"{v:.8g}" for v in row[2:]])
            if progress is not None:
                progress(row)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"model_step{step:06d}.ckpt")
    finally:
        if writer is not None:
            metrics_fh.close()
    ckpt = None
    if out is not None:
        ckpt = out / "model.ckpt"
        save_checkpoint(model, ckpt)
    return TrainResult(model, history, len(history), ckpt)


@dataclass
class EvalItem:
    id: str
    mixture: np.ndarray        # C x L
    target: np.ndarray
    query: np.ndarray
    label: str = ""


@dataclass
class EvalReport:
    rows: list                 # dicts: id, label, condition, channels, si_sdr, sdr_plain
    summary: list              # dicts: condition, channels, items, median_si_sdr, median_sdr_plain


def channel_label(channels: int) -> str:
    return "wxyz" if channels == 4 else "w"


def median(values) -> float:
    """Median; an even count averages the two middle values."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise InvalidArgument("median of an empty set")
    return float(np.median(values))


def score_items(model, items, condition: str, batch_size: int = 4) -> list:
    cfg = model.config
    rows = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        mix = torch.as_tensor(np.stack([select_channels(it.mixture, cfg.channels) for it in chunk]),
                              dtype=model.dtype)
        query = torch.as_tensor(np.stack([it.query for it in chunk]), dtype=model.dtype)
        with torch.no_grad():
            est = model(mix, query, check=True).double().numpy()
        for it, e in zip(chunk, est):
            rows.append({"id": it.id, "label": it.label, "condition": condition,
                         "channels": channel_label(cfg.channels),
                         "si_sdr": float(si_sdr(e, it.target)), "sdr_plain": float(sdr(e, it.target))})
    return rows


def summarize(rows) -> list:
    groups = {}
    for row in rows:
        groups.setdefault((row["condition"], row["channels"]), []).append(row)
    return [{"condition": cond, "channels": ch, "items": len(group),
             "median_si_sdr": median(r["si_sdr"] for r in group),
             "median_sdr_plain": median(r["sdr_plain"] for r in group)}
            for (cond, ch), group in groups.items()]


def evaluate(model, items, condition: str = "audio") -> EvalReport:
    """Per-item SI-SDR and plain SDR with medians grouped by condition and channel setup."""
    if condition not in ("audio", "text", "pseudo"):
        raise InvalidArgument(f"condition must be audio, text or pseudo, got {condition!r}")
    if not items:
        raise InvalidArgument("empty evaluation set")
    rows = score_items(model, items, condition)
    return EvalReport(rows, summarize(rows))


def items_from_examples(examples) -> list:
    return [EvalItem(f"ex{i:05d}", ex.mixture.samples, ex.target, ex.query.vector, ex.label)
            for i, ex in enumerate(examples)]
