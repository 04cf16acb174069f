import csv
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from torch import nn

from bsast.config import SynthConfig, TrainConfig, tiny_model
from bsast.errors import InvalidArgument, NumericError, VerificationFailure
from bsast.loss import MAX_DB, total_loss_tensor
from bsast.model import BSAST, load_checkpoint
from bsast.synth import generate_batch
from bsast.dsp import StftConfig, istft_torch
from bsast.train import (EvalItem, accumulate_grads, evaluate, grad_check, init_optim, loss_and_grads, median,
                         probe_gradients, projection_probe,
                         optimizer_step, relative_error, summarize, train_loop, train_step)


def _params(*values):
    return {f"p{i}": torch.tensor(v, dtype=torch.float64) for i, v in enumerate(values)}


def test_zero_grads_zero_decay_unchanged():
    params = _params([1.0, -2.0], [3.0])
    before = {k: v.clone() for k, v in params.items()}
    state = init_optim(params, lr=0.1, weight_decay=0.0)
    optimizer_step(params, {k: torch.zeros_like(v) for k, v in params.items()}, state)
    assert all(torch.equal(params[k], before[k]) for k in params)


def test_decay_only_step():
    params = _params([1.0, -2.0])
    state = init_optim(params, lr=0.1, weight_decay=0.01)
    optimizer_step(params, {"p0": torch.zeros(2, dtype=torch.float64)}, state)
    assert torch.allclose(params["p0"], torch.tensor([1.0, -2.0], dtype=torch.float64) * (1 - 0.001), atol=0)


def test_first_step_closed_form():
    params = _params([0.5])
    state = init_optim(params, lr=0.01, weight_decay=0.0)
    optimizer_step(params, {"p0": torch.ones(1, dtype=torch.float64)}, state)
    assert abs(params["p0"].item() - (0.5 - 0.01 / (1 + 1e-8))) < 1e-15


def test_matches_reference_adamw(rng):
    w = torch.tensor(rng.standard_normal(5))
    ours = {"w": w.clone()}
    ref = nn.Parameter(w.clone())
    opt = torch.optim.AdamW([ref], lr=0.05, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    state = init_optim(ours, lr=0.05, weight_decay=0.1)
    for _ in range(20):
        g = torch.tensor(rng.standard_normal(5))
        optimizer_step(ours, {"w": g}, state)
        ref.grad = g.clone()
        opt.step()
    assert torch.allclose(ours["w"], ref.detach(), atol=1e-12)


def test_non_finite_gradient():
    params = _params([1.0])
    with pytest.raises(NumericError):
        optimizer_step(params, {"p0": torch.tensor([float("nan")], dtype=torch.float64)}, init_optim(params))


def test_scalar_parameter_gradient_closed_form(rng):
    x = torch.as_tensor(rng.standard_normal(32))
    ref = torch.as_tensor(rng.standard_normal(32))
    theta = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
    total, _, _ = total_loss_tensor(theta * x, ref, lam=100.0)
    total.backward()
    # SI-SDR is invariant to theta, so only the L1 term contributes
    expected = 100.0 * torch.mean(torch.sign(0.7 * x - ref) * x)
    assert abs(theta.grad.item() - expected.item()) < 1e-12


class LinearProbe(nn.Module):
    """est = w . mix[:, :, t] + b + u . query: linear in every parameter."""

    def __init__(self):
        super().__init__()
        self.config = SimpleNamespace(channels=4, query_dim=16)
        self.w = nn.Parameter(torch.tensor([0.9, 0.2, -0.1, 0.05], dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(0.01, dtype=torch.float64))
        self.u = nn.Parameter(torch.linspace(-0.01, 0.01, 16, dtype=torch.float64))

    @property
    def dtype(self):
        return torch.float64

    def forward(self, mix, e, check=False):
        return torch.einsum("c,bcl->bl", self.w, mix) + self.b + (e @ self.u)[:, None]


@pytest.fixture
def short_examples(toy_corpus):
    cfg = SynthConfig(sample_rate=8000, duration=896 / 8000, embed_dim=16, min_event_s=0.05)
    return generate_batch(toy_corpus, cfg, 2, seed=3)


@pytest.mark.parametrize("probe", ["projection", "objective"])
def test_grad_check_linear_model(short_examples, probe):
    # the projection probe is linear in every parameter, so a large eps is exact
    # up to rounding ~ u |est| / eps; the objective is not, leaving O(eps^2) truncation
    eps, tol = (1e-2, 1e-9) if probe == "projection" else (1e-5, 1e-6)
    report = grad_check(LinearProbe(), short_examples, eps=eps, tol=tol, probe=probe)
    assert report.passed and report.max_rel_err < tol


@pytest.mark.parametrize("probe", ["projection", "objective"])
def test_grad_check_detects_corrupted_path(short_examples, probe):
    model = LinearProbe()
    grads = probe_gradients(model, short_examples, probe)
    grads["u"] = grads["u"] * 1.01
    report = grad_check(model, short_examples, analytic=grads, raise_on_fail=False, probe=probe)
    assert not report.passed
    assert {f[1] for f in report.failures} == {"u"}
    with pytest.raises(VerificationFailure, match=r"\bu\["):
        grad_check(model, short_examples, analytic=grads, probe=probe)


def test_projection_probe_gradient_is_vjp(short_examples):
    model = LinearProbe()
    grads = probe_gradients(model, short_examples, "projection", seed=5)
    mix = np.stack([ex.mixture.samples for ex in short_examples])
    r = projection_probe((len(short_examples), mix.shape[-1]), seed=5).numpy()
    assert abs(np.linalg.norm(r) - 1) < 1e-12
    np.testing.assert_allclose(grads["w"].numpy(), np.einsum("bl,bcl->c", r, mix), rtol=1e-12)
    assert abs(grads["b"].item() - r.sum()) < 1e-12


def test_grad_check_unknown_probe(short_examples):
    with pytest.raises(InvalidArgument):
        grad_check(LinearProbe(), short_examples, probe="nope")


def test_grad_check_sampled_tiny_model(short_examples):
    model = BSAST(tiny_model()).double().randomize(0)
    report = grad_check(model, short_examples[:1], sample=150, full=False)
    assert report.checked == 150 and report.passed


def test_grad_check_needs_float64(short_examples):
    with pytest.raises(InvalidArgument):
        grad_check(BSAST(tiny_model()), short_examples)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == 0.5


def test_zero_output_model_gradients_finite(short_examples):
    model = BSAST(tiny_model()).double()
    with torch.no_grad():
        for p in model.merge.parameters():
            p.zero_()
    breakdown, grads = loss_and_grads(model, short_examples)
    assert breakdown.si_sdr_db == -MAX_DB
    assert all(torch.isfinite(g).all() for g in grads.values())


def _cfg(**kw):
    base = dict(lr=1e-3, weight_decay=0.0, batch_size=2, grad_accum=1, epochs=1, scenes_per_epoch=4,
                seed=0, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def test_accumulated_gradients_match_large_batch(toy_corpus):
    synth = SynthConfig(sample_rate=8000, duration=0.25, embed_dim=16, min_event_s=0.1)
    examples = generate_batch(toy_corpus, synth, 4, seed=11)
    model = BSAST(tiny_model()).double().randomize(2, std=0.1)
    acc, parts = accumulate_grads(model, [examples[:2], examples[2:]], 100.0)
    one, whole = accumulate_grads(model, [examples], 100.0)
    assert max((acc[n] - one[n]).abs().max().item() for n in one) < 1e-10
    assert abs(np.mean([p.total for p in parts]) - whole[0].total) < 1e-10


def test_merge_bias_has_no_effect_at_half_hop():
    # a constant spectrum is an impulse (real part, killed by w[0] = 0) or an
    # antisymmetric frame (imaginary part, cancelled by overlap-add at hop N/2),
    # so the channel-merge bias gradient is identically zero
    cfg = StftConfig(256, 128)
    for value in (1.0, 1j):
        spec = torch.full((1, 8, 129), value, dtype=torch.complex128)
        assert istft_torch(spec, cfg, 7 * 128).abs().max().item() < 1e-15


def test_zero_epochs_checkpoint_is_init(tmp_path, toy_corpus):
    synth = SynthConfig(sample_rate=8000, duration=0.25, embed_dim=16, min_event_s=0.1)
    model = BSAST(tiny_model(), seed=4)
    init = {k: v.clone() for k, v in model.state_dict().items()}
    result = train_loop(_cfg(epochs=0), model, corpus=toy_corpus, synth_cfg=synth, out_dir=tmp_path)
    assert result.steps == 0
    loaded = load_checkpoint(result.checkpoint, dtype=torch.float64)
    for k, v in loaded.state_dict().items():
        assert torch.allclose(v, init[k].double().float().double()), k


def test_training_is_deterministic_and_logged(tmp_path, toy_corpus):
    synth = SynthConfig(sample_rate=8000, duration=0.25, embed_dim=16, min_event_s=0.1)
    runs = []
    for name, prefetch in (("a", 0), ("b", 2)):
        model = BSAST(tiny_model(), seed=0)
        res = train_loop(_cfg(scenes_per_epoch=6, prefetch=prefetch), model, corpus=toy_corpus,
                         synth_cfg=synth, out_dir=tmp_path / name)
        runs.append(res.history)
    assert runs[0] == runs[1] and len(runs[0]) == 3
    with open(tmp_path / "a" / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "epoch", "si_sdr_loss", "l1", "total"] and len(rows) == 4
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_train_loop_needs_data():
    with pytest.raises(InvalidArgument):
        train_loop(_cfg(), BSAST(tiny_model()))


def test_median_conventions():
    assert median([0, 5, 10]) == 5
    assert median([0, 2, 8, 10]) == 5
    with pytest.raises(InvalidArgument):
        median([])


def test_summary_groups_rows():
    rows = [{"condition": "audio", "channels": "wxyz", "si_sdr": v, "sdr_plain": 0.0} for v in (0.0, 5.0, 10.0)]
    rows += [{"condition": "audio", "channels": "w", "si_sdr": v, "sdr_plain": 1.0} for v in (0.0, 2.0, 8.0, 10.0)]
    summary = {s["channels"]: s for s in summarize(rows)}
    assert summary["wxyz"]["median_si_sdr"] == 5 and summary["w"]["median_si_sdr"] == 5


class Oracle(nn.Module):
    """Returns the target stored in the query slot, so est == ref exactly."""

    def __init__(self, targets):
        super().__init__()
        self.config = SimpleNamespace(channels=4, query_dim=1)
        self.scale = nn.Parameter(torch.ones(1, dtype=torch.float64))
        self.targets = targets

    @property
    def dtype(self):
        return torch.float64

    def forward(self, mix, e, check=False):
        return torch.stack([self.targets[int(i)] for i in e[:, 0]])


def test_evaluate_perfect_estimates(rng):
    targets = [torch.as_tensor(rng.standard_normal(64)) for _ in range(3)]
    items = [EvalItem(f"s{i}", np.zeros((4, 64)), t.numpy(), np.array([float(i)])) for i, t in enumerate(targets)]
    report = evaluate(Oracle(targets), items, "audio")
    assert report.summary[0]["median_si_sdr"] == MAX_DB
    assert report.summary[0]["median_sdr_plain"] == MAX_DB
    assert report.summary[0]["channels"] == "wxyz"


def test_evaluate_empty_set():
    with pytest.raises(InvalidArgument, match="empty evaluation set"):
        evaluate(BSAST(tiny_model()), [], "audio")
