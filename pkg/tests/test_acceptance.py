"""Acceptance gate: one test per criterion AC-1 .. AC-12.

Each test records a one-line verdict; the lines are printed together at the
end of the pytest run (see ``conftest.py``). Running this file directly
prints them too: ``python3 tests/test_acceptance.py``.
"""

import copy
import csv
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from bsast.bandsplit import default_band_scheme
from bsast.cli import main
from bsast.conditioning import FilmParams, film_apply
from bsast.config import SynthConfig, TrainConfig, tiny_model
from bsast.dsp import StftConfig, istft, stft
from bsast.estimator import extract
from bsast.loss import MAX_DB, si_sdr
from bsast.model import BSAST
from bsast.synth import build_toy_corpus, example_from_scene, generate_batch, mix_scene
from bsast.train import accumulate_grads, init_optim, optimizer_step, train_loop
from bsast.triaxial import attention_logits

VERDICTS = {}


def record(ac, ok, detail):
    VERDICTS[ac] = f"{ac} {'PASS' if ok else 'FAIL'}: {detail}"
    assert ok, VERDICTS[ac]


def verdict_lines():
    key = lambda ac: int(ac.split("-")[1])
    return [VERDICTS[ac] for ac in sorted(VERDICTS, key=key)]


@pytest.fixture(scope="module")
def corpus():
    return build_toy_corpus(sample_rate=8000, per_label=2, n_rirs=3, n_noises=2, seconds=1.0, seed=0)


@pytest.fixture(scope="module")
def scene_cfg():
    # two sources plus noise, half a second, exact label embedding as the query
    return SynthConfig(sample_rate=8000, duration=0.5, embed_dim=16, min_event_s=0.3,
                       min_events=2, max_events=2, sigma=0.0)


def test_ac01_stft_round_trip():
    rng = np.random.default_rng(1)
    cfg = StftConfig(256, 128)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((4, 8000))
        y = istft(stft(x, cfg), cfg, x.shape[-1])
        worst = max(worst, np.linalg.norm(y - x) / np.linalg.norm(x))
    elapsed = time.perf_counter() - start
    record("AC-1", worst < 1e-6 and elapsed < 5.0,
           f"max relative L2 error {worst:.2e} over 100 signals in {elapsed:.2f} s")


def test_ac02_band_scheme():
    widths = list(default_band_scheme(2048).widths)
    expected = [6] * 11 + [32] * 6 + [64] * 4 + [128, 128, 128, 127]
    record("AC-2", widths == expected and sum(widths) == 1025 and len(widths) == 25,
           f"{len(widths)} bands summing to {sum(widths)}")


def test_ac03_si_sdr_properties():
    rng = np.random.default_rng(3)
    est, ref = rng.standard_normal(1000), rng.standard_normal(1000)
    base = si_sdr(est, ref)
    drift = max(abs(si_sdr(c * est, ref) - base) for c in (0.1, 3.0, -2.0))
    hand = abs(si_sdr(np.array([1.0, 1.0]), np.array([1.0, 0.0])))
    clamp = si_sdr(ref, ref)
    record("AC-3", drift < 1e-9 and hand < 1e-12 and clamp == MAX_DB,
           f"scale drift {drift:.1e} dB, hand case {hand:.1e} dB, est = ref gives {clamp:g} dB")


def test_ac04_identities():
    torch.manual_seed(4)
    z = torch.randn(2, 4, 8, 4, 8, dtype=torch.float64)
    film = film_apply(z, FilmParams(torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64)))
    model = BSAST(tiny_model(blocks=3)).double()       # default init zeroes every residual output
    with torch.no_grad():
        dev = max((block(z) - z).abs().max().item() for block in model.backbone.blocks)
    record("AC-4", torch.equal(film, z) and dev == 0.0,
           f"FiLM (1, 0) bit-exact={torch.equal(film, z)}, zero-init block max deviation {dev:g}")


@pytest.mark.slow
def test_ac05_full_gradient_check(capsys):
    start = time.perf_counter()
    code = main(["gradcheck", "--full"])
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    summary = next(line for line in out.splitlines() if line.startswith("grad_check"))
    record("AC-5", code == 0 and elapsed < 600, f"{summary.split(': ', 1)[1]} in {elapsed:.0f} s")


def test_ac06_rope_shift_invariance():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        seq, dim = int(rng.integers(2, 17)), 2 * int(rng.integers(1, 17))
        q = torch.as_tensor(rng.standard_normal((seq, dim)))
        k = torch.as_tensor(rng.standard_normal((seq, dim)))
        pos = torch.arange(seq)
        shift = int(rng.integers(1, 10_000))
        a = attention_logits(q, k, pos, pos)
        b = attention_logits(q, k, pos + shift, pos + shift)
        worst = max(worst, (a - b).abs().max().item())
    record("AC-6", worst < 1e-8, f"max logit change {worst:.2e} over 100 (q, k, shift) triples")


@pytest.mark.slow
def test_ac07_overfit_one_scene(corpus, scene_cfg):
    ex = generate_batch(corpus, scene_cfg, 1, seed=11)[0]
    model = BSAST(tiny_model())
    steps = 400
    cfg = TrainConfig(lr=3e-3, weight_decay=0.0, batch_size=1, grad_accum=1, epochs=1, scenes_per_epoch=steps)
    train_loop(cfg, model, examples=[ex])
    score = si_sdr(extract(ex.mixture, ex.query, model), ex.target)
    record("AC-7", score >= 10.0, f"SI-SDR {score:.2f} dB on the fixed scene after {steps} steps")


@pytest.mark.slow
def test_ac08_query_selectivity(corpus, scene_cfg):
    base = generate_batch(corpus, scene_cfg, 1, seed=11)[0].scene
    ex_a = example_from_scene(replace(copy.deepcopy(base), target=0), corpus, 16)
    ex_b = example_from_scene(replace(copy.deepcopy(base), target=1), corpus, 16)
    model = BSAST(tiny_model())
    steps = 800
    cfg = TrainConfig(lr=3e-3, weight_decay=0.0, batch_size=2, grad_accum=1, epochs=1,
                      scenes_per_epoch=2 * steps)
    train_loop(cfg, model, examples=[ex_a, ex_b])
    est_a = extract(ex_a.mixture, ex_a.query, model)
    est_b = extract(ex_b.mixture, ex_b.query, model)
    gap_a = si_sdr(est_a, ex_a.target) - si_sdr(est_a, ex_b.target)
    gap_b = si_sdr(est_b, ex_b.target) - si_sdr(est_b, ex_a.target)
    record("AC-8", gap_a >= 6.0 and gap_b >= 6.0,
           f"query A prefers A by {gap_a:.1f} dB, query B prefers B by {gap_b:.1f} dB")


def test_ac09_channel_ablation(tmp_path):
    assert main(["corpus", "--out", str(tmp_path / "corpus"), "--seconds", "1.0"]) == 0
    assert main(["synth", "--corpus", str(tmp_path / "corpus"), "--count", "3", "--seed", "3",
                 "--out", str(tmp_path / "set"), "--desk-scale", "--duration", "0.5"]) == 0
    common = ["--corpus", str(tmp_path / "corpus"), "--desk-scale", "--seed", "1", "--batch-size", "1",
              "--grad-accum", "1", "--max-steps", "3", "--duration", "0.5"]
    assert main(["train", "--out", str(tmp_path / "wxyz"), *common]) == 0
    assert main(["train", "--out", str(tmp_path / "w"), "--channels", "1", *common]) == 0
    report = tmp_path / "report.csv"
    assert main(["eval", "--model", str(tmp_path / "wxyz" / "model.ckpt"),
                 "--model", str(tmp_path / "w" / "model.ckpt"),
                 "--set", str(tmp_path / "set" / "manifest.jsonl"), "--report", str(report)]) == 0
    with open(report) as fh:
        labels = sorted(row["channels"] for row in csv.DictReader(fh))
    record("AC-9", labels == ["w", "wxyz"], f"report rows labelled {labels}")


def test_ac10_superposition(corpus, scene_cfg):
    scene = generate_batch(corpus, scene_cfg, 1, seed=10)[0].scene
    assert len(scene.events) == 2 and scene.noise is not None
    full, _ = mix_scene(scene, corpus)
    parts = [mix_scene(replace(scene, events=[ev], noise=None), corpus)[0].samples for ev in scene.events]
    noise, _ = mix_scene(replace(scene, events=[]), corpus)
    exact = np.array_equal(full.samples, parts[0] + parts[1] + noise.samples)
    record("AC-10", exact, f"mixture equals the sum of single-source scenes plus noise sample-exactly: {exact}")


def test_ac11_determinism(tmp_path):
    assert main(["corpus", "--out", str(tmp_path / "corpus"), "--seconds", "1.0"]) == 0
    sets = []
    for run in ("a", "b"):
        out = tmp_path / f"synth_{run}"
        assert main(["synth", "--corpus", str(tmp_path / "corpus"), "--count", "4", "--seed", "7",
                     "--out", str(out), "--desk-scale"]) == 0
        sets.append({p.name: p.read_bytes() for p in sorted(out.glob("*.wav"))})
    ckpts = []
    for run in ("a", "b"):
        out = tmp_path / f"train_{run}"
        assert main(["train", "--corpus", str(tmp_path / "corpus"), "--out", str(out), "--desk-scale",
                     "--seed", "7", "--max-steps", "50", "--batch-size", "1", "--grad-accum", "1",
                     "--duration", "0.5"]) == 0
        ckpts.append((out / "model.ckpt").read_bytes())
    same_wavs = sets[0] == sets[1] and len(sets[0]) > 0
    same_ckpt = ckpts[0] == ckpts[1]
    record("AC-11", same_wavs and same_ckpt,
           f"{len(sets[0])} WAVs identical={same_wavs}, 50-step checkpoints identical={same_ckpt}")


def test_ac12_accumulation_equivalence(corpus):
    synth = SynthConfig(sample_rate=8000, duration=0.25, embed_dim=16, min_event_s=0.1)
    examples = generate_batch(corpus, synth, 4, seed=12)
    defaults = TrainConfig()
    updates, grads = [], []
    for split in ([examples[:2], examples[2:]], [examples]):
        model = BSAST(tiny_model()).double().randomize(12)
        params = dict(model.named_parameters())
        before = {n: p.detach().clone() for n, p in params.items()}
        g, _ = accumulate_grads(model, split, 100.0)
        optimizer_step(params, g, init_optim(params, defaults.lr, defaults.weight_decay))
        updates.append({n: params[n].detach() - before[n] for n in params})
        grads.append(g)
    diffs = sorted(((updates[0][n] - updates[1][n]).abs().max().item(), n) for n in updates[0])
    worst, where = diffs[-1]
    grad_gap = max((grads[0][n] - grads[1][n]).abs().max().item() for n in grads[0])
    rest = max((d for d, n in diffs if n != where), default=0.0)
    record("AC-12", worst < 1e-10,
           f"max update difference {worst:.2e} at {where} (next worst {rest:.2e}), "
           f"max gradient difference {grad_gap:.2e}")


if __name__ == "__main__":
    import sys

    pytest.main([__file__, "-q", *sys.argv[1:]])
