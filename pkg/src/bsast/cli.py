"""Command-line entry point: corpus, synth, train, extract, eval, gradcheck.

Exit codes: 0 success, 1 runtime error (one-line cause on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


from . import __version__
from .config import TINY_MODEL, RunConfig, build_run_config, read_config_file
from .errors import BsastError

# flag destination -> config path
OVERRIDES = {
    "lr": "train.lr",
    "weight_decay": "train.weight_decay",
    "batch_size": "train.batch_size",
    "grad_accum": "train.grad_accum",
    "epochs": "train.epochs",
    "max_steps": "train.max_steps",
    "seed": "train.seed",
    "dtype": "train.dtype",
    "channels": "model.channels",
    "blocks": "model.blocks",
    "hidden": "model.hidden",
    "rope_channel_axis": "model.rope_channel_axis",
    "sigma": "synth.sigma",
    "duration": "synth.duration",
}


class UsageError(Exception):
    pass


def _add_overrides(p, training=True):
    g = p.add_argument_group("config overrides (take precedence over --config)")
    g.add_argument("--config", help="config file with [model]/[train]/[synth] sections")
    g.add_argument("--desk-scale", action="store_true", help="start from the small desk-scale preset")
    g.add_argument("--seed", type=int)
    if training:
        g.add_argument("--lr", type=float)
        g.add_argument("--weight-decay", type=float)
        g.add_argument("--batch-size", type=int)
        g.add_argument("--grad-accum", type=int)
        g.add_argument("--epochs", type=int)
        g.add_argument("--max-steps", type=int)
        g.add_argument("--dtype", choices=("float32", "float64"))
        g.add_argument("--channels", type=int, choices=(1, 4))
        g.add_argument("--blocks", type=int)
        g.add_argument("--hidden", type=int)
        g.add_argument("--rope-channel-axis", dest="rope_channel_axis", action="store_true", default=None)
        g.add_argument("--no-rope-channel-axis", dest="rope_channel_axis", action="store_false")
    g.add_argument("--sigma", type=float)
    g.add_argument("--duration", type=float, help="scene duration in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bsast {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("corpus", help="write a generated toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--per-label", type=int, default=2)
    p.add_argument("--seconds", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="render scenes and a manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    _add_overrides(p, training=False)

    p = sub.add_parser("train", help="train a model on on-the-fly scenes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_overrides(p)

    p = sub.add_parser("extract", help="extract the queried source from a mixture")
    p.add_argument("--model", required=True)
    p.add_argument("--mix", required=True)
    q = p.add_mutually_exclusive_group(required=True)
    q.add_argument("--query", help="embedding file (.qemb)")
    q.add_argument("--query-wav", help="audio exemplar; uses its .qemb sidecar or class label")
    p.add_argument("--out", required=True)
    p.add_argument("--spectrogram-png")

    p = sub.add_parser("eval", help="median SI-SDR / SDR over a scene manifest")
    p.add_argument("--model", required=True, action="append", help="repeat to compare models")
    p.add_argument("--set", required=True, help="manifest written by synth")
    p.add_argument("--condition", choices=("audio", "text", "pseudo"), default="audio")
    p.add_argument("--report", required=True)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--config")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--full", action="store_true", help="check every coordinate")
    p.add_argument("--probe", choices=("projection", "objective"), default="projection",
                   help="scalar probe: random projection of the estimate, or the training loss")
    p.add_argument("--seed", type=int, default=0)
    return parser


def parse_args(argv):
    """Return ``(command, RunConfig, namespace)``; raises UsageError on bad input."""
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        raise UsageError("no command given")
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("no command given")
    overrides = {}
    for dest, path in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[path] = value
    if "model.channels" in overrides:
        overrides["synth.channels"] = overrides["model.channels"]
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    desk = getattr(args, "desk_scale", False)
    if args.command == "gradcheck":
        base = {k: str(v) for k, v in TINY_MODEL.items()}
        file_values["model"] = {**base, **file_values.get("model", {})}
    try:
        cfg = build_run_config(file_values, overrides, desk, getattr(args, "config", "") or "")
    except BsastError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.model.channels == 1 and overrides.get("model.rope_channel_axis") is True:
        raise UsageError("--rope-channel-axis needs more than one channel (got channels=1)")
    return args.command, cfg, args


def _write_provenance(out_dir, cfg: RunConfig, argv):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text() + f"\n# argv = {' '.join(argv)}\n"
    (out / "run.cfg").write_text(text)


def _check_compatible(cfg: RunConfig, corpus):
    rate = corpus.sample_rate
    if rate is not None and rate != cfg.model.sample_rate:
        raise BsastError(f"corpus is {rate} Hz but the model expects {cfg.model.sample_rate} Hz")
    if cfg.synth.sample_rate != cfg.model.sample_rate:
        raise BsastError(f"synth sample_rate {cfg.synth.sample_rate} != model sample_rate {cfg.model.sample_rate}")
    if cfg.synth.embed_dim != cfg.model.query_dim:
        raise BsastError(f"synth embed_dim {cfg.synth.embed_dim} != model query_dim {cfg.model.query_dim}")


def cmd_corpus(cfg, args, argv):
    from .synth import make_toy_corpus

    corpus = make_toy_corpus(args.out, sample_rate=args.sample_rate, per_label=args.per_label,
                             seconds=args.seconds, seed=args.seed)
    print("sources={} rirs={} noises={}".format(*corpus.counts()))


def cmd_synth(cfg, args, argv):
    from .synth import corpus_scan, synth_to_dir

    corpus = corpus_scan(args.corpus)
    if corpus.sample_rate is not None and corpus.sample_rate != cfg.synth.sample_rate:
        raise BsastError(f"corpus is {corpus.sample_rate} Hz but synth sample_rate is {cfg.synth.sample_rate}")
    records = synth_to_dir(corpus, cfg.synth, args.count, cfg.seed, args.out, args.manifest)
    _write_provenance(args.out, cfg, argv)
    print(f"wrote {len(records)} scenes to {args.out}")


def cmd_train(cfg, args, argv):
    from .model import BSAST
    from .plotting import loss_curve_png
    from .synth import corpus_scan
    from .train import train_loop

    corpus = corpus_scan(args.corpus)
    _check_compatible(cfg, corpus)
    _write_provenance(args.out, cfg, argv)
    model = BSAST(cfg.model, seed=cfg.seed)
    result = train_loop(cfg.train, model, corpus=corpus, synth_cfg=cfg.synth, out_dir=args.out)
    if result.history:
        loss_curve_png(Path(args.out) / "loss.png", result.history)
        last = result.history[-1]
        print(f"step {last[0]}: total={last[4]:.4f} si_sdr={-last[2]:.2f} dB")
    print(f"checkpoint: {result.checkpoint}")


def query_from_wav(path, dim):
    """Embedding for an audio exemplar: its ``.qemb`` sidecar, else its class label's stand-in."""
    from .conditioning import load_embedding, synthetic_embedding

    path = Path(path)
    sidecar = path.with_suffix(".qemb")
    if sidecar.exists():
        return load_embedding(sidecar)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    label = path.parent.name if path.parent.name not in ("", ".", "sources") else path.stem.split("_")[0]
    return synthetic_embedding(label, dim)


def cmd_extract(cfg, args, argv):
    from .audio_io import read_wav, write_wav
    from .conditioning import load_embedding
    from .dsp import FoaWaveform
    from .estimator import extract, select_channels
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    mc = model.config
    samples, rate = read_wav(args.mix)
    query = load_embedding(args.query) if args.query else query_from_wav(args.query_wav, mc.query_dim)
    if samples.shape[0] == 4 and mc.channels == 1:
        samples = select_channels(samples, 1)
    est = extract(FoaWaveform(samples, rate), query, model)
    write_wav(args.out, est, rate)
    if args.spectrogram_png:
        from .plotting import spectrogram_png

        spectrogram_png(args.spectrogram_png, [("mixture (w)", samples[0]), ("estimate", est)],
                        rate, mc.stft, title=f"query: {query.modality}")
    print(f"wrote {args.out}")


def load_eval_items(manifest, condition):
    from .audio_io import read_wav
    from .conditioning import load_embedding
    from .synth import read_manifest
    from .train import EvalItem

    manifest = Path(manifest)
    items = []
    for rec in read_manifest(manifest):
        mix, _ = read_wav(manifest.parent / rec["mix"])
        target, _ = read_wav(manifest.parent / rec["target"])
        query = load_embedding(manifest.parent / rec["queries"][condition])
        items.append(EvalItem(rec["id"], mix, target[0], query.vector, rec.get("label", "")))
    return items


def cmd_eval(cfg, args, argv):
    from .model import load_checkpoint
    from .plotting import write_report
    from .train import EvalReport, evaluate

    items = load_eval_items(args.set, args.condition)
    if not items:
        raise BsastError("empty evaluation set")
    rows, summary = [], []
    for path in args.model:
        model = load_checkpoint(path)
        if items[0].query.shape[-1] != model.config.query_dim:
            raise BsastError(f"query dimension mismatch: set has d={items[0].query.shape[-1]}, "
                             f"model expects d={model.config.query_dim}")
        report = evaluate(model, items, args.condition)
        for row in report.rows:
            row["model"] = Path(path).name
        rows.extend(report.rows)
        summary.extend(report.summary)
    paths = write_report(EvalReport(rows, summary), args.report)
    _write_provenance(Path(args.report).parent, cfg, argv)
    for s in summary:
        print(f"{s['condition']:>6} {s['channels']:>4}  n={s['items']}  "
              f"median SI-SDR={s['median_si_sdr']:.2f} dB  median SDR(plain)={s['median_sdr_plain']:.2f} dB")
    print("report: " + ", ".join(str(p) for p in paths))


def gradcheck_example(model_cfg, seed=0):
    """A short fixed scene (about 8 frames) for gradient verification."""
    from .config import SynthConfig
    from .synth import build_toy_corpus, generate_batch

    rate = model_cfg.sample_rate
    length = 7 * model_cfg.hop
    corpus = build_toy_corpus(sample_rate=rate, per_label=1, n_rirs=2, n_noises=1, seconds=0.5, seed=seed)
    scfg = SynthConfig(sample_rate=rate, duration=length / rate, embed_dim=model_cfg.query_dim,
                       min_events=2, max_events=2, min_event_s=0.5 * length / rate)
    return generate_batch(corpus, scfg, 1, seed)


def cmd_gradcheck(cfg, args, argv):
    from .errors import VerificationFailure
    from .model import BSAST, parameter_count
    from .train import grad_check

    model = BSAST(cfg.model).double().randomize(args.seed)
    examples = gradcheck_example(cfg.model, args.seed)
    full = True if args.full else None
    report = grad_check(model, examples, eps=args.eps, tol=args.tol, full=full, raise_on_fail=False,
                        probe=args.probe)
    print(f"parameters: {parameter_count(model)}")
    print(report.summary())
    if not report.passed:
        rel, path, idx, ga, gn = report.failures[0]
        raise VerificationFailure(f"gradient mismatch at {path}[{idx}] (rel {rel:.3e})", report)


COMMANDS = {"corpus": cmd_corpus, "synth": cmd_synth, "train": cmd_train, "extract": cmd_extract,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def run(command, cfg, args, argv=()) -> int:
    try:
        COMMANDS[command](cfg, args, list(argv))
    except (BsastError, OSError, ValueError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, cfg, args = parse_args(argv)
    except UsageError as exc:
        print(f"bsast: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:      # argparse usage errors and --help
        return int(exc.code or 0)
    return run(command, cfg, args, argv)


if __name__ == "__main__":
    sys.exit(main())
