"""Label-free spatial scene construction.

A mixture is the sum of dry sources convolved with multichannel room impulse
responses, plus non-directional noise. One event per scene is the target;
its query is a perturbed copy of the target's own embedding.

Corpus layout::

    root/sources/<label>/*.wav   dry mono sources (label = sub-directory name)
    root/sources/*.wav           label = file stem up to the first "_"
    root/rirs/*.wav              4-channel impulse responses
    root/noise/*.wav             mono or 4-channel background noise

A ``foo.qemb`` file next to ``foo.wav`` overrides the synthetic embedding.
"""

from __future__ import annotations

import json
import os
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio_io import read_wav, write_wav
from .conditioning import (QueryEmbedding, load_embedding, perturb_embedding, save_embedding,
                           synthetic_embedding)
from .config import SynthConfig
from .dsp import FoaWaveform
from .errors import CorpusError, InvalidArgument, NotFound

FOA_CHANNELS = 4


@dataclass
class Rir:
    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        taps = taps[None, :] if taps.ndim == 1 else taps
        if taps.shape[-1] < 1 or not np.all(np.isfinite(taps)):
            raise InvalidArgument("RIR needs at least one finite tap per channel")
        self.taps = taps

    @property
    def channels(self) -> int:
        return self.taps.shape[0]


def synthetic_rir(rng: np.random.Generator, sample_rate: int, length_s: float = 0.25,
                  rt60_range=(0.15, 0.5), tail_db_range=(-14.0, -6.0), max_delay: int = 8) -> Rir:
    """Direct path with FOA directivity gains followed by a decaying diffuse tail.

    Channels are ordered w, x, y, z. The direct path of each channel gets a
    small independent delay offset on top of a shared propagation delay.
    """
    k = max(int(length_s * sample_rate), max_delay + 4)
    azimuth = rng.uniform(-np.pi, np.pi)
    elevation = rng.uniform(-np.pi / 4, np.pi / 4)
    direct = np.array([1.0,
                       np.cos(azimuth) * np.cos(elevation),
                       np.sin(azimuth) * np.cos(elevation),
                       np.sin(elevation)])
    delay = int(rng.integers(0, max_delay + 1))
    jitter = rng.integers(0, 2, size=FOA_CHANNELS)
    rt60 = rng.uniform(*rt60_range)
    tail_gain = 10 ** (rng.uniform(*tail_db_range) / 20)
    taps = np.zeros((FOA_CHANNELS, k))
    for c in range(FOA_CHANNELS):
        taps[c, delay + jitter[c]] = direct[c]
    start = delay + 2 + int(0.002 * sample_rate)
    t = np.arange(k - start) / sample_rate
    envelope = np.exp(-6.9078 * t / rt60)
    spread = np.array([1.0, 1 / np.sqrt(3), 1 / np.sqrt(3), 1 / np.sqrt(3)])
    noise = rng.standard_normal((FOA_CHANNELS, k - start))
    taps[:, start:] += tail_gain * spread[:, None] * envelope * noise / np.sqrt(sample_rate * rt60 / 13.8)
    return Rir(taps, sample_rate)


def convolve_rir(s, h: Rir, length: int | None = None, sample_rate: int | None = None) -> FoaWaveform:
    """Channel ``c`` of the output is ``s * h_c`` (full convolution, optionally truncated)."""
    if sample_rate is not None and sample_rate != h.sample_rate:
        raise InvalidArgument(f"source is {sample_rate} Hz but the RIR is {h.sample_rate} Hz")
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    out = fftconvolve(s[None, :], h.taps, axes=-1)
    if length is not None:
        out = out[:, :length]
        if out.shape[1] < length:
            out = np.pad(out, ((0, 0), (0, length - out.shape[1])))
    return FoaWaveform(out, h.sample_rate)


@dataclass
class Clip:
    samples: np.ndarray          # C x L
    sample_rate: int
    label: str = ""
    path: str = ""


@dataclass
class Corpus:
    sources: dict = field(default_factory=dict)
    rirs: dict = field(default_factory=dict)
    noises: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)

    def counts(self):
        return len(self.sources), len(self.rirs), len(self.noises)

    @property
    def sample_rate(self):
        for group in (self.sources, self.rirs, self.noises):
            for clip in group.values():
                return clip.sample_rate
        return None

    def embedding(self, source_id: str, dim: int) -> QueryEmbedding:
        """Stored embedding for a source if present, else the label-keyed stand-in."""
        if source_id not in self.sources:
            raise NotFound(f"unknown source {source_id!r}")
        stored = self.embeddings.get(source_id)
        if stored is not None:
            if stored.dim != dim:
                raise InvalidArgument(f"{source_id}: stored embedding has d={stored.dim}, need {dim}")
            return stored
        return synthetic_embedding(self.sources[source_id].label, dim)

    def rir(self, rir_id: str) -> Rir:
        try:
            clip = self.rirs[rir_id]
        except KeyError:
            raise NotFound(f"unknown RIR {rir_id!r}") from None
        return Rir(clip.samples, clip.sample_rate)


def _label_for(path: Path, group_root: Path) -> str:
    rel = path.relative_to(group_root)
    if len(rel.parts) > 1:
        return rel.parts[0]
    return path.stem.split("_")[0]


def corpus_scan(root, sample_rate: int | None = None) -> Corpus:
    """Index sources, RIRs and noises under ``root``.

    All files must share one sample rate (``sample_rate`` if given, else the
    most common one); violations are collected and raised together.
    """
    root = Path(root)
    corpus = Corpus()
    found = []
    for group in ("sources", "rirs", "noise"):
        base = root / group
        if base.is_dir():
            found.extend((group, base, p) for p in sorted(base.rglob("*.wav")))
    if not found:
        warnings.warn(f"corpus at {root} contains no WAV files", stacklevel=2)
        return corpus
    loaded, problems = [], []
    for group, base, path in found:
        try:
            samples, rate = read_wav(path)
        except Exception as exc:  # report every unreadable file, not just the first
            problems.append(f"{path}: {exc}")
            continue
        loaded.append((group, base, path, samples, rate))
    if problems:
        raise CorpusError(f"{len(problems)} unreadable file(s) in {root}", problems)
    rates = Counter(rate for *_, rate in loaded)
    expected = sample_rate or rates.most_common(1)[0][0]
    bad = [f"{path}: sample rate {rate} Hz, expected {expected} Hz"
           for _, _, path, _, rate in loaded if rate != expected]
    if bad:
        raise CorpusError(f"{len(bad)} file(s) with mismatched sample rate in {root}", bad)
    for group, base, path, samples, rate in loaded:
        key = str(path.relative_to(base).with_suffix("")).replace(os.sep, "/")
        if group == "sources":
            corpus.sources[key] = Clip(samples[:1], rate, _label_for(path, base), str(path))
            sidecar = path.with_suffix(".qemb")
            if sidecar.exists():
                corpus.embeddings[key] = load_embedding(sidecar)
        elif group == "rirs":
            if samples.shape[0] != FOA_CHANNELS:
                raise CorpusError(f"{path}: RIR must have 4 channels", [str(path)])
            corpus.rirs[key] = Clip(samples, rate, "", str(path))
        else:
            corpus.noises[key] = Clip(samples, rate, "", str(path))
    return corpus


@dataclass
class Event:
    source: str
    rir: str
    gain_db: float
    onset: int
    length: int


@dataclass
class SceneSpec:
    events: list
    duration: int                      # samples
    noise: str | None = None
    noise_gain_db: float = float("-inf")
    noise_offset: int = 0
    seed: int = 0
    target: int = 0

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["noise_gain_db"] = None if np.isneginf(self.noise_gain_db) else self.noise_gain_db
        return rec

    @classmethod
    def from_record(cls, rec) -> "SceneSpec":
        rec = dict(rec)
        rec["events"] = [Event(**ev) for ev in rec["events"]]
        if rec.get("noise_gain_db") is None:
            rec["noise_gain_db"] = float("-inf")
        return cls(**rec)


def max_overlap(events, duration: int) -> int:
    """Largest number of simultaneously active events (dry extents only)."""
    if not events:
        return 0
    delta = np.zeros(duration + 1, dtype=np.int64)
    for ev in events:
        delta[ev.onset] += 1
        delta[min(ev.onset + ev.length, duration)] -= 1
    return int(np.cumsum(delta).max())


def _dry(ev: Event, corpus: Corpus, duration: int) -> np.ndarray:
    try:
        clip = corpus.sources[ev.source]
    except KeyError:
        raise NotFound(f"unknown source {ev.source!r}") from None
    if ev.length > clip.samples.shape[-1] or ev.onset < 0 or ev.onset + ev.length > duration:
        raise InvalidArgument(f"event {ev.source} at {ev.onset}+{ev.length} does not fit the scene")
    out = np.zeros(duration)
    out[ev.onset:ev.onset + ev.length] = 10 ** (ev.gain_db / 20) * clip.samples[0, :ev.length]
    return out


def _noise(spec: SceneSpec, corpus: Corpus) -> np.ndarray:
    try:
        clip = corpus.noises[spec.noise]
    except KeyError:
        raise NotFound(f"unknown noise {spec.noise!r}") from None
    x = clip.samples
    reps = -(-(spec.noise_offset + spec.duration) // x.shape[-1])
    x = np.tile(x, (1, reps))[:, spec.noise_offset:spec.noise_offset + spec.duration]
    if x.shape[0] == 1:
        # spread a mono bed over all components with decorrelating shifts
        shifts = [0, spec.duration // 3, spec.duration // 2, 2 * spec.duration // 3]
        x = np.stack([np.roll(x[0], s) * (1.0 if c == 0 else 1 / np.sqrt(3))
                      for c, s in enumerate(shifts)])
    return x


def render_events(spec: SceneSpec, corpus: Corpus):
    """Wet FOA stems and dry targets for every event."""
    stems, dry = [], []
    for ev in spec.events:
        s = _dry(ev, corpus, spec.duration)
        rir = corpus.rir(ev.rir)
        src_rate = corpus.sources[ev.source].sample_rate
        stems.append(convolve_rir(s, rir, spec.duration, src_rate).samples)
        dry.append(s)
    return stems, dry


def mix_scene(spec: SceneSpec, corpus: Corpus, max_overlap_events: int = 3):
    """Return ``(mixture, dry_targets)`` for a scene.

    Stems are summed in event order, then noise is added.
    """
    if max_overlap(spec.events, spec.duration) > max_overlap_events:
        raise InvalidArgument(f"more than {max_overlap_events} events overlap")
    stems, dry = render_events(spec, corpus)
    mix = np.zeros((FOA_CHANNELS, spec.duration))
    for stem in stems:
        mix = mix + stem
    if spec.noise is not None and not np.isneginf(spec.noise_gain_db):
        mix = mix + 10 ** (spec.noise_gain_db / 20) * _noise(spec, corpus)
    rate = corpus.sample_rate
    return FoaWaveform(mix, rate), dry


@dataclass
class TrainingExample:
    mixture: FoaWaveform
    target: np.ndarray
    query: QueryEmbedding
    scene: SceneSpec
    label: str = ""


def _sample_scene(corpus: Corpus, cfg: SynthConfig, rng: np.random.Generator, seed_tag) -> SceneSpec:
    n = cfg.n_samples
    source_ids = sorted(corpus.sources)
    rir_ids = sorted(corpus.rirs)
    n_events = int(rng.integers(cfg.min_events, cfg.max_events + 1))
    labels_used, events = set(), []
    order = rng.permutation(len(source_ids))
    for idx in order:
        if len(events) == n_events:
            break
        sid = source_ids[idx]
        clip = corpus.sources[sid]
        if clip.label in labels_used and len({c.label for c in corpus.sources.values()}) > len(labels_used):
            continue
        avail = min(clip.samples.shape[-1], n)
        shortest = min(avail, max(1, int(cfg.min_event_s * cfg.sample_rate)))
        length = int(rng.integers(shortest, avail + 1))
        gain = float(rng.uniform(cfg.gain_min_db, cfg.gain_max_db))
        rir = rir_ids[int(rng.integers(len(rir_ids)))]
        for _ in range(50):
            ev = Event(sid, rir, gain, int(rng.integers(0, n - length + 1)), length)
            if max_overlap(events + [ev], n) <= cfg.max_overlap:
                events.append(ev)
                labels_used.add(clip.label)
                break
    if not events:
        raise InvalidArgument("could not place any event in the scene")
    target = int(rng.integers(len(events)))
    noise = None
    offset = 0
    if corpus.noises:
        noise = sorted(corpus.noises)[int(rng.integers(len(corpus.noises)))]
        offset = int(rng.integers(0, corpus.noises[noise].samples.shape[-1]))
    return SceneSpec(events, n, noise, float("-inf"), offset, seed_tag, target)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator per (master seed, scene index)."""
    return np.random.default_rng([seed, index])


def make_example(corpus: Corpus, cfg: SynthConfig, seed: int, index: int) -> TrainingExample:
    rng = scene_rng(seed, index)
    spec = _sample_scene(corpus, cfg, rng, seed)
    if spec.noise is not None:
        stems, _ = render_events(spec, corpus)
        event_power = np.mean(np.sum(stems, axis=0)[0] ** 2)
        noise_power = np.mean(_noise(spec, corpus)[0] ** 2)
        snr = rng.uniform(cfg.snr_min_db, cfg.snr_max_db)
        if event_power > 0 and noise_power > 0:
            spec.noise_gain_db = float(10 * np.log10(event_power / noise_power) - snr)
    mixture, dry = mix_scene(spec, corpus, cfg.max_overlap)
    source = spec.events[spec.target].source
    query = perturb_embedding(corpus.embedding(source, cfg.embed_dim), cfg.sigma, rng)
    if cfg.channels == 1:
        mixture = FoaWaveform(mixture.samples[:1], mixture.sample_rate)
    return TrainingExample(mixture, dry[spec.target], query, spec, corpus.sources[source].label)


def generate_batch(corpus: Corpus, cfg: SynthConfig, count: int, seed: int, start: int = 0) -> list:
    """Scenes ``start .. start+count-1`` of the stream defined by ``seed``."""
    if not corpus.sources or not corpus.rirs:
        raise InvalidArgument("corpus needs at least one source and one RIR")
    if cfg.min_events < 1:
        raise InvalidArgument("every training scene needs at least one (target) event")
    return [make_example(corpus, cfg, seed, i) for i in range(start, start + count)]


def example_from_scene(spec: SceneSpec, corpus: Corpus, embed_dim: int, sigma: float = 0.0,
                       rng=None, channels: int = 4) -> TrainingExample:
    """Build a training example from a fixed scene (used for overfit checks)."""
    mixture, dry = mix_scene(spec, corpus)
    source = spec.events[spec.target].source
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    query = perturb_embedding(corpus.embedding(source, embed_dim), sigma, rng)
    if channels == 1:
        mixture = FoaWaveform(mixture.samples[:1], mixture.sample_rate)
    return TrainingExample(mixture, dry[spec.target], query, spec, corpus.sources[source].label)


# ---------------------------------------------------------------------------
# toy corpus and on-disk scene sets


TOY_LABELS = ("tone", "chirp", "pulse", "buzz", "wobble", "bell")


def _toy_source(label: str, rng: np.random.Generator, sample_rate: int, seconds: float) -> np.ndarray:
    n = int(seconds * sample_rate)
    t = np.arange(n) / sample_rate
    nyq = sample_rate / 2
    if label == "tone":
        f = rng.uniform(0.04, 0.08) * nyq
        x = np.sin(2 * np.pi * f * t) + 0.4 * np.sin(4 * np.pi * f * t)
    elif label == "chirp":
        f0, f1 = rng.uniform(0.05, 0.1) * nyq, rng.uniform(0.4, 0.6) * nyq
        phase = 2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * seconds))
        x = np.sin(phase)
    elif label == "pulse":
        period = int(rng.uniform(0.08, 0.15) * sample_rate)
        x = np.zeros(n)
        for start in range(0, n, period):
            m = min(period // 3, n - start)
            x[start:start + m] = rng.standard_normal(m) * np.exp(-np.arange(m) / (m / 4))
    elif label == "buzz":
        f = rng.uniform(0.02, 0.04) * nyq
        x = np.sign(np.sin(2 * np.pi * f * t)) * 0.5
    elif label == "wobble":
        f = rng.uniform(0.15, 0.25) * nyq
        x = np.sin(2 * np.pi * f * t + 3 * np.sin(2 * np.pi * 4 * t)) * (0.6 + 0.4 * np.sin(2 * np.pi * 2 * t))
    elif label == "bell":
        f = rng.uniform(0.3, 0.4) * nyq
        x = sum(np.sin(2 * np.pi * f * r * t) / r for r in (1.0, 2.76, 5.4)) * np.exp(-t * 3)
    else:
        raise InvalidArgument(f"no toy recipe for label {label!r}")
    fade = min(n // 10, int(0.01 * sample_rate))
    if fade:
        ramp = np.linspace(0, 1, fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    return 0.3 * x / (np.max(np.abs(x)) + 1e-12)


def build_toy_corpus(sample_rate: int = 8000, per_label: int = 2, n_rirs: int = 4,
                     n_noises: int = 2, seconds: float = 1.5, seed: int = 0,
                     labels=TOY_LABELS) -> Corpus:
    """Generate a small in-memory corpus: tonal/noisy sources, synthetic RIRs, diffuse noise."""
    rng = np.random.default_rng(seed)
    corpus = Corpus()
    for label in labels:
        for k in range(per_label):
            samples = _toy_source(label, rng, sample_rate, seconds)[None, :]
            corpus.sources[f"{label}/{label}_{k}"] = Clip(samples, sample_rate, label)
    for k in range(n_rirs):
        corpus.rirs[f"room_{k}"] = Clip(synthetic_rir(rng, sample_rate).taps, sample_rate)
    for k in range(n_noises):
        white = rng.standard_normal((FOA_CHANNELS, int(seconds * sample_rate)))
        pink = np.cumsum(white, axis=-1)
        pink -= pink[:, :1] + (pink[:, -1:] - pink[:, :1]) * np.linspace(0, 1, pink.shape[-1])
        pink *= np.array([1.0, 0.577, 0.577, 0.577])[:, None] * 0.05 / (pink.std() + 1e-12)
        corpus.noises[f"noise_{k}"] = Clip(pink, sample_rate)
    return corpus


def make_toy_corpus(root, **kwargs) -> Corpus:
    """Write :func:`build_toy_corpus` output under ``root`` and return its scanned index."""
    root = Path(root)
    corpus = build_toy_corpus(**kwargs)
    for group, clips in (("sources", corpus.sources), ("rirs", corpus.rirs), ("noise", corpus.noises)):
        for key, clip in clips.items():
            path = root / group / f"{key}.wav"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_wav(path, clip.samples, clip.sample_rate)
    return corpus_scan(root)


def write_manifest(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def synth_to_dir(corpus: Corpus, cfg: SynthConfig, count: int, seed: int, out_dir,
                 manifest_path=None) -> list:
    """Render ``count`` scenes to WAV/embedding files plus a JSONL manifest.

    Each record stores the scene description (enough to re-synthesize it) and
    relative paths of the mixture, dry target and the three query variants.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for ex_index, ex in enumerate(generate_batch(corpus, cfg, count, seed)):
        name = f"scene_{ex_index:05d}"
        mix_full, _ = mix_scene(ex.scene, corpus, cfg.max_overlap)
        write_wav(out / f"{name}_mix.wav", mix_full.samples, cfg.sample_rate)
        write_wav(out / f"{name}_target.wav", ex.target, cfg.sample_rate)
        source = ex.scene.events[ex.scene.target].source
        queries = {
            "pseudo": ex.query,
            "audio": corpus.embedding(source, cfg.embed_dim),
            "text": synthetic_embedding(ex.label, cfg.embed_dim, "text"),
        }
        qpaths = {}
        for kind, emb in queries.items():
            qpaths[kind] = f"{name}_{kind}.qemb"
            save_embedding(emb, out / qpaths[kind])
        records.append({
            "id": name,
            "index": ex_index,
            "label": ex.label,
            "mix": f"{name}_mix.wav",
            "target": f"{name}_target.wav",
            "queries": qpaths,
            "scene": ex.scene.to_record(),
        })
    write_manifest(records, manifest_path or out / "manifest.jsonl")
    return records
