"""Model, training and synthesis configuration.

Config files are flat ``key = value`` text grouped under ``[model]``,
``[train]`` and ``[synth]`` headers. Values override dataclass defaults;
command-line flags override file values.
"""

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace

from . import __version__
from .bandsplit import BandScheme, default_band_scheme
from .dsp import StftConfig
from .errors import InvalidArgument


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 4
    hidden: int = 128
    blocks: int = 8
    heads: int = 4
    head_dim: int = 64
    fft_size: int = 2048
    hop: int = 1024
    sample_rate: int = 32000
    bands: str = ""            # comma-separated widths; empty selects the default scheme
    query_dim: int = 512
    film_hidden: int = 0       # 0 means 2 * hidden
    rope_theta: float = 10000.0
    rope_channel_axis: bool = True
    share_film: bool = False
    ff_mult: int = 4
    decoder_mult: int = 4
    merge_layers: int = 1

    def __post_init__(self):
        if self.channels not in (1, 4):
            raise InvalidArgument(f"channels must be 1 or 4, got {self.channels}")
        for name in ("hidden", "blocks", "heads", "head_dim", "fft_size", "hop",
                     "sample_rate", "query_dim", "ff_mult", "decoder_mult"):
            value = getattr(self, name)
            if value < (0 if name == "blocks" else 1):
                raise InvalidArgument(f"{name} must be positive, got {value}")
        if self.head_dim % 2:
            raise InvalidArgument(f"head_dim must be even for rotary encoding, got {self.head_dim}")
        if self.merge_layers not in (1, 2):
            raise InvalidArgument("merge_layers must be 1 or 2")
        self.band_scheme.check(self.fft_size // 2 + 1)

    @property
    def band_scheme(self) -> BandScheme:
        if self.bands:
            return BandScheme.from_text(self.bands)
        return default_band_scheme(self.fft_size)

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.fft_size, self.hop)

    @property
    def film_width(self) -> int:
        return self.film_hidden or 2 * self.hidden

    @property
    def n_film(self) -> int:
        return 1 if self.share_film else self.blocks + 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    grad_accum: int = 2
    epochs: int = 300
    scenes_per_epoch: int = 2000
    max_steps: int = 0         # 0 means no cap beyond epochs
    seed: int = 0
    lambda_l1: float = 100.0
    log_every: int = 1
    checkpoint_every: int = 0
    prefetch: int = 0          # capacity of the data handoff queue; 0 runs synchronously
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("lr", "batch_size", "grad_accum", "scenes_per_epoch"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.epochs < 0 or self.max_steps < 0 or self.weight_decay < 0:
            raise InvalidArgument("epochs, max_steps and weight_decay must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgument(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.scenes_per_epoch // (self.batch_size * self.grad_accum))

    @property
    def total_steps(self) -> int:
        steps = self.epochs * self.steps_per_epoch
        return min(steps, self.max_steps) if self.max_steps else steps


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = 32000
    duration: float = 10.0
    channels: int = 4
    min_events: int = 1
    max_events: int = 3
    max_overlap: int = 3
    min_event_s: float = 0.5
    gain_min_db: float = -6.0
    gain_max_db: float = 3.0
    snr_min_db: float = 5.0
    snr_max_db: float = 20.0
    sigma: float = 0.3
    embed_dim: int = 512

    def __post_init__(self):
        if self.channels not in (1, 4):
            raise InvalidArgument(f"channels must be 1 or 4, got {self.channels}")
        if not 0 <= self.min_events <= self.max_events:
            raise InvalidArgument("need 0 <= min_events <= max_events")
        if self.max_overlap < 1 or self.duration <= 0 or self.sigma < 0:
            raise InvalidArgument("max_overlap, duration must be positive and sigma non-negative")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


DESK_MODEL = dict(hidden=32, blocks=2, heads=2, head_dim=16, fft_size=256, hop=128,
                  sample_rate=8000, query_dim=64)
DESK_TRAIN = dict(lr=1e-3, epochs=1, scenes_per_epoch=400)
DESK_SYNTH = dict(sample_rate=8000, duration=1.0, embed_dim=64, min_event_s=0.25)

# configuration used for full-coordinate gradient verification
TINY_MODEL = dict(channels=4, hidden=8, blocks=1, heads=2, head_dim=4, fft_size=256, hop=128,
                  sample_rate=8000, bands="16,32,40,41", query_dim=16)


def desk_model(**overrides) -> ModelConfig:
    return ModelConfig(**{**DESK_MODEL, **overrides})


def tiny_model(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY_MODEL, **overrides})


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig}


def coerce(cls, key, text):
    """Convert config text for field ``key`` of dataclass ``cls``."""
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise InvalidArgument(f"unknown {cls.__name__} key {key!r}")
    kind = types[key]
    if kind is bool:
        lowered = str(text).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise InvalidArgument(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(float(text)) if kind is int and "e" in str(text).lower() else kind(text)
    except ValueError as exc:
        raise InvalidArgument(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc


def section_to_text(name, obj) -> str:
    lines = [f"[{name}]"]
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> ModelConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    if not parser.has_section("model"):
        raise InvalidArgument("config text has no [model] section")
    values = {k: coerce(ModelConfig, k, v) for k, v in parser.items("model")}
    return ModelConfig(**values)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    config_path: str = ""
    overrides: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_text(self) -> str:
        header = (f"# bsast {__version__}\n# config_path = {self.config_path or '-'}\n"
                  f"# resolved_seed = {self.seed}\n")
        parts = [section_to_text(name, getattr(self, name)) for name in SECTIONS]
        return header + "\n".join(parts)


def read_config_file(path) -> dict:
    """Parse a config file into ``{section: {key: raw text}}``."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise InvalidArgument(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise InvalidArgument(f"{path}: unknown section [{section}]")
        out[section] = dict(parser.items(section))
    return out


def build_run_config(file_values=None, overrides=None, desk_scale=False, config_path="") -> RunConfig:
    """Merge defaults < desk preset < file values < explicit overrides.

    ``overrides`` maps ``section.key`` to already-typed values.
    """
    layers = {name: {} for name in SECTIONS}
    if desk_scale:
        layers["model"].update(DESK_MODEL)
        layers["train"].update(DESK_TRAIN)
        layers["synth"].update(DESK_SYNTH)
    for section, values in (file_values or {}).items():
        for key, text in values.items():
            layers[section][key] = coerce(SECTIONS[section], key, text)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        coerce(SECTIONS[section], key, str(value))  # validates the key name
        layers[section][key] = value
    try:
        built = {name: SECTIONS[name](**layers[name]) for name in SECTIONS}
    except TypeError as exc:
        raise InvalidArgument(str(exc)) from exc
    return RunConfig(config_path=str(config_path), overrides=dict(overrides or {}), **built)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, train=replace(cfg.train, seed=seed))
