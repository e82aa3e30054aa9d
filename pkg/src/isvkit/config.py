"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Keys are the field names of
:class:`RunConfig`; synth-world parameters use a ``synth_`` prefix (for
example ``synth_noise = 0.8``). Unknown keys are rejected.
"""

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .synth import SynthWorldConfig

PAD_INPUTS = ("labels", "predictions")
PAD_SOURCES = ("head", "file")
SCORERS = ("cosine", "modular", "e2e")
WORLDS = ("embedding", "feature")


def _int_tuple(text):
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _float_tuple(text):
    text = text.strip()
    return tuple(float(v) for v in text.split(",")) if text else ()


def _str_tuple(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float64"
    out_dir: str = "run"

    # inputs; empty means "not given"
    world: str = "embedding"
    train_protocol: str = ""
    eval_protocol: str = ""
    feature_dir: str = ""
    train_store: str = ""
    eval_store: str = ""
    trials: str = ""
    pad_scores: str = ""
    frontend_checkpoint: str = ""
    pad_checkpoint: str = ""
    backend_checkpoint: str = ""
    e2e_checkpoint: str = ""

    lr: float = 1e-3
    weight_decay: float = 1e-4

    encoder_channels: tuple = (8, 16, 16)
    encoder_mfm: bool = True
    embedding_dim: int = 64
    mtl: bool = False
    frontend_steps: int = 600
    frontend_batch_size: int = 32

    e2e_steps: int = 1000
    e2e_speakers_per_batch: int = 8
    e2e_utts_per_speaker: int = 4
    e2e_isv_hidden: tuple = (256, 256)
    e2e_isv_product: bool = False

    pad_source: str = "head"
    pad_hidden: tuple = ()
    pad_steps: int = 1000

    backend_layers: int = 4
    backend_nodes: int = 256
    backend_steps: int = 1250
    backend_batch_size: int = 96
    backend_type_mix: tuple = (2.0, 1.0, 1.0)
    backend_trials_per_type: int = 3000
    alpha: float = 20.0
    pad_input: str = "labels"

    scorers: tuple = ("cosine", "modular")
    histogram_bins: int = 40

    synth: SynthWorldConfig = field(default_factory=SynthWorldConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.world not in WORLDS:
            raise ConfigError(f"world must be one of {WORLDS}, got {self.world!r}")
        if self.pad_input not in PAD_INPUTS:
            raise ConfigError(f"pad_input must be one of {PAD_INPUTS}, got {self.pad_input!r}")
        if self.pad_source not in PAD_SOURCES:
            raise ConfigError(f"pad_source must be one of {PAD_SOURCES}, got {self.pad_source!r}")
        bad = [s for s in self.scorers if s not in SCORERS]
        if bad or not self.scorers:
            raise ConfigError(f"scorers must be a non-empty subset of {SCORERS}, got {self.scorers!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.backend_layers < 1 or self.backend_nodes < 1:
            raise ConfigError("backend needs >= 1 layer of >= 1 node")
        if len(self.backend_type_mix) != 3:
            raise ConfigError("backend_type_mix needs 3 weights (target, zero_effort, replay)")
        if self.encoder_mfm and any(c % 2 for c in self.encoder_channels):
            raise ConfigError("encoder_channels must be even when encoder_mfm is on")
        for name in ("frontend_steps", "e2e_steps", "pad_steps", "backend_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("frontend_batch_size", "backend_batch_size", "embedding_dim",
                     "histogram_bins", "backend_trials_per_type", "e2e_speakers_per_batch",
                     "e2e_utts_per_speaker"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    # ---- (de)serialization ----

    @classmethod
    def keys(cls):
        own = [f.name for f in fields(cls) if f.name != "synth"]
        return own + ["synth_" + f.name for f in fields(SynthWorldConfig) if f.name != "seed"]

    @classmethod
    def from_pairs(cls, pairs, base=None):
        """Apply ``(key, text)`` pairs on top of ``base`` (defaults when None)."""
        values = {} if base is None else base.as_pairs()
        for key, text in pairs:
            if key not in cls.keys():
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = text
        own, synth = {}, {}
        types = {f.name: f for f in fields(cls)}
        synth_types = {f.name: f for f in fields(SynthWorldConfig)}
        for key, text in values.items():
            if key.startswith("synth_") and key not in types:
                name = key[len("synth_"):]
                synth[name] = _parse_value(key, text, synth_types[name].default)
            else:
                own[key] = _parse_value(key, text, types[key].default
                                        if not callable(types[key].default_factory)
                                        else types[key].default_factory())
        seed = own.get("seed", cls.seed)
        try:
            world = SynthWorldConfig(**{**synth, "seed": seed})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(**own, synth=world)

    @classmethod
    def load(cls, path, overrides=()):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            pairs.append((key, value))
        return cls.from_pairs(list(pairs) + list(overrides))

    def as_pairs(self):
        out = {}
        for f in fields(self):
            if f.name != "synth":
                out[f.name] = _format_value(getattr(self, f.name))
        for key, value in self.synth.to_dict().items():
            if key != "seed":
                out["synth_" + key] = _format_value(value)
        return out

    def dumps(self):
        return "".join(f"{k} = {v}\n" for k, v in self.as_pairs().items())

    def save(self, path):
        Path(path).write_text(self.dumps())


def _parse_value(key, text, default):
    text = str(text)
    try:
        if isinstance(default, bool):
            return _bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if key == "scorers":
                return _str_tuple(text)
            if key == "backend_type_mix":
                return _float_tuple(text)
            return _int_tuple(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
