"""Synthetic speaker/replay worlds for desk-scale experiments.

Two generators share one config:

* the embedding world emits speaker-embedding-like vectors: a speaker
  centroid plus noise, with replayed utterances adding a per-device shift
  that mostly points along one common "replay" direction;
* the feature world emits mean-normalized ``frames x 64`` log-Mel-like
  matrices: each speaker cycles through a few smooth spectral templates,
  and replay devices smear frames in time and flatten the upper bands.

Train and eval splits use disjoint speakers and disjoint replay devices.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError
from .evaluation import BONAFIDE, REPLAY, SPOOF, TARGET, ZERO_EFFORT, Trial
from .features import N_BANDS, mean_normalize


@dataclass
class SynthWorldConfig:
    n_train_speakers: int = 100
    n_eval_speakers: int = 10
    n_bonafide: int = 12
    n_replay: int = 12
    dim: int = 64
    speaker_spread: float = 1.0
    noise: float = 1.3
    channel_shift: float = 5.0
    replay_identity: float = 1.0
    n_devices: int = 4
    device_spread: float = 0.5
    n_frames: int = 16
    n_states: int = 4
    segment: int = 4
    ze_per_replay: float = 1.71
    conflict: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_train_speakers < 2 or self.n_eval_speakers < 2:
            raise ConfigError("each split needs at least 2 speakers")
        if self.n_bonafide < 2 or self.n_replay < 0 or self.n_devices < 1:
            raise ConfigError("need >= 2 bona fide utterances per speaker and >= 1 device")
        for name in ("speaker_spread", "noise", "device_spread"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.channel_shift < 0 or self.replay_identity <= 0:
            raise ConfigError("channel_shift must be >= 0 and replay_identity > 0")
        if self.conflict < 0:
            raise ConfigError("conflict must be >= 0")
        if self.dim < 2 or self.n_frames < 1:
            raise ConfigError("dim must be >= 2 and n_frames >= 1")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown synth-world keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class Split:
    ids: list
    speakers: np.ndarray
    bonafide: np.ndarray
    devices: np.ndarray
    X: np.ndarray

    def __len__(self):
        return len(self.ids)

    def speaker_codes(self):
        """Speaker ids mapped to 0..n_speakers-1 in sorted order."""
        uniq, codes = np.unique(self.speakers, return_inverse=True)
        return codes, list(uniq)


@dataclass
class SynthWorld:
    config: SynthWorldConfig
    train: Split
    eval: Split
    centroids: dict
    kind: str

    def spoof_label(self, split, i):
        return BONAFIDE if split.bonafide[i] else SPOOF

    def eval_trials(self):
        """Eval trial list with zero-effort trials capped at ``ze_per_replay`` per replay trial."""
        n_rep = int((~self.eval.bonafide).sum()) * self.config.n_bonafide
        cap = None
        if n_rep and self.config.ze_per_replay > 0:
            cap = int(round(self.config.ze_per_replay * n_rep))
        return make_trials(self.eval, max_zero_effort=cap, seed=self.config.seed)


def _labels(cfg, prefix, n_spk, first_spk):
    ids, speakers, bona = [], [], []
    for s in range(n_spk):
        spk = f"spk{first_spk + s:03d}"
        for u in range(cfg.n_bonafide + cfg.n_replay):
            b = u < cfg.n_bonafide
            ids.append(f"{prefix}_{spk}_{'b' if b else 'r'}{u:03d}")
            speakers.append(spk)
            bona.append(b)
    return ids, np.array(speakers), np.array(bona)


def synth_embedding_world(config):
    """Labelled embedding sets for train/eval with disjoint speakers."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    common = rng.standard_normal(cfg.dim)
    common /= np.linalg.norm(common)
    centroids = {}
    splits = []
    for prefix, n_spk, first in (("T", cfg.n_train_speakers, 0),
                                 ("E", cfg.n_eval_speakers, cfg.n_train_speakers)):
        ids, speakers, bona = _labels(cfg, prefix, n_spk, first)
        # speaker identity lives mostly off the replay direction
        cents = rng.standard_normal((n_spk, cfg.dim)) * cfg.speaker_spread
        cents -= 0.9 * np.outer(cents @ common, common)
        dev = common + cfg.device_spread * rng.standard_normal((cfg.n_devices, cfg.dim)) / np.sqrt(cfg.dim)
        dev = cfg.channel_shift * dev / np.linalg.norm(dev, axis=1, keepdims=True)
        spk_index = np.repeat(np.arange(n_spk), cfg.n_bonafide + cfg.n_replay)
        devices = np.where(bona, -1, rng.integers(0, cfg.n_devices, size=len(ids)))
        X = cents[spk_index] + cfg.noise * rng.standard_normal((len(ids), cfg.dim))
        rep = ~bona
        X[rep] += (cfg.replay_identity - 1.0) * cents[spk_index[rep]] + dev[devices[rep]]
        for s in range(n_spk):
            centroids[speakers[s * (cfg.n_bonafide + cfg.n_replay)]] = cents[s]
        splits.append(Split(ids, speakers, bona, devices, X))
    return SynthWorld(cfg, splits[0], splits[1], centroids, "embedding")


def _smooth_curves(rng, n, amp, n_bumps=3):
    b = np.arange(N_BANDS)[None, None, :]
    mu = rng.uniform(0, N_BANDS, size=(n, n_bumps, 1))
    width = rng.uniform(3.0, 8.0, size=(n, n_bumps, 1))
    a = rng.standard_normal((n, n_bumps, 1)) * amp
    return (a * np.exp(-0.5 * ((b - mu) / width) ** 2)).sum(axis=1)


def synth_feature_world(config, dtype=np.float64):
    """Labelled ``frames x 64`` feature sets for train/eval with disjoint speakers.

    Replay coloration strength is ``config.channel_shift``; 0 makes replayed
    and bona fide utterances identically distributed. With ``conflict > 0``
    every utterance carries a speaker-like spectral imprint that follows its
    state cycle: a fixed pattern per replay device, a fresh random one per
    bona fide session. Channel cues then look like speaker cues.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    band = np.arange(N_BANDS)
    centroids = {}
    splits = []
    for prefix, n_spk, first in (("T", cfg.n_train_speakers, 0),
                                 ("E", cfg.n_eval_speakers, cfg.n_train_speakers)):
        ids, speakers, bona = _labels(cfg, prefix, n_spk, first)
        templates = _smooth_curves(rng, n_spk * cfg.n_states, 2.0 * cfg.speaker_spread)
        templates = templates.reshape(n_spk, cfg.n_states, N_BANDS)
        # per device: temporal smearing coefficient and an upper-band damping ramp
        smear = np.clip(cfg.channel_shift * rng.uniform(0.02, 0.032, size=cfg.n_devices), 0, 0.9)
        knee = rng.uniform(24, 40, size=cfg.n_devices)
        ramp = 1.0 / (1.0 + np.exp(-(band[None, :] - knee[:, None]) / 3.0))
        damp = 1.0 - np.clip(0.03 * cfg.channel_shift, 0, 0.95) * ramp
        if cfg.conflict:
            imprint = cfg.conflict * _smooth_curves(rng, cfg.n_devices, 2.0 * cfg.speaker_spread)
        per_spk = cfg.n_bonafide + cfg.n_replay
        n_seg = -(-cfg.n_frames // cfg.segment)
        X = np.empty((len(ids), cfg.n_frames, N_BANDS))
        devices = np.full(len(ids), -1)
        for i in range(len(ids)):
            s = i // per_spk
            start = rng.integers(0, cfg.n_states)
            states = np.repeat((start + np.arange(n_seg)) % cfg.n_states, cfg.segment)[:cfg.n_frames]
            x = templates[s, states] + cfg.noise * rng.standard_normal((cfg.n_frames, N_BANDS))
            if not bona[i]:
                d = rng.integers(0, cfg.n_devices)
                devices[i] = d
                x = cfg.replay_identity * x
                for t in range(1, cfg.n_frames):
                    x[t] = (1 - smear[d]) * x[t] + smear[d] * x[t - 1]
                x = x * damp[d]
            if cfg.conflict:
                # bona fide sessions draw a fresh imprint from the device family
                pattern = imprint[devices[i]] if not bona[i] else \
                    cfg.conflict * _smooth_curves(rng, 1, 2.0 * cfg.speaker_spread)[0]
                x = x + np.outer(2.0 * (states % 2) - 1.0, pattern)
            X[i] = mean_normalize(x)
        for s in range(n_spk):
            centroids[speakers[s * per_spk]] = templates[s].mean(axis=0)
        splits.append(Split(ids, speakers, bona, devices, X.astype(dtype)))
    return SynthWorld(cfg, splits[0], splits[1], centroids, "feature")


def make_trials(split, max_zero_effort=None, seed=0):
    """Every bona fide enrollment against every other valid test utterance.

    ``max_zero_effort`` subsamples the zero-effort trials deterministically.
    """
    targets, ze, rep = [], [], []
    for e in range(len(split)):
        if not split.bonafide[e]:
            continue
        for t in range(len(split)):
            if t == e:
                continue
            same = split.speakers[e] == split.speakers[t]
            if same:
                (targets if split.bonafide[t] else rep).append((e, t))
            elif split.bonafide[t]:
                ze.append((e, t))
    if max_zero_effort is not None and len(ze) > max_zero_effort:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(ze), size=max_zero_effort, replace=False))
        ze = [ze[k] for k in keep]
    out = []
    for pairs, kind in ((targets, TARGET), (ze, ZERO_EFFORT), (rep, REPLAY)):
        out += [Trial(split.ids[e], split.ids[t], kind) for e, t in pairs]
    return out
