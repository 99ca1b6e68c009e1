"""Synthetic paired visual/sound scenes with a known relevant/irrelevant split.

A scene is driven by an :class:`EventTrack`.  The visual features are
deterministic bump responses of the track, the relevant sound is rendered
from the same track, and the irrelevant sound comes from an independent
random stream (white noise or a foreign event track).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .spectro import SpectroParams, compress, decompress, wav_to_mel

DATASET_FORMAT = "regnet-dataset"
DATASET_VERSION = 1

RELEVANT_CLASSES = ("dog", "baby")
BACKGROUNDS = ("none", "gauss", "fireworks", "drum")


class DatasetError(OSError):
    pass


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    T: int = 32
    F: int = 64
    T_audio: int = 128
    relevant_class: str = "dog"
    background: str = "gauss"
    event_rate: float = 3.0        # expected relevant events per clip
    refractory: int = 4            # minimum onset gap, visual frames
    n_kinds: int = 2
    gauss_std: float = 0.1
    interference_rate: float = 3.0
    interference_gain: float = 1.0
    level_spread: float = 0.0      # per-scene irrelevant gain drawn from U(1 - spread, 1 + spread)
    mix_domain: str = "waveform"   # or "mel"
    n_train: int = 256
    n_test: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.F < 1:
            raise ConfigError("T and F must be >= 1")
        if self.T_audio % self.T:
            raise ConfigError(
                f"T_audio ({self.T_audio}) must be an integer multiple of T ({self.T})")
        if self.relevant_class not in RELEVANT_CLASSES:
            raise ConfigError(f"relevant_class must be one of {RELEVANT_CLASSES}")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"background must be one of {BACKGROUNDS}")
        if self.mix_domain not in ("waveform", "mel"):
            raise ConfigError("mix_domain must be 'waveform' or 'mel'")
        if not 0.0 <= self.level_spread <= 1.0:
            raise ConfigError(f"level_spread must be in [0, 1], got {self.level_spread}")
        if self.event_rate < 0 or self.interference_rate < 0:
            raise ConfigError("event rates must be >= 0")

    @property
    def upsample(self) -> int:
        return self.T_audio // self.T

    def spectro(self, **kw) -> SpectroParams:
        return SpectroParams.desk(n_frames=self.T_audio, **kw)

    @property
    def n_scenes(self) -> int:
        return self.n_train + self.n_test

    def mix_spec(self) -> "MixSpec | None":
        if self.background == "none":
            return None
        if self.background == "gauss":
            return MixSpec("gaussian", gauss_std=self.gauss_std)
        return MixSpec("interference", interference_source=self.background,
                       gain=self.interference_gain)


@dataclasses.dataclass(frozen=True)
class MixSpec:
    kind: str                               # "gaussian" | "interference"
    gauss_std: float = 0.1
    interference_source: str | None = None  # "fireworks" | "drum"
    gain: float = 1.0
    rate: float = 3.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "interference"):
            raise ConfigError(f"unknown mix kind {self.kind!r}")
        if self.kind == "gaussian" and self.gauss_std < 0:
            raise ConfigError("gauss_std must be >= 0")


@dataclasses.dataclass
class EventTrack:
    onsets: np.ndarray       # visual frame index per event, strictly increasing
    kinds: np.ndarray        # class-local event kind id
    intensity: np.ndarray    # in (0, 1]
    T: int

    def __post_init__(self):
        self.onsets = np.asarray(self.onsets, dtype=np.int64)
        self.kinds = np.asarray(self.kinds, dtype=np.int64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if np.any(np.diff(self.onsets) <= 0):
            raise ValueError("onsets must be strictly increasing")
        if self.onsets.size and (self.onsets[0] < 0 or self.onsets[-1] >= self.T):
            raise ValueError("onsets must lie in [0, T)")


@dataclasses.dataclass
class SyntheticScene:
    visual: np.ndarray             # T x F
    relevant: np.ndarray | None    # n_mels x T_audio
    irrelevant: np.ndarray | None
    mixed: np.ndarray | None
    track: EventTrack
    seed: int


def _stable_seed(*parts) -> int:
    return zlib.crc32("/".join(map(str, parts)).encode())


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, _stable_seed(stream)])


# --------------------------------------------------------------------------- #
# event tracks and visual features

def sample_track(rng: np.random.Generator, cfg: SynthConfig) -> EventTrack:
    n = rng.poisson(cfg.event_rate)
    onsets: list[int] = []
    for _ in range(8 * n):
        if len(onsets) == n:
            break
        t = int(rng.integers(0, cfg.T))
        if all(abs(t - o) >= cfg.refractory for o in onsets):
            onsets.append(t)
    onsets.sort()
    kinds = rng.integers(0, cfg.n_kinds, size=len(onsets))
    intensity = rng.uniform(0.5, 1.0, size=len(onsets))
    return EventTrack(np.array(onsets, dtype=np.int64), kinds, intensity, cfg.T)


def visual_patterns(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-kind channel patterns (appearance half, motion half) and the baseline."""
    rng = np.random.default_rng(_stable_seed("visual", cfg.relevant_class, cfg.F))
    pat = rng.uniform(0.0, 1.0, size=(cfg.n_kinds, cfg.F))
    pat *= rng.random((cfg.n_kinds, cfg.F)) < 0.5
    baseline = rng.uniform(0.0, 0.1, size=cfg.F)
    return pat, baseline


def render_visual(track: EventTrack, cfg: SynthConfig) -> np.ndarray:
    pat, baseline = visual_patterns(cfg)
    half = cfg.F // 2
    t = np.arange(cfg.T, dtype=np.float64)
    v = np.tile(baseline, (cfg.T, 1))
    for on, k, a in zip(track.onsets, track.kinds, track.intensity):
        appear = np.exp(-0.5 * ((t - on - 1.0) / 2.0) ** 2)   # slow, lingers after onset
        motion = np.exp(-0.5 * ((t - on) / 0.7) ** 2)         # sharp, at onset
        v[:, :half] += a * appear[:, None] * pat[k, :half]
        v[:, half:] += a * motion[:, None] * pat[k, half:]
    return v


# --------------------------------------------------------------------------- #
# audio renderers

_TIMBRES = {
    # kind -> (f0 Hz, n harmonics, duration s, decay s, vibrato Hz, vibrato depth Hz)
    "dog": [(480.0, 6, 0.20, 0.07, 0.0, 0.0), (720.0, 5, 0.14, 0.05, 0.0, 0.0)],
    "baby": [(400.0, 8, 0.45, 0.30, 6.0, 25.0), (560.0, 7, 0.35, 0.20, 5.0, 20.0)],
}


def _harmonic_event(kind: int, cls: str, amp: float, sr: int) -> np.ndarray:
    timbres = _TIMBRES[cls]
    f0, nh, dur, decay, vib_f, vib_d = timbres[kind % len(timbres)]
    t = np.arange(int(dur * sr)) / sr
    env = np.minimum(t / 0.005, 1.0) * np.exp(-t / decay)
    inst_f = f0 + vib_d * np.sin(2 * np.pi * vib_f * t)
    phase = 2 * np.pi * np.cumsum(inst_f) / sr
    y = sum(np.sin(h * phase) / h for h in range(1, nh + 1))
    return amp * env * y / 1.5


def render_relevant_wave(track: EventTrack, cfg: SynthConfig, p: SpectroParams) -> np.ndarray:
    """The oracle renderer: relevant waveform as a pure function of the track."""
    out = np.zeros(p.clip_samples)
    per_frame = cfg.upsample * p.hop
    for on, k, a in zip(track.onsets, track.kinds, track.intensity):
        ev = _harmonic_event(int(k), cfg.relevant_class, 0.4 * a, p.sample_rate)
        s = int(on) * per_frame
        n = min(ev.size, out.size - s)
        out[s:s + n] += ev[:n]
    return out


def render_relevant(track: EventTrack, cfg: SynthConfig, p: SpectroParams | None = None) -> np.ndarray:
    p = p or cfg.spectro()
    return wav_to_mel(render_relevant_wave(track, cfg, p), p)


def _burst(rng, n: int, sr: int) -> np.ndarray:
    # fireworks: broadband crackle with an exponential tail
    t = np.arange(n) / sr
    env = np.exp(-t / rng.uniform(0.08, 0.2))
    crackle = rng.normal(size=n) * (rng.random(n) < 0.3)
    return env * (0.6 * rng.normal(size=n) + crackle)


def _thump(rng, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    f = rng.uniform(90.0, 170.0)
    body = np.sin(2 * np.pi * f * t * (1.0 + 0.5 * np.exp(-t / 0.02))) * np.exp(-t / 0.12)
    click = rng.normal(size=n) * np.exp(-t / 0.004)
    return body + 0.3 * click


def interference_wave(source: str, rng: np.random.Generator, n_samples: int, sr: int,
                      rate: float = 3.0) -> np.ndarray:
    """A foreign event track rendered as a waveform of ``n_samples``."""
    if source not in ("fireworks", "drum"):
        raise ConfigError(f"unknown interference source {source!r}")
    out = np.zeros(n_samples)
    ev_len = int(0.4 * sr)
    for _ in range(max(rng.poisson(rate), 1)):
        s = int(rng.integers(0, n_samples))
        amp = rng.uniform(0.2, 0.5)
        ev = _burst(rng, ev_len, sr) if source == "fireworks" else _thump(rng, ev_len, sr)
        n = min(ev_len, n_samples - s)
        out[s:s + n] += amp * ev[:n]
    return out


def mix_noise(samples, m: MixSpec, seed: int, sample_rate: int = 22050,
              foreign: np.ndarray | None = None) -> np.ndarray:
    """Add irrelevant sound to a waveform.

    Gaussian kind: ``clip + N(0, gauss_std**2)`` per sample, clamped to [-1, 1].
    Interference kind: ``clip + gain * foreign``; ``foreign`` is drawn from the
    named source when not given.  The sum is clamped to [-1, 1].
    """
    x = np.asarray(samples, dtype=np.float64)
    rng = _rng(seed, "mix")
    if m.kind == "gaussian":
        if m.gauss_std == 0:
            return x.copy()
        return np.clip(x + rng.normal(0.0, m.gauss_std, size=x.shape), -1.0, 1.0)
    if foreign is None:
        if m.interference_source is None:
            raise ConfigError("interference mix needs interference_source")
        foreign = interference_wave(m.interference_source, rng, x.size, sample_rate, m.rate)
    return np.clip(x + m.gain * np.asarray(foreign, dtype=np.float64), -1.0, 1.0)


def irrelevant_wave(cfg: SynthConfig, seed: int, p: SpectroParams) -> np.ndarray:
    rng = _rng(seed, "irrelevant")
    if cfg.background == "none":
        return np.zeros(p.clip_samples)
    if cfg.background == "gauss":
        w = rng.normal(0.0, cfg.gauss_std, size=p.clip_samples)
    else:
        w = cfg.interference_gain * interference_wave(
            cfg.background, rng, p.clip_samples, p.sample_rate, cfg.interference_rate)
    if cfg.level_spread:
        w = w * _rng(seed, "level").uniform(1.0 - cfg.level_spread, 1.0 + cfg.level_spread)
    return w


def combine_mel(relevant: np.ndarray, irrelevant: np.ndarray, p: SpectroParams) -> np.ndarray:
    """Add two log-mel arrays in the linear mel domain and recompress."""
    return compress(decompress(relevant, p) + decompress(irrelevant, p), p)


def generate_scene(seed: int, cfg: SynthConfig, p: SpectroParams | None = None) -> SyntheticScene:
    p = p or cfg.spectro()
    if p.n_frames != cfg.T_audio:
        raise ConfigError(f"spectro frames ({p.n_frames}) != T_audio ({cfg.T_audio})")
    track = sample_track(_rng(seed, "track"), cfg)
    visual = render_visual(track, cfg)
    rel_wave = render_relevant_wave(track, cfg, p)
    irr_wave = irrelevant_wave(cfg, seed, p)
    relevant = wav_to_mel(rel_wave, p)
    irrelevant = wav_to_mel(irr_wave, p)
    if cfg.mix_domain == "waveform":
        mixed = wav_to_mel(np.clip(rel_wave + irr_wave, -1.0, 1.0), p)
    else:
        mixed = combine_mel(relevant, irrelevant, p)
    return SyntheticScene(visual, relevant, irrelevant, mixed, track, seed)


def scene_seeds(cfg: SynthConfig) -> list[int]:
    return [cfg.seed * 1_000_003 + i for i in range(cfg.n_scenes)]


def generate_dataset(cfg: SynthConfig) -> list[SyntheticScene]:
    """Train scenes first, then the ``n_test`` held-out scenes."""
    p = cfg.spectro()
    return [generate_scene(s, cfg, p) for s in scene_seeds(cfg)]


def split(scenes: list[SyntheticScene], cfg: SynthConfig):
    return scenes[:cfg.n_train], scenes[cfg.n_train:]


def stack(scenes: list[SyntheticScene], field: str) -> np.ndarray:
    return np.stack([getattr(s, field) for s in scenes])


def load_visual_features(path, T: int | None = None, F: int | None = None) -> np.ndarray:
    """Load an externally extracted ``T x F`` per-frame feature array (.npy)."""
    v = np.load(Path(path), allow_pickle=False)
    if v.ndim != 2:
        raise ConfigError(f"{path}: expected a T x F array, got shape {v.shape}")
    if T is not None and v.shape[0] != T:
        raise ConfigError(f"{path}: T={v.shape[0]}, config expects T={T}")
    if F is not None and v.shape[1] != F:
        raise ConfigError(f"{path}: F={v.shape[1]}, config expects F={F}")
    return v.astype(np.float64)


# --------------------------------------------------------------------------- #
# dataset directory: manifest.json + one .npz shard per scene

_AUDIO_FIELDS = ("relevant", "irrelevant", "mixed")


def write_dataset(scenes: list[SyntheticScene], path, cfg: SynthConfig | None = None,
                  extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shards = []
    for i, s in enumerate(scenes):
        name = f"scene_{i:05d}.npz"
        arrays = {"visual": s.visual, "onsets": s.track.onsets, "kinds": s.track.kinds,
                  "intensity": s.track.intensity, "seed": np.int64(s.seed), "T": np.int64(s.track.T)}
        arrays.update({f: getattr(s, f) for f in _AUDIO_FIELDS if getattr(s, f) is not None})
        np.savez(path / name, **arrays)
        shards.append({"file": name, "seed": int(s.seed),
                       "sha256": hashlib.sha256((path / name).read_bytes()).hexdigest()})
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "config": dataclasses.asdict(cfg) if cfg is not None else None,
        "n_train": cfg.n_train if cfg is not None else len(scenes),
        "scenes": shards,
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> dict:
    mf = Path(path) / "manifest.json"
    try:
        manifest = json.loads(mf.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read dataset manifest {mf}: {e}") from e
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise DatasetError(
            f"{mf}: dataset format {manifest.get('format')!r} version {manifest.get('version')!r} "
            f"is not {DATASET_FORMAT!r} version {DATASET_VERSION}")
    return manifest


def read_dataset(path, verify: bool = True) -> tuple[list[SyntheticScene], SynthConfig | None]:
    path = Path(path)
    manifest = read_manifest(path)
    cfg = SynthConfig(**manifest["config"]) if manifest.get("config") else None
    scenes = []
    for entry in manifest["scenes"]:
        f = path / entry["file"]
        try:
            raw = f.read_bytes()
            if verify and "sha256" in entry and hashlib.sha256(raw).hexdigest() != entry["sha256"]:
                raise DatasetError(f"{f}: checksum mismatch (corrupt shard)")
            with np.load(f, allow_pickle=False) as z:
                a = {k: z[k] for k in z.files}
        except DatasetError:
            raise
        except Exception as e:  # zip/npy decoding errors come in several types
            raise DatasetError(f"{f}: corrupt shard ({e})") from e
        track = EventTrack(a["onsets"], a["kinds"], a["intensity"], int(a["T"]))
        scenes.append(SyntheticScene(a["visual"], a.get("relevant"), a.get("irrelevant"),
                                     a.get("mixed"), track, int(a["seed"])))
    return scenes, cfg


def strip_audio(src, dst) -> Path:
    """Copy a dataset keeping only visual features and tracks."""
    scenes, cfg = read_dataset(src)
    stripped = [dataclasses.replace(s, relevant=None, irrelevant=None, mixed=None) for s in scenes]
    return write_dataset(stripped, dst, cfg)


def dataset_hash(path) -> str:
    """Content hash over the manifest and every shard."""
    path = Path(path)
    h = hashlib.sha256((path / "manifest.json").read_bytes())
    for f in sorted(path.glob("scene_*.npz")):
        h.update(f.read_bytes())
    return h.hexdigest()
