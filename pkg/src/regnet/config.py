"""YAML run configuration: one section per component, flags override file values."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .spectro import SpectroError, SpectroParams
from .synthdata import SynthConfig
from .training import TrainConfig

SECTIONS = {"data": SynthConfig, "model": ModelConfig, "train": TrainConfig, "spectro": SpectroParams}
SPECTRO_DEFAULTS = {k: v for k, v in dataclasses.asdict(SpectroParams()).items() if k != "clip_samples"}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    data: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    # signal constants; clip_samples is derived from data.T_audio unless given
    spectro: dict = dataclasses.field(default_factory=lambda: dict(SPECTRO_DEFAULTS))

    def __post_init__(self):
        if (self.data.T, self.data.F, self.data.T_audio) != (self.model.T, self.model.F, self.model.T_audio):
            raise ConfigError(
                f"data (T={self.data.T}, F={self.data.F}, T_audio={self.data.T_audio}) and model "
                f"(T={self.model.T}, F={self.model.F}, T_audio={self.model.T_audio}) disagree")
        n_mels = self.spectro["n_mels"]
        if n_mels != self.model.n_mels:
            raise ConfigError(f"spectro.n_mels ({n_mels}) != model.n_mels ({self.model.n_mels})")
        self.spectro_params()

    def spectro_params(self) -> SpectroParams:
        try:
            return self.data.spectro(**self.spectro)
        except (TypeError, SpectroError) as e:
            raise ConfigError(f"spectro: {e}") from e

    def to_dict(self) -> dict:
        return {"data": dataclasses.asdict(self.data), "model": dataclasses.asdict(self.model),
                "train": dataclasses.asdict(self.train), "spectro": dict(self.spectro)}


def _build(cls, section: str, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown field(s) in section '{section}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except ConfigError as e:
        raise ConfigError(f"{section}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}; valid: {', '.join(SECTIONS)}")
    for k, v in d.items():
        if v is not None and not isinstance(v, dict):
            raise ConfigError(f"config section '{k}' must be a mapping")
    given = dict(d.get("spectro") or {})
    bad = sorted(set(given) - set(SPECTRO_DEFAULTS))
    if bad:
        raise ConfigError(f"unknown or derived field(s) in section 'spectro': {', '.join(bad)}")
    spectro = {**SPECTRO_DEFAULTS, **given}
    return RunConfig(data=_build(SynthConfig, "data", d.get("data") or {}),
                     model=_build(ModelConfig, "model", d.get("model") or {}),
                     train=_build(TrainConfig, "train", d.get("train") or {}),
                     spectro=spectro)


def load(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError:
        raise
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return from_dict(raw)


def override(cfg: RunConfig, section: str, **values: Any) -> RunConfig:
    """Return ``cfg`` with ``values`` (skipping ``None``) replaced in one section."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    d = cfg.to_dict()
    d[section].update(values)
    return from_dict(d)


EXAMPLE = """\
# Annotated desk-scale configuration.  Every field is optional; omitted
# fields take the defaults shown here.  Command-line flags win over the file.

data:                       # synthetic scene generator
  T: 32                     # visual frames per clip
  F: 64                     # visual feature width (first half appearance, second half motion)
  T_audio: 128              # spectrogram frames; must be a multiple of T (4x for the model)
  relevant_class: dog       # dog | baby: timbre of the visually driven events
  background: gauss         # none | gauss | fireworks | drum: irrelevant sound mixed in
  event_rate: 3.0           # expected visible events per clip
  refractory: 4             # minimum gap between events, visual frames
  n_kinds: 2                # event kinds per class (distinct visual pattern and timbre)
  gauss_std: 0.1            # waveform std of the white-noise background
  interference_rate: 3.0    # expected foreign events per clip (fireworks, drum)
  interference_gain: 1.0    # waveform gain of the foreign events
  level_spread: 0.0         # per-scene irrelevant gain ~ U(1 - spread, 1 + spread); 0 keeps it fixed
  mix_domain: waveform      # waveform | mel: where relevant and irrelevant are summed
  n_train: 256              # training scenes (listed first)
  n_test: 128               # held-out scenes (listed last)
  seed: 0                   # dataset seed; scene i uses seed * 1000003 + i

spectro:                    # signal constants (clip length follows data.T_audio)
  sample_rate: 22050
  hop: 256
  window: 1024
  n_mels: 80
  log_floor: 1.0e-5         # log(max(mel + log_offset, log_floor))
  log_offset: 1.0e-5
  griffin_lim_seed: 0

model:
  T: 32
  F: 64
  T_audio: 128
  n_mels: 80
  enc_channels: 64          # visual encoder conv width
  enc_kernel: 3
  enc_lstm_hidden: 32       # per direction; visual feature width is twice this
  enc_lstm_layers: 2
  reg_dim: 16               # regularizer LSTM cell size D; output width 2D
  reg_downsample: 128       # regularizer temporal downsampling S (128 = one vector per clip)
  reg_layers: 2
  use_regularizer: true     # false trains the no-regularizer ablation (zero vector throughout)
  gen_channels: 64
  postnet_channels: 64
  postnet_kernel: 5
  disc_channels: 32
  spec_center: -6.0         # fixed affine map from log-mel units to the networks' scale
  spec_scale: 4.0

train:
  epochs: 200
  learning_rate: 0.0002
  adam_betas: [0.9, 0.999]
  batch_size: 16
  seed: 0                   # generator init and batch order
  disc_seed: null           # discriminator init; null means seed + 1
  gan_enabled: true         # false drops both adversarial terms
  alpha: 1.0                # weight of the initial-spectrogram reconstruction loss
  beta: 10000.0             # weight of the generator's adversarial loss
  log_eps: 1.0e-7           # clamp inside the adversarial logs
  d_steps: 1                # discriminator steps per generator step
  checkpoint_every: 50      # epochs between checkpoints
  dtype: float32            # float32 | float64
"""
