"""Visual encoder, audio forwarding regularizer, generator and patch discriminator."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ConfigError

CHECKPOINT_FORMAT = "regnet-checkpoint"
CHECKPOINT_VERSION = 1


class IncompatibleCheckpoint(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    T: int = 32
    F: int = 64
    T_audio: int = 128
    n_mels: int = 80
    enc_channels: int = 64
    enc_kernel: int = 3
    enc_lstm_hidden: int = 32
    enc_lstm_layers: int = 2
    reg_dim: int = 16
    reg_downsample: int = 128
    reg_layers: int = 2
    use_regularizer: bool = True
    gen_channels: int = 64
    postnet_channels: int = 64
    postnet_kernel: int = 5
    disc_channels: int = 32
    # fixed affine map between log-mel units and the networks' internal scale
    spec_center: float = -6.0
    spec_scale: float = 4.0

    def __post_init__(self):
        if self.T_audio != 4 * self.T:
            raise ConfigError(
                f"T_audio ({self.T_audio}) must equal 4 * T ({self.T}): the generator upsamples by 4")
        if self.reg_dim < 1:
            raise ConfigError("reg_dim must be >= 1")
        if self.reg_downsample < 1 or self.reg_downsample > self.T_audio:
            raise ConfigError(
                f"reg_downsample ({self.reg_downsample}) must be in [1, T_audio={self.T_audio}]")
        if self.T_audio % self.reg_downsample:
            raise ConfigError(
                f"reg_downsample ({self.reg_downsample}) must divide T_audio ({self.T_audio})")

    @property
    def visual_dim(self) -> int:
        return 2 * self.enc_lstm_hidden

    @property
    def reg_width(self) -> int:
        return 2 * self.reg_dim

    def variant_name(self) -> str:
        return f"S{self.reg_downsample}D{self.reg_dim}"

    def with_variant(self, name: str) -> "ModelConfig":
        """Apply a preset such as ``S128D16`` (downsampling rate, then dimension)."""
        s, d = parse_variant(name)
        return dataclasses.replace(self, reg_downsample=s, reg_dim=d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def parse_variant(name: str) -> tuple[int, int]:
    m = re.fullmatch(r"S(\d+)D(\d+)", name.strip())
    if not m:
        raise ConfigError(f"variant {name!r} is not of the form S<downsample>D<dim>")
    return int(m.group(1)), int(m.group(2))


def _conv_bn_relu(cin, cout, k):
    return nn.Sequential(nn.Conv1d(cin, cout, k, padding=k // 2), nn.BatchNorm1d(cout), nn.ReLU())


class VisualEncoder(nn.Module):
    """Three conv-BN-ReLU layers then a bidirectional LSTM; (B, T, F) -> (B, T, 2h)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, k = cfg.enc_channels, cfg.enc_kernel
        self.convs = nn.Sequential(_conv_bn_relu(cfg.F, c, k), _conv_bn_relu(c, c, k),
                                   _conv_bn_relu(c, c, k))
        self.lstm = nn.LSTM(c, cfg.enc_lstm_hidden, num_layers=cfg.enc_lstm_layers,
                            batch_first=True, bidirectional=True)

    def forward(self, v):
        x = self.convs(v.transpose(1, 2)).transpose(1, 2)
        return self.lstm(x)[0]


class AudioRegularizer(nn.Module):
    """Bidirectional LSTM bottleneck over the spectrogram.

    (B, n_mels, T_audio) -> (B, 2*reg_dim, T).  The LSTM output is sampled
    every ``reg_downsample`` frames and replicated back to T visual steps.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(cfg.n_mels, cfg.reg_dim, num_layers=cfg.reg_layers,
                            batch_first=True, bidirectional=True)
        ratio = cfg.T_audio // cfg.T
        self.register_buffer(
            "align", torch.arange(cfg.T) * ratio // cfg.reg_downsample, persistent=False)

    def downsampled(self, s):
        cfg = self.cfg
        x = (s - cfg.spec_center) / cfg.spec_scale
        h = self.lstm(x.transpose(1, 2))[0]               # B, T_audio, 2D
        return h[:, ::cfg.reg_downsample].transpose(1, 2)  # B, 2D, T_audio / S

    def forward(self, s):
        return self.downsampled(s).index_select(2, self.align)


class PostNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, k, m = cfg.postnet_channels, cfg.postnet_kernel, cfg.n_mels
        layers = []
        for i in range(4):
            layers += [nn.Conv1d(m if i == 0 else c, c, k, padding=k // 2), nn.BatchNorm1d(c), nn.Tanh()]
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv1d(c, m, k, padding=k // 2)

    def forward(self, x):
        return self.out(self.body(x))


class Generator(nn.Module):
    """Two convs and two stride-2 transposed convs to the initial spectrogram, plus a residual post-net."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.gen_channels
        cin = cfg.visual_dim + cfg.reg_width
        self.initial = nn.Sequential(
            _conv_bn_relu(cin, c, 3), _conv_bn_relu(c, c, 3),
            nn.ConvTranspose1d(c, c, 4, stride=2, padding=1), nn.BatchNorm1d(c), nn.ReLU(),
            nn.ConvTranspose1d(c, cfg.n_mels, 4, stride=2, padding=1),
        )
        self.postnet = PostNet(cfg)

    def forward(self, visual_feats, reg_out):
        """visual_feats (B, T, C), reg_out (B, 2D, T) -> (initial, final), each (B, n_mels, T_audio)."""
        cfg = self.cfg
        if visual_feats.shape[1] != reg_out.shape[2]:
            raise ConfigError(
                f"visual features have T={visual_feats.shape[1]} but regularizer output has T={reg_out.shape[2]}")
        h = torch.cat([visual_feats.transpose(1, 2), reg_out], dim=1)
        initial = cfg.spec_center + cfg.spec_scale * self.initial(h)
        residual = cfg.spec_scale * self.postnet((initial - cfg.spec_center) / cfg.spec_scale)
        return initial, initial + residual


class RegNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = VisualEncoder(cfg)
        self.regularizer = AudioRegularizer(cfg)
        self.generator = Generator(cfg)

    def _check_visual(self, v):
        if v.dim() != 3 or v.shape[1:] != (self.cfg.T, self.cfg.F):
            raise ConfigError(f"visual input must be (B, T={self.cfg.T}, F={self.cfg.F}), got {tuple(v.shape)}")

    def _check_spec(self, s):
        if s.dim() != 3 or s.shape[1:] != (self.cfg.n_mels, self.cfg.T_audio):
            raise ConfigError(
                f"spectrogram must be (B, n_mels={self.cfg.n_mels}, T_audio={self.cfg.T_audio}), got {tuple(s.shape)}")

    def encode_visual(self, v):
        self._check_visual(v)
        return self.encoder(v)

    def regularize_audio(self, s):
        self._check_spec(s)
        if not self.cfg.use_regularizer:
            return self.zero_reg(s.shape[0], s)
        return self.regularizer(s)

    def zero_reg(self, batch: int, like):
        return torch.zeros(batch, self.cfg.reg_width, self.cfg.T, dtype=like.dtype, device=like.device)

    def generate(self, visual_feats, reg_out):
        return self.generator(visual_feats, reg_out)

    def forward(self, v, s=None):
        """Return ``(initial, final)``; ``s=None`` substitutes the zero regularizer output."""
        vf = self.encode_visual(v)
        r = self.zero_reg(v.shape[0], vf) if s is None else self.regularize_audio(s)
        return self.generate(vf, r)

    def forward_with_audio(self, v, s):
        return self.forward(v, s)[1]

    def forward_without_audio(self, v):
        return self.forward(v, None)[1]


class PatchDiscriminator(nn.Module):
    """Conditional discriminator emitting one score per local temporal patch.

    Frame features (B, T, F) are lifted to T_audio by two stride-2 transposed
    convs and a conv; the spectrogram gets two length-preserving transposed
    convs and a conv.  Four convs on the concatenation give (B, T_audio/4)
    sigmoid scores.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.disc_channels
        act = lambda: nn.LeakyReLU(0.2)
        self.visual = nn.Sequential(
            nn.ConvTranspose1d(cfg.F, c, 4, stride=2, padding=1), act(),
            nn.ConvTranspose1d(c, c, 4, stride=2, padding=1), act(),
            nn.Conv1d(c, c, 3, padding=1), act())
        self.spec = nn.Sequential(
            nn.ConvTranspose1d(cfg.n_mels, c, 3, padding=1), act(),
            nn.ConvTranspose1d(c, c, 3, padding=1), act(),
            nn.Conv1d(c, c, 3, padding=1), act())
        self.head = nn.Sequential(
            nn.Conv1d(2 * c, 2 * c, 4, stride=2, padding=1), act(),
            nn.Conv1d(2 * c, 2 * c, 4, stride=2, padding=1), act(),
            nn.Conv1d(2 * c, c, 3, padding=1), act(),
            nn.Conv1d(c, 1, 3, padding=1))

    def forward(self, v, s):
        cfg = self.cfg
        if v.shape[1:] != (cfg.T, cfg.F) or s.shape[1:] != (cfg.n_mels, cfg.T_audio):
            raise ConfigError(f"discriminator got visual {tuple(v.shape)} and spectrogram {tuple(s.shape)}")
        a = self.visual(v.transpose(1, 2))
        b = self.spec((s - cfg.spec_center) / cfg.spec_scale)
        return torch.sigmoid(self.head(torch.cat([a, b], dim=1))).squeeze(1)


def build(cfg: ModelConfig, seed: int = 0, disc_seed: int | None = None):
    """Construct ``(RegNet, PatchDiscriminator)``; the two are seeded independently."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = RegNet(cfg)
        torch.manual_seed(seed + 1 if disc_seed is None else disc_seed)
        disc = PatchDiscriminator(cfg)
    return net, disc


# --------------------------------------------------------------------------- #
# checkpoints

def save_params(path, net: RegNet, disc: PatchDiscriminator | None = None, **extra) -> Path:
    """Write a versioned checkpoint: named arrays, model config and its hash."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.cfg.to_dict(),
        "config_hash": net.cfg.hash(),
        "net": net.state_dict(),
        "disc": disc.state_dict() if disc is not None else None,
    }
    payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(
            f"{path}: checkpoint format {payload.get('format')!r} version {payload.get('version')!r} "
            f"is not {CHECKPOINT_FORMAT!r} version {CHECKPOINT_VERSION}")
    return payload


def load_params(path, cfg: ModelConfig | None = None):
    """Load ``(net, disc, payload)``.

    When ``cfg`` is given, every field must match the stored config; the error
    names the mismatching fields.
    """
    payload = read_checkpoint(path)
    stored = ModelConfig(**payload["config"])
    if cfg is not None and cfg.hash() != payload["config_hash"]:
        bad = [f"{k} (checkpoint {v!r}, expected {getattr(cfg, k)!r})"
               for k, v in stored.to_dict().items() if getattr(cfg, k) != v]
        raise IncompatibleCheckpoint(f"{path}: config mismatch in " + ", ".join(bad))
    if stored.hash() != payload["config_hash"]:
        raise IncompatibleCheckpoint(f"{path}: config-hash mismatch (stored config was altered)")
    net, disc = build(stored)
    try:
        net.load_state_dict(payload["net"])
        if payload.get("disc") is not None:
            disc.load_state_dict(payload["disc"])
    except RuntimeError as e:
        raise IncompatibleCheckpoint(f"{path}: parameters do not fit the stored config: {e}") from e
    return net, disc, payload
