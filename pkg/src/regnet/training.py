"""Losses, alternating adversarial optimisation and the run-directory driver."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ConfigError
from .model import ModelConfig, PatchDiscriminator, RegNet, build, read_checkpoint, save_params

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "rec", "rec_init", "g_adv", "d_loss", "total", "d_real", "d_fake")


class TrainingError(RuntimeError):
    """Numerical failure during training (NaN loss or gradient)."""


@dataclasses.dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 10000.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 2e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    seed: int = 0
    disc_seed: int | None = None
    gan_enabled: bool = True
    alpha: float = 1.0
    beta: float = 10000.0
    log_eps: float = 1e-7
    d_steps: int = 1
    checkpoint_every: int = 50
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


# --------------------------------------------------------------------------- #
# losses

def loss_reconstruction(pred, target):
    """Mean squared error over batch and cells."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


loss_initial = loss_reconstruction


def _check_scores(*scores):
    for s in scores:
        if bool(((s < 0) | (s > 1) | torch.isnan(s)).any()):
            raise ValueError("discriminator scores must lie in [0, 1]")


def loss_generator_adv(d_fake, eps: float = 1e-7):
    """``mean log(1 - D(fake))``; minimised by the generator."""
    _check_scores(d_fake)
    return torch.log(torch.clamp(1.0 - d_fake, min=eps)).mean()


def loss_discriminator(d_real, d_fake, eps: float = 1e-7):
    """``-mean log D(real) - mean log(1 - D(fake))``."""
    _check_scores(d_real, d_fake)
    return (-torch.log(torch.clamp(d_real, min=eps)).mean()
            - torch.log(torch.clamp(1.0 - d_fake, min=eps)).mean())


def loss_total(components: dict, w: LossWeights):
    """``rec + alpha * rec_init + beta * (g_adv + d_loss)``."""
    for name in ("rec", "rec_init", "g_adv", "d_loss"):
        v = components[name]
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise TrainingError(f"loss component {name} is not finite ({v})")
    return (components["rec"] + w.alpha * components["rec_init"]
            + w.beta * (components["g_adv"] + components["d_loss"]))


def generator_objective(disc: PatchDiscriminator, v, s, initial, final, cfg: TrainConfig):
    """Generator-side loss on the audio-forwarding prediction, with its components."""
    rec = loss_reconstruction(final, s)
    rec_init = loss_initial(initial, s)
    g_adv = loss_generator_adv(disc(v, final), cfg.log_eps) if cfg.gan_enabled else torch.zeros_like(rec)
    return rec + cfg.alpha * rec_init + cfg.beta * g_adv, {"rec": rec, "rec_init": rec_init, "g_adv": g_adv}


def full_objective(net, disc, v, s, cfg: TrainConfig):
    """Every term of the total loss in one differentiable expression (for gradient checks)."""
    initial, final = net(v, s)
    _, comps = generator_objective(disc, v, s, initial, final, dataclasses.replace(cfg, gan_enabled=True))
    comps["d_loss"] = loss_discriminator(disc(v, s), disc(v, final), cfg.log_eps)
    return loss_total(comps, cfg.weights), comps


def gradient_check(net, disc, v, s, cfg: TrainConfig, h: float = 1e-6) -> float:
    """Relative error between autograd and central differences of :func:`full_objective`.

    Perturbs every parameter of both networks; intended for tiny float64 configs.
    """
    params = list(net.parameters()) + list(disc.parameters())
    analytic = torch.cat([g.reshape(-1) for g in torch.autograd.grad(full_objective(net, disc, v, s, cfg)[0], params)])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = full_objective(net, disc, v, s, cfg)[0].item()
                flat[i] = old - h
                down = full_objective(net, disc, v, s, cfg)[0].item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=analytic.dtype)
    return float((analytic - numeric).norm() / max(analytic.norm(), numeric.norm()))


# --------------------------------------------------------------------------- #
# training

def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + epoch)


def _assert_finite_grads(module, who: str):
    for name, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in {who} parameter {name}")


class Trainer:
    """Owns one parameter set and its optimiser state.

    ``train_step`` does one discriminator update on (S, detached S_a) followed by
    one generator update on ``rec + alpha * rec_init + beta * g_adv``.
    """

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, net=None, disc=None):
        self.model_cfg = model_cfg
        self.cfg = cfg
        if net is None:
            net, disc = build(model_cfg, cfg.seed, cfg.disc_seed)
        self.net = net.to(cfg.torch_dtype)
        self.disc = disc.to(cfg.torch_dtype)
        self.opt_g = torch.optim.Adam(self.net.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
        self.epoch = 0

    def _tensor(self, a):
        return torch.as_tensor(np.asarray(a), dtype=self.cfg.torch_dtype)

    def train_step(self, v, s) -> dict:
        cfg = self.cfg
        v, s = self._tensor(v), self._tensor(s)
        for name, x in (("visual", v), ("target", s)):
            if not torch.isfinite(x).all():
                raise TrainingError(f"{name} batch contains non-finite values")
        self.net.train()
        self.disc.train()
        metrics = {"d_real": float("nan"), "d_fake": float("nan")}
        initial, final = self.net(v, s)
        d_loss = torch.zeros(())
        if cfg.gan_enabled:
            fake = final.detach()
            for _ in range(cfg.d_steps):
                d_real, d_fake = self.disc(v, s), self.disc(v, fake)
                d_loss = loss_discriminator(d_real, d_fake, cfg.log_eps)
                self.opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                _assert_finite_grads(self.disc, "discriminator")
                self.opt_d.step()
            metrics.update(d_real=float(d_real.detach().mean()), d_fake=float(d_fake.detach().mean()))

        self.disc.requires_grad_(False)
        try:
            g_loss, comps = generator_objective(self.disc, v, s, initial, final, cfg)
            if not torch.isfinite(g_loss):
                raise TrainingError("generator loss is not finite: " +
                                    ", ".join(f"{k}={float(x)}" for k, x in comps.items()))
            self.opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            _assert_finite_grads(self.net, "generator")
            self.opt_g.step()
        finally:
            self.disc.requires_grad_(True)

        comps = {k: float(x.detach()) for k, x in comps.items()}
        comps["d_loss"] = float(d_loss.detach())
        comps["total"] = float(loss_total(comps, cfg.weights))
        metrics.update(comps)
        return metrics

    def train_epoch(self, visual, target) -> dict:
        n = len(visual)
        order = torch.randperm(n, generator=_epoch_generator(self.cfg.seed, self.epoch)).numpy()
        rows = []
        for i in range(0, n, self.cfg.batch_size):
            idx = np.sort(order[i:i + self.cfg.batch_size])
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            rows.append(self.train_step(visual[idx], target[idx]))
        self.epoch += 1
        out = {"epoch": self.epoch}
        for k in METRIC_FIELDS[1:]:
            out[k] = float(np.mean([r[k] for r in rows]))
        return out

    # -- checkpoints -------------------------------------------------------- #
    def state(self) -> dict:
        return {"opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict(),
                "epoch": self.epoch, "train_config": dataclasses.asdict(self.cfg)}

    def save(self, path) -> Path:
        return save_params(path, self.net, self.disc, **self.state())

    @classmethod
    def resume(cls, path, cfg: TrainConfig | None = None) -> "Trainer":
        payload = read_checkpoint(path)
        model_cfg = ModelConfig(**payload["config"])
        cfg = cfg or TrainConfig(**payload["train_config"])
        tr = cls(model_cfg, cfg)
        tr.net.load_state_dict(payload["net"])
        tr.disc.load_state_dict(payload["disc"])
        tr.opt_g.load_state_dict(payload["opt_g"])
        tr.opt_d.load_state_dict(payload["opt_d"])
        tr.epoch = payload["epoch"]
        return tr

    def fit(self, visual, target, run_dir=None, manifest: dict | None = None, progress=None) -> list[dict]:
        """Train until ``cfg.epochs``; with ``run_dir`` persist metrics and checkpoints."""
        run = Path(run_dir) if run_dir is not None else None
        history = []
        if run is not None:
            run.mkdir(parents=True, exist_ok=True)
            (run / "checkpoints").mkdir(exist_ok=True)
            man = {"code_version": __version__, "model_config": self.model_cfg.to_dict(),
                   "train_config": dataclasses.asdict(self.cfg),
                   "seeds": {"seed": self.cfg.seed, "disc_seed": self.cfg.disc_seed}}
            man.update(manifest or {})
            (run / "manifest.json").write_text(json.dumps(man, indent=2, default=str))
            history = read_metrics(run / "metrics.csv")[:self.epoch] if self.epoch else []
            _write_metrics(run / "metrics.csv", history)
        while self.epoch < self.cfg.epochs:
            t0 = time.perf_counter()
            row = self.train_epoch(visual, target)
            history.append(row)
            if progress:
                progress(row)
            log.debug("epoch %d rec=%.4f (%.2fs)", row["epoch"], row["rec"], time.perf_counter() - t0)
            if run is not None:
                with open(run / "metrics.csv", "a", newline="") as f:
                    csv.DictWriter(f, METRIC_FIELDS).writerow(row)
                if self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == self.cfg.epochs:
                    self.save(run / "checkpoints" / f"epoch_{self.epoch:05d}.pt")
        if run is not None:
            self.save(run / "final.pt")
        return history


def _write_metrics(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, METRIC_FIELDS)
        w.writeheader()
        w.writerows(rows)


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("epoch_*.pt"))
    return ckpts[-1] if ckpts else None


def train(visual, target, model_cfg: ModelConfig, cfg: TrainConfig, run_dir=None,
          resume: bool = False, manifest: dict | None = None) -> Trainer:
    """Train a model on arrays ``visual`` (N, T, F) and ``target`` (N, n_mels, T_audio)."""
    ckpt = latest_checkpoint(run_dir) if (resume and run_dir is not None) else None
    tr = Trainer.resume(ckpt, cfg) if ckpt is not None else Trainer(model_cfg, cfg)
    tr.fit(visual, target, run_dir, manifest)
    return tr
