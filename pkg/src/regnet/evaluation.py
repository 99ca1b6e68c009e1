"""Spectrogram distances, regularizer-output probes, capacity sweep and the threshold baseline.

Every probe returns a :class:`ProbeReport` whose aggregates can be recomputed
from its per-scene rows.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import ModelConfig, RegNet
from .spectro import SpectroParams
from .synthdata import SyntheticScene, combine_mel

DISPLAY_SCALE = 1e2  # tables show L2 values as "x 10^-2"

HUMAN_STUDY_NOTE = ("real-or-fake and Sound-Missing/Redundant/Mismatched scores "
                    "require a human study and are out of scope")


_ID_FIELDS = ("scene", "seed")


class ProbeError(ValueError):
    pass


def l2_spec_distance(a, b) -> float:
    """Cell-mean squared error between two spectrograms."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ProbeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def regout_cosine_similarity(r1, r2) -> float:
    a = np.asarray(r1, dtype=np.float64).ravel()
    b = np.asarray(r2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ProbeError(f"shape mismatch: {np.shape(r1)} vs {np.shape(r2)}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ProbeError("cosine similarity is undefined for an all-zero regularizer output")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# --------------------------------------------------------------------------- #
# reports

@dataclasses.dataclass
class Ordering:
    name: str
    lhs: float
    rhs: float
    relation: str = "<"      # lhs <relation> rhs
    margin: float = 0.0      # for "<": lhs < rhs * (1 - margin); for ">": lhs > rhs + margin

    @property
    def holds(self) -> bool:
        if self.relation == "<":
            return self.lhs < self.rhs * (1.0 - self.margin)
        return self.lhs > self.rhs + self.margin


@dataclasses.dataclass
class ProbeReport:
    experiment: str
    analogue: str
    rows: list[dict]
    config: dict = dataclasses.field(default_factory=dict)
    orderings: list[Ordering] = dataclasses.field(default_factory=list)
    notes: list[str] = dataclasses.field(default_factory=list)

    def metric_names(self) -> list[str]:
        names = []
        for r in self.rows:
            for k, v in r.items():
                if isinstance(v, (int, float)) and not isinstance(v, bool) and k not in names and k not in _ID_FIELDS:
                    names.append(k)
        return names

    @property
    def aggregates(self) -> dict:
        out = {}
        for k in self.metric_names():
            vals = np.array([r[k] for r in self.rows if k in r], dtype=np.float64)
            out[k] = {"mean": float(vals.mean()), "median": float(np.median(vals)),
                      "std": float(vals.std()), "n": int(vals.size)}
        return out

    @property
    def passed(self) -> bool:
        return all(o.holds for o in self.orderings)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "analogue": self.analogue, "config": self.config,
                "aggregates": self.aggregates,
                "orderings": [dict(dataclasses.asdict(o), holds=o.holds) for o in self.orderings],
                "notes": self.notes, "rows": self.rows}

    def to_text(self) -> str:
        lines = [f"# {self.experiment}  (table analogue: {self.analogue})", ""]
        lines.append(f"{'metric':<28}{'mean':>12}{'median':>12}{'std':>12}{'x1e-2 mean':>12}{'n':>6}")
        for k, a in self.aggregates.items():
            lines.append(f"{k:<28}{a['mean']:>12.4f}{a['median']:>12.4f}{a['std']:>12.4f}"
                         f"{a['mean'] * DISPLAY_SCALE:>12.1f}{a['n']:>6d}")
        if self.orderings:
            lines += ["", "orderings:"]
            for o in self.orderings:
                rel = o.relation + (f" (margin {o.margin:g})" if o.margin else "")
                lines.append(f"  [{'PASS' if o.holds else 'FAIL'}] {o.name}: {o.lhs:.4f} {rel} {o.rhs:.4f}")
        for n in self.notes:
            lines.append(f"note: {n}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = self.experiment.replace(" ", "_")
        (out / f"{stem}.txt").write_text(self.to_text())
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        keys = sorted({k for r in self.rows for k in r})
        with open(out / f"{stem}_rows.csv", "w", newline="") as f:
            w = csv.DictWriter(f, keys)
            w.writeheader()
            w.writerows(self.rows)
        return out

    @classmethod
    def load(cls, path) -> "ProbeReport":
        d = json.loads(Path(path).read_text())
        return cls(d["experiment"], d["analogue"], d["rows"], d["config"],
                   [Ordering(o["name"], o["lhs"], o["rhs"], o["relation"], o["margin"]) for o in d["orderings"]],
                   d["notes"])


# --------------------------------------------------------------------------- #
# batched inference helpers

def _t(a, like: torch.nn.Module):
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(a), dtype=dtype)


@torch.no_grad()
def infer(net: RegNet, visual, spec=None, *, zero_visual=False, reg_out=None, batch=64):
    """Final spectrograms for a stack of scenes.

    ``spec=None`` and ``reg_out=None`` is the test-time path (zero regularizer
    output).  ``reg_out`` overrides the regularizer entirely.
    """
    net.eval()
    outs = []
    for i in range(0, len(visual), batch):
        v = _t(visual[i:i + batch], net)
        vf = net.encode_visual(v)
        if zero_visual:
            vf = torch.zeros_like(vf)
        if reg_out is not None:
            r = _t(reg_out[i:i + batch], net)
        elif spec is not None:
            r = net.regularize_audio(_t(spec[i:i + batch], net))
        else:
            r = net.zero_reg(v.shape[0], vf)
        outs.append(net.generate(vf, r)[1].double().numpy())
    return np.concatenate(outs)


@torch.no_grad()
def regularizer_outputs(net: RegNet, spec, batch=64) -> np.ndarray:
    net.eval()
    return np.concatenate([net.regularize_audio(_t(spec[i:i + batch], net)).double().numpy()
                           for i in range(0, len(spec), batch)])


def _stack(scenes: Sequence[SyntheticScene], field: str) -> np.ndarray:
    vals = [getattr(s, field) for s in scenes]
    if any(v is None for v in vals):
        raise ProbeError(f"scenes are missing the {field!r} array")
    return np.stack(vals)


# --------------------------------------------------------------------------- #
# probes

def l2_probe(net: RegNet, scenes, name="l2", analogue="Table III") -> ProbeReport:
    """L2 of the test-time prediction to the relevant component and to the mixture."""
    pred = infer(net, _stack(scenes, "visual"))
    rows = []
    for i, s in enumerate(scenes):
        row = {"scene": i, "seed": s.seed, "l2_to_relevant": l2_spec_distance(pred[i], s.relevant)}
        if s.mixed is not None:
            row["l2_to_mixed"] = l2_spec_distance(pred[i], s.mixed)
        rows.append(row)
    return ProbeReport(name, analogue, rows, {"model": net.cfg.to_dict()}, notes=[HUMAN_STUDY_NOTE])


def zero_visual_probe(net: RegNet, scenes, name="zero-visual") -> ProbeReport:
    """Generate from the regularizer alone (visual encoder output zeroed)."""
    pred = infer(net, _stack(scenes, "visual"), _stack(scenes, "mixed"), zero_visual=True)
    rows = []
    for i, s in enumerate(scenes):
        to_rel = l2_spec_distance(pred[i], s.relevant)
        to_irr = l2_spec_distance(pred[i], s.irrelevant)
        rows.append({"scene": i, "seed": s.seed, "l2_to_relevant": to_rel,
                     "l2_to_irrelevant": to_irr, "closer_to_irrelevant": float(to_irr < to_rel)})
    rep = ProbeReport(name, "Table V", rows, {"model": net.cfg.to_dict()})
    agg = rep.aggregates
    rep.orderings.append(Ordering("mean L2 to irrelevant < mean L2 to relevant",
                                  agg["l2_to_irrelevant"]["mean"], agg["l2_to_relevant"]["mean"]))
    rep.orderings.append(Ordering("fraction of scenes closer to irrelevant >= 0.7",
                                  agg["closer_to_irrelevant"]["mean"], 0.7, ">", -1e-12))
    return rep


def mixin_probe(net_clean: RegNet, reg_source: RegNet, scenes, name="mixin", margin=0.0) -> ProbeReport:
    """Feed the zero vector vs. ``reg_source``'s regularizer output into ``net_clean``.

    Distances are to each scene's background (irrelevant) spectrogram.
    """
    if reg_source.cfg.reg_width != net_clean.cfg.reg_width or reg_source.cfg.T != net_clean.cfg.T:
        raise ProbeError(
            f"regularizer output {reg_source.cfg.reg_width}x{reg_source.cfg.T} does not fit a generator "
            f"expecting {net_clean.cfg.reg_width}x{net_clean.cfg.T}")
    visual = _stack(scenes, "visual")
    r = regularizer_outputs(reg_source, _stack(scenes, "mixed"))
    zero = infer(net_clean, visual)
    fed = infer(net_clean, visual, reg_out=r)
    rows = []
    for i, s in enumerate(scenes):
        rows.append({"scene": i, "seed": s.seed,
                     "l2_zero_to_background": l2_spec_distance(zero[i], s.irrelevant),
                     "l2_reg_to_background": l2_spec_distance(fed[i], s.irrelevant)})
    rep = ProbeReport(name, "mix-in table", rows)
    agg = rep.aggregates
    rep.orderings.append(Ordering(
        f"regularizer-fed L2 to background < zero-fed{' by ' + format(margin, '.0%') if margin else ''}",
        agg["l2_reg_to_background"]["mean"], agg["l2_zero_to_background"]["mean"], "<", margin))
    return rep


def cosine_probe(outputs: dict[str, np.ndarray], backgrounds: dict[str, str], reference: str | None = None,
                 name="cosine", margin=0.0, max_pairs=4096, seed=0) -> ProbeReport:
    """Mean cosine similarity of regularizer outputs between datasets.

    ``outputs`` maps a dataset name to its stack of regularizer outputs;
    ``backgrounds`` maps the same names to their background type.  Pairs
    always use different scene indices.  With ``reference`` only pairs that
    involve the reference dataset are reported (the reference-row layout).
    """
    names = list(outputs)
    rng = np.random.default_rng(seed)
    rows = []
    for a_i, a in enumerate(names):
        for b in names[a_i:]:
            if reference is not None and reference not in (a, b):
                continue
            A, B = outputs[a], outputs[b]
            n = min(len(A), len(B))
            i = rng.integers(0, n, max_pairs)
            j = (i + rng.integers(1, n, max_pairs)) % n
            cos = np.mean([regout_cosine_similarity(A[x], B[y]) for x, y in zip(i, j)])
            rows.append({"pair": f"{a}|{b}", "same_background": float(backgrounds[a] == backgrounds[b]),
                         "cosine": float(cos)})
    same = [r["cosine"] for r in rows if r["same_background"]]
    diff = [r["cosine"] for r in rows if not r["same_background"]]
    rep = ProbeReport(name, "Table IV", rows, {"backgrounds": backgrounds, "reference": reference})
    if same and diff:
        rep.orderings.append(Ordering(f"same-background mean cosine > different-background + {margin:g}",
                                      float(np.mean(same)), float(np.mean(diff)), ">", margin))
    return rep


# --------------------------------------------------------------------------- #
# threshold-and-paste baseline

@dataclasses.dataclass(frozen=True)
class ThresholdConfig:
    motion_threshold: float = 0.05   # on the baseline-removed motion-channel mean; onset peaks sit at 0.06-0.12
    sound_threshold: float = -9.0    # on the frame-mean log-mel (training-time labels only)


def motion_amplitude(visual: np.ndarray) -> np.ndarray:
    """Per-frame mean of the motion half of the features, minus its per-clip minimum."""
    m = np.asarray(visual)[..., visual.shape[-1] // 2:].mean(axis=-1)
    return m - m.min(axis=-1, keepdims=True)


def detect_occurrences(visual: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean per-frame action-occurrence mask from visual features only."""
    return motion_amplitude(visual) >= threshold


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    runs, start = [], None
    for t, on in enumerate(mask):
        if on and start is None:
            start = t
        elif not on and start is not None:
            runs.append((start, t - start))
            start = None
    if start is not None:
        runs.append((start, len(mask) - start))
    return runs


def build_clip_bank(scenes, cfg: ThresholdConfig, upsample: int, max_clips: int = 64) -> list[np.ndarray]:
    """Crop sound templates at training-time action occurrences.

    A visual frame is labelled when both its motion amplitude and its sound
    level exceed the thresholds; each labelled run becomes one template that
    extends while the sound level stays above threshold.
    """
    bank = []
    for s in scenes:
        level = s.mixed.mean(axis=0)
        motion = motion_amplitude(s.visual)
        sound_on = level.reshape(-1, upsample).max(axis=1) > cfg.sound_threshold
        for start, _ in _runs((motion >= cfg.motion_threshold) & sound_on):
            a = start * upsample
            b = a
            while b < level.size and level[b] > cfg.sound_threshold:
                b += 1
            if b - a >= upsample:
                bank.append(s.mixed[:, a:b].copy())
            if len(bank) >= max_clips:
                return bank
    return bank


def baseline_detect_and_place(visual: np.ndarray, clip_bank: list[np.ndarray], cfg: ThresholdConfig,
                              p: SpectroParams, upsample: int) -> np.ndarray:
    """Paste the nearest-length template at every detected action onset."""
    if not clip_bank:
        raise ProbeError("clip bank is empty")
    lengths = np.array([c.shape[1] for c in clip_bank])
    n_frames = visual.shape[0] * upsample
    out = np.full((p.n_mels, n_frames), p.floor_value)
    for start, length in _runs(detect_occurrences(visual, cfg.motion_threshold)):
        clip = clip_bank[int(np.argmin(np.abs(lengths - length * upsample)))]
        a = start * upsample
        n = min(clip.shape[1], n_frames - a)
        out[:, a:a + n] = combine_mel(out[:, a:a + n], clip[:, :n], p)
    return out


def baseline_probe(train_scenes, test_scenes, net: RegNet | None, cfg: ThresholdConfig,
                   p: SpectroParams, upsample: int, name="baseline") -> ProbeReport:
    bank = build_clip_bank(train_scenes, cfg, upsample)
    visual = _stack(test_scenes, "visual")
    base = np.stack([baseline_detect_and_place(v, bank, cfg, p, upsample) for v in visual])
    ours = infer(net, visual) if net is not None else None
    rows = []
    for i, s in enumerate(test_scenes):
        row = {"scene": i, "seed": s.seed, "baseline_l2_to_relevant": l2_spec_distance(base[i], s.relevant)}
        if ours is not None:
            row["regnet_l2_to_relevant"] = l2_spec_distance(ours[i], s.relevant)
        rows.append(row)
    rep = ProbeReport(name, "simple-method comparison", rows,
                      {"threshold": dataclasses.asdict(cfg), "clip_bank_size": len(bank)},
                      notes=[HUMAN_STUDY_NOTE])
    if ours is not None:
        agg = rep.aggregates
        rep.orderings.append(Ordering("RegNet L2 to relevant < baseline L2 to relevant",
                                      agg["regnet_l2_to_relevant"]["mean"], agg["baseline_l2_to_relevant"]["mean"]))
    return rep


# --------------------------------------------------------------------------- #
# capacity sweep

VARIANT_ROLES = ("narrow", "just-right", "wide-dim", "wide-time")


def desk_variants(T_audio: int = 128) -> dict[str, str]:
    """Desk-scale analogues of the four capacity variants."""
    return {"narrow": f"S{T_audio}D2", "just-right": f"S{T_audio}D16",
            "wide-dim": f"S{T_audio}D256", "wide-time": "S4D16"}


def full_scale_variants() -> dict[str, str]:
    return {"narrow": "S860D8", "just-right": "S860D32", "wide-dim": "S860D1024", "wide-time": "S32D32"}


def capacity_sweep(train_fn: Callable[[ModelConfig, int], RegNet], base: ModelConfig,
                   variants: dict[str, str], seeds: Sequence[int], test_scenes,
                   name="sweep") -> ProbeReport:
    """Train one model per (variant, seed) via ``train_fn`` and compare L2(S_0, S_r)."""
    rows = []
    for role, preset in variants.items():
        for seed in seeds:
            try:
                net = train_fn(base.with_variant(preset), seed)
            except Exception as e:
                raise RuntimeError(f"capacity sweep: training variant {role} ({preset}) seed {seed} failed: {e}") from e
            rep = l2_probe(net, test_scenes)
            rows.append({"variant": role, "preset": preset, "seed": seed,
                         "l2_to_relevant": rep.aggregates["l2_to_relevant"]["mean"]})
    return sweep_report(rows, name)


def sweep_report(rows: list[dict], name="sweep") -> ProbeReport:
    med = {}
    for r in rows:
        med.setdefault(r["variant"], []).append(r["l2_to_relevant"])
    med = {k: float(np.median(v)) for k, v in med.items()}
    rep = ProbeReport(name, "Table VI", rows, {"seed_median_l2_to_relevant": med})
    if "just-right" in med:
        for other in med:
            if other != "just-right":
                rep.orderings.append(Ordering(f"just-right < {other} (seed median)", med["just-right"], med[other]))
    rep.notes.append("seed medians: " + ", ".join(f"{k}={v:.4f}" for k, v in med.items()))
    rep.notes.append(HUMAN_STUDY_NOTE)
    return rep
