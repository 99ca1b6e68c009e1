import math

import numpy as np
import pytest

from regnet import evaluation as ev
from regnet.model import ModelConfig, build
from regnet.spectro import SpectroParams
from regnet.synthdata import SynthConfig, generate_dataset, split

SMALL = ModelConfig(T=8, F=6, T_audio=32, n_mels=80, enc_channels=8, enc_lstm_hidden=4,
                    reg_dim=3, reg_downsample=32, gen_channels=8, postnet_channels=8, disc_channels=4)
DATA = SynthConfig(T=8, F=6, T_audio=32, n_train=12, n_test=6, seed=1)


@pytest.fixture(scope="module")
def scenes():
    return split(generate_dataset(DATA), DATA)


@pytest.fixture(scope="module")
def net():
    return build(SMALL, seed=0)[0].eval()


class TestMetrics:
    rng = np.random.default_rng(3)

    def test_l2_matches_direct_summation(self):
        a, b = self.rng.normal(size=(80, 16)), self.rng.normal(size=(80, 16))
        oracle = math.fsum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(ev.l2_spec_distance(a, b) - oracle) < 1e-12

    def test_l2_zero_iff_equal(self):
        a = self.rng.normal(size=(5, 7))
        assert ev.l2_spec_distance(a, a) == 0
        assert ev.l2_spec_distance(a, a + 1e-9) > 0

    def test_l2_shape_mismatch(self):
        with pytest.raises(ev.ProbeError):
            ev.l2_spec_distance(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_cosine_matches_oracle(self):
        a, b = self.rng.normal(size=(6, 4)), self.rng.normal(size=(6, 4))
        dot = math.fsum(x * y for x, y in zip(a.ravel(), b.ravel()))
        na = math.sqrt(math.fsum(x * x for x in a.ravel()))
        nb = math.sqrt(math.fsum(x * x for x in b.ravel()))
        assert abs(ev.regout_cosine_similarity(a, b) - dot / (na * nb)) < 1e-12

    def test_cosine_identities(self):
        a = self.rng.normal(size=(6, 4))
        assert ev.regout_cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-15)
        assert ev.regout_cosine_similarity(a, -a) == pytest.approx(-1.0, abs=1e-15)

    def test_cosine_zero_vector(self):
        with pytest.raises(ev.ProbeError, match="zero"):
            ev.regout_cosine_similarity(np.zeros(4), np.ones(4))


class TestReport:
    def test_aggregates_recomputable(self, tmp_path):
        rows = [{"scene": i, "x": float(v)} for i, v in enumerate([3.0, 1.0, 2.0, 10.0])]
        rep = ev.ProbeReport("demo", "Table III", rows)
        assert rep.aggregates["x"] == {"mean": 4.0, "median": 2.5, "std": float(np.std([3, 1, 2, 10])), "n": 4}
        assert "scene" not in rep.aggregates
        rep.save(tmp_path)
        back = ev.ProbeReport.load(tmp_path / "demo.json")
        assert back.aggregates == rep.aggregates
        assert (tmp_path / "demo_rows.csv").read_text().count("\n") == 5
        assert "Table III" in (tmp_path / "demo.txt").read_text()

    def test_ordering(self):
        assert ev.Ordering("a", 1.0, 2.0).holds
        assert not ev.Ordering("a", 1.8, 2.0, "<", 0.2).holds
        assert ev.Ordering("b", 0.5, 0.3, ">", 0.1).holds
        assert not ev.Ordering("b", 0.35, 0.3, ">", 0.1).holds


class TestProbes:
    def test_l2_probe_runs_on_untrained_model(self, net, scenes):
        rep = ev.l2_probe(net, scenes[1])
        assert len(rep.rows) == DATA.n_test
        assert any("human study" in n for n in rep.notes)

    def test_zero_visual_probe_is_total(self, net, scenes):
        rep = ev.zero_visual_probe(net, scenes[1])
        assert {"l2_to_relevant", "l2_to_irrelevant"} <= set(rep.aggregates)
        assert len(rep.orderings) == 2

    def test_mixin_zero_vs_zero_is_identical(self, net, scenes):
        test = scenes[1]
        visual = np.stack([s.visual for s in test])
        zero = np.zeros((len(test), SMALL.reg_width, SMALL.T))
        a = ev.infer(net, visual)
        b = ev.infer(net, visual, reg_out=zero)
        assert np.array_equal(a, b)

    def test_mixin_rejects_incompatible_regularizer(self, net, scenes):
        other = build(SMALL.with_variant("S32D5"))[0]
        with pytest.raises(ev.ProbeError, match="does not fit"):
            ev.mixin_probe(net, other, scenes[1])

    def test_mixin_probe_runs(self, net, scenes):
        src = build(SMALL, seed=5)[0]
        rep = ev.mixin_probe(net, src, scenes[1])
        assert len(rep.orderings) == 1

    def test_cosine_probe_groups(self):
        rng = np.random.default_rng(0)
        base_a, base_b = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        outs = {n: (base_a if bg == "x" else base_b) + 0.3 * rng.normal(size=(20, 6, 8))
                for n, bg in [("A1", "x"), ("A2", "x"), ("B1", "y"), ("B2", "y")]}
        bgs = {"A1": "x", "A2": "x", "B1": "y", "B2": "y"}
        rep = ev.cosine_probe(outs, bgs, margin=0.1)
        assert rep.passed
        ref = ev.cosine_probe(outs, bgs, reference="A1")
        assert all("A1" in r["pair"] for r in ref.rows)

    def test_infer_zero_path_ignores_audio(self, net, scenes):
        visual = np.stack([s.visual for s in scenes[1]])
        assert np.array_equal(ev.infer(net, visual), ev.infer(net, visual))


class TestBaseline:
    p = SpectroParams.desk(n_frames=32)

    def test_zero_threshold_marks_every_frame(self, scenes):
        v = scenes[1][0].visual
        assert ev.detect_occurrences(v, 0.0).all()
        bank = [np.full((80, 4), -3.0)]
        out = ev.baseline_detect_and_place(v, bank, ev.ThresholdConfig(0.0), self.p, 4)
        assert np.all(np.isfinite(out))

    def test_threshold_above_max_gives_floor(self, scenes):
        v = scenes[1][0].visual
        bank = [np.full((80, 4), -3.0)]
        out = ev.baseline_detect_and_place(v, bank, ev.ThresholdConfig(1e9), self.p, 4)
        assert np.all(out == self.p.floor_value)

    def test_empty_bank(self, scenes):
        with pytest.raises(ev.ProbeError, match="empty"):
            ev.baseline_detect_and_place(scenes[1][0].visual, [], ev.ThresholdConfig(), self.p, 4)

    def test_bank_and_probe(self, scenes, net):
        cfg = SynthConfig(T=8, F=6, T_audio=32, background="none", n_train=20, n_test=4, seed=2)
        tr, te = split(generate_dataset(cfg), cfg)
        bank = ev.build_clip_bank(tr, ev.ThresholdConfig(), 4)
        assert bank and all(c.shape[0] == 80 for c in bank)
        rep = ev.baseline_probe(tr, te, net, ev.ThresholdConfig(), self.p, 4)
        assert len(rep.orderings) == 1

    def test_default_thresholds_fire_on_desk_scenes(self):
        # the baseline must place sound on held-out scenes, not collapse to the floor spectrogram
        cfg = SynthConfig(background="none", n_train=24, n_test=8, seed=3)
        tr, te = split(generate_dataset(cfg), cfg)
        th = ev.ThresholdConfig()
        bank = ev.build_clip_bank(tr, th, cfg.upsample)
        assert len({c.shape[1] for c in bank}) > 1
        assert np.mean([ev.detect_occurrences(s.visual, th.motion_threshold).any() for s in te]) > 0.5
        p = cfg.spectro()
        out = np.stack([ev.baseline_detect_and_place(s.visual, bank, th, p, cfg.upsample) for s in te])
        assert (out > p.floor_value + 1e-6).any(axis=1).mean() > 0.05

    def test_nearest_length_template(self):
        v = np.zeros((8, 6))
        v[2:4, 3:] = 1.0   # one two-frame action
        short, long_ = np.full((80, 4), -2.0), np.full((80, 8), -1.0)
        out = ev.baseline_detect_and_place(v, [short, long_], ev.ThresholdConfig(0.5), self.p, 4)
        assert np.all(out[:, 8:16] > self.p.floor_value)
        assert np.all(out[:, 16:] == self.p.floor_value)


class TestSweep:
    def test_identical_variants_identical_results(self, scenes):
        from regnet.training import TrainConfig, Trainer
        tr, te = scenes
        v, s = np.stack([x.visual for x in tr]), np.stack([x.mixed for x in tr])

        def train_fn(cfg, seed):
            t = Trainer(cfg, TrainConfig(epochs=1, batch_size=4, seed=seed, gan_enabled=False))
            t.fit(v, s)
            return t.net

        rep = ev.capacity_sweep(train_fn, SMALL, {"a": "S32D3", "b": "S32D3"}, [0], te)
        assert rep.rows[0]["l2_to_relevant"] == rep.rows[1]["l2_to_relevant"]

    def test_failure_names_variant(self, scenes):
        def boom(cfg, seed):
            raise RuntimeError("nope")
        with pytest.raises(RuntimeError, match="wide-time"):
            ev.capacity_sweep(boom, SMALL, {"wide-time": "S4D3"}, [0], scenes[1])

    def test_report_orderings(self):
        rows = [{"variant": v, "seed": s, "l2_to_relevant": x}
                for v, xs in {"narrow": [3, 3, 3], "just-right": [1, 5, 1], "wide-time": [2, 2, 2]}.items()
                for s, x in enumerate(xs)]
        rep = ev.sweep_report(rows)
        assert rep.passed  # medians 1 < 3 and 1 < 2
        assert rep.config["seed_median_l2_to_relevant"]["just-right"] == 1

    def test_variant_tables(self):
        assert ev.desk_variants()["wide-time"] == "S4D16"
        assert ev.full_scale_variants()["just-right"] == "S860D32"
