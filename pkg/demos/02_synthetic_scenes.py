"""
Synthetic scenes with a known decomposition
===========================================

Every scene has visual features, the sound they cause (relevant), and a
background drawn independently of the video (irrelevant).
"""

import numpy as np

from regnet.synthdata import SynthConfig, generate_dataset, split, stack

cfg = SynthConfig(relevant_class="dog", background="fireworks", n_train=64, n_test=16)
train, test = split(generate_dataset(cfg), cfg)
s = train[0]
print("onsets (visual frames):", s.track.onsets, "kinds:", s.track.kinds)
print("visual", s.visual.shape, "relevant", s.relevant.shape, "mixture", s.mixed.shape)

# motion energy peaks right at each onset; relevant loudness follows it
motion = s.visual[:, cfg.F // 2:].mean(1)
loud = s.relevant.mean(0).reshape(cfg.T, cfg.upsample).max(1)
print("motion/relevant correlation %.2f" % np.corrcoef(motion, loud)[0, 1])

# pooled over scenes the background is unrelated to the picture
m = np.concatenate([x.visual[:, cfg.F // 2:].mean(1) for x in train])
b = np.concatenate([x.irrelevant.mean(0).reshape(cfg.T, -1).mean(1) for x in train])
print("motion/background correlation %.3f" % np.corrcoef(m, b)[0, 1])

# how far the mixture is from its relevant part, per background type
for bg in ("gauss", "fireworks", "drum"):
    c = SynthConfig(background=bg, n_train=16, n_test=0)
    sc = generate_dataset(c)
    gap = np.mean((stack(sc, "mixed") - stack(sc, "relevant")) ** 2)
    print(f"{bg:>9}: mean squared gap mixture vs relevant {gap:.2f}")
