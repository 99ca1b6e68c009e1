"""
Probing a trained model
=======================

Zero the visual features and let the regularizer drive the generator; then
feed a foreign regularizer output into a model trained on clean sound.
About two minutes on one CPU core.
"""

import torch

from regnet import evaluation as ev
from regnet.model import ModelConfig
from regnet.synthdata import SynthConfig, generate_dataset, split, stack
from regnet.training import TrainConfig, Trainer

torch.set_num_threads(1)


def fit(background):
    data = SynthConfig(background=background)
    train, test = split(generate_dataset(data), data)
    tr = Trainer(ModelConfig(), TrainConfig(epochs=60, learning_rate=1e-3, gan_enabled=False))
    tr.fit(stack(train, "visual"), stack(train, "mixed"))
    return tr.net.eval(), train, test


noisy, _, noisy_test = fit("gauss")
print(ev.zero_visual_probe(noisy, noisy_test).to_text())

clean, clean_train, clean_test = fit("none")
print(ev.mixin_probe(clean, noisy, noisy_test).to_text())

# the threshold-and-paste baseline never sees audio at test time either
p = SynthConfig().spectro()
print(ev.baseline_probe(clean_train, clean_test, clean, ev.ThresholdConfig(), p, 4).to_text())
