"""
Log-mel spectrograms and Griffin-Lim
====================================

Build a clip, turn it into the 80-band log-mel representation the models
work in, and invert it back to a waveform.
"""

import numpy as np

from regnet.spectro import SpectroParams, mel_to_wav, save_wav, wav_to_mel

# full-length clips: 220160 samples at 22.05 kHz give 860 frames of hop 256
p = SpectroParams()
t = np.arange(p.clip_samples) / p.sample_rate
clip = 0.3 * np.sin(2 * np.pi * 440 * t) * (np.sin(2 * np.pi * 0.5 * t) > 0)
mel = wav_to_mel(clip, p)
print("mel shape", mel.shape)            # (80, 860)
print("silent cells sit at", p.floor_value)

# the band with the most energy is the one whose triangle covers 440 Hz
print("peak band", int(mel.mean(axis=1).argmax()))

# desk-scale clips are shorter but keep every other constant
desk = SpectroParams.desk()
short = clip[:desk.clip_samples]
m = wav_to_mel(short, desk)
back = mel_to_wav(m, desk, iters=32)
err = np.mean((wav_to_mel(back, desk) - m) ** 2)
print("desk mel", m.shape, "round-trip mel error %.3f" % err)

save_wav(back, "/tmp/regnet_demo_tone.wav", desk)
print("wrote /tmp/regnet_demo_tone.wav")
