#!/usr/bin/env python3
"""Reference log-mel for the 440 Hz fixture, by direct (non-FFT) DFT.

Writes tests/data/sine440_logmel.tsv: one frame per line, tab-separated.
"""
import math
import sys
from pathlib import Path

import numpy as np

SR = 16000
FRAME = 400   # 25 ms
HOP = 160     # 10 ms
NFFT = 512
BINS = 40
FLOOR = 1e-10


def hz_to_mel(hz):
    return 2595.0 * math.log10(1.0 + hz / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def filterbank():
    mel_hi = hz_to_mel(SR / 2.0)
    edges = [mel_to_hz(mel_hi * i / (BINS + 1)) for i in range(BINS + 2)]
    bank = np.zeros((BINS, NFFT // 2 + 1))
    for m in range(BINS):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        for k in range(NFFT // 2 + 1):
            f = k * SR / NFFT
            if lo < f < c:
                bank[m, k] = (f - lo) / (c - lo)
            elif c <= f < hi:
                bank[m, k] = (hi - f) / (hi - c)
    return bank


def main(out):
    t = np.arange(SR)
    x = np.sin(2 * np.pi * 440.0 * t / SR).astype(np.float32).astype(np.float64)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(FRAME) / (FRAME - 1))
    n = np.arange(FRAME)
    k = np.arange(NFFT // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / NFFT)  # zero padding: only the first FRAME inputs
    bank = filterbank()
    frames = 1 + (len(x) - FRAME) // HOP
    rows = []
    for f in range(frames):
        seg = window * x[f * HOP:f * HOP + FRAME]
        spec = basis @ seg
        power = spec.real ** 2 + spec.imag ** 2
        energy = bank @ power
        rows.append(np.log(np.maximum(energy, FLOOR)))
    with open(out, "w") as fh:
        for r in rows:
            fh.write("\t".join(repr(float(v)) for v in r) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parents[2] / "tests/data/sine440_logmel.tsv")
