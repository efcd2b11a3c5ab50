"""Sleep stages, frequency bands and the stage/band pairing used by the
synthetic generator and the occlusion probe."""

from enum import IntEnum

import numpy as np

EPOCH_SECONDS = 30.0


class SleepStage(IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4

    @classmethod
    def from_token(cls, token):
        token = token.strip().upper()
        if token == "R":
            token = "REM"
        try:
            return cls[token]
        except KeyError:
            raise ValueError(f"unknown sleep stage token {token!r}") from None

    def one_hot(self):
        v = np.zeros(N_STAGES)
        v[int(self)] = 1.0
        return v


STAGES = tuple(SleepStage)
STAGE_NAMES = tuple(s.name for s in STAGES)
N_STAGES = len(STAGES)

# (low, high) in Hz, contiguous over 0.5-30 Hz
BANDS = {
    "delta": (0.5, 4.5),
    "theta": (4.5, 8.5),
    "alpha": (8.5, 11.5),
    "sigma": (11.5, 15.5),
    "beta": (15.5, 30.0),
}
BAND_NAMES = tuple(BANDS)

# signature band planted for each stage by the synthetic generator
STAGE_BAND = {
    SleepStage.W: "alpha",
    SleepStage.N1: "theta",
    SleepStage.N2: "sigma",
    SleepStage.N3: "delta",
    SleepStage.REM: "beta",
}
BAND_STAGE = {band: stage for stage, band in STAGE_BAND.items()}


def one_hot(labels):
    """One-hot encode an integer label vector into shape (n, 5)."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, N_STAGES))
    out[np.arange(labels.size), labels] = 1.0
    return out
