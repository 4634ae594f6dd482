"""Spike extraction from state estimates and their confidence bands.

A spike is a rise in a coordinate's state trace that is significant given
the bands: the lower band at the peak must clear the upper band at the
trough before it. The trace is taken to start from ``x_0 = 0`` with no
uncertainty, so a rise at the first sample is compared against zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dyncs.model import innovation_sequence


@dataclass
class SpikeTrain:
    """Detected events in tidy form: one entry per spike."""

    coords: np.ndarray
    times: np.ndarray
    amplitudes: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    def for_coord(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        sel = self.coords == j
        return self.times[sel], self.amplitudes[sel]

    def as_mask(self, shape: tuple[int, int]) -> np.ndarray:
        mask = np.zeros(shape, dtype=bool)
        mask[self.times, self.coords] = True
        return mask


def extract_innovations(states: np.ndarray, theta: float) -> np.ndarray:
    """``x_t - theta x_{t-1}`` with ``x_0 = 0``, shape (T, p)."""
    return innovation_sequence(states, theta)


def _runs(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start and end index of each run of equal consecutive values."""
    change = np.flatnonzero(np.diff(x) != 0) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change - 1, [len(x) - 1]])
    return starts, ends


def rises(trace: np.ndarray) -> list[tuple[int, int, int]]:
    """Rising segments of `trace` prefixed by a zero sample.

    Returns ``(trough_end, onset, peak_start)`` triples in the indexing of
    `trace`; ``trough_end == -1`` stands for the zero start. Plateaus count
    once: a peak plateau is reported at its first index, and the rise
    begins right after the trough plateau ends.
    """
    x = np.concatenate([[0.0], np.asarray(trace, dtype=float)])
    starts, ends = _runs(x)
    vals = x[starts]
    out = []
    k = len(vals)
    for i in range(k - 1):
        # a trough run followed by a higher run starts a rise
        if vals[i + 1] <= vals[i]:
            continue
        if i > 0 and vals[i - 1] < vals[i]:
            continue  # interior of a rise, not its bottom
        j = i + 1
        while j + 1 < k and vals[j + 1] > vals[j]:
            j += 1
        out.append((ends[i] - 1, ends[i], starts[j] - 1))
    return out


def detect_spikes(
    states: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    theta: float,
) -> SpikeTrain:
    """Keep rises whose peak's lower band exceeds the preceding trough's upper band.

    Each kept rise becomes one spike, placed at the sample of the rise with
    the largest innovation ``x_t - theta x_{t-1}`` and carrying that
    innovation as amplitude. For a trace decaying from zero this is the
    first rising sample. A negative state relaxing towards zero also rises,
    with zero innovation, so taking the first sample would date an event
    riding on such a stretch to where the relaxation began. Rises without
    a positive innovation are skipped.
    """
    states = np.asarray(states, dtype=float)
    if lower.shape != states.shape or upper.shape != states.shape:
        raise ValueError("bands must have the same shape as states")
    w = extract_innovations(states, theta)
    coords, times, amps = [], [], []
    for j in range(states.shape[1]):
        for trough, onset, peak in rises(states[:, j]):
            base = 0.0 if trough < 0 else upper[trough, j]
            onset += int(np.argmax(w[onset:peak + 1, j]))
            if lower[peak, j] > base and w[onset, j] > 0:
                coords.append(j)
                times.append(onset)
                amps.append(w[onset, j])
    order = np.lexsort((times, coords))
    return SpikeTrain(
        coords=np.asarray(coords, dtype=int)[order],
        times=np.asarray(times, dtype=int)[order],
        amplitudes=np.asarray(amps, dtype=float)[order],
        meta={"theta": theta, "rule": "lower(peak) > upper(trough)"},
    )
