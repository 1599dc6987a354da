"""Synthetic 8x8 thermal sessions: moving warm spots over an ambient floor.

Used by the test fixtures and by the ``synth`` CLI command to exercise
the full pipeline when the real recordings are not available. People are
modeled as Gaussian hot spots a few degrees above ambient that wander
across the field of view.
"""

from __future__ import annotations

import numpy as np

from .data import SessionRecord

GRID = 8


def gaussian_spot(center, peak, sigma):
    """A peak-degC Gaussian bump centered at (row, col) on the 8x8 grid."""
    r, c = np.meshgrid(np.arange(GRID), np.arange(GRID), indexing="ij")
    d2 = (r - center[0]) ** 2 + (c - center[1]) ** 2
    return peak * np.exp(-d2 / (2.0 * sigma**2))


# spread-out anchor positions so simultaneous people stay separable
_ANCHORS = [(2.0, 2.0), (5.5, 5.5), (1.5, 5.5), (5.5, 1.5)]


def scripted_session(
    script,
    session_id: int = 1,
    ambient: float = 22.0,
    peak: float = 4.0,
    sigma: float = 0.9,
) -> SessionRecord:
    """Deterministic noiseless session from [(n_frames, n_people), ...].

    People sit at fixed, well-separated positions, so a correct
    blob-counting pipeline recovers the script exactly once its
    background has settled.
    """
    frames = []
    labels = []
    for n_frames, n_people in script:
        frame = np.full((GRID, GRID), ambient)
        for p in range(n_people):
            frame = frame + gaussian_spot(_ANCHORS[p], peak, sigma)
        for _ in range(n_frames):
            frames.append(frame)
            labels.append(min(n_people, 3))
    frames = np.array(frames, dtype=np.float32)
    labels = np.array(labels, dtype=int)
    return SessionRecord(
        session_id=session_id,
        frames=frames,
        labels=labels,
        confidence=np.ones(len(labels), dtype=int),
        segment_starts=[0],
    )


def make_session(
    session_id: int,
    n_frames: int,
    rng: np.random.Generator,
    ambient: float | None = None,
    noise: float = 0.08,
    max_people: int = 3,
) -> SessionRecord:
    """A randomized session: people enter, wander and leave over time."""
    if ambient is None:
        ambient = float(rng.uniform(20.0, 24.0))
    positions: list[np.ndarray] = []
    frames = np.empty((n_frames, GRID, GRID), dtype=np.float32)
    labels = np.empty(n_frames, dtype=int)
    for t in range(n_frames):
        # birth/death events keep the count moving through 0..max_people
        if rng.random() < 0.03 and len(positions) < max_people:
            positions.append(np.array(rng.uniform(1.0, 6.0, size=2)))
        if rng.random() < 0.02 and positions:
            positions.pop(rng.integers(len(positions)))
        frame = np.full((GRID, GRID), ambient) + rng.normal(0, noise, (GRID, GRID))
        for pos in positions:
            pos += rng.normal(0, 0.25, size=2)
            np.clip(pos, 0.5, 6.5, out=pos)
            frame = frame + gaussian_spot(pos, peak=rng.uniform(3.0, 4.5), sigma=0.9)
        frames[t] = frame
        labels[t] = len(positions)
    confidence = np.ones(n_frames, dtype=int)
    return SessionRecord(
        session_id=session_id,
        frames=frames,
        labels=labels,
        confidence=confidence,
        segment_starts=[0],
    )


def make_dataset(
    n_sessions: int = 5,
    frames_per_session: int = 600,
    seed: int = 0,
    first_session_scale: int = 4,
) -> list[SessionRecord]:
    """A LINAIGE-shaped synthetic dataset: the first session is the largest."""
    rng = np.random.default_rng(seed)
    sessions = []
    for sid in range(1, n_sessions + 1):
        n = frames_per_session * (first_session_scale if sid == 1 else 1)
        sessions.append(make_session(sid, n, rng))
    return sessions
