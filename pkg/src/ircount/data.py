"""Dataset ingestion, per-session CV folds, window construction, scaling.

The on-disk format is a UTF-8 CSV with header
``session,frame_idx,label,confidence,p00..p77``: one row per 8x8 frame,
64 pixel columns in row-major order (temperatures as decimals),
``confidence`` in {0, 1}, rows grouped by session in acquisition order.

Low-confidence frames are dropped on load by default; a dropped frame
breaks window continuity, i.e. windows restart after the gap exactly as
at a session start.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

K_CLASSES = 4
DATA_ENV_VAR = "IRCOUNT_DATA"

_PIXEL_COLS = [f"p{i}{j}" for i in range(8) for j in range(8)]
CSV_HEADER = ["session", "frame_idx", "label", "confidence"] + _PIXEL_COLS


class DatasetError(ValueError):
    pass


@dataclass
class SessionRecord:
    session_id: int
    frames: np.ndarray  # (n, 8, 8) float32
    labels: np.ndarray  # (n,) int
    confidence: np.ndarray  # (n,) int
    segment_starts: list[int] = field(default_factory=list)  # window-continuity breaks

    def __len__(self):
        return len(self.frames)

    def segments(self):
        bounds = self.segment_starts + [len(self.frames)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            yield a, b


@dataclass
class Fold:
    test_session: int
    train_sessions: list[int]


@dataclass
class SampleSet:
    windows: np.ndarray  # (n, W, 8, 8)
    labels: np.ndarray  # (n,)
    session_ids: np.ndarray  # (n,)


def default_data_path() -> str | None:
    return os.environ.get(DATA_ENV_VAR)


def load_sessions(path, filter_low_confidence: bool = True) -> list[SessionRecord]:
    """Load and validate the CSV; optionally drop low-confidence frames."""
    rows_by_session: dict[int, list] = {}
    order: list[int] = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(lines)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty dataset file") from None
        if header != CSV_HEADER:
            raise DatasetError(f"{path}: unexpected header {header[:6]}...")
        last_session = None
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise DatasetError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields")
            try:
                session = int(row[0])
                frame_idx = int(row[1])
                label = int(row[2])
                conf = int(row[3])
                pixels = np.array(row[4:], dtype=np.float32)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed row ({exc})") from None
            if not 0 <= label < K_CLASSES:
                raise DatasetError(f"{path}:{lineno}: label {label} outside 0..3")
            if conf not in (0, 1):
                raise DatasetError(f"{path}:{lineno}: confidence must be 0 or 1")
            if session not in rows_by_session:
                rows_by_session[session] = []
                order.append(session)
            elif session != last_session:
                raise DatasetError(
                    f"{path}:{lineno}: session {session} rows are not contiguous"
                )
            rows_by_session[session].append((frame_idx, label, conf, pixels))
            last_session = session
    if not rows_by_session:
        raise DatasetError(f"{path}: no data rows")

    sessions = []
    for sid in order:
        rows = rows_by_session[sid]
        kept = [r for r in rows if r[2] == 1] if filter_low_confidence else rows
        if not kept:
            continue
        starts = [0]
        for i in range(1, len(kept)):
            if kept[i][0] != kept[i - 1][0] + 1:  # gap from filtering/acquisition
                starts.append(i)
        sessions.append(
            SessionRecord(
                session_id=sid,
                frames=np.stack([r[3].reshape(8, 8) for r in kept]),
                labels=np.array([r[1] for r in kept], dtype=int),
                confidence=np.array([r[2] for r in kept], dtype=int),
                segment_starts=starts,
            )
        )
    if not sessions:
        raise DatasetError(f"{path}: all frames filtered out")
    return sessions


def total_samples(sessions) -> int:
    return sum(len(s) for s in sessions)


def make_folds(sessions) -> list[Fold]:
    """Leave-one-session-out folds; the first (largest) session never rotates
    into the test set."""
    ids = [s.session_id for s in sessions]
    if len(ids) < 2:
        raise DatasetError("cross validation needs at least two sessions")
    anchor = ids[0]
    return [
        Fold(test_session=sid, train_sessions=[o for o in ids if o != sid])
        for sid in ids
        if sid != anchor
    ]


def make_windows(session: SessionRecord, window: int) -> SampleSet:
    """One sample per retained frame; windows never span a continuity break.

    The first window-1 samples of each segment replicate the segment's
    first frame on the left, so the sample count does not depend on the
    window length.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    chunks = []
    for a, b in session.segments():
        frames = session.frames[a:b]
        padded = np.concatenate([np.repeat(frames[:1], window - 1, axis=0), frames]) \
            if window > 1 else frames
        win = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0)
        chunks.append(np.moveaxis(win, -1, 1))  # (n, W, 8, 8)
    windows = np.concatenate(chunks)
    return SampleSet(
        windows=windows,
        labels=session.labels.copy(),
        session_ids=np.full(len(session.labels), session.session_id, dtype=int),
    )


def fold_samples(sessions, fold: Fold, window: int) -> tuple[SampleSet, SampleSet]:
    """Materialize (train, test) sample sets for one fold."""
    by_id = {s.session_id: s for s in sessions}
    def gather(ids):
        sets = [make_windows(by_id[i], window) for i in ids]
        return SampleSet(
            windows=np.concatenate([s.windows for s in sets]),
            labels=np.concatenate([s.labels for s in sets]),
            session_ids=np.concatenate([s.session_ids for s in sets]),
        )
    return gather(fold.train_sessions), gather([fold.test_session])


def class_weights(labels, k: int = K_CLASSES) -> np.ndarray:
    """Inverse-frequency weights: w_c = N / (K * N_c); 0 for absent classes."""
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise ValueError("empty training set")
    counts = np.bincount(labels, minlength=k)[:k]
    weights = np.zeros(k, dtype=np.float64)
    present = counts > 0
    weights[present] = len(labels) / (k * counts[present])
    return weights


def normalization_stats(windows) -> tuple[float, float]:
    """Scalar mean/std over all training pixels (std floored at 1e-6)."""
    x = np.asarray(windows, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty training set")
    return float(x.mean()), float(max(x.std(), 1e-6))


def normalize(windows, mean: float, std: float):
    return ((np.asarray(windows, dtype=np.float32) - mean) / std).astype(np.float32)


def write_sessions_csv(path, sessions, digest: str | None = None) -> None:
    """Write sessions back in the ingestion schema (used by fixtures/CLI)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if digest:
            fh.write(f"# ircount-config-digest: {digest}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for s in sessions:
            for i in range(len(s)):
                writer.writerow(
                    [s.session_id, i, int(s.labels[i]), int(s.confidence[i])]
                    + [f"{v:.3f}" for v in s.frames[i].ravel()]
                )
