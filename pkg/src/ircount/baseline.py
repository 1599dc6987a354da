"""Deterministic people counter: smoothing, bilinear interpolation,
background subtraction, blob labeling, threshold classification, and a
periodically updated background reference.

The pipeline order follows the classic ceiling-mounted Grid-EYE approach;
every numeric constant below is a configurable default of this
implementation, so all of them are recorded alongside any results
produced with them.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

MAX_COUNT = 3  # clamp predictions to the dataset's 0..3 range


@dataclass
class BaselineConfig:
    smoothing_alpha: float = 0.6  # EMA weight of the newest frame
    interpolation_factor: int = 2  # 8x8 -> 15x15 bilinear grid
    detect_threshold: float = 1.5  # degC above background
    min_blob_area: int = 2  # interpolated pixels
    max_blob_area: int = 40
    background_rate: float = 0.01  # EMA rate outside blobs
    warmup_frames: int = 20

    def __post_init__(self):
        if not 0 < self.smoothing_alpha <= 1:
            raise ValueError("smoothing_alpha must be in (0, 1]")
        if self.detect_threshold <= 0:
            raise ValueError("detect_threshold must be positive")
        if self.min_blob_area > self.max_blob_area:
            raise ValueError("min_blob_area must not exceed max_blob_area")

    @classmethod
    def from_file(cls, path) -> "BaselineConfig":
        """Parse a ``key = value`` text config; unknown keys are an error."""
        values = {}
        valid = {f.name: f.type for f in fields(cls)}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in valid:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                caster = int if "int" in str(valid[key]) else float
                values[key] = caster(raw)
        return cls(**values)


@dataclass
class Blob:
    pixels: np.ndarray  # (n, 2) row/col indices on the interpolated grid
    area: int
    peak: float  # max temperature excess over background
    centroid: tuple[float, float]


_EIGHT_CONN = np.ones((3, 3), dtype=int)


def bilinear_upsample(frame: np.ndarray, factor: int) -> np.ndarray:
    """Linear interpolation onto the ((H-1)*f+1) x ((W-1)*f+1) grid."""
    if factor == 1:
        return np.asarray(frame, dtype=np.float64)
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape
    rows = np.linspace(0, h - 1, (h - 1) * factor + 1)
    cols = np.linspace(0, w - 1, (w - 1) * factor + 1)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    return (
        frame[np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
        + frame[np.ix_(r1, c0)] * fr * (1 - fc)
        + frame[np.ix_(r0, c1)] * (1 - fr) * fc
        + frame[np.ix_(r1, c1)] * fr * fc
    )


def preprocess(frame, prev_smoothed, cfg: BaselineConfig):
    """EMA temporal smoothing then bilinear upsampling.

    Returns (interpolated frame, new smoothing state). The first frame
    seeds the EMA and passes through unchanged.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if prev_smoothed is None:
        smoothed = frame
    else:
        a = cfg.smoothing_alpha
        smoothed = a * frame + (1 - a) * prev_smoothed
    return bilinear_upsample(smoothed, cfg.interpolation_factor), smoothed


def segment(frame, background, cfg: BaselineConfig) -> list[Blob]:
    """Hot-area extraction: threshold against the background, then
    8-connected component labeling."""
    frame = np.asarray(frame, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if frame.shape != background.shape:
        raise ValueError("frame and background shapes differ")
    excess = frame - background
    mask = excess > cfg.detect_threshold
    labels, n = ndimage.label(mask, structure=_EIGHT_CONN)
    blobs = []
    for lab in range(1, n + 1):
        pix = np.argwhere(labels == lab)
        vals = excess[labels == lab]
        blobs.append(
            Blob(
                pixels=pix,
                area=len(pix),
                peak=float(vals.max()),
                centroid=tuple(pix.mean(axis=0)),
            )
        )
    return blobs


def classify_and_count(blobs, cfg: BaselineConfig) -> int:
    """Person count: blobs within the area bounds, clamped to 0..3."""
    count = sum(
        1
        for b in blobs
        if cfg.min_blob_area <= b.area <= cfg.max_blob_area
        and b.peak >= cfg.detect_threshold
    )
    return min(count, MAX_COUNT)


def update_background(background, frame, blobs, cfg: BaselineConfig):
    """Slow EMA toward the current frame, frozen inside detected blobs."""
    background = np.asarray(background, dtype=np.float64)
    frame = np.asarray(frame, dtype=np.float64)
    mask = np.zeros(background.shape, dtype=bool)
    for b in blobs:
        mask[b.pixels[:, 0], b.pixels[:, 1]] = True
    beta = cfg.background_rate
    out = background.copy()
    out[~mask] = (1 - beta) * background[~mask] + beta * frame[~mask]
    return out


class BaselineCounter:
    """Stateful per-session processor; feed frames in acquisition order."""

    def __init__(self, cfg: BaselineConfig | None = None):
        self.cfg = cfg or BaselineConfig()
        self.reset()

    def reset(self):
        self._smoothed = None
        self._background = None
        self._warmup_sum = None
        self._seen = 0

    def process(self, frame) -> int:
        cfg = self.cfg
        interp, self._smoothed = preprocess(frame, self._smoothed, cfg)
        self._seen += 1
        if self._seen <= cfg.warmup_frames:
            # warmup: background is the unconditional running mean
            if self._warmup_sum is None:
                self._warmup_sum = np.zeros_like(interp)
            self._warmup_sum += interp
            self._background = self._warmup_sum / self._seen
            blobs = segment(interp, self._background, cfg)
            return classify_and_count(blobs, cfg)
        blobs = segment(interp, self._background, cfg)
        count = classify_and_count(blobs, cfg)
        self._background = update_background(self._background, interp, blobs, cfg)
        return count


def run_baseline(frames, cfg: BaselineConfig | None = None) -> np.ndarray:
    """Per-frame counts for one session's frames (acquisition order)."""
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("empty session")
    counter = BaselineCounter(cfg)
    return np.array([counter.process(f) for f in frames], dtype=int)
