"""High-level utterance features: 4 functionals over each emotion posterior channel."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .corpus import EMOTION_CLASSES, UtteranceRecord

HLF_DIM = 16
FUNCTIONALS = ("min", "max", "mean", "frac")

HLF_FEATURE_NAMES = tuple(
    f"{label.value}_{func}" for label in EMOTION_CLASSES for func in FUNCTIONALS
)

_LABEL_COLUMNS = ("emotion", "gender", "naturalness", "speaker_id", "corpus_id")


def compute_hlf(posteriors: np.ndarray, theta: float = 0.2) -> np.ndarray:
    """Collapse an (n, 4) posterior sequence to 16 values.

    Per class, in order: min, max, mean, and the fraction of steps whose
    posterior exceeds ``theta``. The result is invariant to the time order
    of the rows.
    """
    if not (0.0 < theta < 1.0):
        raise ValueError("theta must lie in (0, 1)")
    post = np.asarray(posteriors, dtype=np.float64)
    if post.ndim != 2 or post.shape[0] < 1:
        raise ValueError("empty posterior sequence")
    if post.shape[1] != len(EMOTION_CLASSES):
        raise ValueError(f"expected {len(EMOTION_CLASSES)} posterior channels, got {post.shape[1]}")
    if np.any(np.abs(post.sum(axis=1) - 1.0) > 1e-6) or np.any(post < -1e-9):
        raise ValueError("malformed posterior rows (must be distributions)")
    out = np.empty(HLF_DIM)
    for k in range(post.shape[1]):
        channel = post[:, k]
        out[4 * k : 4 * k + 4] = (
            channel.min(),
            channel.max(),
            channel.mean(),
            float(np.count_nonzero(channel > theta)) / channel.size,
        )
    return out


def write_hlf_csv(path: str | Path, rows) -> Path:
    """Write an HLF table: utterance_id, 16 feature columns, then label columns.

    ``rows`` is an iterable of (utterance_id, vector, UtteranceRecord).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("utterance_id",) + HLF_FEATURE_NAMES + _LABEL_COLUMNS)
        for uid, vector, rec in rows:
            vector = np.asarray(vector, dtype=np.float64)
            if vector.shape != (HLF_DIM,):
                raise ValueError(f"HLF vector for {uid!r} must have {HLF_DIM} values")
            writer.writerow(
                [uid]
                + [repr(float(v)) for v in vector]
                + [rec.emotion.value, rec.gender.value, rec.naturalness.value,
                   rec.speaker_id, rec.corpus_id]
            )
    return path


def read_hlf_csv(path: str | Path):
    """Read an HLF table back as (ids, matrix, labels dict of column lists)."""
    expected = ("utterance_id",) + HLF_FEATURE_NAMES + _LABEL_COLUMNS
    ids: list[str] = []
    vectors: list[list[float]] = []
    labels: dict[str, list[str]] = {name: [] for name in _LABEL_COLUMNS}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != expected:
            raise ValueError(f"unexpected HLF header in {path}")
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            vectors.append([float(v) for v in row[1 : 1 + HLF_DIM]])
            for j, name in enumerate(_LABEL_COLUMNS):
                labels[name].append(row[1 + HLF_DIM + j])
    if not ids:
        raise ValueError(f"empty HLF table: {path}")
    return ids, np.array(vectors), labels
