"""Source-guided pseudo-label refinement for unlabeled target samples.

Target samples are scored in the source-oriented space, split per predicted
class into a reliable half (score at or above the class mean) and the rest,
and each unreliable sample is moved to the nearest reliable class center under
a size-weighted cosine distance.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from dotuda.errors import FormatError
from dotuda.tensor import logsumexp_array

log = logging.getLogger(__name__)


class MetricKind(str, enum.Enum):
    CONFIDENCE = "confidence"
    NEG_ENTROPY = "neg_entropy"
    ENERGY = "energy"


@dataclass
class PseudoLabelState:
    labels: np.ndarray
    reliable: np.ndarray
    centers: np.ndarray
    center_valid: np.ndarray
    class_weights: np.ndarray
    metric_values: np.ndarray
    initial_labels: np.ndarray
    aborted: bool = False

    @property
    def reliable_ratio(self) -> float:
        return float(self.reliable.mean()) if self.reliable.size else 0.0

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "labels": self.labels.astype(np.float64),
            "reliable": self.reliable.astype(np.float64),
            "centers": self.centers,
            "center_valid": self.center_valid.astype(np.float64),
            "class_weights": self.class_weights,
            "metric_values": self.metric_values,
            "initial_labels": self.initial_labels.astype(np.float64),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], aborted: bool = False) -> "PseudoLabelState":
        return cls(
            labels=arrays["labels"].astype(np.int64),
            reliable=arrays["reliable"].astype(bool),
            centers=np.asarray(arrays["centers"], dtype=np.float64),
            center_valid=arrays["center_valid"].astype(bool),
            class_weights=np.asarray(arrays["class_weights"], dtype=np.float64),
            metric_values=np.asarray(arrays["metric_values"], dtype=np.float64),
            initial_labels=arrays["initial_labels"].astype(np.int64),
            aborted=aborted,
        )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def initial_predictions(fs_tgt: np.ndarray, head: Callable[[np.ndarray], np.ndarray]):
    """Argmax of the source head's softmax; ties go to the lowest class."""
    fs_tgt = np.asarray(fs_tgt, dtype=np.float64)
    if fs_tgt.shape[0] < 1:
        raise ValueError("initial_predictions needs at least one target sample")
    logits = np.asarray(head(fs_tgt), dtype=np.float64)
    probs = _softmax(logits)
    return np.argmax(logits, axis=1).astype(np.int64), probs, logits


def metric_delta(logits: np.ndarray, kind: MetricKind | str) -> np.ndarray:
    """Per-sample reliability score; larger means more reliable for every kind."""
    kind = MetricKind(kind)
    logits = np.asarray(logits, dtype=np.float64)
    if kind is MetricKind.ENERGY:
        return logsumexp_array(logits, axis=1)
    probs = _softmax(logits)
    if kind is MetricKind.CONFIDENCE:
        return probs.max(axis=1)
    log_p = logits - logsumexp_array(logits, axis=1)[:, None]
    return (probs * log_p).sum(axis=1)


def split_reliable(labels: np.ndarray, deltas: np.ndarray, num_classes: int):
    """Flag samples whose score reaches their predicted class's mean score.

    Returns ``(flags, members)`` where ``members[k]`` indexes the reliable
    samples predicted as class ``k``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if labels.shape != deltas.shape:
        raise ValueError(f"labels {labels.shape} and deltas {deltas.shape} are misaligned")
    flags = np.zeros(labels.shape[0], dtype=bool)
    members = []
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            members.append(idx)
            continue
        vals = deltas[idx]
        # The mean never exceeds the max; clamp so rounding cannot empty a class.
        threshold = min(math.fsum(vals) / idx.size, vals.max())
        chosen = idx[vals >= threshold]
        flags[chosen] = True
        members.append(chosen)
    return flags, members


def class_centers(fs_tgt: np.ndarray, members: list[np.ndarray]):
    """Mean source-oriented feature per class over its reliable samples."""
    fs_tgt = np.asarray(fs_tgt, dtype=np.float64)
    k = len(members)
    centers = np.zeros((k, fs_tgt.shape[1]))
    valid = np.zeros(k, dtype=bool)
    for c, idx in enumerate(members):
        if idx.size:
            centers[c] = fs_tgt[idx].mean(axis=0)
            valid[c] = True
    return centers, valid


def class_weights(members: list[np.ndarray]) -> np.ndarray:
    """``exp(|reliable_k| / |reliable|)``; zero marks a class with no reliable members."""
    sizes = np.array([idx.size for idx in members], dtype=np.float64)
    total = sizes.sum()
    if total == 0:
        return np.zeros_like(sizes)
    return np.where(sizes > 0, np.exp(sizes / total), 0.0)


def cosine_distance(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    fn = features / np.linalg.norm(features, axis=1, keepdims=True)
    cn = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    return 1.0 - fn @ cn.T


def reassign(fs_tgt: np.ndarray, state: PseudoLabelState) -> np.ndarray:
    """Keep reliable labels; move unreliable samples to the nearest weighted center."""
    labels = state.initial_labels.copy()
    valid = state.center_valid & (np.linalg.norm(state.centers, axis=1) > 0)
    if not valid.any():
        log.warning("refinement aborted: no valid class centers, keeping previous labels")
        state.aborted = True
        return state.labels.copy()
    unreliable = np.flatnonzero(~state.reliable)
    if unreliable.size:
        valid_idx = np.flatnonzero(valid)
        dist = cosine_distance(np.asarray(fs_tgt)[unreliable], state.centers[valid_idx])
        weighted = dist * state.class_weights[valid_idx][None, :]
        labels[unreliable] = valid_idx[np.argmin(weighted, axis=1)]
    return labels


def refine(
    fs_tgt: np.ndarray,
    head: Callable[[np.ndarray], np.ndarray],
    kind: MetricKind | str = MetricKind.ENERGY,
    previous_labels: np.ndarray | None = None,
) -> PseudoLabelState:
    """Predict, split, build centers and reassign in one deterministic pass."""
    fs_tgt = np.asarray(fs_tgt, dtype=np.float64)
    labels, _, logits = initial_predictions(fs_tgt, head)
    num_classes = logits.shape[1]
    deltas = metric_delta(logits, kind)
    flags, members = split_reliable(labels, deltas, num_classes)
    centers, valid = class_centers(fs_tgt, members)
    state = PseudoLabelState(
        labels=labels.copy() if previous_labels is None else np.asarray(previous_labels, dtype=np.int64).copy(),
        reliable=flags,
        centers=centers,
        center_valid=valid,
        class_weights=class_weights(members),
        metric_values=deltas,
        initial_labels=labels,
    )
    state.labels = reassign(fs_tgt, state)
    return state


def write_state_file(path, state: PseudoLabelState, sample_ids=None):
    """One JSON record per target sample: id, label, reliable flag, score."""
    ids = range(state.labels.shape[0]) if sample_ids is None else sample_ids
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for i, lab, rel, d in zip(ids, state.labels, state.reliable, state.metric_values):
            fh.write(json.dumps({"id": int(i), "label": int(lab), "reliable": bool(rel), "delta": float(d)}) + "\n")


def read_state_file(path) -> list[dict]:
    records = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed record") from exc
    return records
