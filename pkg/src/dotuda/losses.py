"""Training objective: per-domain cross-entropy, cross-domain supervised
contrastive alignment in each domain-oriented space, and a penalty on the
similarity between the two representations of the same image."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from dotuda import tensor as T
from dotuda.errors import ConfigError, DimensionError
from dotuda.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lam: float = 1.0
    beta: float = 0.1
    tau: float = 0.07

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be non-negative, got lambda={self.lam}, beta={self.beta}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass
class BatchFeatures:
    fs_src: Tensor
    ft_src: Tensor
    fs_tgt: Tensor
    ft_tgt: Tensor
    source_labels: np.ndarray
    target_pseudo_labels: np.ndarray

    def __post_init__(self):
        self.source_labels = np.asarray(self.source_labels, dtype=np.int64).reshape(-1)
        self.target_pseudo_labels = np.asarray(self.target_pseudo_labels, dtype=np.int64).reshape(-1)
        bs, bt = self.fs_src.shape[0], self.fs_tgt.shape[0]
        if self.ft_src.shape != self.fs_src.shape or self.ft_tgt.shape != self.fs_tgt.shape:
            raise DimensionError("f_s and f_t features must share shapes within a domain")
        if self.source_labels.shape[0] != bs:
            raise DimensionError(f"{self.source_labels.shape[0]} source labels for {bs} source samples")
        if self.target_pseudo_labels.shape[0] != bt:
            raise DimensionError(f"{self.target_pseudo_labels.shape[0]} pseudo-labels for {bt} target samples")


@dataclass
class LossReport:
    sup_s: float
    sup_t: float
    con_s: float
    con_t: float
    diff: float
    total: float
    skipped_anchors: int
    con_s_denominator: int
    con_t_denominator: int

    def to_dict(self) -> dict:
        return asdict(self)


def source_only_loss(fs_src: Tensor, labels, head) -> Tensor:
    if fs_src.shape[0] < 1:
        raise DimensionError("empty source batch")
    w, b = head
    return T.cross_entropy_with_logits(fs_src @ w + b, labels)


def sup_loss_source(batch: BatchFeatures, head) -> Tensor:
    """Cross-entropy of the source head on source-oriented source features."""
    return source_only_loss(batch.fs_src, batch.source_labels, head)


def sup_loss_target(batch: BatchFeatures, head) -> Tensor:
    """Cross-entropy of the target head on target-oriented target features, against pseudo-labels."""
    if batch.ft_tgt.shape[0] < 1:
        raise DimensionError("empty target batch")
    w, b = head
    return T.cross_entropy_with_logits(batch.ft_tgt @ w + b, batch.target_pseudo_labels)


def supervised_contrastive(
    anchors: Tensor, anchor_labels, keys: Tensor, key_labels, tau: float
) -> tuple[Tensor, int]:
    """Mean over anchors of ``-mean_{p in P} log softmax(sim / tau)[p]``.

    Similarities are cosines between L2-normalized anchors and keys; the
    softmax runs over all keys. Anchors whose positive set is empty are skipped
    and counted.
    """
    if keys.shape[0] < 2:
        raise DimensionError(f"contrastive loss needs at least 2 keys, got {keys.shape[0]}")
    anchor_labels = np.asarray(anchor_labels).reshape(-1)
    key_labels = np.asarray(key_labels).reshape(-1)
    positives = (anchor_labels[:, None] == key_labels[None, :]).astype(np.float64)
    counts = positives.sum(axis=1)
    valid = counts > 0
    skipped = int((~valid).sum())
    if not valid.any():
        log.warning("contrastive loss: all %d anchors have empty positive sets", anchors.shape[0])
        return Tensor(0.0), skipped
    a = T.l2_normalize(anchors)
    k = T.l2_normalize(keys)
    logits = (a @ k.transpose(1, 0)) * (1.0 / tau)
    log_prob = T.log_softmax(logits)
    # Per-anchor weight 1/|P|, zero for skipped anchors, then mean over kept anchors.
    weights = np.where(valid, 1.0 / np.maximum(counts, 1.0), 0.0)[:, None] * positives
    per_anchor = (log_prob * weights).sum(axis=1)
    return per_anchor.sum() * (-1.0 / valid.sum()), skipped


def contrastive_source(batch: BatchFeatures, tau: float) -> tuple[Tensor, int]:
    """Target anchors against source keys in the source-oriented space."""
    return supervised_contrastive(
        batch.fs_tgt, batch.target_pseudo_labels, batch.fs_src, batch.source_labels, tau
    )


def contrastive_target(batch: BatchFeatures, tau: float) -> tuple[Tensor, int]:
    """Source anchors against target keys in the target-oriented space."""
    return supervised_contrastive(
        batch.ft_src, batch.source_labels, batch.ft_tgt, batch.target_pseudo_labels, tau
    )


def diff_regularizer(batch: BatchFeatures) -> Tensor:
    """Mean squared cosine between each sample's f_s and f_t."""
    fs = T.concat([batch.fs_src, batch.fs_tgt], axis=0)
    ft = T.concat([batch.ft_src, batch.ft_tgt], axis=0)
    if fs.shape[0] < 1:
        raise DimensionError("diff regularizer over an empty batch")
    cos = (T.l2_normalize(fs) * T.l2_normalize(ft)).sum(axis=1)
    return T.square(cos).mean()


def total_loss(batch: BatchFeatures, model, weights: LossWeights) -> tuple[Tensor, LossReport]:
    """``sup_s + sup_t + lam * (con_s + con_t) + beta * diff`` and its report."""
    sup_s = sup_loss_source(batch, model.head(0))
    sup_t = sup_loss_target(batch, model.head(model.config.num_domain_tokens - 1))
    total = sup_s + sup_t
    con_s_v = con_t_v = diff_v = 0.0
    skipped = 0
    if weights.lam > 0:
        con_s, skip_s = contrastive_source(batch, weights.tau)
        con_t, skip_t = contrastive_target(batch, weights.tau)
        total = total + (con_s + con_t) * weights.lam
        con_s_v, con_t_v = con_s.item(), con_t.item()
        skipped = skip_s + skip_t
    if weights.beta > 0:
        diff = diff_regularizer(batch)
        total = total + diff * weights.beta
        diff_v = diff.item()
    report = LossReport(
        sup_s=sup_s.item(),
        sup_t=sup_t.item(),
        con_s=con_s_v,
        con_t=con_t_v,
        diff=diff_v,
        total=total.item(),
        skipped_anchors=skipped,
        con_s_denominator=int(batch.fs_src.shape[0]),
        con_t_denominator=int(batch.ft_tgt.shape[0]),
    )
    return total, report
