"""Two-stage training: a source-only model supplies initial target pseudo-labels,
then a freshly initialized model is trained on the full objective while the
pseudo-labels are refined between epochs.

Target ground-truth labels are read only by the evaluation helpers that feed
the metrics log; nothing on the gradient path touches them.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dotuda import losses
from dotuda import tensor as T
from dotuda.data import DomainDataset, batches
from dotuda.errors import ConfigError, FormatError
from dotuda.losses import BatchFeatures, LossWeights
from dotuda.model import DotVitConfig, DotVitModel
from dotuda.pseudo_labels import MetricKind, PseudoLabelState, refine
from dotuda.serialize import load_archive, save_archive

log = logging.getLogger(__name__)

# Stable column order of the metrics log and of the CSV export.
METRIC_COLUMNS = (
    "stage",
    "epoch",
    "steps",
    "sup_s",
    "sup_t",
    "con_s",
    "con_t",
    "diff",
    "total",
    "skipped_anchors",
    "lambda",
    "beta",
    "tau",
    "source_acc",
    "target_acc",
    "target_acc_fs_hs",
    "source_acc_ft_ht",
    "pl_acc_initial",
    "pl_acc",
    "reliable_ratio",
    "reliable_acc",
    "refined",
    "token_cosine",
)


@dataclass
class TrainConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 40
    refine_every: int = 1
    refine_start: int = 20
    lr: float = 3e-3
    stage1_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    metric: str = MetricKind.ENERGY.value
    seed: int = 0
    augment: bool = True
    refine: bool = True
    warm_start: bool = False
    refine_space: str = "source"
    eval_workers: int = 1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.metric = MetricKind(self.metric).value
        if self.refine_every < 1:
            raise ConfigError("refine_every must be >= 1")
        if self.refine_start < 0:
            raise ConfigError("refine_start must be >= 0")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not (self.lr > 0 and self.stage1_lr > 0 and self.momentum >= 0 and self.weight_decay >= 0):
            raise ConfigError("lr must be positive, momentum and weight_decay non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.refine_space not in ("source", "target"):
            raise ConfigError("refine_space must be 'source' or 'target'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    model: DotVitModel
    optimizer: T.SGD
    pseudo: PseudoLabelState
    epoch: int = 0
    stage: int = 2
    metrics_log: list[dict] = field(default_factory=list)


@dataclass
class EvalResult:
    accuracy: float
    per_class: list[float]
    correct: int
    total: int

    def to_dict(self) -> dict:
        return asdict(self)


# features and evaluation ------------------------------------------------------

def _domain_index(model: DotVitModel, which: str) -> int:
    if which not in ("s", "t"):
        raise ValueError(f"which must be 's' or 't', got {which!r}")
    return 0 if which == "s" else model.config.num_domain_tokens - 1


def extract_features(model: DotVitModel, images: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """(f_s, f_t) as numpy arrays, computed without recording a graph."""
    fs, ft = [], []
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out = model.encode(images[start : start + batch_size])
            fs.append(out.source_oriented.data)
            ft.append(out.target_oriented.data)
    return np.concatenate(fs), np.concatenate(ft)


def _predict(model: DotVitModel, images: np.ndarray, head: int, space: int) -> np.ndarray:
    with T.no_grad():
        feats = model.domain_features(images, space)
        return np.argmax(model.classify(feats, head).data, axis=1)


def evaluate(
    model: DotVitModel,
    dataset: DomainDataset,
    head: str = "t",
    space: str | None = None,
    workers: int = 1,
    batch_size: int = 128,
) -> EvalResult:
    """Argmax accuracy of ``h_head(f_space(x))`` plus per-class accuracy."""
    space = head if space is None else space
    h, s = _domain_index(model, head), _domain_index(model, space)
    n = len(dataset)
    chunks = [(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]

    def run(chunk):
        lo, hi = chunk
        pred = _predict(model, dataset.images[lo:hi], h, s)
        return pred, dataset.labels[lo:hi]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    num_classes = max(model.config.num_classes, int(dataset.labels.max()) + 1)
    hits = np.zeros(num_classes, dtype=np.int64)
    seen = np.zeros(num_classes, dtype=np.int64)
    for pred, labels in parts:
        np.add.at(seen, labels, 1)
        np.add.at(hits, labels[pred == labels], 1)
    per_class = [float(hits[k] / seen[k]) if seen[k] else 0.0 for k in range(num_classes)]
    correct, total = int(hits.sum()), int(seen.sum())
    return EvalResult(correct / total if total else 0.0, per_class, correct, total)


def token_divergence(model: DotVitModel, dataset: DomainDataset) -> float:
    """Mean cosine similarity between f_s(x) and f_t(x) over the dataset."""
    fs, ft = extract_features(model, dataset.images)
    cos = (fs * ft).sum(axis=1) / (np.linalg.norm(fs, axis=1) * np.linalg.norm(ft, axis=1))
    return float(cos.mean())


def refine_labels(
    model: DotVitModel,
    target: DomainDataset,
    cfg: TrainConfig,
    previous: np.ndarray | None = None,
) -> PseudoLabelState:
    fs, ft = extract_features(model, target.images)
    if cfg.refine_space == "target":
        return refine(ft, model.head_fn(model.config.num_domain_tokens - 1), cfg.metric, previous)
    return refine(fs, model.head_fn(0), cfg.metric, previous)


def pseudo_label_quality(state: PseudoLabelState, truth: np.ndarray) -> dict:
    """Evaluation-only comparison of pseudo-labels against held-out labels."""
    rel = state.reliable
    return {
        "pl_acc_initial": float(np.mean(state.initial_labels == truth)),
        "pl_acc": float(np.mean(state.labels == truth)),
        "reliable_ratio": float(rel.mean()),
        "reliable_acc": float(np.mean(state.labels[rel] == truth[rel])) if rel.any() else 0.0,
    }


def _eval_record(model: DotVitModel, source: DomainDataset, target: DomainDataset, cfg: TrainConfig) -> dict:
    last = model.config.num_domain_tokens - 1
    s_fs, s_ft = extract_features(model, source.images)
    t_fs, t_ft = extract_features(model, target.images)

    def acc(feats, head, labels):
        return float(np.mean(np.argmax(model.head_fn(head)(feats), axis=1) == labels))

    cos = (t_fs * t_ft).sum(axis=1) / (np.linalg.norm(t_fs, axis=1) * np.linalg.norm(t_ft, axis=1))
    return {
        "source_acc": acc(s_fs, 0, source.labels),
        "target_acc": acc(t_ft, last, target.labels),
        "target_acc_fs_hs": acc(t_fs, 0, target.labels),
        "source_acc_ft_ht": acc(s_ft, last, source.labels),
        "token_cosine": float(cos.mean()),
    }


def _record(stage: int, epoch: int, steps: int, loss_means: dict, cfg: TrainConfig, extra: dict) -> dict:
    rec = {c: 0.0 for c in METRIC_COLUMNS}
    rec.update(stage=stage, epoch=epoch, steps=steps, refined=False, skipped_anchors=0)
    rec.update({"lambda": cfg.weights.lam, "beta": cfg.weights.beta, "tau": cfg.weights.tau})
    rec.update(loss_means)
    rec.update(extra)
    return {c: rec[c] for c in METRIC_COLUMNS}


def _mean_reports(reports: list[dict]) -> dict:
    if not reports:
        return {}
    keys = ("sup_s", "sup_t", "con_s", "con_t", "diff", "total")
    out = {k: float(np.mean([r[k] for r in reports])) for k in keys}
    out["skipped_anchors"] = int(sum(r["skipped_anchors"] for r in reports))
    return out


# stage 1 ------------------------------------------------------------------------

def _stage_seed(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1000 + stage])


def stage1(
    source: DomainDataset,
    target: DomainDataset,
    model_cfg: DotVitConfig,
    cfg: TrainConfig,
    sink=None,
) -> tuple[DotVitModel, PseudoLabelState, list[dict]]:
    """Source-only training of f_s and h_s, then initial pseudo-labels by refinement."""
    model = DotVitModel(model_cfg, rng=_stage_seed(cfg.seed, 1))
    unused = {f"heads.{k}." for k in range(1, model_cfg.num_domain_tokens)}
    params = [p for n, p in model.params.items() if not any(n.startswith(u) for u in unused)]
    opt = T.SGD(params, cfg.stage1_lr, cfg.momentum, cfg.weight_decay)
    records = []
    for epoch in range(cfg.stage1_epochs):
        reports = []
        for idx, imgs in batches(source, cfg.batch_size, cfg.seed, epoch, cfg.augment, stream=1):
            opt.zero_grad()
            fs = model.domain_features(imgs, 0)
            loss = losses.source_only_loss(fs, source.labels[idx], model.head(0))
            loss.backward()
            opt.step()
            v = loss.item()
            reports.append({"sup_s": v, "sup_t": 0.0, "con_s": 0.0, "con_t": 0.0, "diff": 0.0, "total": v,
                            "skipped_anchors": 0})
        records.append(_record(1, epoch, len(reports), _mean_reports(reports), cfg,
                               _eval_record(model, source, target, cfg)))
    pseudo = refine_labels(model, target, cfg)
    if records:
        records[-1].update(pseudo_label_quality(pseudo, target.labels), refined=True)
    if sink:
        for rec in records:
            sink(rec)
    return model, pseudo, records


# stage 2 ------------------------------------------------------------------------

def init_stage2(model_cfg: DotVitConfig, cfg: TrainConfig, pseudo: PseudoLabelState,
                stage1_model: DotVitModel | None = None) -> TrainState:
    if cfg.warm_start and stage1_model is not None:
        model = stage1_model.copy()
        # Classifiers are always re-drawn.
        fresh = DotVitModel(model_cfg, rng=_stage_seed(cfg.seed, 2))
        for name, p in fresh.params.items():
            if name.startswith("heads."):
                model.params[name].data = p.data.copy()
    else:
        model = DotVitModel(model_cfg, rng=_stage_seed(cfg.seed, 2))
    opt = T.SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    return TrainState(model=model, optimizer=opt, pseudo=pseudo, epoch=0, stage=2)


def stage2_epoch(state: TrainState, source: DomainDataset, target: DomainDataset, cfg: TrainConfig) -> list[dict]:
    """One epoch of the full objective over paired source/target batches."""
    model, opt = state.model, state.optimizer
    pseudo_labels = state.pseudo.labels
    src_stream = batches(source, cfg.batch_size, cfg.seed, state.epoch, cfg.augment, stream=2)
    tgt_stream = batches(target, cfg.batch_size, cfg.seed, state.epoch, cfg.augment, stream=3)
    reports = []
    for (si, s_imgs), (ti, t_imgs) in zip(src_stream, tgt_stream):
        opt.zero_grad()
        out = model.encode(np.concatenate([s_imgs, t_imgs]))
        bs = s_imgs.shape[0]
        batch = BatchFeatures(
            fs_src=out.source_oriented[:bs],
            ft_src=out.target_oriented[:bs],
            fs_tgt=out.source_oriented[bs:],
            ft_tgt=out.target_oriented[bs:],
            source_labels=source.labels[si],
            target_pseudo_labels=pseudo_labels[ti],
        )
        loss, report = losses.total_loss(batch, model, cfg.weights)
        loss.backward()
        opt.step()
        reports.append(report.to_dict())
    return reports


def stage2(
    source: DomainDataset,
    target: DomainDataset,
    cfg: TrainConfig,
    state: TrainState,
    sink=None,
    checkpoint_fn=None,
) -> TrainState:
    """Continue stage 2 from ``state.epoch`` until ``cfg.stage2_epochs``."""
    while state.epoch < cfg.stage2_epochs:
        reports = stage2_epoch(state, source, target, cfg)
        extra = _eval_record(state.model, source, target, cfg)
        done = state.epoch + 1
        if cfg.refine and done >= cfg.refine_start and done % cfg.refine_every == 0:
            new = refine_labels(state.model, target, cfg, previous=state.pseudo.labels)
            if new.aborted:
                log.warning("epoch %d: refinement aborted, keeping labels", state.epoch)
            state.pseudo = new
            extra.update(pseudo_label_quality(new, target.labels), refined=True)
        else:
            q = pseudo_label_quality(state.pseudo, target.labels)
            extra.update(pl_acc=q["pl_acc"], pl_acc_initial=q["pl_acc_initial"])
        rec = _record(2, state.epoch, len(reports), _mean_reports(reports), cfg, extra)
        state.metrics_log.append(rec)
        if sink:
            sink(rec)
        state.epoch += 1
        if checkpoint_fn:
            checkpoint_fn(state)
    return state


# checkpoints ----------------------------------------------------------------------

def save_checkpoint(path, state: TrainState, model_cfg: DotVitConfig, cfg: TrainConfig):
    tensors = {f"model/{n}": a for n, a in state.model.state_dict().items()}
    for i, v in enumerate(state.optimizer.velocities):
        if v is not None:
            tensors[f"velocity/{i:04d}"] = v
    for n, a in state.pseudo.to_arrays().items():
        tensors[f"pseudo/{n}"] = a
    manifest = {
        "kind": "dotuda-checkpoint",
        "model_config": model_cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "epoch": state.epoch,
        "stage": state.stage,
        "param_order": [p.name for p in state.optimizer.params],
        "pseudo_aborted": state.pseudo.aborted,
    }
    save_archive(path, manifest, tensors)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[TrainState, DotVitConfig, TrainConfig]:
    manifest, tensors = load_archive(path)
    if manifest.get("kind") != "dotuda-checkpoint":
        raise FormatError(f"{path}: not a checkpoint")
    model_cfg = DotVitConfig(**manifest["model_config"])
    saved_cfg = TrainConfig(**manifest["train_config"])
    cfg = saved_cfg if cfg is None else cfg
    model = DotVitModel(model_cfg, seed=0)
    model.load_state_dict({n[len("model/"):]: a for n, a in tensors.items() if n.startswith("model/")})
    by_name = model.params
    params = [by_name[n] for n in manifest["param_order"]]
    opt = T.SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    opt.velocities = [tensors.get(f"velocity/{i:04d}") for i in range(len(params))]
    pseudo = PseudoLabelState.from_arrays(
        {n[len("pseudo/"):]: a for n, a in tensors.items() if n.startswith("pseudo/")},
        aborted=manifest.get("pseudo_aborted", False),
    )
    state = TrainState(model=model, optimizer=opt, pseudo=pseudo, epoch=manifest["epoch"], stage=manifest["stage"])
    return state, model_cfg, cfg


# end-to-end ---------------------------------------------------------------------------

class MetricsWriter:
    """Append-only line-delimited JSON metrics log."""

    def __init__(self, path, mode: str = "w"):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open(mode)

    def __call__(self, record: dict):
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def train(
    source: DomainDataset,
    target: DomainDataset,
    model_cfg: DotVitConfig,
    cfg: TrainConfig,
    out_dir=None,
    checkpoint_every: int = 0,
    resume_from=None,
) -> tuple[TrainState, list[dict]]:
    """Run both stages (or resume stage 2) and return the final state and log."""
    if model_cfg.num_classes < source.num_classes:
        raise ConfigError(f"model has {model_cfg.num_classes} classes, data has {source.num_classes}")
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    records: list[dict] = []

    def sink(rec):
        records.append(rec)
        if writer:
            writer(rec)

    if resume_from is not None:
        state, _, _ = load_checkpoint(resume_from, cfg)
        if out is not None:
            # Keep only the log lines produced before the checkpoint.
            log_path = out / "metrics.jsonl"
            kept = []
            if log_path.exists():
                kept = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
            kept = [r for r in kept if r["stage"] == 1 or r["epoch"] < state.epoch]
            log_path.write_text("".join(json.dumps(r) + "\n" for r in kept))
            writer = MetricsWriter(log_path, mode="a")
    else:
        if out is not None:
            writer = MetricsWriter(out / "metrics.jsonl")
        s1_model, pseudo, _ = stage1(source, target, model_cfg, cfg, sink)
        q = pseudo_label_quality(pseudo, target.labels)
        log.info("stage 1 done: target acc (h_s) %.3f, pseudo-label acc %.3f -> %.3f",
                 records[-1]["target_acc_fs_hs"] if records else float("nan"), q["pl_acc_initial"], q["pl_acc"])
        state = init_stage2(model_cfg, cfg, pseudo, s1_model)
        if out is not None:
            # Source-only model with its pseudo-labels, for offline inspection of the first refinement.
            s1_state = TrainState(model=s1_model, optimizer=T.SGD(s1_model.parameters(), cfg.stage1_lr),
                                  pseudo=pseudo, epoch=cfg.stage1_epochs, stage=1)
            save_checkpoint(out / "stage1.ckpt", s1_state, model_cfg, cfg)
            save_checkpoint(out / "stage1_pseudo.ckpt", state, model_cfg, cfg)

    def checkpoint_fn(st):
        if out is not None and checkpoint_every and st.epoch % checkpoint_every == 0:
            save_checkpoint(out / f"epoch{st.epoch:04d}.ckpt", st, model_cfg, cfg)

    try:
        stage2(source, target, cfg, state, sink, checkpoint_fn)
    finally:
        if writer:
            writer.close()
    if out is not None:
        save_checkpoint(out / "final.ckpt", state, model_cfg, cfg)
    return state, records
