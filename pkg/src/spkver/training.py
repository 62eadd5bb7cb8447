"""Minibatch SGD training of the extractors and embedding extraction.

Every stochastic choice flows from one seeded generator, so a run is fully
reproducible from (config, seed) in single-worker mode; resuming from a
checkpoint restores the generator state and bit-matches an uninterrupted
run.  All segments within a batch share one sampled duration, so frame
counts agree without padding.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models as m
from .corpus import segment_frame_bounds
from .formats import ExperimentConfig, save_checkpoint
from .metrics import ScoreSet, Trial, compute_eer
from .objectives import LambdaSchedule, MarginConfig, asoftmax_loss, softmax_ce


def clip_gradients(params: ad.ParameterSet, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns the pre-clip norm.  The stacks carry no normalization layers,
    so occasional loss spikes can otherwise send the per-channel slopes
    into a feedback loop.
    """
    total = 0.0
    for _, tensor in params.items():
        if tensor.grad is not None:
            total += float((tensor.grad ** 2).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, tensor in params.items():
            if tensor.grad is not None:
                tensor.grad *= factor
    return norm


def sgd_step(params: ad.ParameterSet, lr: float, momentum: float):
    """Momentum SGD: v <- momentum v + g; p <- p - lr v."""
    for name, tensor in params.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        vel = params.velocity[name]
        vel *= momentum
        vel += grad
        tensor.data -= lr * vel


def build_model(cfg: ExperimentConfig, n_spk: int) -> m.ExtractorModel:
    classifier_bias = cfg.loss == "softmax"
    if cfg.arch == "maxpool":
        return m.build_maxpool_net(n_spk, in_dim=cfg.in_dim, width_scale=cfg.width_scale,
                                   classifier_bias=classifier_bias, seed=cfg.seed)
    return m.build_res_net(cfg.resnet_blocks, n_spk, in_dim=cfg.in_dim,
                           width_scale=cfg.width_scale,
                           classifier_bias=classifier_bias, seed=cfg.seed)


def batch_loss(model: m.ExtractorModel, segments: list[np.ndarray], labels: np.ndarray,
               cfg: ExperimentConfig, lam: float) -> ad.Tensor:
    pooled = ad.stack_rows([m.frame_stats_graph(model, seg) for seg in segments])
    emb = m.segment_graph(model, pooled)
    if cfg.loss == "softmax":
        return softmax_ce(m.classifier_graph(model, emb), labels)
    w = model.params["classifier.w"]
    return asoftmax_loss(emb, w, labels, MarginConfig(cfg.margin, lam))


@dataclass
class TrainResult:
    model: m.ExtractorModel
    history: list[dict] = field(default_factory=list)
    best_val_eer: float | None = None
    best_state: dict | None = None
    final_step: int = 0
    rng_state: dict | None = None


def _speaker_table(utt2spk: dict[str, str]):
    utts = sorted(utt2spk)
    speakers = sorted(set(utt2spk.values()))
    spk_index = {s: i for i, s in enumerate(speakers)}
    labels = np.array([spk_index[utt2spk[u]] for u in utts], dtype=np.intp)
    return utts, speakers, labels


def _validation_eer(model, features, utts, labels, rng, max_trials=2000):
    embs = np.stack([m.forward_embed(model, features[u]) for u in utts])
    pairs = [(i, j) for i in range(len(utts)) for j in range(i + 1, len(utts))]
    if len(pairs) > max_trials:
        keep = rng.choice(len(pairs), size=max_trials, replace=False)
        pairs = [pairs[k] for k in sorted(keep)]
    trials, scores = [], []
    for i, j in pairs:
        ei, ej = embs[i], embs[j]
        denom = np.linalg.norm(ei) * np.linalg.norm(ej)
        trials.append(Trial(utts[i], utts[j], bool(labels[i] == labels[j])))
        scores.append(float(ei @ ej / denom) if denom > 0 else 0.0)
    return compute_eer(ScoreSet(trials, np.asarray(scores)))


def train_extractor(features: dict[str, np.ndarray], utt2spk: dict[str, str],
                    cfg: ExperimentConfig, log=None, resume: dict | None = None,
                    frame_shift_ms: float = 10.0) -> TrainResult:
    """Train an extractor on labeled feature matrices.

    ``resume`` takes a checkpoint meta dict plus model to continue a run.
    Aborts with RuntimeError if the loss goes non-finite.
    """
    utts, speakers, labels = _speaker_table(utt2spk)
    if len(speakers) < 2:
        raise ValueError("need at least 2 speakers to train")
    min_frames, max_frames = segment_frame_bounds(
        (cfg.segment_min_s, cfg.segment_max_s), frame_shift_ms)

    if resume is not None:
        model = resume["model"]
        rng = np.random.default_rng()
        rng.bit_generator.state = resume["meta"]["rng_state"]
        start_step = int(resume["meta"]["step"])
        start_epoch = int(resume["meta"]["epoch"])
    else:
        model = build_model(cfg, len(speakers))
        rng = np.random.default_rng(cfg.seed)
        start_step = 0
        start_epoch = 0

    need = m.receptive_field(model)
    seg_lo = max(min_frames, need)
    usable = [u for u in utts if features[u].shape[0] >= seg_lo]
    if not usable:
        raise ValueError("no utterance long enough for the minimum segment")
    label_of = dict(zip(utts, labels))
    usable_labels = np.array([label_of[u] for u in usable], dtype=np.intp)

    # Per-speaker validation split so held-out trials include both kinds.
    val_utts: list[str] = []
    if cfg.val_fraction > 0:
        for spk in np.unique(usable_labels):
            members = [u for u, l in zip(usable, usable_labels) if l == spk]
            if len(members) > 1:
                val_utts += members[: max(1, int(round(cfg.val_fraction * len(members))))]
    val_set = set(val_utts)
    val_labels = np.array([label_of[u] for u in val_utts], dtype=np.intp)
    if len(val_utts) < 2 or len(np.unique(val_labels)) < 2 \
            or np.max(np.bincount(val_labels)) < 2:
        val_utts, val_set = [], set()
        val_labels = np.empty(0, dtype=np.intp)
    train_utts = [u for u in usable if u not in val_set]
    train_labels = np.array([label_of[u] for u in train_utts], dtype=np.intp)

    schedule = LambdaSchedule(cfg.lambda_start, cfg.lambda_decay, cfg.lambda_floor)
    result = TrainResult(model=model)
    step = start_step
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        epoch_losses = []
        for _ in range(cfg.steps_per_epoch):
            picks = rng.integers(0, len(train_utts), size=cfg.batch_size)
            batch_feats = [features[train_utts[i]] for i in picks]
            shortest = min(f.shape[0] for f in batch_feats)
            seg_hi = max(seg_lo, min(max_frames, shortest))
            seg_len = int(rng.integers(seg_lo, seg_hi + 1))
            segments = []
            for feats in batch_feats:
                start = int(rng.integers(0, feats.shape[0] - seg_len + 1))
                segments.append(feats[start : start + seg_len])
            batch_labels = train_labels[picks]

            lam = schedule.value(step) if cfg.loss == "asoftmax" else 0.0
            model.params.zero_grad()
            loss = batch_loss(model, segments, batch_labels, cfg, lam)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"training diverged: non-finite loss at step {step} "
                    f"(lr={lr:g}, epoch={epoch})")
            loss.backward()
            clip_gradients(model.params, cfg.grad_clip)
            sgd_step(model.params, lr, cfg.momentum)
            epoch_losses.append(float(loss.data))
            step += 1

        record = {"epoch": epoch, "loss": float(np.mean(epoch_losses)), "lr": lr,
                  "step": step}
        if val_utts:
            val_rng = np.random.default_rng(cfg.seed + 7919 + epoch)
            record["val_eer"] = _validation_eer(model, features, val_utts,
                                                val_labels, val_rng)
            if result.best_val_eer is None or record["val_eer"] < result.best_val_eer:
                result.best_val_eer = record["val_eer"]
                result.best_state = {k: v.copy() for k, v in
                                     model.params.state_arrays().items()}
        result.history.append(record)
        if log is not None:
            msg = f"epoch {epoch}: loss {record['loss']:.4f} lr {lr:.4g}"
            if "val_eer" in record:
                msg += f" val_eer {record['val_eer']:.4f}"
            log(msg)
    result.final_step = step
    result.rng_state = rng.bit_generator.state
    return result


def default_thread_count() -> int:
    value = os.environ.get("SPKVER_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def extract_embeddings(model: m.ExtractorModel, features: dict[str, np.ndarray],
                       threads: int | None = None, log=None):
    """Full-utterance embeddings for every feature matrix.

    Utterances shorter than the receptive field are skipped with a warning
    and reported in the returned manifest list.
    """
    need = m.receptive_field(model)
    utts = sorted(features)
    skipped = [u for u in utts if features[u].shape[0] < need]
    kept = [u for u in utts if features[u].shape[0] >= need]
    if log is not None:
        for u in skipped:
            log(f"warning: skipping {u}: {features[u].shape[0]} frames < "
                f"receptive field {need}")
    n_workers = threads if threads is not None else default_thread_count()
    if n_workers > 1 and len(kept) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            vectors = list(pool.map(lambda u: m.forward_embed(model, features[u]), kept))
    else:
        vectors = [m.forward_embed(model, features[u]) for u in kept]
    embeddings = {u: np.asarray(v, dtype=np.float32).astype(np.float64)
                  for u, v in zip(kept, vectors)}
    return embeddings, skipped


def save_train_checkpoint(path, result: TrainResult, cfg: ExperimentConfig,
                          epoch: int | None = None):
    save_checkpoint(path, result.model, step=result.final_step,
                    epoch=epoch if epoch is not None else cfg.epochs,
                    config_hash=cfg.config_hash(),
                    rng_state=getattr(result, "rng_state", None),
                    extra={"history": result.history,
                           "best_val_eer": result.best_val_eer})
