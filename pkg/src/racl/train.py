"""Training loop: batching, augmentation, frozen features, RACL, Adam, checkpoint averaging."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from racl.audio import AudioClip, ManifestRow, Provenance, load_clip
from racl.augment import AugmentPools, augment_clip
from racl.config import RunConfig
from racl.errors import ManifestError, NumericError
from racl.features import (
    adaptive_kernel_size,
    aggregate,
    aggregate_backward,
    build_extractor,
    init_kernel,
)
from racl.losses import LossBreakdown, RaclWeights, racl_total
from racl.model import (
    Checkpoint,
    OptimizerState,
    adam_step,
    average_checkpoints,
    averaging_window,
    backward,
    forward,
    init_head,
    lr_at,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("cls", "std", "enh", "reg", "total")


def kernel_size(cfg: RunConfig) -> int:
    return cfg.features.kernel_size or adaptive_kernel_size(cfg.features.layers)


def init_params(cfg: RunConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([cfg.train.seed, 1])
    params = {"kernel": init_kernel(kernel_size(cfg), rng)}
    params.update(init_head(cfg.features.dim, cfg.head.hidden, cfg.head.embed, rng))
    return params


def extractor_for(cfg: RunConfig):
    return build_extractor(cfg.features.extractor_seed, cfg.features.layers, cfg.features.dim,
                           cfg.spectrogram)


def ablate(weights: RaclWeights, terms) -> RaclWeights:
    """Zero the weights of the named terms (std -> alpha, enh -> beta, reg -> gamma)."""
    mapping = {"std": "alpha", "enh": "beta", "reg": "gamma"}
    changes = {}
    for t in terms:
        if t not in mapping:
            raise ValueError(f"cannot ablate {t!r}; choose from std, enh, reg")
        changes[mapping[t]] = 0.0
    return replace(weights, **changes)


def loss_and_grads(params: dict[str, np.ndarray], stacks: np.ndarray, provenance,
                   weights: RaclWeights) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Full forward/backward for one batch of (B, L, T, D) feature stacks."""
    head = {k: v for k, v in params.items() if k != "kernel"}
    agg, _, state = aggregate(stacks, params["kernel"])
    logits, emb, tape = forward(agg, head)
    br = racl_total(emb, logits, provenance, weights)
    grads, g_agg = backward(tape, head, br.grad_logits, br.grad_embedding)
    grads["kernel"], _ = aggregate_backward(stacks, state, g_agg)
    return br, grads


def embed_and_score(params: dict[str, np.ndarray], stacks: np.ndarray):
    head = {k: v for k, v in params.items() if k != "kernel"}
    agg, _, _ = aggregate(stacks, params["kernel"])
    logits, emb, _ = forward(agg, head)
    return logits, emb


def stratified_batches(provenance: list[Provenance], batch_size: int,
                       rng: np.random.Generator | None) -> list[np.ndarray]:
    """Shuffle within each class, then interleave classes evenly before chunking."""
    keys = []
    for c, cls in enumerate(Provenance):
        idx = np.array([i for i, p in enumerate(provenance) if p is cls], dtype=np.intp)
        if idx.size == 0:
            continue
        if rng is not None:
            idx = rng.permutation(idx)
        for r, i in enumerate(idx):
            keys.append(((r + 0.5) / idx.size, c, int(i)))
    keys.sort()
    order = np.array([k[2] for k in keys], dtype=np.intp)
    batches = [order[s : s + batch_size] for s in range(0, order.size, batch_size)]
    return [b for b in batches if b.size >= 2]


@dataclass
class Dataset:
    clips: list[np.ndarray]  # float32 storage; 16-bit sources are exact
    provenance: list[Provenance]
    source_ids: list[str]
    sample_rate: int

    def clip(self, i: int) -> AudioClip:
        return AudioClip(self.clips[i].astype(np.float64), self.sample_rate, self.provenance[i],
                         self.source_ids[i])


def load_dataset(rows: list[ManifestRow], cfg: RunConfig) -> tuple[Dataset, list[str]]:
    clips, prov, ids, errors = [], [], [], []
    for row in rows:
        try:
            c = load_clip(row.path, row.provenance, row.source_id, cfg.audio.sample_rate,
                          cfg.audio.target_len)
        except Exception as exc:
            errors.append(f"{row.path}: {exc}")
            continue
        clips.append(c.samples.astype(np.float32))
        prov.append(row.provenance)
        ids.append(row.source_id)
    return Dataset(clips, prov, ids, cfg.audio.sample_rate), errors


def featurize(ds: Dataset, indices, cfg: RunConfig, pools: AugmentPools | None, epoch: int,
              executor: ThreadPoolExecutor | None) -> np.ndarray:
    extractor = extractor_for(cfg)

    def one(i):
        clip = ds.clip(int(i))
        if pools is not None:
            rng = np.random.default_rng([cfg.train.seed, epoch, int(i)])
            clip, _ = augment_clip(clip, pools, cfg.augment, rng)
        return extractor(clip).layers

    layers = list(executor.map(one, indices)) if executor else [one(i) for i in indices]
    return np.stack(layers)


@dataclass
class TrainResult:
    final: Checkpoint
    checkpoints: list[Checkpoint]
    log: list[dict] = field(default_factory=list)
    window: list[int] = field(default_factory=list)


def _mean_components(items: list[LossBreakdown]) -> dict[str, float]:
    return {k: float(np.mean([b.components()[k] for b in items])) for k in LOG_COLUMNS}


def evaluate_loss(params, ds: Dataset, cfg: RunConfig, executor=None) -> dict[str, float]:
    items = []
    for batch in stratified_batches(ds.provenance, cfg.train.batch_size, None):
        stacks = featurize(ds, batch, cfg, None, 0, executor)
        br, _ = loss_and_grads(params, stacks, [ds.provenance[i] for i in batch], cfg.losses)
        items.append(br)
    return _mean_components(items)


def train(cfg: RunConfig, train_rows: list[ManifestRow], dev_rows: list[ManifestRow],
          out_dir=None, workers: int = 1, progress=None) -> TrainResult:
    if not cfg.train.reconstruct_dev:
        dev_rows = [r for r in dev_rows if r.provenance in (Provenance.BONAFIDE, Provenance.SPOOF)]
    train_ds, errs = load_dataset(train_rows, cfg)
    dev_ds, dev_errs = load_dataset(dev_rows, cfg)
    if errs or dev_errs:
        raise ManifestError("unresolvable manifest rows:\n  " + "\n  ".join(errs + dev_errs))
    if not train_ds.clips or not dev_ds.clips:
        raise ManifestError("training and dev manifests must both be non-empty")

    pools = None
    if cfg.train.augment_pools:
        pools = AugmentPools.from_dirs(cfg.train.augment_pools, cfg.audio.sample_rate)

    params = init_params(cfg)
    opt = OptimizerState(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps, cfg.optim.weight_decay)
    cfg_dict, cfg_hash = cfg.to_dict(), cfg.hash()
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    checkpoints: list[Checkpoint] = []
    rows = []
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(cfg.train.epochs):
            lr = lr_at(epoch, cfg.optim.base_lr, cfg.optim.decay_factor, cfg.optim.decay_every)
            rng = np.random.default_rng([cfg.train.seed, epoch, 0xBA7C])
            items = []
            for batch in stratified_batches(train_ds.provenance, cfg.train.batch_size, rng):
                stacks = featurize(train_ds, batch, cfg, pools, epoch, executor)
                prov = [train_ds.provenance[i] for i in batch]
                br, grads = loss_and_grads(params, stacks, prov, cfg.losses)
                if not np.isfinite(br.total):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}: "
                        + ", ".join(f"{k}={v}" for k, v in br.components().items())
                    )
                adam_step(opt, params, grads, lr)
                items.append(br)
            train_stats = _mean_components(items)
            dev_stats = evaluate_loss(params, dev_ds, cfg, executor)
            ckpt = Checkpoint(epoch, {k: v.copy() for k, v in params.items()}, dev_stats["total"],
                              cfg_hash, cfg_dict)
            checkpoints.append(ckpt)
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.ckpt", ckpt)
            row = {"epoch": epoch, "lr": lr}
            row.update({f"train_{k}": v for k, v in train_stats.items()})
            row.update({f"dev_{k}": v for k, v in dev_stats.items()})
            rows.append(row)
            log.info("epoch %d lr %.3g train %.4f dev %.4f", epoch, lr, train_stats["total"],
                     dev_stats["total"])
            if progress is not None:
                progress(row)
    finally:
        if executor is not None:
            executor.shutdown()

    window = averaging_window([c.val_loss for c in checkpoints], cfg.train.average_window)
    averaged = average_checkpoints([checkpoints[i] for i in window])
    final_loss = evaluate_loss(averaged, dev_ds, cfg)["total"]
    final = Checkpoint(window[-1], averaged, final_loss, cfg_hash, cfg_dict)
    return TrainResult(final, checkpoints, rows, window)


def write_log(path, rows: list[dict], config_hash: str) -> None:
    cols = ["epoch", "lr"] + [f"{s}_{k}" for s in ("train", "dev") for k in LOG_COLUMNS]
    lines = [f"# config_hash={config_hash}", "\t".join(cols)]
    for r in rows:
        lines.append("\t".join(str(r["epoch"]) if c == "epoch" else repr(float(r[c])) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
