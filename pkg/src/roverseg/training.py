"""Two-stage training protocol.

Stage I trains the RGB encoder and decoder on the segmentation loss alone.
Stage II warm-starts RGB encoder and decoder from the Stage-I checkpoint,
adds a freshly initialized depth encoder, and keeps a frozen copy of the
Stage-I encoder whose stage-5 features act as contrastive targets; the
frozen copy never enters the optimizer.  SGD with momentum and per-epoch
exponential learning-rate decay throughout.  All shuffling is seeded, so a
(seed, config, dataset) triple reproduces checkpoints bit for bit.
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import losses, metrics, storage
from .autodiff import Tensor
from .errors import ConfigError, DegenerateInputError, ShapeError, TrainingDivergence
from .network import (
    NetworkParams,
    Stage2Network,
    batch_contrast_features,
    build_network,
    build_stage2,
    forward_stage1,
    forward_stage2,
    infer_stage2,
)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.90
    decay: float = 0.95
    epochs: int = 30
    batch_size: int = 4
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (self.lr0 > 0):
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if not (0 < self.decay <= 1):
            raise ConfigError(f"decay must be in (0,1], got {self.decay}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.tau > 0):
            raise ConfigError(f"tau must be positive, got {self.tau}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay**epoch


class OptimizerState:
    """Per-parameter velocity buffers, zero-initialized."""

    def __init__(self, named: Dict[str, Tensor]):
        self.velocity = {name: np.zeros_like(t.data) for name, t in named.items()}


def sgd_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimizerState, lr, momentum):
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ShapeError(f"no gradient supplied for {name!r}")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in {name!r}")
        v = state.velocity[name]
        v *= momentum
        v += g
        p.data -= lr * v
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    l_ls: float
    l_cont: float
    total: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def lines(self):
        # wall_time deliberately left out: log files must be byte-identical
        # across reruns of the same seed
        return [
            f"epoch={r.epoch} l_ls={r.l_ls:.6f} l_cont={r.l_cont:.6f} total={r.total:.6f} lr={r.lr:.6f}"
            for r in self.records
        ]


def _batches(n, batch_size, rng, drop_partial):
    order = rng.permutation(n)
    out = []
    for i in range(0, n, batch_size):
        chunk = order[i : i + batch_size]
        if drop_partial and len(chunk) < batch_size:
            continue
        out.append(chunk)
    return out


def _collect_grads(named: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in named.items()
    }


def _zero_grads(named: Dict[str, Tensor]):
    for t in named.values():
        t.grad = None


def _check_finite(value: float, what: str, epoch: int, batch: int):
    if not np.isfinite(value):
        raise TrainingDivergence(
            f"{what} became non-finite at epoch {epoch}, batch {batch}", epoch=epoch, batch=batch
        )


def train_stage1(
    samples,
    cfg: TrainConfig,
    enc_cfg,
    num_classes: int = 3,
    modality: str = "rgb",
    progress=None,
):
    if not samples:
        raise DegenerateInputError("train_stage1 needs a non-empty dataset")
    net = build_network(enc_cfg, num_classes, cfg.seed, modality=modality)
    named = net.named()
    state = OptimizerState(named)
    rng = np.random.default_rng((cfg.seed, 1))
    log = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        batch_losses = []
        for bi, idxs in enumerate(_batches(len(samples), cfg.batch_size, rng, drop_partial=False)):
            probs, labs = [], []
            for i in idxs:
                s = samples[i]
                x = ad.constant(s.rgb if modality == "rgb" else s.depth)
                logits, _ = forward_stage1(net, x)
                probs.append(ad.softmax_channels(logits))
                labs.append(s.labels.astype(np.int64))
            breakdown = losses.total_loss(losses.lovasz_softmax(probs, labs))
            total = breakdown.total.item()
            _check_finite(total, "loss", epoch, bi)
            ad.backward(breakdown.total)
            try:
                sgd_step(named, _collect_grads(named), state, lr, cfg.momentum)
            except TrainingDivergence as e:
                raise TrainingDivergence(str(e) + f" (epoch {epoch}, batch {bi})", epoch=epoch, batch=bi) from None
            finally:
                _zero_grads(named)
            batch_losses.append(total)
        l_ls = float(np.mean(batch_losses)) if batch_losses else float("nan")
        rec = EpochRecord(epoch, l_ls, 0.0, l_ls, lr, time.perf_counter() - t0)
        log.records.append(rec)
        if progress:
            progress(log.lines()[-1])
    return net, log


def train_stage2(
    samples,
    stage1,
    cfg: TrainConfig,
    contrast: bool = True,
    progress=None,
):
    if not samples:
        raise DegenerateInputError("train_stage2 needs a non-empty dataset")
    if cfg.batch_size < 2:
        raise ConfigError("stage 2 needs batch_size >= 2, the contrastive denominator is degenerate at 1")
    if len(samples) < cfg.batch_size:
        raise DegenerateInputError(
            f"stage 2 needs at least one full batch ({cfg.batch_size} samples), got {len(samples)}"
        )
    stage1_net = storage.load_stage1(stage1) if isinstance(stage1, (str, bytes)) or hasattr(stage1, "__fspath__") else stage1
    net2 = build_stage2(stage1_net, cfg.seed)
    named = net2.trainable_named()
    state = OptimizerState(named)
    rng = np.random.default_rng((cfg.seed, 2))
    log = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        ls_vals, cont_vals, tot_vals = [], [], []
        for bi, idxs in enumerate(_batches(len(samples), cfg.batch_size, rng, drop_partial=True)):
            probs, labs, pairs = [], [], []
            for i in idxs:
                s = samples[i]
                logits, feat_pair = forward_stage2(
                    net2.rgb_encoder,
                    net2.depth_encoder,
                    net2.decoder,
                    net2.frozen_encoder,
                    ad.constant(s.rgb),
                    ad.constant(s.depth),
                    training=contrast,
                )
                probs.append(ad.softmax_channels(logits))
                labs.append(s.labels.astype(np.int64))
                if contrast:
                    pairs.append(feat_pair)
            l_ls = losses.lovasz_softmax(probs, labs)
            l_cont = None
            if contrast:
                cf = batch_contrast_features(pairs)
                l_cont = losses.ntxent(cf.f_depth, cf.f_rgb_ref, cfg.tau)
            breakdown = losses.total_loss(l_ls, l_cont)
            total = breakdown.total.item()
            _check_finite(total, "loss", epoch, bi)
            ad.backward(breakdown.total)
            try:
                sgd_step(named, _collect_grads(named), state, lr, cfg.momentum)
            except TrainingDivergence as e:
                raise TrainingDivergence(str(e) + f" (epoch {epoch}, batch {bi})", epoch=epoch, batch=bi) from None
            finally:
                _zero_grads(named)
            ls_vals.append(breakdown.l_ls.item())
            cont_vals.append(breakdown.l_cont.item() if breakdown.l_cont is not None else 0.0)
            tot_vals.append(total)
        rec = EpochRecord(
            epoch,
            float(np.mean(ls_vals)) if ls_vals else float("nan"),
            float(np.mean(cont_vals)) if cont_vals else 0.0,
            float(np.mean(tot_vals)) if tot_vals else float("nan"),
            lr,
            time.perf_counter() - t0,
        )
        log.records.append(rec)
        if progress:
            progress(log.lines()[-1])
    return net2, log


def frozen_drift(net2: Stage2Network, reference: NetworkParams) -> float:
    """Sum of absolute differences between the frozen encoder and a reference
    Stage-I encoder; exactly 0.0 after any run by the freezing contract."""
    drift = 0.0
    for (fk, fb), (rk, rb) in zip(net2.frozen_encoder.stages, reference.encoder.stages):
        drift += float(np.abs(fk.data - rk.data).sum()) + float(np.abs(fb.data - rb.data).sum())
    return drift


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_logits(net, sample) -> Tensor:
    if isinstance(net, NetworkParams):
        x = ad.constant(sample.rgb if net.modality == "rgb" else sample.depth)
        logits, _ = forward_stage1(net, x)
        return logits
    if isinstance(net, Stage2Network):
        return infer_stage2(net, ad.constant(sample.rgb), ad.constant(sample.depth))
    raise ShapeError(f"cannot run inference with {type(net).__name__}")


def predict_mask(net, sample) -> np.ndarray:
    return metrics.argmax_labels(predict_logits(net, sample))


def evaluate(net, samples, num_classes: Optional[int] = None):
    """Confusion matrices over a sample list: (overall, {preset: cm})."""
    if not samples:
        raise DegenerateInputError("evaluate needs a non-empty sample list")
    nc = num_classes if num_classes is not None else net.num_classes
    overall = metrics.ConfusionMatrix(nc)
    by_preset: Dict[str, metrics.ConfusionMatrix] = {}
    for s in samples:
        pred = predict_mask(net, s)
        metrics.accumulate(pred, s.labels, overall)
        if s.preset:
            cm = by_preset.setdefault(s.preset, metrics.ConfusionMatrix(nc))
            metrics.accumulate(pred, s.labels, cm)
    return overall, by_preset
