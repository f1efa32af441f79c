"""Patch-based L1 training with Adam and validation early stopping."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .network import forward, forward_tiled, trace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    patch_size: int = 16
    patience: int = 50
    epoch_batches: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int | None = None
    time_budget: float | None = None  # seconds; None = no limit
    extract_lr_scale: float = 1.0  # learning-rate multiplier for the extraction conv

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.patch_size < 8:
            raise ValueError(f"patch size must be >= 8, got {self.patch_size}")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if not self.extract_lr_scale >= 0:
            raise ValueError(f"extract_lr_scale must be non-negative, got {self.extract_lr_scale}")
        if self.batch_size < 1 or self.epoch_batches < 1:
            raise ValueError("batch_size and epoch_batches must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    m: list
    v: list
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    since_improvement: int = 0
    best_weights: list | None = None
    rng_state: dict | None = None

    @classmethod
    def zeros_like(cls, weights):
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights])


@dataclass
class EpochRecord:
    epoch: int
    train_l1: float
    val_l1: float
    best_val_l1: float
    seconds: float


@dataclass
class TrainResult:
    net: object
    history: list = field(default_factory=list)
    state: TrainState | None = None
    stop_reason: str = ""


# --- loss and optimiser ---------------------------------------------------------

def l1_loss(sr, hr, mask=None):
    """Mean absolute difference over all voxels, or over ``mask`` when given."""
    sr, hr = np.asarray(sr), np.asarray(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    diff = np.abs(sr.astype(np.float64) - hr)
    if mask is None:
        return float(np.mean(diff))
    mask = np.broadcast_to(mask, diff.shape)
    return float(diff[mask].mean())


def l1_grad(sr, hr, mask=None):
    """d(l1_loss)/d(sr) = sign(sr - hr) / N, zero at exact ties and outside ``mask``."""
    sr, hr = np.asarray(sr), np.asarray(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    if mask is None:
        return (np.sign(sr - hr) / sr.size).astype(sr.dtype)
    mask = np.broadcast_to(mask, sr.shape)
    return (np.sign(sr - hr) * mask / np.count_nonzero(mask)).astype(sr.dtype)


def adam_step(weights, grads, state, cfg, lr_scales=None):
    """One bias-corrected Adam update. Returns the new weights; ``state`` is advanced.

    ``lr_scales`` optionally multiplies the learning rate per weight array.
    """
    if len(weights) != len(grads) or len(weights) != len(state.m):
        raise ValueError("weights, gradients and optimiser state differ in length")
    if lr_scales is None:
        lr_scales = [1.0] * len(weights)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = []
    for i, (w, g) in enumerate(zip(weights, grads)):
        if w.shape != g.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, weight has {w.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append((w - cfg.lr * lr_scales[i] * mhat / (np.sqrt(vhat) + cfg.eps)).astype(w.dtype))
    return out


# --- data ---------------------------------------------------------------------------

def sample_patch_pairs(lr_vol, hr_vol, cfg, rng, count=None, scale=None):
    """Draw aligned (LR, HR) patches: HR origin = r * LR origin, HR size = r * LR size."""
    lr_vol, hr_vol = np.asarray(lr_vol), np.asarray(hr_vol)
    if lr_vol.ndim == 3:
        lr_vol, hr_vol = lr_vol[None], hr_vol[None]
    r = scale or hr_vol.shape[-1] // lr_vol.shape[-1]
    if tuple(r * d for d in lr_vol.shape[-3:]) != hr_vol.shape[-3:]:
        raise ValueError(f"HR dims {hr_vol.shape[-3:]} are not {r} x LR dims {lr_vol.shape[-3:]}")
    p = cfg.patch_size
    if any(d < p for d in lr_vol.shape[-3:]):
        raise ValueError(f"volume {lr_vol.shape[-3:]} is smaller than the {p}^3 patch")
    n = cfg.batch_size if count is None else count
    origins = [tuple(int(rng.integers(0, d - p + 1)) for d in lr_vol.shape[-3:]) for _ in range(n)]
    lr_b = np.stack([lr_vol[:, x:x + p, y:y + p, z:z + p] for x, y, z in origins])
    hr_b = np.stack([hr_vol[:, r * x:r * (x + p), r * y:r * (y + p), r * z:r * (z + p)]
                     for x, y, z in origins])
    return lr_b, hr_b, origins


def edge_pad_pair(lr_vol, hr_vol, margin, scale):
    """Replicate the faces of an (LR, HR) pair outwards by ``margin`` LR voxels."""
    lr_vol, hr_vol = np.asarray(lr_vol), np.asarray(hr_vol)
    lead = [(0, 0)] * (lr_vol.ndim - 3)
    return (np.pad(lr_vol, lead + [(margin, margin)] * 3, mode="edge"),
            np.pad(hr_vol, lead + [(scale * margin, scale * margin)] * 3, mode="edge"))


def core_mask(patch, scale, margin):
    """HR-resolution mask that drops ``margin`` LR voxels next to every patch face."""
    keep = np.zeros(patch * scale, dtype=bool)
    keep[margin * scale:(patch - margin) * scale] = True
    return keep[:, None, None] & keep[None, :, None] & keep[None, None, :]


def sample_batch(pairs, cfg, rng, scale):
    """One batch drawn across several (LR, HR) volume pairs."""
    picks = [int(rng.integers(0, len(pairs))) for _ in range(cfg.batch_size)]
    lrs, hrs = [], []
    for k in picks:
        lr_b, hr_b, _ = sample_patch_pairs(pairs[k][0], pairs[k][1], cfg, rng, count=1, scale=scale)
        lrs.append(lr_b[0])
        hrs.append(hr_b[0])
    return np.stack(lrs), np.stack(hrs)


# --- loop ---------------------------------------------------------------------------

def _weight_vars(net):
    return {name: [ad.Var(layer.weight, requires_grad=True) for layer in st.weights.layers]
            for name, st in net.stages.items()}


def _assign(net, flat):
    it = iter(flat)
    for st in net.stages.values():
        for layer in st.weights.layers:
            layer.weight = next(it)


def loss_and_grads(net, lr_batch, hr_batch, mask=None):
    """L1 loss on a batch and its gradient for every weight (stage-then-layer order)."""
    params = _weight_vars(net)
    out = trace(net, ad.Var(lr_batch), params)
    loss = l1_loss(out.value, hr_batch, mask)
    ad.backward(out, l1_grad(out.value, hr_batch, mask))
    grads = [p.grad if p.grad is not None else np.zeros_like(p.value)
             for ps in params.values() for p in ps]
    return loss, grads


def validation_loss(net, val_pairs, tile=None):
    """Mean L1 over full validation volumes."""
    losses = []
    for lr_vol, hr_vol in val_pairs:
        sr = forward(net, lr_vol) if tile is None else forward_tiled(net, lr_vol, tile=tile)
        losses.append(l1_loss(sr, hr_vol))
    return float(np.mean(losses))


def train(net, train_pairs, val_pairs, cfg, state=None, on_epoch=None, val_tile=None):
    """Train ``net`` in place until patience, ``max_epochs`` or ``time_budget`` runs out.

    Returns a :class:`TrainResult` whose ``net`` is a copy holding the best
    validation weights. Passing a previous ``state`` resumes optimisation,
    including the sampler's RNG stream.

    With ``net.config.edge_pad`` = m > 0 the training volumes are edge-padded
    by m and the loss skips m LR voxels next to each patch face, matching
    what :func:`~volnet.network.forward` does at inference.
    """
    if not train_pairs or not val_pairs:
        raise ValueError("training and validation sets must be non-empty")
    scale = net.config.scale
    margin = net.config.edge_pad
    mask = None
    if margin:
        if 2 * margin >= cfg.patch_size:
            raise ValueError(f"edge_pad {margin} leaves no loss voxels in a {cfg.patch_size}^3 patch")
        train_pairs = [edge_pad_pair(lr, hr, margin, scale) for lr, hr in train_pairs]
        mask = core_mask(cfg.patch_size, scale, margin)
    rng = np.random.default_rng(cfg.seed)
    weights = net.parameters()
    scales = [cfg.extract_lr_scale if name == "extract" else 1.0
              for name, st in net.stages.items() for _ in st.weights.layers]
    if state is None:
        state = TrainState.zeros_like(weights)
    elif state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    history = []
    t_start = time.perf_counter()
    reason = "max_epochs"
    while cfg.max_epochs is None or state.epoch < cfg.max_epochs:
        t0 = time.perf_counter()
        losses = []
        for _ in range(cfg.epoch_batches):
            lr_b, hr_b = sample_batch(train_pairs, cfg, rng, scale)
            loss, grads = loss_and_grads(net, lr_b, hr_b, mask)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise FloatingPointError(
                    f"non-finite loss or gradient at epoch {state.epoch + 1}, step {state.step + 1} "
                    f"(loss={loss})")
            weights = adam_step(weights, grads, state, cfg, scales)
            _assign(net, weights)
            losses.append(loss)
        state.epoch += 1
        val = validation_loss(net, val_pairs, val_tile)
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite validation loss at epoch {state.epoch}")
        if val < state.best_val:
            state.best_val = val
            state.since_improvement = 0
            state.best_weights = [w.copy() for w in weights]
        else:
            state.since_improvement += 1
        state.rng_state = rng.bit_generator.state
        rec = EpochRecord(state.epoch, float(np.mean(losses)), val, state.best_val,
                          time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f best %.4f (%.1fs)", rec.epoch, rec.train_l1,
                 rec.val_l1, rec.best_val_l1, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec, net, state)
        if state.since_improvement >= cfg.patience:
            reason = "patience"
            break
        if cfg.time_budget is not None and time.perf_counter() - t_start >= cfg.time_budget:
            reason = "time_budget"
            break
    best = net.copy()
    if state.best_weights is not None:
        _assign(best, [w.copy() for w in state.best_weights])
    return TrainResult(best, history, state, reason)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_l1", "val_l1", "best_val_l1", "seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_l1), repr(r.val_l1), repr(r.best_val_l1), f"{r.seconds:.3f}"])


def save_state(state, path):
    """Optimiser moments and bookkeeping, enough to resume bit-identically."""
    arrays = {f"m{i}": m for i, m in enumerate(state.m)}
    arrays.update({f"v{i}": v for i, v in enumerate(state.v)})
    if state.best_weights is not None:
        arrays.update({f"b{i}": b for i, b in enumerate(state.best_weights)})
    meta = {"n": len(state.m), "step": state.step, "epoch": state.epoch,
            "best_val": state.best_val, "since_improvement": state.since_improvement,
            "has_best": state.best_weights is not None, "rng_state": state.rng_state}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_state(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        n = meta["n"]
        st = TrainState([z[f"m{i}"] for i in range(n)], [z[f"v{i}"] for i in range(n)],
                        meta["step"], meta["epoch"], meta["best_val"], meta["since_improvement"],
                        [z[f"b{i}"] for i in range(n)] if meta["has_best"] else None,
                        meta["rng_state"])
    return st
