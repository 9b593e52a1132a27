"""The training loop: state discovery with per-sequence stored states,
sensory masking, sequence breaking with fast forward, noise addition,
short-time recall channels, local-mode dropout, and the composite loss.

One trainer owns one model, one dataset, and the stores; batches are
read-modify-write against the train store, so a run is sequential. Distinct
runs are independent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .wmcore import ModelConfig, WorldModel

REPLACE = "REPLACE"
MEAN = "MEAN"

BASE_OUTPUT_CHANNELS = {"external_state": 1, "measurement": 2}


@dataclass(frozen=True)
class NoiseSpec:
    mean: float = 0.0
    std: float = 0.1


@dataclass(frozen=True)
class RecallSpec:
    stride: int = 1
    n: int = 1


@dataclass(frozen=True)
class ProtocolConfig:
    """Training variables; defaults are the bare state-discovery setup."""

    sensory_masking: bool = False
    n_segment: int = 1
    fast_forward: bool = False
    state_save_method: str = REPLACE
    check_input_masks: bool = False
    state_activation: str = "tanh"
    state_regularizer: str = "none"  # "none" or "mse"
    regularizer_weight: float = 1e-2
    noise_state: NoiseSpec | None = None
    noise_measurement: NoiseSpec | None = None
    recall_future: RecallSpec | None = None
    recall_past: RecallSpec | None = None
    local_chance: float = 0.0
    loss_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_segment < 1:
            raise ValueError("n_segment must be >= 1")
        if self.state_save_method not in (REPLACE, MEAN):
            raise ValueError(f"unknown state_save_method {self.state_save_method!r}")
        if self.state_regularizer not in ("none", "mse"):
            raise ValueError(f"unknown state_regularizer {self.state_regularizer!r}")
        if not 0.0 <= self.local_chance <= 1.0:
            raise ValueError("local_chance must lie in [0, 1]")

    def recall_channels(self) -> dict:
        """Names/dims of the synthetic recall channels this config requires."""
        channels = {}
        if self.recall_future:
            for k in range(1, self.recall_future.n + 1):
                channels[f"recall_future_{k}"] = 2
        if self.recall_past:
            for k in range(1, self.recall_past.n + 1):
                channels[f"recall_past_{k}"] = 2
        return channels

    def output_channels(self) -> dict:
        return {**BASE_OUTPUT_CHANNELS, **self.recall_channels()}

    def weight(self, channel: str) -> float:
        return float(self.loss_weights.get(channel, 1.0))


@dataclass(frozen=True)
class TrainingSchedule:
    epochs: int = 100
    batch_size: int = 256
    lr_max: float = 3e-4
    lr_min: float = 0.0
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    diverged: bool


class _Divergence(Exception):
    pass


def build_model_config(protocol: ProtocolConfig, state_dim=128, n_heads=4, ff_mult=4, block_configuration=("M", "M")) -> ModelConfig:
    """Model config implied by the protocol: activation mode and one decoder
    per output channel, recall decoders included exactly when configured."""
    return ModelConfig(
        state_dim=state_dim,
        n_heads=n_heads,
        ff_mult=ff_mult,
        block_configuration=tuple(block_configuration),
        output_channels=protocol.output_channels(),
        state_activation=protocol.state_activation,
    )


class StateStore:
    """Per-sequence stored state trajectories (n, L, d); position 0 is pinned
    to the null vector."""

    def __init__(self, n: int, seq_len: int, dim: int, rng: np.random.Generator):
        self.states = rng.uniform(-1, 1, size=(n, seq_len, dim)).astype(np.float32)
        self.states[:, 0] = 0.0

    def get(self, indices) -> np.ndarray:
        return self.states[indices].copy()

    def update(self, indices, predictions: np.ndarray, method: str = REPLACE, keep: np.ndarray | None = None) -> None:
        """Consume one batch of predictions.

        predictions[:, i] is the predicted state for step i+1, so the
        candidate for slot i is predictions[:, i-1]. REPLACE overwrites, MEAN
        averages with the old value; rows of `keep` (B, L) mark steps whose
        old state survives (mask-checked state discovery). Slot 0 is always
        reset to the null vector.
        """
        old = self.states[indices]
        if predictions.shape != old.shape:
            raise nk.ShapeError("state_discovery_update", predictions.shape, old.shape)
        candidate = old.copy()
        candidate[:, 1:] = predictions[:, :-1]
        if method == MEAN:
            candidate[:, 1:] = 0.5 * (old[:, 1:] + candidate[:, 1:])
        if keep is not None:
            candidate = np.where(keep[:, :, None], old, candidate)
        candidate[:, 0] = 0.0
        self.states[indices] = candidate


def mask_sensory(shape, rng: np.random.Generator):
    """Per-batch masking: draw p once, then hide each (sequence, step) entry
    independently with probability p. Returns (p, presence mask)."""
    p = rng.uniform()
    present = (rng.random(shape) >= p).astype(np.float32)
    return p, present


def break_sequence(seq_len: int, n_segment: int, rng: np.random.Generator) -> list:
    """Ordered (start, stop) spans cut at positions drawn without
    replacement; every segment is nonempty."""
    if n_segment > seq_len:
        raise ValueError(f"n_segment={n_segment} exceeds sequence length {seq_len}")
    if n_segment == 1:
        return [(0, seq_len)]
    cuts = np.sort(rng.choice(np.arange(1, seq_len), size=n_segment - 1, replace=False))
    bounds = [0, *cuts.tolist(), seq_len]
    return list(zip(bounds[:-1], bounds[1:]))


def add_noise(values: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.std < 0:
        raise ValueError("noise std must be >= 0")
    if spec.std == 0 and spec.mean == 0:
        return values
    return values + rng.normal(spec.mean, spec.std, size=values.shape).astype(values.dtype)


def build_recall_channels(source: np.ndarray, spec: RecallSpec, direction: str, projector: np.ndarray) -> dict:
    """Synthetic targets: channel k at step t holds projector @ source at
    t + k*stride (future) or t - k*stride (past); out-of-range steps are
    masked absent. Returns {name: (target (B,L,C), mask (B,L))}."""
    b, seq_len, _ = source.shape
    sign = {"future": 1, "past": -1}[direction]
    projected = source @ projector.T.astype(source.dtype)
    channels = {}
    for k in range(1, spec.n + 1):
        shift = sign * k * spec.stride
        target = np.zeros_like(source)
        mask = np.zeros((b, seq_len), dtype=np.float32)
        lo = max(0, -shift)
        hi = min(seq_len, seq_len - shift)
        if lo < hi:
            target[:, lo:hi] = projected[:, lo + shift : hi + shift]
            mask[:, lo:hi] = 1.0
        channels[f"recall_{direction}_{k}"] = (target, mask)
    return channels


def masked_mse(pred: nk.Tensor, target: np.ndarray, mask: np.ndarray) -> nk.Tensor:
    """MSE over present steps only; mask is (B, T), entries count per dim."""
    count = float(mask.sum()) * pred.shape[-1]
    if count == 0:
        return nk.constant(np.float32(0.0))
    diff = nk.sub(pred, nk.constant(target))
    weighted = nk.mul(nk.mul(diff, diff), nk.constant(mask[:, :, None]))
    return nk.scale(nk.tsum(weighted), 1.0 / count)


def train_loss(decoded: dict, targets: dict, masks: dict, weights: dict, regularizer: tuple | None = None) -> nk.Tensor:
    """Weighted sum of per-channel MSEs (mask-aware for recall channels),
    plus the optional state mean-square regularizer (tensor, weight)."""
    total = None
    for name, pred in decoded.items():
        mask = masks.get(name)
        if mask is None:
            term = nk.mse(pred, nk.constant(targets[name]))
        else:
            term = masked_mse(pred, targets[name], mask)
        term = nk.scale(term, weights.get(name, 1.0))
        total = term if total is None else nk.add(total, term)
    if regularizer is not None:
        states, weight = regularizer
        total = nk.add(total, nk.scale(nk.tmean(nk.mul(states, states)), weight))
    return total


class Trainer:
    """Owns the model, optimizer, and state stores for one training run."""

    def __init__(self, model: WorldModel, dataset, protocol: ProtocolConfig, schedule: TrainingSchedule, seed=0):
        self.model = model
        self.dataset = dataset
        self.protocol = protocol
        self.schedule = schedule
        self.rng = np.random.default_rng(seed)
        d = model.config.state_dim
        self.train_idx = dataset.split_indices("train")
        self.val_idx = dataset.split_indices("val")
        seq_len = dataset.seq_len
        self.train_store = StateStore(len(self.train_idx), seq_len, d, self.rng)
        self.val_store = StateStore(len(self.val_idx), seq_len, d, self.rng)
        self.projectors = {}
        for direction, spec in (("future", protocol.recall_future), ("past", protocol.recall_past)):
            if spec:
                self.projectors[direction] = self.rng.uniform(-1, 1, size=(2, 2)).astype(np.float32)
        self.optimizer = nk.AdamW(
            lr=schedule.lr_max,
            betas=(schedule.beta1, schedule.beta2),
            eps=schedule.eps,
            weight_decay=schedule.weight_decay,
        )
        batches = max(1, -(-len(self.train_idx) // schedule.batch_size))
        self.total_steps = schedule.epochs * batches
        self.warmup_steps = int(self.total_steps * schedule.warmup_frac)
        self.global_step = 0
        self.epoch = 0
        self.diverged = False

    # -- batch pipeline --------------------------------------------------------

    def _recall_targets(self, measurement: np.ndarray) -> dict:
        channels = {}
        for direction, spec in (("future", self.protocol.recall_future), ("past", self.protocol.recall_past)):
            if spec:
                channels.update(build_recall_channels(measurement, spec, direction, self.projectors[direction]))
        return channels

    def _train_batch(self, idx: np.ndarray, store_rows: np.ndarray, debug: dict | None = None) -> float:
        cfg = self.protocol
        meas = self.dataset.measurement[idx]
        ext = self.dataset.external[idx]
        stored = self.train_store.get(store_rows)
        b, seq_len, _ = stored.shape

        if cfg.sensory_masking:
            _, present = mask_sensory((b, seq_len), self.rng)
        else:
            present = np.ones((b, seq_len), dtype=np.float32)
        recall = self._recall_targets(meas)
        segments = break_sequence(seq_len, cfg.n_segment, self.rng)
        meas_in = add_noise(meas, cfg.noise_measurement, self.rng) if cfg.noise_measurement else meas
        stored_in = add_noise(stored, cfg.noise_state, self.rng) if cfg.noise_state else stored

        outputs = []
        prev_last = None
        local_flags = []
        segment_inputs = []
        # divergence (overflow to inf/NaN) is an expected, measured outcome
        with np.errstate(over="ignore", invalid="ignore"):
            for start, stop in segments:
                seg = nk.constant(stored_in[:, start:stop])
                if cfg.fast_forward and prev_last is not None:
                    seg = nk.concat([prev_last, nk.slice_axis(seg, 1, 1, stop - start)], axis=1)
                if debug is not None:
                    segment_inputs.append(seg.data.copy())
                local = bool(self.rng.random() < cfg.local_chance)
                local_flags.append(local)
                out = self.model.forward(
                    seg, {"measurement": (meas_in[:, start:stop], present[:, start:stop])}, local_mode=local
                )
                outputs.append(out)
                prev_last = nk.slice_axis(out, 1, stop - start - 1, stop - start)
            preds = outputs[0] if len(outputs) == 1 else nk.concat(outputs, axis=1)
            loss = self._loss(preds, ext, meas, recall)
        loss_value = float(loss.data)
        if debug is not None:
            debug.update(
                segments=segments,
                local_flags=local_flags,
                present=present,
                stored_inputs=stored_in,
                segment_inputs=segment_inputs,
                preds=preds.data.copy(),
            )
        if not np.isfinite(loss_value):
            raise _Divergence(f"non-finite loss {loss_value}")

        with np.errstate(over="ignore", invalid="ignore"):
            grads = nk.grad_map(loss, self.model.params)
            lr = nk.cosine_warmup_lr(
                self.global_step, self.total_steps, self.warmup_steps, self.schedule.lr_max, self.schedule.lr_min
            )
            self.optimizer.step(self.model.params, grads, lr=lr)
        self.global_step += 1

        keep = (present == 0) if cfg.check_input_masks else None
        self.train_store.update(store_rows, preds.data, cfg.state_save_method, keep)
        return loss_value

    def _loss(self, preds: nk.Tensor, ext: np.ndarray, meas: np.ndarray, recall: dict) -> nk.Tensor:
        cfg = self.protocol
        seq_len = preds.shape[1]
        head = nk.slice_axis(preds, 1, 0, seq_len - 1)  # states for steps 1..L-1
        decoded, targets, masks, weights = {}, {}, {}, {}
        for name, target in (("external_state", ext), ("measurement", meas)):
            decoded[name] = self.model.decode(head, name)
            targets[name] = target[:, 1:]
            masks[name] = None
            weights[name] = cfg.weight(name)
        for name, (target, mask) in recall.items():
            decoded[name] = self.model.decode(head, name)
            targets[name] = target[:, 1:]
            masks[name] = mask[:, 1:]
            weights[name] = cfg.weight(name)
        reg = None
        if cfg.state_regularizer == "mse":
            reg = (preds, cfg.regularizer_weight)
        return train_loss(decoded, targets, masks, weights, reg)

    # -- epochs ------------------------------------------------------------------

    def train_epoch(self) -> EpochStats:
        """One pass over the train split (shuffled), then a clean validation
        pass. Wall time covers the train portion only, which is what the
        duration-impact analysis compares."""
        self.epoch += 1
        bs = self.schedule.batch_size
        order = self.rng.permutation(len(self.train_idx))
        losses = []
        start_time = time.perf_counter()
        diverged = False
        try:
            for at in range(0, len(order), bs):
                rows = order[at : at + bs]
                losses.append(self._train_batch(self.train_idx[rows], rows))
        except (_Divergence, nk.GradientNaNError):
            diverged = True
            self.diverged = True
        seconds = time.perf_counter() - start_time
        train_loss_value = float(np.mean(losses)) if losses else float("nan")
        val_loss_value = float("nan") if diverged else self.validation_loss()
        return EpochStats(self.epoch, train_loss_value, val_loss_value, seconds, diverged)

    def validation_loss(self) -> float:
        """Clean pass: no masking, noise, breaking, or local mode; recall
        channels excluded. Updates the validation state store."""
        bs = self.schedule.batch_size
        total, count = 0.0, 0
        with nk.no_grad(), np.errstate(over="ignore", invalid="ignore"):
            for at in range(0, len(self.val_idx), bs):
                rows = np.arange(at, min(at + bs, len(self.val_idx)))
                idx = self.val_idx[rows]
                stored = self.val_store.get(rows)
                meas = self.dataset.measurement[idx]
                ext = self.dataset.external[idx]
                present = np.ones(stored.shape[:2], dtype=np.float32)
                preds = self.model.forward(stored, {"measurement": (meas, present)})
                loss = self._clean_loss(preds, ext, meas)
                self.val_store.update(rows, preds.data, self.protocol.state_save_method)
                total += float(loss.data) * len(rows)
                count += len(rows)
        return total / max(count, 1)

    def _clean_loss(self, preds, ext, meas):
        seq_len = preds.shape[1]
        head = nk.slice_axis(preds, 1, 0, seq_len - 1)
        decoded = {name: self.model.decode(head, name) for name in ("external_state", "measurement")}
        targets = {"external_state": ext[:, 1:], "measurement": meas[:, 1:]}
        return train_loss(decoded, targets, {}, {n: self.protocol.weight(n) for n in decoded})

    def train(self, log_path=None) -> list[EpochStats]:
        """Full run; stops early on divergence. Optionally appends the
        per-epoch CSV log (epoch, train_loss, val_loss, epoch_seconds,
        diverged)."""
        stats = []
        log = open(log_path, "w") if log_path else None
        try:
            if log:
                log.write("epoch,train_loss,val_loss,epoch_seconds,diverged\n")
            for _ in range(self.schedule.epochs):
                s = self.train_epoch()
                stats.append(s)
                if log:
                    log.write(f"{s.epoch},{s.train_loss!r},{s.val_loss!r},{s.seconds!r},{int(s.diverged)}\n")
                    log.flush()
                if s.diverged:
                    break
        finally:
            if log:
                log.close()
        return stats
