"""The evaluation tasks, the soft dynamic time warping criterion, and the
divergence rule.

Tasks share one convention: the model's output at position i is the state
for step i+1, and decoding a step-t state yields the sensory prediction for
step t. A range starting at step 0 therefore contributes targets from step 1
(the null state makes no step-0 prediction); prediction-style ranges cover
exactly the second half.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk

EVAL_CHANNELS = ("external_state", "measurement")
TASK_NAMES = (
    "normal",
    "use_state",
    "prediction",
    "prediction_shallow",
    "prediction_local",
    "mask_sensory",
)


@dataclass
class TaskResult:
    task: str
    channel_mse: dict
    channel_sdtw: dict
    step_range: tuple
    composite_mse: float
    composite_sdtw: float

    @property
    def has_nan(self) -> bool:
        vals = list(self.channel_mse.values()) + list(self.channel_sdtw.values())
        return bool(np.isnan(vals).any())


# -- soft dynamic time warping ---------------------------------------------------


def _softmin3(a, b, c, gamma):
    stack = np.stack([a, b, c], axis=0) / -gamma
    m = stack.max(axis=0)
    out = -gamma * (np.log(np.exp(stack - m).sum(axis=0)) + m)
    return np.where(np.isneginf(m), np.inf, out)


def soft_dtw_batch(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """Soft-DTW per pair: a (B, n, c) vs b (B, m, c), squared-Euclidean step
    cost, smoothed minimum with temperature gamma > 0. Anti-diagonal sweep
    keeps the recurrence vectorized over the batch."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise nk.ShapeError("soft_dtw", a.shape, b.shape)
    n, m = a.shape[1], b.shape[1]
    if n == 0 or m == 0:
        raise ValueError("soft_dtw requires nonempty sequences")
    cost = (
        (a * a).sum(-1)[:, :, None]
        + (b * b).sum(-1)[:, None, :]
        - 2.0 * np.einsum("bic,bjc->bij", a, b)
    )
    r = np.full((a.shape[0], n + 1, m + 1), np.inf)
    r[:, 0, 0] = 0.0
    for d in range(2, n + m + 1):
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        j = d - i
        r[:, i, j] = cost[:, i - 1, j - 1] + _softmin3(
            r[:, i - 1, j], r[:, i, j - 1], r[:, i - 1, j - 1], gamma
        )
    return r[:, n, m]


def soft_dtw(a: np.ndarray, b: np.ndarray, gamma: float) -> float:
    """Single-pair soft-DTW; a is (n, c) or (n,), b likewise."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.ndim == 2 and a.shape[1] != b.shape[1]:
        raise nk.ShapeError("soft_dtw", a.shape, b.shape)
    return float(soft_dtw_batch(a[None], b[None], gamma)[0])


# -- divergence rule ----------------------------------------------------------------


def detect_divergence(metric_table: np.ndarray) -> np.ndarray:
    """Flag variations whose any task metric is NaN or lies more than three
    standard deviations above that metric's mean across variations (moments
    over the non-NaN values). metric_table is (n_variations, n_tasks).

    The threshold is centered at the mean: an uncentered value > 3*sigma
    rule would flag every variation of any tightly clustered positive
    metric, leaving nothing to analyze."""
    table = np.asarray(metric_table, dtype=np.float64)
    flags = np.isnan(table).any(axis=1)
    for col in range(table.shape[1]):
        vals = table[:, col]
        finite = vals[~np.isnan(vals)]
        if finite.size == 0:
            continue
        sigma = finite.std()
        if sigma > 0:
            with np.errstate(invalid="ignore"):
                flags |= vals > finite.mean() + 3.0 * sigma
    return flags


# -- evaluator -----------------------------------------------------------------------


class Evaluator:
    """Read-only task runner over a frozen model and one dataset split.

    Deterministic given (model weights, dataset, mask_seed); the first
    max_sequences of the split are used.
    """

    def __init__(self, model, dataset, split="test", max_sequences=256, sdtw_gamma=0.1, mask_seed=0, loss_weights=None):
        self.model = model
        self.dataset = dataset
        idx = dataset.split_indices(split)[:max_sequences]
        self.external = dataset.external[idx]
        self.measurement = dataset.measurement[idx]
        self.gamma = sdtw_gamma
        self.mask_seed = mask_seed
        self.weights = loss_weights or {}
        self.seq_len = dataset.seq_len
        self.half = self.seq_len // 2

    # -- rollout machinery ---------------------------------------------------------

    def _rollout(self, init_states: np.ndarray, present: np.ndarray, upto: int) -> np.ndarray:
        """Autoregressively extend init_states (B, T0, d) to (B, upto, d);
        the model output at the last position becomes the next state."""
        states = init_states
        data = self.measurement
        with nk.no_grad():
            while states.shape[1] < upto:
                t = states.shape[1]
                out = self.model.forward(states, {"measurement": (data[:, :t], present[:, :t])})
                states = np.concatenate([states, out.data[:, -1:]], axis=1)
        return states

    def _null_states(self) -> np.ndarray:
        b = self.external.shape[0]
        return np.zeros((b, 1, self.model.config.state_dim), dtype=np.float32)

    def _ones(self) -> np.ndarray:
        return np.ones(self.measurement.shape[:2], dtype=np.float32)

    def _zeros(self) -> np.ndarray:
        return np.zeros(self.measurement.shape[:2], dtype=np.float32)

    def encode_first_half(self, present: np.ndarray | None = None) -> np.ndarray:
        """States for steps 0..L/2-1 from a sensory-conditioned rollout that
        starts at the null state."""
        present = self._ones() if present is None else present
        return self._rollout(self._null_states(), present, self.half)

    def _decode(self, states: np.ndarray) -> dict:
        with nk.no_grad():
            return {
                name: self.model.decode(nk.constant(states), name).data
                for name in EVAL_CHANNELS
            }

    def _result(self, task: str, pred_states: np.ndarray, target_steps: np.ndarray, step_range: tuple) -> TaskResult:
        """pred_states (B, S, d) are the states for steps target_steps."""
        decoded = self._decode(pred_states)
        targets = {
            "external_state": self.external[:, target_steps],
            "measurement": self.measurement[:, target_steps],
        }
        mse = {}
        sdtw = {}
        with np.errstate(over="ignore", invalid="ignore"):
            for name in EVAL_CHANNELS:
                err = decoded[name].astype(np.float64) - targets[name].astype(np.float64)
                mse[name] = float(np.mean(err * err))
                sdtw[name] = float(
                    np.mean(soft_dtw_batch(decoded[name], targets[name], self.gamma))
                )
        w = {name: float(self.weights.get(name, 1.0)) for name in EVAL_CHANNELS}
        return TaskResult(
            task=task,
            channel_mse=mse,
            channel_sdtw=sdtw,
            step_range=step_range,
            composite_mse=float(sum(w[n] * mse[n] for n in EVAL_CHANNELS)),
            composite_sdtw=float(sum(w[n] * sdtw[n] for n in EVAL_CHANNELS)),
        )

    # -- tasks -------------------------------------------------------------------------

    def task_normal(self) -> TaskResult:
        states = self._rollout(self._null_states(), self._ones(), self.seq_len)
        steps = np.arange(1, self.seq_len)
        return self._result("normal", states[:, 1:], steps, (0, self.seq_len))

    def task_mask_sensory(self, x: float) -> TaskResult:
        if not 0 <= x <= 100:
            raise ValueError("mask percentage must lie in [0, 100]")
        rng = np.random.default_rng(self.mask_seed)
        present = (rng.random(self.measurement.shape[:2]) >= x / 100.0).astype(np.float32)
        states = self._rollout(self._null_states(), present, self.seq_len)
        steps = np.arange(1, self.seq_len)
        return self._result(f"mask_sensory@{x:g}", states[:, 1:], steps, (0, self.seq_len))

    def task_use_state(self, encoded: np.ndarray) -> TaskResult:
        """One parallel pass over the encoded first-half states, sensory
        fully masked."""
        with nk.no_grad():
            out = self.model.forward(
                encoded, {"measurement": (self.measurement[:, : self.half], self._zeros()[:, : self.half])}
            )
        steps = np.arange(1, self.half)
        return self._result("use_state", out.data[:, : self.half - 1], steps, (0, self.half))

    def task_prediction(self, encoded: np.ndarray) -> TaskResult:
        states = self._rollout(encoded, self._zeros(), self.seq_len)
        steps = np.arange(self.half, self.seq_len)
        return self._result("prediction", states[:, self.half :], steps, (self.half, self.seq_len))

    def task_prediction_shallow(self, encoded: np.ndarray) -> TaskResult:
        states = self._rollout(encoded[:, -1:], self._zeros(), self.half + 1)
        steps = np.arange(self.half, self.seq_len)
        return self._result("prediction_shallow", states[:, 1:], steps, (self.half, self.seq_len))

    def task_prediction_local(self, encoded: np.ndarray) -> TaskResult:
        """Stepwise local-mode inference: each next state is produced from
        the single previous state with attention disabled."""
        state = encoded[:, -1:]
        collected = []
        absent = np.zeros((state.shape[0], 1), dtype=np.float32)
        dummy = np.zeros((state.shape[0], 1, 2), dtype=np.float32)
        with nk.no_grad():
            for _ in range(self.half):
                out = self.model.forward(state, {"measurement": (dummy, absent)}, local_mode=True)
                state = out.data
                collected.append(state)
        states = np.concatenate(collected, axis=1)
        steps = np.arange(self.half, self.seq_len)
        return self._result("prediction_local", states, steps, (self.half, self.seq_len))

    # -- dispatch ------------------------------------------------------------------------

    def run(self, tasks, mask_x: float = 100.0) -> list[TaskResult]:
        """Run the named tasks ("all" for the full set); encoded states are
        computed once and shared."""
        if tasks == "all" or tasks == ["all"]:
            tasks = list(TASK_NAMES)
        unknown = [t for t in tasks if t not in TASK_NAMES]
        if unknown:
            raise ValueError(f"unknown tasks {unknown}; valid: {list(TASK_NAMES)}")
        encoded = None
        results = []
        for name in tasks:
            if name in ("use_state", "prediction", "prediction_shallow", "prediction_local") and encoded is None:
                encoded = self.encode_first_half()
            if name == "normal":
                results.append(self.task_normal())
            elif name == "mask_sensory":
                results.append(self.task_mask_sensory(mask_x))
            elif name == "use_state":
                results.append(self.task_use_state(encoded))
            elif name == "prediction":
                results.append(self.task_prediction(encoded))
            elif name == "prediction_shallow":
                results.append(self.task_prediction_shallow(encoded))
            elif name == "prediction_local":
                results.append(self.task_prediction_local(encoded))
        return results


def results_to_csv(results, variation_id: str, path) -> None:
    """Task results as CSV rows: variation_id, task, channel, mse, sdtw,
    diverged (per-row NaN flag)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variation_id", "task", "channel", "mse", "sdtw", "diverged"])
        for r in results:
            for channel in r.channel_mse:
                mse = r.channel_mse[channel]
                sdtw = r.channel_sdtw[channel]
                flag = int(not (np.isfinite(mse) and np.isfinite(sdtw)))
                w.writerow([variation_id, r.task, channel, repr(mse), repr(sdtw), flag])
            w.writerow([variation_id, r.task, "composite", repr(r.composite_mse), repr(r.composite_sdtw), int(r.has_nan)])
