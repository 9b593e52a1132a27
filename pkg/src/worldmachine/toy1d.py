"""Toy1D synthetic dataset: a damped second-order system driven by random
square and impulse waves, observed through a fixed random measurement matrix.

All randomness flows through a self-contained xoshiro256** generator with a
documented stream-splitting rule, so the dataset bytes are a pure function of
the 64-bit seed and reproducible from any implementation of the same
generator.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_M64 = (1 << 64) - 1
_PHI = 0x9E3779B97F4A7C15

# One integration step at unit dt: position += velocity + accel/2,
# velocity += accel - 0.1 * position (damping), accel unchanged.
SYSTEM_MATRIX = np.array(
    [[1.0, 1.0, 0.5], [-0.1, 1.0, 1.0], [0.0, 0.0, 1.0]], dtype=np.float64
)

SPLIT_NAMES = ("train", "val", "test")

MAGIC = b"T1D1"
FORMAT_VERSION = 1


def _mix64(z: int) -> int:
    """splitmix64 output scramble (stateless)."""
    z = (z + _PHI) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


class Xoshiro256StarStar:
    """xoshiro256** with the usual splitmix64 state seeding."""

    def __init__(self, seed: int):
        s = seed & _M64
        self.s = []
        for _ in range(4):
            s = _mix64(s)
            self.s.append(s)
        if not any(self.s):
            self.s[0] = 1  # the all-zero state is invalid

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        x = (s1 * 5) & _M64
        result = (((x << 7) | (x >> 57)) & _M64) * 9 & _M64
        t = (s1 << 17) & _M64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _M64
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53  # 53-bit float in [0, 1)
        return lo + (hi - lo) * u

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection (no modulo bias)."""
        limit = (_M64 + 1) - ((_M64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n


def substream(seed: int, *keys: int) -> Xoshiro256StarStar:
    """Stream-splitting rule: fold each key into the seed with splitmix64
    scrambles, then seed a fresh generator. Distinct key tuples give
    independent streams."""
    acc = _mix64(seed & _M64)
    for k in keys:
        acc = _mix64(acc ^ _mix64(k & _M64))
    return Xoshiro256StarStar(acc)


# Stream keys (first key selects the purpose, later keys index within it).
_STREAM_H = 0
_STREAM_SPLIT = 1
_STREAM_SEQUENCE = 2


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs of the generator; defaults reproduce the full-size dataset."""

    n_raw: int = 10_000
    raw_len: int = 1_000
    window_len: int = 200
    windows_per_raw: int = 4
    max_square_waves: int = 3
    square_period: tuple = (20.0, 200.0)
    square_amp: float = 0.05
    max_impulses: int = 5
    impulse_amp: float = 0.5
    split_fracs: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.windows_per_raw * self.window_len > self.raw_len:
            raise ValueError("windows do not fit into the raw sequence length")

    @property
    def n_sequences(self) -> int:
        return self.n_raw * self.windows_per_raw


def step_system(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """x' = F x + u, then clip velocity and acceleration to [-1, 1].

    Works on a single state (3,) or a batch (..., 3).
    """
    x = np.asarray(x, dtype=np.float64)
    y = x @ SYSTEM_MATRIX.T + np.asarray(u, dtype=np.float64)
    y[..., 1:] = np.clip(y[..., 1:], -1.0, 1.0)
    return y


def measure(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Measurement tanh(H [position, velocity]); x is (..., 3), H is (2, 2)."""
    x = np.asarray(x, dtype=np.float64)
    return np.tanh(x[..., :2] @ np.asarray(h, dtype=np.float64).T)


def generate_forcing(rng: Xoshiro256StarStar, length: int, config: GenerationConfig | None = None) -> np.ndarray:
    """Per-step forcing vectors (length, 3); only the acceleration component
    is driven, by a random sum of square waves and single-step impulses."""
    config = config or GenerationConfig()
    accel = np.zeros(length, dtype=np.float64)
    t = np.arange(length, dtype=np.float64)
    n_sq = rng.randint(config.max_square_waves + 1)
    for _ in range(n_sq):
        period = rng.uniform(*config.square_period)
        amp = rng.uniform(-config.square_amp, config.square_amp)
        phase = rng.uniform(0.0, period)
        accel += np.where((t + phase) % period < period / 2.0, amp, -amp)
    n_imp = rng.randint(config.max_impulses + 1)
    for _ in range(n_imp):
        pos = rng.randint(length)
        accel[pos] += rng.uniform(-config.impulse_amp, config.impulse_amp)
    u = np.zeros((length, 3), dtype=np.float64)
    u[:, 2] = accel
    return u


def _scale_windows(values: np.ndarray) -> np.ndarray:
    """Min-max scale each (window, channel) slice to [-1, 1]; constant
    channels map to 0. values is (n, window_len, channels)."""
    lo = values.min(axis=1, keepdims=True)
    hi = values.max(axis=1, keepdims=True)
    span = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = (values - lo) / span * 2.0 - 1.0
    return np.where(span == 0.0, 0.0, scaled)


@dataclass
class Toy1DDataset:
    """Segmented, scaled, split dataset.

    external: (N, L, 1) float32, measurement: (N, L, 2) float32, both scaled
    to [-1, 1]; split_tag: (N,) uint8 indexing SPLIT_NAMES.
    """

    seed: int
    h_matrix: np.ndarray
    external: np.ndarray
    measurement: np.ndarray
    split_tag: np.ndarray
    config: GenerationConfig = field(default_factory=GenerationConfig)

    @property
    def n_sequences(self) -> int:
        return self.external.shape[0]

    @property
    def seq_len(self) -> int:
        return self.external.shape[1]

    def split_indices(self, split: str) -> np.ndarray:
        tag = SPLIT_NAMES.index(split)
        return np.nonzero(self.split_tag == tag)[0]

    def split_counts(self) -> dict:
        return {name: int((self.split_tag == i).sum()) for i, name in enumerate(SPLIT_NAMES)}

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = MAGIC + struct.pack("<IQ", FORMAT_VERSION, self.seed)
        h_block = np.zeros(8, dtype=np.float64)
        h_block[:4] = self.h_matrix.reshape(-1)
        header += h_block.astype("<f8").tobytes()
        header += struct.pack("<II", self.n_sequences, self.seq_len)
        rows = np.concatenate([self.external, self.measurement], axis=2).astype("<f4")
        parts = [header]
        for i in range(self.n_sequences):
            parts.append(struct.pack("<B", int(self.split_tag[i])))
            parts.append(rows[i].tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def load(cls, path) -> "Toy1DDataset":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError(f"not a Toy1D container: bad magic {raw[:4]!r}")
        version, seed = struct.unpack_from("<IQ", raw, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported container version {version}")
        off = 16
        h_block = np.frombuffer(raw, dtype="<f8", count=8, offset=off)
        off += 64
        n_seq, seq_len = struct.unpack_from("<II", raw, off)
        off += 8
        split_tag = np.empty(n_seq, dtype=np.uint8)
        data = np.empty((n_seq, seq_len, 3), dtype=np.float32)
        row_bytes = seq_len * 3 * 4
        for i in range(n_seq):
            split_tag[i] = raw[off]
            off += 1
            data[i] = np.frombuffer(raw, dtype="<f4", count=seq_len * 3, offset=off).reshape(seq_len, 3)
            off += row_bytes
        return cls(
            seed=seed,
            h_matrix=h_block[:4].reshape(2, 2).copy(),
            external=data[:, :, :1].copy(),
            measurement=data[:, :, 1:].copy(),
            split_tag=split_tag,
        )

    def export_csv(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for tag, name in enumerate(SPLIT_NAMES):
            path = out_dir / f"{name}.csv"
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["seq_id", "t", "ext", "m0", "m1"])
                for i in np.nonzero(self.split_tag == tag)[0]:
                    for t in range(self.seq_len):
                        w.writerow(
                            [
                                int(i),
                                t,
                                repr(float(self.external[i, t, 0])),
                                repr(float(self.measurement[i, t, 0])),
                                repr(float(self.measurement[i, t, 1])),
                            ]
                        )
            written.append(path)
        return written


def generate_dataset(seed: int, config: GenerationConfig | None = None, chunk: int = 2000) -> Toy1DDataset:
    """Generate, segment, scale, and split the dataset for one seed."""
    config = config or GenerationConfig()
    h_rng = substream(seed, _STREAM_H)
    h = np.array([[h_rng.uniform(-1.0, 1.0) for _ in range(2)] for _ in range(2)])

    n_raw, raw_len = config.n_raw, config.raw_len
    used = config.windows_per_raw * config.window_len
    ext_raw = np.empty((n_raw, used), dtype=np.float64)
    meas_raw = np.empty((n_raw, used, 2), dtype=np.float64)

    for start in range(0, n_raw, chunk):
        stop = min(start + chunk, n_raw)
        size = stop - start
        x = np.empty((size, 3), dtype=np.float64)
        forcing = np.empty((size, raw_len), dtype=np.float64)
        for j in range(size):
            rng = substream(seed, _STREAM_SEQUENCE, start + j)
            x[j] = [rng.uniform(-1.0, 1.0) for _ in range(3)]
            forcing[j] = generate_forcing(rng, raw_len, config)[:, 2]
        states2 = np.empty((size, used, 2), dtype=np.float64)
        for t in range(used):
            states2[:, t] = x[:, :2]
            y = x @ SYSTEM_MATRIX.T
            y[:, 2] += forcing[:, t]
            y[:, 1:] = np.clip(y[:, 1:], -1.0, 1.0)
            x = y
        ext_raw[start:stop] = states2[:, :, 0]
        meas_raw[start:stop] = np.tanh(states2 @ h.T)

    n_seq = config.n_sequences
    wl = config.window_len
    ext = ext_raw.reshape(n_seq, wl, 1)
    meas = meas_raw.reshape(n_seq, wl, 2)
    ext = _scale_windows(ext).astype(np.float32)
    meas = _scale_windows(meas).astype(np.float32)

    order = np.arange(n_seq)
    shuffle_rng = substream(seed, _STREAM_SPLIT)
    for i in range(n_seq - 1, 0, -1):  # Fisher-Yates
        j = shuffle_rng.randint(i + 1)
        order[i], order[j] = order[j], order[i]
    n_train = int(n_seq * config.split_fracs[0])
    n_val = int(n_seq * config.split_fracs[1])
    split_tag = np.empty(n_seq, dtype=np.uint8)
    split_tag[order[:n_train]] = 0
    split_tag[order[n_train : n_train + n_val]] = 1
    split_tag[order[n_train + n_val :]] = 2

    return Toy1DDataset(
        seed=seed,
        h_matrix=h,
        external=ext,
        measurement=meas,
        split_tag=split_tag,
        config=config,
    )
