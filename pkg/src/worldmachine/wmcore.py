"""The world-model core.

Input sensory channels pass through per-channel pre-encoders into
conditioning vectors. A stack of transformer blocks evolves the latent
states: sensory blocks are conditioned via zero-initialized scale/shift/gate
modulation (identity at init), standard blocks are plain pre-norm blocks.
Attention is causal with a per-head linear distance bias; local mode bypasses
attention entirely (value projection then output projection, positionwise).
A final tanh bounds every emitted state component.

States, conditioning, and all activations are (batch, time, dim) tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk

CKPT_MAGIC = b"WMCK"
CKPT_VERSION = 1

# Block kinds: conditioning source per block.
BLOCK_MEASUREMENT = "M"  # pre-encoded measurement channel
BLOCK_STATE = "S"  # the core-input state sequence itself
BLOCK_STANDARD = "standard"


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int = 128
    n_heads: int = 4
    ff_mult: int = 4
    block_configuration: tuple = ("M", "M")
    input_channels: dict = field(default_factory=lambda: {"measurement": 2})
    output_channels: dict = field(
        default_factory=lambda: {"external_state": 1, "measurement": 2}
    )
    state_activation: str = "tanh"  # "tanh" or "none"
    init_std: float = 0.02

    def __post_init__(self):
        if self.state_dim % self.n_heads:
            raise ValueError("state_dim must be divisible by n_heads")
        if self.state_activation not in ("tanh", "none"):
            raise ValueError(f"unknown state_activation {self.state_activation!r}")
        for kind in self.block_configuration:
            if kind == BLOCK_MEASUREMENT and "measurement" not in self.input_channels:
                raise ValueError("block conditioned on an unregistered channel")
            elif kind not in (BLOCK_MEASUREMENT, BLOCK_STATE, BLOCK_STANDARD):
                raise ValueError(f"unknown block kind {kind!r}")


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Per-head geometric slopes 2^(-8h/n_heads), h = 1..n_heads."""
    return np.array([2.0 ** (-8.0 * h / n_heads) for h in range(1, n_heads + 1)])


def alibi_bias(seq_len: int, n_heads: int) -> np.ndarray:
    """(heads, T, T) additive logit bias: -slope*(i-j) for j <= i, -inf above
    the diagonal (causal mask)."""
    i = np.arange(seq_len)
    dist = i[:, None] - i[None, :]
    slopes = alibi_slopes(n_heads).astype(np.float32)
    bias = -slopes[:, None, None] * dist[None, :, :].astype(np.float32)
    bias[:, dist < 0] = -np.inf
    return bias


_bias_cache: dict = {}


def _cached_bias(seq_len: int, n_heads: int) -> np.ndarray:
    """Serve slices of the largest bias built so far (rollouts grow T by 1)."""
    cached = _bias_cache.get(n_heads)
    if cached is None or cached.shape[1] < seq_len:
        cached = alibi_bias(seq_len, n_heads)
        _bias_cache[n_heads] = cached
    return cached[:, :seq_len, :seq_len]


class Conditioning:
    """Per-step conditioning vectors plus the presence mask (the absent
    marker); values at absent steps are never consumed."""

    def __init__(self, values: nk.Tensor, present: np.ndarray):
        self.values = values
        self.present = present  # (B, T) float 0/1


class WorldModel:
    """Parameters plus the forward pass. Mutable only through the optimizer;
    forward passes never touch parameter data."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.state_dim
        self.params: dict[str, nk.Tensor] = {}

        def param(name, shape, std):
            data = (
                rng.normal(0.0, std, size=shape).astype(np.float32)
                if std
                else np.zeros(shape, dtype=np.float32)
            )
            self.params[name] = nk.Tensor(data, requires_grad=True)

        for name, dim in config.input_channels.items():
            param(f"pre.{name}.w", (dim, d), config.init_std)
            param(f"pre.{name}.b", (d,), 0.0)
        for i, kind in enumerate(config.block_configuration):
            for proj in ("wq", "wk", "wv", "wo"):
                param(f"block{i}.attn.{proj}", (d, d), config.init_std)
            for proj in ("bq", "bk", "bv", "bo"):
                param(f"block{i}.attn.{proj}", (d,), 0.0)
            param(f"block{i}.ff.w1", (d, config.ff_mult * d), config.init_std)
            param(f"block{i}.ff.b1", (config.ff_mult * d,), 0.0)
            param(f"block{i}.ff.w2", (config.ff_mult * d, d), config.init_std)
            param(f"block{i}.ff.b2", (d,), 0.0)
            if kind != BLOCK_STANDARD:
                # zero-initialized modulation head: the block starts as identity
                param(f"block{i}.mod.w", (d, 6 * d), 0.0)
                param(f"block{i}.mod.b", (6 * d,), 0.0)
        for name, dim in config.output_channels.items():
            param(f"dec.{name}.w", (d, dim), config.init_std)
            param(f"dec.{name}.b", (dim,), 0.0)

    # -- helpers --------------------------------------------------------------

    def _affine(self, x: nk.Tensor, w: str, b: str) -> nk.Tensor:
        return nk.add(nk.matmul(x, self.params[w]), self.params[b])

    @staticmethod
    def _blend(present: np.ndarray, on: nk.Tensor, off: nk.Tensor) -> nk.Tensor:
        """present*on + (1-present)*off, stepwise; exact passthrough when the
        two sides agree."""
        m = nk.constant(present[:, :, None])
        inv = nk.constant(1.0 - present[:, :, None])
        return nk.add(nk.mul(on, m), nk.mul(off, inv))

    # -- operations ------------------------------------------------------------

    def pre_encode(self, name: str, data: np.ndarray, mask: np.ndarray) -> Conditioning:
        """Affine channel-dim -> state-dim conditioning for one input channel."""
        if name not in self.config.input_channels:
            raise ValueError(
                f"unknown input channel {name!r}; registered: {sorted(self.config.input_channels)}"
            )
        values = self._affine(nk.constant(np.asarray(data, dtype=np.float32)), f"pre.{name}.w", f"pre.{name}.b")
        return Conditioning(values, np.asarray(mask, dtype=np.float32))

    def decode(self, states: nk.Tensor, name: str) -> nk.Tensor:
        """Affine state-dim -> channel-dim readout, no output activation."""
        if name not in self.config.output_channels:
            raise ValueError(
                f"unknown output channel {name!r}; registered: {sorted(self.config.output_channels)}"
            )
        return self._affine(states, f"dec.{name}.w", f"dec.{name}.b")

    def _attention(self, i: int, x: nk.Tensor, local_mode: bool, trace=None) -> nk.Tensor:
        v = self._affine(x, f"block{i}.attn.wv", f"block{i}.attn.bv")
        if local_mode:
            return self._affine(v, f"block{i}.attn.wo", f"block{i}.attn.bo")
        b, t, d = x.shape
        heads = self.config.n_heads
        dh = d // heads

        def split_heads(z):  # (B,T,d) -> (B,H,T,dh)
            return nk.transpose(nk.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

        q = split_heads(self._affine(x, f"block{i}.attn.wq", f"block{i}.attn.bq"))
        k = split_heads(self._affine(x, f"block{i}.attn.wk", f"block{i}.attn.bk"))
        vh = split_heads(v)
        scores = nk.scale(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        scores = nk.add(scores, nk.constant(_cached_bias(t, heads)))
        weights = nk.softmax(scores, axis=-1)
        if trace is not None:
            trace.setdefault("attention_weights", {})[i] = weights.data.copy()
        out = nk.matmul(weights, vh)
        out = nk.reshape(nk.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self._affine(out, f"block{i}.attn.wo", f"block{i}.attn.bo")

    def _feed_forward(self, i: int, h: nk.Tensor) -> nk.Tensor:
        z = nk.gelu(self._affine(h, f"block{i}.ff.w1", f"block{i}.ff.b1"))
        return self._affine(z, f"block{i}.ff.w2", f"block{i}.ff.b2")

    def sensory_block(self, i: int, x: nk.Tensor, cond: Conditioning, local_mode=False, trace=None) -> nk.Tensor:
        """Conditioned residual block. Modulation (scale/shift before each
        sublayer, gate after it) applies only at present steps; absent steps
        take the plain block path."""
        d = self.config.state_dim
        mod = self._affine(cond.values, f"block{i}.mod.w", f"block{i}.mod.b")
        parts = [nk.slice_axis(mod, 2, j * d, (j + 1) * d) for j in range(6)]
        gamma1, beta1, gate1, gamma2, beta2, gate2 = parts
        one = nk.constant(np.float32(1.0))
        present = cond.present

        h = nk.layer_norm(x, axis=-1)
        h_in = self._blend(present, nk.scale_shift(h, nk.add(gamma1, one), beta1), h)
        a = self._attention(i, h_in, local_mode, trace)
        x = nk.add(x, self._blend(present, nk.mul(a, gate1), a))

        h2 = nk.layer_norm(x, axis=-1)
        h2_in = self._blend(present, nk.scale_shift(h2, nk.add(gamma2, one), beta2), h2)
        f = self._feed_forward(i, h2_in)
        return nk.add(x, self._blend(present, nk.mul(f, gate2), f))

    def standard_block(self, i: int, x: nk.Tensor, local_mode=False, trace=None) -> nk.Tensor:
        x = nk.add(x, self._attention(i, nk.layer_norm(x, axis=-1), local_mode, trace))
        return nk.add(x, self._feed_forward(i, nk.layer_norm(x, axis=-1)))

    def forward(self, states, sensory: dict, local_mode: bool = False, trace=None) -> nk.Tensor:
        """Run the block stack over input states.

        states: (B, T, d) array or tensor; position 0 must be the null vector
        for fresh sequences. sensory maps channel name -> (data (B,T,c),
        mask (B,T)). Output at position i is the predicted state for step
        i+1, tanh-bounded unless state_activation is "none".
        """
        x = states if isinstance(states, nk.Tensor) else nk.constant(np.asarray(states, dtype=np.float32))
        input_states = x
        b, t, _ = x.shape
        all_present = np.ones((b, t), dtype=np.float32)
        for idx, kind in enumerate(self.config.block_configuration):
            if kind == BLOCK_STANDARD:
                x = self.standard_block(idx, x, local_mode, trace)
                continue
            if kind == BLOCK_STATE:
                cond = Conditioning(input_states, all_present)
            else:
                data, mask = sensory["measurement"]
                cond = self.pre_encode("measurement", data, mask)
            if trace is not None:
                trace.setdefault("conditioning", {})[idx] = cond.values.data
            x = self.sensory_block(idx, x, cond, local_mode, trace)
        if self.config.state_activation == "tanh":
            x = nk.tanh(x)
        return x

    # -- persistence ------------------------------------------------------------

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, tensors: dict) -> None:
        """Install tensors; every expected name must be present with the
        exact shape, and no extras are allowed."""
        missing = sorted(set(self.params) - set(tensors))
        extra = sorted(set(tensors) - set(self.params))
        if missing or extra:
            raise ValueError(f"checkpoint/config mismatch: missing={missing} extra={extra}")
        for name, p in self.params.items():
            arr = np.asarray(tensors[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


def save_checkpoint(path, config_json: str, tensors: dict) -> None:
    """Container: magic, u32 version, length-prefixed canonical-JSON config,
    then named tensors (u32 name len, name, u32 rank, u32 extents, f32 data),
    little-endian throughout, until end of file."""
    blob = config_json.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[str, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"not a checkpoint: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, 8)
    off = 12
    config_json = raw[off : off + blob_len].decode("utf-8")
    off += blob_len
    tensors = {}
    while off < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        )
        off += 4 * count
    # canonical-JSON sanity: the blob must parse
    json.loads(config_json)
    return config_json, tensors
