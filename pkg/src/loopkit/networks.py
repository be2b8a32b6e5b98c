"""Permutation-invariant set architectures.

Three models share one calling convention ``forward(params, config, batch)``:

- ``deepsets-gap``: per-element MLP encoder, masked global average pooling,
  MLP decoder.
- ``deepsets-swe``: same encoder, pooling by sliced quantile embedding
  (project features on trainable unit directions, sort, read the empirical
  quantile function at fixed levels).
- ``set-transformer``: induced self-attention encoder, pooling by multihead
  attention over learned seed queries, small self-attention decoder.

Variable cardinality is handled by padding plus a boolean mask; masked
positions are excluded from every pooling denominator and receive -1e30
attention logits, so they cannot influence outputs.

Attention block wiring: ``mab(x, y) = LN(h + ff(h))`` where
``h = LN(x + multihead(x, y, y))``; ``sab(x) = mab(x, x)``; ``isab(x)``
attends through ``m`` learned inducing points.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .rng import make_rng

ARCHS = ("deepsets-gap", "deepsets-swe", "set-transformer")

MASK_LOGIT = -1e30
PAD_SENTINEL = 1e30

PARAMS_MAGIC = b"LOOPPARM"
PARAMS_VERSION = 1


class ChecksumError(IOError):
    """Parameter file failed its integrity check."""


class EmptySetError(ValueError):
    """A set in the batch has no unmasked elements."""


# ----------------------------------------------------------------- batch


class SetBatch:
    """Padded batch of sets: elements (B, Nmax, d), mask (B, Nmax) of reals."""

    def __init__(self, elements, mask):
        elements = np.asarray(elements, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if elements.ndim != 3 or mask.shape != elements.shape[:2]:
            raise T.ShapeError(
                f"elements {elements.shape} and mask {mask.shape} disagree")
        counts = mask.sum(axis=1)
        if np.any(counts < 1):
            raise EmptySetError("every set needs at least one unmasked element")
        self.elements = elements
        self.mask = mask
        self.cardinalities = counts.astype(int)

    @classmethod
    def from_sets(cls, sets):
        """Pad a list of (N_i, d) arrays to the largest cardinality."""
        sets = [np.asarray(s, dtype=np.float64) for s in sets]
        if not sets:
            raise ValueError("empty batch")
        d = sets[0].shape[1]
        nmax = max(s.shape[0] for s in sets)
        elements = np.zeros((len(sets), nmax, d))
        mask = np.zeros((len(sets), nmax), dtype=bool)
        for i, s in enumerate(sets):
            elements[i, : s.shape[0]] = s
            mask[i, : s.shape[0]] = True
        return cls(elements, mask)

    @property
    def batch_size(self):
        return self.elements.shape[0]

    @property
    def dim(self):
        return self.elements.shape[2]


# ----------------------------------------------------------------- config


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters; ``output_seeds x output_dim`` is the
    predicted stack shape (seeds collapse to a plain vector downstream when 1).
    """

    arch: str
    input_dim: int
    output_dim: int
    output_seeds: int = 1
    hidden: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    inducing: int = 32
    swe_slices: int = 16
    swe_quantiles: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden width must be divisible by head count")

    def digest(self) -> bytes:
        text = ",".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))
        return hashlib.sha256(text.encode()).digest()


# ------------------------------------------------------------ parameters


def _glorot(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape if shape else (fan_in, fan_out))


def _linear_params(out, rng, name, fan_in, fan_out):
    out[f"{name}.w"] = _glorot(rng, fan_in, fan_out)
    out[f"{name}.b"] = np.zeros(fan_out)


def _ln_params(out, name, dim):
    out[f"{name}.g"] = np.ones(dim)
    out[f"{name}.b"] = np.zeros(dim)


def _mab_params(out, rng, name, dim):
    for proj in ("q", "k", "v", "o"):
        _linear_params(out, rng, f"{name}.{proj}", dim, dim)
    _linear_params(out, rng, f"{name}.ff1", dim, dim)
    _linear_params(out, rng, f"{name}.ff2", dim, dim)
    _ln_params(out, f"{name}.ln1", dim)
    _ln_params(out, f"{name}.ln2", dim)


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, T.Tensor]:
    """Deterministic Glorot-uniform weights, zero biases, unit layernorm gains."""
    seed = config.seed if seed is None else seed
    rng = make_rng(seed, stream=7)
    raw: dict[str, np.ndarray] = {}
    d, w = config.input_dim, config.hidden

    if config.arch in ("deepsets-gap", "deepsets-swe"):
        prev = d
        for i in range(config.encoder_layers):
            _linear_params(raw, rng, f"enc.{i}", prev, w)
            prev = w
        if config.arch == "deepsets-swe":
            raw["swe.slices"] = _glorot(rng, w, config.swe_slices)
            pooled = config.swe_slices * config.swe_quantiles
        else:
            pooled = w
        prev = pooled
        for i in range(config.decoder_layers):
            _linear_params(raw, rng, f"dec.{i}", prev, w)
            prev = w
        _linear_params(raw, rng, "head", prev,
                       config.output_seeds * config.output_dim)
    else:
        _linear_params(raw, rng, "proj", d, w)
        for i in range(config.encoder_layers):
            raw[f"isab.{i}.inducing"] = _glorot(rng, w, w, (config.inducing, w))
            _mab_params(raw, rng, f"isab.{i}.mab1", w)
            _mab_params(raw, rng, f"isab.{i}.mab2", w)
        raw["pma.seeds"] = _glorot(rng, w, w, (config.output_seeds, w))
        _linear_params(raw, rng, "pma.ff", w, w)
        _mab_params(raw, rng, "pma.mab", w)
        _mab_params(raw, rng, "dec.sab", w)
        _linear_params(raw, rng, "head", w, config.output_dim)

    return {k: T.Tensor(v, requires_grad=True) for k, v in raw.items()}


# ------------------------------------------------------------- primitives


def _linear(x: T.Tensor, params, name):
    """Affine map on the last axis, flattened to one GEMM."""
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    shape = x.shape
    din, dout = w.shape
    flat = T.reshape(x, (-1, din)) if len(shape) != 2 else x
    out = T.affine(flat, w, b)
    if len(shape) != 2:
        out = T.reshape(out, shape[:-1] + (dout,))
    return out


def _mlp(x, params, prefix, layers):
    """Stack of linear layers with ReLU between them (none after the last)."""
    for i in range(layers):
        x = _linear(x, params, f"{prefix}.{i}")
        if i < layers - 1:
            x = T.relu(x)
    return x


def _split_heads(x, heads):
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _multihead(x, y, params, name, heads, key_bias):
    """Multihead attention of queries x over keys/values y.

    ``key_bias`` is an additive (B, 1, 1, Nk) constant holding 0 for real
    keys and -1e30 for padding, applied before the softmax.
    """
    q = _split_heads(_linear(x, params, f"{name}.q"), heads)
    k = _split_heads(_linear(y, params, f"{name}.k"), heads)
    v = _split_heads(_linear(y, params, f"{name}.v"), heads)
    dh = q.shape[-1]
    # fold the attention scale into the (smaller) query tensor
    scores = T.matmul(q * (1.0 / np.sqrt(dh)), T.transpose(k, (0, 1, 3, 2)))
    if key_bias is not None:
        scores = scores + key_bias
    att = T.softmax(scores, axis=-1)
    out = _merge_heads(T.matmul(att, v))
    return _linear(out, params, f"{name}.o")


def _mab(x, y, params, name, heads, key_bias=None):
    h = T.layernorm(x + _multihead(x, y, params, name, heads, key_bias),
                    params[f"{name}.ln1.g"], params[f"{name}.ln1.b"])
    ff = _linear(T.relu(_linear(h, params, f"{name}.ff1")), params, f"{name}.ff2")
    return T.layernorm(h + ff, params[f"{name}.ln2.g"], params[f"{name}.ln2.b"])


def _key_bias(mask):
    if mask.all():
        return None  # no padding in this batch, nothing to mask
    bias = np.where(mask, 0.0, MASK_LOGIT)
    return T.Tensor(bias[:, None, None, :])


def _tile_rows(rows: T.Tensor, batch):
    """Broadcast a (n, d) parameter to (B, n, d) without copying gradients apart."""
    n, d = rows.shape
    ones = T.Tensor(np.ones((batch, 1, 1)))
    return T.reshape(rows, (1, n, d)) * ones


def sab(x, params, name, heads, key_bias=None):
    return _mab(x, x, params, name, heads, key_bias)


def isab(x, params, name, heads, batch, key_bias):
    inducing = _tile_rows(params[f"{name}.inducing"], batch)
    h = _mab(inducing, x, params, f"{name}.mab1", heads, key_bias)
    return _mab(x, h, params, f"{name}.mab2", heads, None)


# ---------------------------------------------------------------- pooling


def gap_pool(features: T.Tensor, mask: np.ndarray) -> T.Tensor:
    """Masked mean over the set axis; denominators count real elements only."""
    counts = mask.sum(axis=1)
    if np.any(counts < 1):
        raise EmptySetError("pooling over a fully masked set")
    weights = T.Tensor(mask[:, :, None].astype(np.float64))
    total = (features * weights).sum(axis=1)
    return total * T.Tensor(1.0 / counts[:, None])


def _quantile_positions(counts, q_levels):
    """Interpolation indices/weights of the empirical quantile function.

    Sorted values sit at probability levels (i + 0.5) / N; queries are linearly
    interpolated between neighbours and clamped flat beyond the extremes.
    """
    pos = q_levels[None, :] * counts[:, None] - 0.5
    base = np.floor(pos)
    frac = np.clip(pos - base, 0.0, 1.0)
    last = (counts - 1)[:, None]
    i0 = np.clip(base, 0, last).astype(np.int64)
    i1 = np.clip(base + 1, 0, last).astype(np.int64)
    frac = np.where(base < 0, 0.0, np.where(base + 1 > last, 0.0, frac))
    return i0, i1, frac


def swe_pool(features: T.Tensor, mask: np.ndarray, slices: T.Tensor,
             quantiles: int) -> T.Tensor:
    """Sliced quantile pooling: (B, N, h) features to a (B, L*Q) embedding.

    Features are projected on unit-normalized slice directions, sorted per
    slice over the real elements, and the quantile function is read at the Q
    midpoint levels.  Permutation invariant because sorting forgets order;
    differentiable through the sort and the slice directions.
    """
    counts = mask.sum(axis=1)
    if np.any(counts < 1):
        raise EmptySetError("pooling over a fully masked set")
    n_slices = slices.shape[1]
    norms = T.sqrt(T.reduce_sum(T.square(slices), axis=0, keepdims=True))
    unit = slices / norms
    proj = T.matmul(features, unit)                       # (B, N, L)
    proj = T.transpose(proj, (0, 2, 1))                   # (B, L, N)
    pad = T.Tensor(np.where(mask, 0.0, PAD_SENTINEL)[:, None, :])
    sorted_proj, _ = T.sort_lastaxis(proj + pad)          # pads sort last

    q_levels = (np.arange(quantiles) + 0.5) / quantiles
    i0, i1, frac = _quantile_positions(counts, q_levels)  # (B, Q) each
    lo = T.gather_lastaxis(sorted_proj, i0[:, None, :])
    hi = T.gather_lastaxis(sorted_proj, i1[:, None, :])
    w = T.Tensor(frac[:, None, :])
    vals = lo * (1.0 - w) + hi * w                        # (B, L, Q)
    return T.reshape(vals, (vals.shape[0], n_slices * quantiles))


# ---------------------------------------------------------------- forward


def deepsets_forward(params, config: ModelConfig, batch: SetBatch) -> T.Tensor:
    """Encoder-pool-decoder forward; returns (B, output_seeds, output_dim)."""
    if config.arch not in ("deepsets-gap", "deepsets-swe"):
        raise ValueError(f"not a deep-sets config: {config.arch}")
    x = T.Tensor(batch.elements)
    feats = x
    for i in range(config.encoder_layers):
        feats = _linear(feats, params, f"enc.{i}")
        if i < config.encoder_layers - 1:
            feats = T.relu(feats)
    if config.arch == "deepsets-gap":
        pooled = gap_pool(feats, batch.mask)
    else:
        pooled = swe_pool(feats, batch.mask, params["swe.slices"],
                          config.swe_quantiles)
    hid = pooled
    for i in range(config.decoder_layers):
        hid = T.relu(_linear(hid, params, f"dec.{i}"))
    out = _linear(hid, params, "head")
    return T.reshape(out, (batch.batch_size, config.output_seeds, config.output_dim))


def settransformer_forward(params, config: ModelConfig, batch: SetBatch) -> T.Tensor:
    """ISAB encoder, PMA pooling, SAB decoder; returns (B, seeds, output_dim)."""
    if config.arch != "set-transformer":
        raise ValueError(f"not a set-transformer config: {config.arch}")
    b = batch.batch_size
    key_bias = _key_bias(batch.mask)
    x = _linear(T.Tensor(batch.elements), params, "proj")
    for i in range(config.encoder_layers):
        x = isab(x, params, f"isab.{i}", config.heads, b, key_bias)
    z = T.relu(_linear(x, params, "pma.ff"))
    seeds = _tile_rows(params["pma.seeds"], b)
    pooled = _mab(seeds, z, params, "pma.mab", config.heads, key_bias)
    dec = sab(pooled, params, "dec.sab", config.heads)
    out = _linear(dec, params, "head")
    return T.reshape(out, (b, config.output_seeds, config.output_dim))


def forward(params, config: ModelConfig, batch: SetBatch) -> T.Tensor:
    if config.arch == "set-transformer":
        return settransformer_forward(params, config, batch)
    return deepsets_forward(params, config, batch)


# ------------------------------------------------------------- params I/O


def save_params(path, params: dict[str, T.Tensor], config: ModelConfig) -> None:
    """Write the versioned binary parameter container (see module docs)."""
    chunks = [PARAMS_MAGIC, struct.pack("<I", PARAMS_VERSION), config.digest()]
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    payload = b"".join(chunks)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_params(path, config: ModelConfig | None = None) -> dict[str, T.Tensor]:
    """Read a parameter container; raises ChecksumError on any corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(PARAMS_MAGIC) + 44:
        raise ChecksumError(f"{path}: truncated parameter file")
    payload, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumError(f"{path}: CRC mismatch")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise ChecksumError(f"{path}: truncated record at offset {off}")
        out = payload[off:off + n]
        off += n
        return out

    if take(len(PARAMS_MAGIC)) != PARAMS_MAGIC:
        raise ChecksumError(f"{path}: bad magic")
    version = struct.unpack("<I", take(4))[0]
    if version != PARAMS_VERSION:
        raise ChecksumError(f"{path}: unsupported version {version}")
    digest = take(32)
    if config is not None and digest != config.digest():
        raise ChecksumError(f"{path}: parameter file belongs to a different config")
    count = struct.unpack("<I", take(4))[0]
    params: dict[str, T.Tensor] = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4))[0]
        name = take(name_len).decode()
        rank = struct.unpack("<I", take(4))[0]
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n_items = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * n_items), dtype="<f8").reshape(dims)
        params[name] = T.Tensor(data.copy(), requires_grad=True)
    return params
