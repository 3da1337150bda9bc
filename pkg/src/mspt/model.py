"""Point-cloud field prediction model built on patch attention.

Raw per-point features (coordinates concatenated with input fields) pass
through a two-layer embedding, are permuted and padded into the patch layout,
then flow through a stack of pre-norm residual blocks. Each block applies
patch attention to the normalized tokens and a two-layer feed-forward update.
A final layer norm and linear map produce per-point outputs, which are
un-permuted back to the caller's point order with padding dropped.

The patch layout is built once per sample and shared by every block. Data on
a regular grid keeps its natural row-major order; scattered points are
ordered by a ball tree.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import balltree as bt
from . import numerics as nm
from .errors import ConfigError, DataFormatError, ShapeError
from .pmsa import POOLING_MODES, PmsaConfig, pmsa_forward

PARTITIONING_MODES = ("auto", "balltree", "grid")

_CHECKPOINT_MAGIC = b"MSPTCKPT"


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    out_dim: int
    n_blocks: int
    f_dim: int
    n_heads: int
    k_patches: int
    q_per_patch: int = 1
    pooling: str = "mean"
    ffn_expansion: int = 2
    persistent_context: bool = False
    partitioning: str = "auto"
    leaf_capacity: int | None = None
    patch_len: int | None = None  # fixes the w_pool shape for linear pooling

    def __post_init__(self):
        for name in ("in_dim", "out_dim", "n_blocks", "f_dim", "n_heads", "k_patches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.f_dim % self.n_heads != 0:
            raise ConfigError(
                f"f_dim={self.f_dim} must be divisible by n_heads={self.n_heads}"
            )
        if self.q_per_patch < 0:
            raise ConfigError(f"q_per_patch must be >= 0, got {self.q_per_patch}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.partitioning not in PARTITIONING_MODES:
            raise ConfigError(
                f"partitioning must be one of {PARTITIONING_MODES}, got {self.partitioning!r}"
            )
        if self.ffn_expansion < 1:
            raise ConfigError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")
        if self.pooling == "linear" and self.patch_len is None:
            raise ConfigError("linear pooling requires patch_len to size the pool weights")
        if self.pooling == "linear" and self.q_per_patch >= 1 and self.patch_len % self.q_per_patch:
            raise ConfigError(
                f"patch_len={self.patch_len} must be divisible by q_per_patch={self.q_per_patch}"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def attention(self):
        return PmsaConfig(
            n_heads=self.n_heads, q_per_patch=self.q_per_patch, pooling=self.pooling
        )


@dataclass
class PointCloud:
    """One sample: point coordinates plus per-point input features."""

    coords: np.ndarray
    features: np.ndarray
    grid_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.features = np.asarray(self.features)
        if self.coords.ndim != 2:
            raise ShapeError(f"coords must be (N, D), got {self.coords.shape}")
        if self.features.shape[-2] != self.coords.shape[0]:
            raise ShapeError(
                f"features point axis {self.features.shape[-2]} does not match "
                f"coords {self.coords.shape[0]}"
            )

    @property
    def n_points(self):
        return self.coords.shape[0]


def param_shapes(cfg):
    """Ordered (name, shape) pairs for every learnable tensor."""
    f, e = cfg.f_dim, cfg.ffn_expansion * cfg.f_dim
    shapes = [
        ("embed.w1", (cfg.in_dim, f)),
        ("embed.b1", (f,)),
        ("embed.w2", (f, f)),
        ("embed.b2", (f,)),
    ]
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        shapes += [
            (p + "ln1.gain", (f,)),
            (p + "ln1.bias", (f,)),
            (p + "attn.w_q", (f, f)),
            (p + "attn.w_k", (f, f)),
            (p + "attn.w_v", (f, f)),
            (p + "attn.w_o", (f, f)),
        ]
        if cfg.pooling == "linear":
            shapes.append((p + "attn.w_pool", (cfg.patch_len, cfg.q_per_patch)))
        shapes += [
            (p + "ln2.gain", (f,)),
            (p + "ln2.bias", (f,)),
            (p + "ffn.w1", (f, e)),
            (p + "ffn.b1", (e,)),
            (p + "ffn.w2", (e, f)),
            (p + "ffn.b2", (f,)),
        ]
    shapes += [
        ("head.ln.gain", (f,)),
        ("head.ln.bias", (f,)),
        ("head.w", (f, cfg.out_dim)),
        ("head.b", (cfg.out_dim,)),
    ]
    return shapes


def param_count(cfg):
    """Total learnable scalar count."""
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def init_params(cfg, seed, precision="f32"):
    """Seeded initialization: Xavier-uniform matrices, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    dtype = nm.resolve_dtype(precision)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b1", "b2", "b", "bias"):
            arr = np.zeros(shape)
        elif leaf == "gain":
            arr = np.ones(shape)
        else:
            fan_in, fan_out = shape[0], shape[-1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = nm.Tensor(arr.astype(dtype))
    return params


def build_layout(cfg, coords=None, n=None, on_grid=False):
    """Patch layout for one sample geometry.

    Grid data (or partitioning='grid') keeps the natural order; otherwise a
    ball tree orders the points. The default leaf capacity is the patch
    length, so leaves align with patches.
    """
    if n is None:
        if coords is None:
            raise ConfigError("build_layout needs coords or an explicit point count")
        n = coords.shape[0]
    use_grid = cfg.partitioning == "grid" or (cfg.partitioning == "auto" and on_grid)
    if use_grid:
        return bt.grid_passthrough_layout(n, cfg.k_patches)
    if coords is None:
        raise ConfigError("ball-tree partitioning needs point coordinates")
    l = -(-n // cfg.k_patches)
    cap = cfg.leaf_capacity if cfg.leaf_capacity is not None else l
    tree = bt.build_tree(coords, leaf_capacity=cap)
    return bt.make_patches(bt.leaf_order(tree), n, cfg.k_patches)


def _attn_params(params, i):
    prefix = f"block{i}.attn."
    out = {
        "w_q": params[prefix + "w_q"],
        "w_k": params[prefix + "w_k"],
        "w_v": params[prefix + "w_v"],
        "w_o": params[prefix + "w_o"],
    }
    if prefix + "w_pool" in params:
        out["w_pool"] = params[prefix + "w_pool"]
    return out


def _block_forward(h, layout, cfg, params, i, tape, context):
    p = f"block{i}."
    hn = nm.layer_norm(h, params[p + "ln1.gain"], params[p + "ln1.bias"], tape)
    attn = _attn_params(params, i)
    acfg = cfg.attention
    new_context = None
    if cfg.persistent_context and acfg.q_per_patch > 0:
        passed = None
        if context is not None and context[0] is not None:
            s_prev, s_valid = context
            s_norm = nm.layer_norm(
                s_prev, params[p + "ln1.gain"], params[p + "ln1.bias"], tape
            )
            passed = (s_norm, s_valid)
        att, new_context = pmsa_forward(
            hn, layout, acfg, attn, tape=tape, context=passed, update_context=True
        )
    else:
        att = pmsa_forward(hn, layout, acfg, attn, tape=tape)
    hhat = nm.add(h, att, tape)
    h2 = nm.layer_norm(hhat, params[p + "ln2.gain"], params[p + "ln2.bias"], tape)
    z = nm.add(nm.matmul(h2, params[p + "ffn.w1"], tape), params[p + "ffn.b1"], tape)
    z = nm.gelu(z, tape)
    z = nm.add(nm.matmul(z, params[p + "ffn.w2"], tape), params[p + "ffn.b2"], tape)
    out = nm.add(hhat, z, tape)
    return out, new_context


def forward(sample, cfg, params, layout=None, tape=None):
    """Predict per-point outputs for one sample or a stack of samples.

    sample: PointCloud whose features may carry a leading batch axis
    (S, N, F_in) when several samples share the same geometry.
    Returns a Tensor of shape (..., N, out_dim) in the original point order.
    """
    coords = sample.coords
    feats = sample.features
    n = coords.shape[0]
    raw = np.concatenate(
        [np.broadcast_to(coords, feats.shape[:-2] + coords.shape), feats], axis=-1
    )
    if raw.shape[-1] != cfg.in_dim:
        raise ShapeError(
            f"raw feature width {raw.shape[-1]} (coords + fields) does not match "
            f"in_dim={cfg.in_dim}"
        )
    if layout is None:
        layout = build_layout(cfg, coords=coords, n=n, on_grid=sample.grid_shape is not None)

    dtype = next(iter(params.values())).dtype
    x = nm.Tensor(raw.astype(dtype))
    e = nm.add(nm.matmul(x, params["embed.w1"], tape), params["embed.b1"], tape)
    e = nm.gelu(e, tape)
    e = nm.add(nm.matmul(e, params["embed.w2"], tape), params["embed.b2"], tape)

    h = nm.take_rows(e, layout.padded_perm, tape)
    context = None
    for i in range(cfg.n_blocks):
        h, context = _block_forward(h, layout, cfg, params, i, tape, context)

    g = nm.layer_norm(h, params["head.ln.gain"], params["head.ln.bias"], tape)
    y = nm.add(nm.matmul(g, params["head.w"], tape), params["head.b"], tape)
    return nm.take_rows(y, layout.inverse, tape)


# ---------------------------------------------------------------------------
# Checkpoints: one file, JSON header plus raw little-endian float32 payload
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg, params, extra=None):
    """Write config and parameters to one self-describing binary file.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then each tensor as raw little-endian float32 at its stated
    offset. Parameters stored in other precisions are rounded to float32.
    """
    manifest = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.numpy(), dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = {
        "format": "mspt-checkpoint",
        "version": 1,
        "config": cfg.to_dict(),
        "extra": extra or {},
        "tensors": manifest,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (config, params, extra)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 16 or blob[:8] != _CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path} is not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if 16 + header_len > len(blob):
        raise DataFormatError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path} has a corrupt header: {e}") from e
    if header.get("format") != "mspt-checkpoint":
        raise DataFormatError(f"{path} has unknown format {header.get('format')!r}")
    cfg = ModelConfig.from_dict(header["config"])
    payload = blob[16 + header_len:]
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise DataFormatError(
                f"{path} is truncated: tensor {entry['name']} ends at "
                f"{start + nbytes} of {len(payload)} payload bytes"
            )
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4").reshape(shape)
        params[entry["name"]] = nm.Tensor(arr.astype(np.float32, copy=True))
    return cfg, params, header.get("extra", {})
