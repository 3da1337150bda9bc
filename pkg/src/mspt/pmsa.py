"""Patch attention with pooled global context.

Every patch of L tokens attends over its own tokens plus one shared list of
pooled summary rows (supernodes), q per patch. Queries, keys, and values for
the supernodes are projected once per forward pass and reused by every patch,
never recomputed per patch. Only local rows are retained by default; the
supernode rows of the attention update are computed on request so the global
context can also be carried across layers as a persistent stream.

Shapes are written for an optional leading batch axis: h is (..., K*L, F) and
all patch work runs batched over (..., K, heads, L, *) stacks. Padded slots
contribute nothing: they are excluded from every key set and every pooling
statistic, and their output rows are zeroed, so appending padding (up to whole
empty patches) leaves valid rows bitwise unaffected in exact arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError

POOLING_MODES = ("mean", "max", "linear")

# Attention matrices are processed in patch chunks of roughly this many
# elements so peak memory stays near-linear in the token count.
_CHUNK_TARGET = 4_000_000

# Pad rows are pushed this far down before a max reduction.
_NEG_LARGE = 1e30


@dataclass(frozen=True)
class PmsaConfig:
    """Attention geometry: head count, supernodes per patch, pooling mode."""

    n_heads: int
    q_per_patch: int = 1
    pooling: str = "mean"

    def __post_init__(self):
        if self.n_heads < 1:
            raise ConfigError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.q_per_patch < 0:
            raise ConfigError(f"q_per_patch must be >= 0, got {self.q_per_patch}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")


def _sub_patch_counts(layout, q):
    """Valid-row count per (patch, sub-patch)."""
    sub = layout.l // q
    return layout.valid.reshape(layout.k, q, sub).sum(axis=-1)


def build_global_context(h, layout, cfg, params=None, tape=None):
    """Pool every patch into cfg.q_per_patch supernodes.

    h is the (..., K*L, F) normalized token array in patch order. Returns
    (supernodes, valid): a (..., K*Q, F) tensor in patch-major order and a
    boolean validity array. A sub-patch with no real row yields a zeroed,
    invalid supernode. With q_per_patch == 0 returns (None, empty mask).
    """
    q = cfg.q_per_patch
    if q == 0:
        return None, np.zeros(0, dtype=bool)
    k, l = layout.k, layout.l
    if l % q != 0:
        raise ConfigError(f"q_per_patch={q} must divide patch length l={l}")
    if h.shape[-2] != layout.n_padded:
        raise ShapeError(
            f"token axis {h.shape[-2]} does not match padded length {layout.n_padded}"
        )
    f_dim = h.shape[-1]
    lead = h.shape[:-2]
    sub = l // q
    valid_col = layout.valid.astype(h.dtype)[:, None]

    if cfg.pooling == "linear":
        w_pool = params.get("w_pool") if params else None
        if w_pool is None or w_pool.shape != (l, q):
            got = None if w_pool is None else tuple(w_pool.shape)
            raise ConfigError(f"linear pooling needs w_pool of shape ({l}, {q}), got {got}")
        hm = nm.mul_const(h, valid_col, tape)
        x = nm.reshape(hm, lead + (k, l, f_dim), tape)
        s = nm.matmul(nm.swap_axes(w_pool, 0, 1, tape), x, tape)  # (..., k, q, F)
        s = nm.reshape(s, lead + (k * q, f_dim), tape)
        patch_any = layout.valid.reshape(k, l).any(axis=1)
        s_valid = np.repeat(patch_any, q)
        return s, s_valid

    counts = _sub_patch_counts(layout, q)
    s_valid = (counts > 0).reshape(-1)
    if cfg.pooling == "mean":
        hm = nm.mul_const(h, valid_col, tape)
        x = nm.reshape(hm, lead + (k, q, sub, f_dim), tape)
        s = nm.sum_axis(x, -2, tape)
        inv = np.zeros_like(counts, dtype=h.dtype)
        np.divide(1.0, counts, out=inv, where=counts > 0)
        s = nm.mul_const(s, inv[..., None], tape)
    else:  # max
        push_down = np.where(layout.valid, 0.0, -_NEG_LARGE).astype(h.dtype)[:, None]
        hm = nm.add_const(h, push_down, tape)
        x = nm.reshape(hm, lead + (k, q, sub, f_dim), tape)
        s = nm.max_axis(x, -2, tape)
        s = nm.mul_const(s, s_valid.reshape(k, q).astype(h.dtype)[..., None], tape)
    s = nm.reshape(s, lead + (k * q, f_dim), tape)
    return s, s_valid


def _to_patch_heads(x, lead, k, rows, n_heads, head_dim, tape):
    """(..., k*rows, F) -> (..., k, heads, rows, head_dim)."""
    x = nm.reshape(x, lead + (k, rows, n_heads, head_dim), tape)
    return nm.swap_axes(x, -3, -2, tape)


def _merge_heads(x, lead, rows_total, f_dim, tape):
    """(..., k, heads, rows, head_dim) -> (..., k*rows, F)."""
    x = nm.swap_axes(x, -3, -2, tape)
    return nm.reshape(x, lead + (rows_total, f_dim), tape)


def pmsa_forward(h, layout, cfg, params, tape=None, context=None, update_context=False):
    """Patch attention over local tokens plus the shared global context.

    h:      (..., K*L, F) tokens in padded patch order.
    params: dict with w_q, w_k, w_v, w_o (all F x F) and, for linear pooling,
            w_pool (L x Q).
    context: optional (supernodes, valid) pair to use instead of pooling,
            for a persistent supernode stream.
    update_context: also return the attention-updated supernodes.

    Returns the updated local rows (..., K*L, F), or a pair (rows, (s', valid))
    when update_context is set. Padded rows come back as zeros.
    """
    k, l, n_pad = layout.k, layout.l, layout.n_padded
    if h.shape[-2] != n_pad:
        raise ShapeError(f"token axis {h.shape[-2]} does not match padded length {n_pad}")
    f_dim = h.shape[-1]
    if f_dim % cfg.n_heads != 0:
        raise ConfigError(f"feature width {f_dim} not divisible by n_heads={cfg.n_heads}")
    head_dim = f_dim // cfg.n_heads
    lead = h.shape[:-2]

    if context is not None:
        s, s_valid = context
    else:
        s, s_valid = build_global_context(h, layout, cfg, params, tape)
    sq = 0 if s is None else s.shape[-2]

    # One shared projection pass over locals and supernodes.
    t = nm.concat([h, s], axis=-2, tape=tape) if sq else h
    qp = nm.matmul(t, params["w_q"], tape)
    kp = nm.matmul(t, params["w_k"], tape)
    vp = nm.matmul(t, params["w_v"], tape)
    qp = nm.mul_const(qp, np.asarray(1.0 / np.sqrt(head_dim), dtype=h.dtype), tape)

    q_loc = _to_patch_heads(nm.slice_axis(qp, -2, 0, n_pad, tape), lead, k, l,
                            cfg.n_heads, head_dim, tape)
    k_loc = _to_patch_heads(nm.slice_axis(kp, -2, 0, n_pad, tape), lead, k, l,
                            cfg.n_heads, head_dim, tape)
    v_loc = _to_patch_heads(nm.slice_axis(vp, -2, 0, n_pad, tape), lead, k, l,
                            cfg.n_heads, head_dim, tape)
    if sq:
        # Global keys/values: (..., 1, heads, head_dim, sq) and (..., 1, heads, sq, head_dim),
        # broadcast across the patch axis of every chunk.
        k_glob = _to_patch_heads(nm.slice_axis(kp, -2, n_pad, n_pad + sq, tape),
                                 lead, 1, sq, cfg.n_heads, head_dim, tape)
        v_glob = _to_patch_heads(nm.slice_axis(vp, -2, n_pad, n_pad + sq, tape),
                                 lead, 1, sq, cfg.n_heads, head_dim, tape)
        k_glob_t = nm.swap_axes(k_glob, -2, -1, tape)

    local_valid = layout.valid.reshape(k, l)
    key_mask = local_valid[:, None, None, :]  # (k, 1, 1, l)
    if sq:
        key_mask = np.concatenate(
            [key_mask, np.broadcast_to(s_valid, (k, 1, 1, sq))], axis=-1
        )

    chunk = max(1, min(k, _CHUNK_TARGET // max(1, cfg.n_heads * l * (l + sq))))
    out_chunks = []
    patch_axis = -4
    for c0 in range(0, k, chunk):
        c1 = min(k, c0 + chunk)
        qc = nm.slice_axis(q_loc, patch_axis, c0, c1, tape)
        kc_t = nm.swap_axes(nm.slice_axis(k_loc, patch_axis, c0, c1, tape), -2, -1, tape)
        logits = nm.matmul(qc, kc_t, tape)
        if sq:
            logits = nm.concat([logits, nm.matmul(qc, k_glob_t, tape)], axis=-1, tape=tape)
        att = nm.softmax_rows(logits, valid=key_mask[c0:c1], tape=tape)
        vc = nm.slice_axis(v_loc, patch_axis, c0, c1, tape)
        upd = nm.matmul(nm.slice_axis(att, -1, 0, l, tape), vc, tape)
        if sq:
            glob_part = nm.matmul(nm.slice_axis(att, -1, l, l + sq, tape), v_glob, tape)
            upd = nm.add(upd, glob_part, tape)
        out_chunks.append(upd)
    o = out_chunks[0] if len(out_chunks) == 1 else nm.concat(out_chunks, patch_axis, tape=tape)
    o = _merge_heads(o, lead, n_pad, f_dim, tape)
    out = nm.matmul(o, params["w_o"], tape)
    out = nm.mul_const(out, layout.valid.astype(h.dtype)[:, None], tape)

    if not update_context:
        return out
    if sq == 0:
        return out, (None, np.zeros(0, dtype=bool))

    # Supernode rows of the attention update, each computed in its home patch.
    q_glob = _to_patch_heads(nm.slice_axis(qp, -2, n_pad, n_pad + sq, tape),
                             lead, k, cfg.q_per_patch, cfg.n_heads, head_dim, tape)
    s_chunks = []
    for c0 in range(0, k, chunk):
        c1 = min(k, c0 + chunk)
        qg = nm.slice_axis(q_glob, patch_axis, c0, c1, tape)
        kc_t = nm.swap_axes(nm.slice_axis(k_loc, patch_axis, c0, c1, tape), -2, -1, tape)
        logits = nm.concat(
            [nm.matmul(qg, kc_t, tape), nm.matmul(qg, k_glob_t, tape)], axis=-1, tape=tape
        )
        att = nm.softmax_rows(logits, valid=key_mask[c0:c1], tape=tape)
        vc = nm.slice_axis(v_loc, patch_axis, c0, c1, tape)
        upd = nm.add(
            nm.matmul(nm.slice_axis(att, -1, 0, l, tape), vc, tape),
            nm.matmul(nm.slice_axis(att, -1, l, l + sq, tape), v_glob, tape),
            tape,
        )
        s_chunks.append(upd)
    s_o = s_chunks[0] if len(s_chunks) == 1 else nm.concat(s_chunks, patch_axis, tape=tape)
    s_o = _merge_heads(s_o, lead, sq, f_dim, tape)
    s_out = nm.matmul(s_o, params["w_o"], tape)
    s_out = nm.mul_const(s_out, s_valid.astype(h.dtype)[:, None], tape)
    return out, (s_out, s_valid)


def flop_count(n, k, l, q, f, n_heads):
    """Exact dense-product multiply count of the default forward pass.

    Covers the three input projections over all N + K*Q rows, the per-patch
    attention logits and weighted sums for the L retained query rows, and the
    output projection. Pooling reductions and elementwise scalings are not
    dense products and are excluded; linear pooling adds K*Q*L*F multiplies on
    top of this count. The head count does not change the total because the
    per-head widths sum to F.
    """
    if n != k * l:
        raise ConfigError(f"n={n} must equal k*l={k * l}")
    if f % n_heads != 0:
        raise ConfigError(f"feature width {f} not divisible by n_heads={n_heads}")
    if q < 0 or k < 1 or l < 1:
        raise ConfigError(f"invalid geometry n={n}, k={k}, l={l}, q={q}")
    return 3 * (n + k * q) * f * f + n * f * f + 2 * k * (l + k * q) * l * f
