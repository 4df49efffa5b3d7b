"""Monotonic chunkwise attention.

Energies with convolution-enhanced keys, selection probabilities, the
parallel marginalized alignment recursion, chunkwise softening, context
vectors, and the hard threshold rule used at inference.

Shapes: single-utterance entry points take (T, D) keys / (T,) rows;
the batched internals used by training take (B, T, D) / (B, T). Frame
indices in public results (boundaries, j_start) are 1-based.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .tensor import Tensor

NEG_INF = -1e9


def init_attention_params(prefix, key_dim, query_dim, attention_dim, kernel, rng, params=None,
                          r_init=-4.0):
    """Independent energy-function parameters under a name prefix.

    The offset r starts negative so early training rarely fires per frame
    and the model scans whole sequences; the gain g starts at
    1/sqrt(attention_dim) so normalized energies begin in sigmoid's linear
    range. The default r of -4 suits long inputs (hundreds of frames); on
    short sequences it lets most alignment mass run off the end of the
    utterance before firing, so callers should scale r_init to keep
    sigmoid(r_init) * typical_length around one fire per token.
    """
    if kernel % 2 != 1:
        raise ValueError("conv kernel must be odd")
    params = {} if params is None else params
    u = lambda shape, fan: tz.param(rng.uniform(-1.0 / np.sqrt(fan), 1.0 / np.sqrt(fan), size=shape))
    params[f"{prefix}.g"] = tz.param(np.array(1.0 / np.sqrt(attention_dim)))
    params[f"{prefix}.v"] = u((attention_dim,), attention_dim)
    params[f"{prefix}.w_h"] = u((key_dim, attention_dim), key_dim)
    params[f"{prefix}.w_s"] = u((query_dim, attention_dim), query_dim)
    params[f"{prefix}.b"] = tz.param(np.zeros(attention_dim))
    params[f"{prefix}.r"] = tz.param(np.array(float(r_init)))
    params[f"{prefix}.w_c"] = u((kernel, key_dim, key_dim), kernel * key_dim)
    return params


def project_keys(h, params, prefix):
    """Convolve encoder features over time and project to attention space.

    h: (T, D) or (B, T, D). Computed once per utterance and reused for
    every decoder step. Position j of the conv output reads frames
    j - k//2 .. j + k//2, which is the only lookahead in the model.
    """
    conv = tz.conv1d(h, params[f"{prefix}.w_c"])
    return conv @ params[f"{prefix}.w_h"] + params[f"{prefix}.b"]


def energy_from_keys(keys_proj, query, params, prefix, mask=None):
    """e_j = g * (v/||v||) . relu(keys_proj_j + W_s query) + r.

    keys_proj: (..., T, A); query: (..., A-compatible state). Invalid
    frames (mask false) are filled with a large negative energy so their
    selection probability underflows to exactly zero.
    """
    q = query @ params[f"{prefix}.w_s"]
    if keys_proj.ndim == 3:
        q = q.reshape((q.shape[0], 1, q.shape[-1]))
    act = tz.relu(keys_proj + q)
    v = params[f"{prefix}.v"]
    v_unit = v / tz.l2_norm(v)
    e = params[f"{prefix}.g"] * (act @ v_unit) + params[f"{prefix}.r"]
    if mask is not None:
        e = tz.masked_fill(e, ~np.asarray(mask, dtype=bool), NEG_INF)
    return e


def monotonic_energy(h, s_i, params, prefix="att.mono"):
    """Energies of one decoder step against all frames: (T,) from (T, D)."""
    return energy_from_keys(project_keys(h, params, prefix), s_i, params, prefix)


def chunk_energy(h, s_i, params, prefix="att.chunk"):
    return energy_from_keys(project_keys(h, params, prefix), s_i, params, prefix)


def selection_probs(energies, training=False, noise_std=1.0, rng=None):
    """p = sigmoid(e + N(0, noise_std^2)); noise only in training mode.

    The pre-sigmoid noise pushes energies away from 0 so the 0.5
    threshold at inference reflects a real decision margin.
    """
    if training and noise_std > 0.0:
        if rng is None:
            raise ValueError("training-mode selection noise needs an rng")
        energies = energies + Tensor(rng.normal(0.0, noise_std, size=energies.shape))
    return tz.sigmoid(energies)


def alignment_step(p_i, alpha_prev, clip_eps=1e-6):
    """One row of the marginalized alignment recursion, vectorized over frames.

    alpha_i[j] = p[j] * cp[j] * sum_{k<=j} alpha_prev[k] / cp[k],
    cp[j] = prod_{l<j}(1 - p[l]).

    clip_eps bounds the survival products away from zero inside the
    denominator (and the factors feeding it), trading exactness for
    stability when p saturates. clip_eps=0 is the exact recursion and is
    safe whenever p stays strictly inside (0, 1).
    """
    one_minus = 1.0 - p_i
    if clip_eps > 0.0:
        one_minus = tz.clamp(one_minus, clip_eps, 1.0)
    cp = tz.cumprod_exclusive(one_minus)
    denom = tz.clamp(cp, clip_eps, 1.0) if clip_eps > 0.0 else cp
    return p_i * cp * tz.cumsum(alpha_prev / denom, axis=-1)


def initial_alignment(shape):
    """Virtual previous alignment: all scan mass on frame 1."""
    prior = np.zeros(shape)
    prior[..., 0] = 1.0
    return Tensor(prior)


def expected_alignment(p, clip_eps=1e-6):
    """Marginalized alignment for all tokens: (L, T) from (L, T) probabilities.

    Batched (B, L, T) input gives (B, L, T). Row i is computed from row
    i-1, starting from the one-hot frame-1 prior.
    """
    L = p.shape[-2]
    alpha_prev = initial_alignment(p.shape[:-2] + (p.shape[-1],))
    rows = []
    for i in range(L):
        p_i = p[:, i, :] if p.ndim == 3 else p[i]
        alpha_prev = alignment_step(p_i, alpha_prev, clip_eps)
        rows.append(alpha_prev.reshape(p.shape[:-2] + (1, p.shape[-1])))
    return tz.concat(rows, axis=-2)


def chunkwise_attention(alpha, chunk_energies, w):
    """Spread each frame's alignment mass over a w-frame chunk ending there.

    beta[j] = sum_{k=j}^{j+w-1} alpha[k] * exp(e[j]) / sum_{l=k-w+1}^{k} exp(e[l])

    Windows truncate at the edges, which renormalizes over the valid
    positions. Works on (T,), (L, T), or batched (..., T) rows; w=1 is
    the identity.
    """
    if w < 1:
        raise ValueError("chunk width must be >= 1")
    if w == 1:
        return alpha
    shift = Tensor(chunk_energies.data.max(axis=-1, keepdims=True))
    ex = tz.exp(chunk_energies - shift)
    denom = tz.clamp(tz.windowed_sum(ex, back=w - 1, forward=0), lo=1e-30)
    return ex * tz.windowed_sum(alpha / denom, back=0, forward=w - 1)


def context_vector(beta, h):
    """c = sum_j beta[j] h_j; (T,)x(T,D) -> (D,) or (B,T)x(B,T,D) -> (B,D)."""
    if beta.ndim == 1:
        return beta @ h
    B, T = beta.shape[0], beta.shape[-1]
    return (beta.reshape((B, 1, T)) @ h).reshape((B, h.shape[-1]))


def hard_alignment_step(p_row, j_start):
    """First frame j >= j_start (1-based) whose p >= 0.5, or None.

    The scan starts at the previous token's boundary inclusively, so
    consecutive tokens may fire on the same frame.
    """
    p = p_row.data if isinstance(p_row, Tensor) else np.asarray(p_row)
    T = p.shape[-1]
    if j_start < 1:
        raise ValueError("j_start is 1-based")
    for j in range(j_start - 1, T):
        if p[j] >= 0.5:
            return j + 1
    return None


def hard_chunk_window(boundary, w):
    """1-based inclusive frame range [max(1, boundary-w+1), boundary]."""
    return max(1, boundary - w + 1), boundary


def hard_context(h, chunk_energies, boundary, w):
    """Softmax over the w-frame window ending at the boundary, times h.

    h: (T, D); chunk_energies: (T,); boundary 1-based.
    """
    lo, hi = hard_chunk_window(boundary, w)
    window = chunk_energies[slice(lo - 1, hi)]
    weights = tz.softmax(window, axis=-1)
    return weights @ h[slice(lo - 1, hi)]
