"""Recurrent encoder/decoder around the attention mechanism.

Unidirectional GRU encoder with layer normalization after every layer and
an optional dual-projection branch on top (one projection feeds a
framewise classifier, both projections concatenated feed the
attention/decoder side). GRU decoder with embedding and output layer.
Label-smoothed cross-entropy for both branches.

Parameters live in a flat name -> Tensor dict so the optimizer,
checkpointing, and freezing can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .tensor import Tensor

PAD = 0
EOS = 1

LN_EPS = 1e-5


@dataclass
class EncoderConfig:
    input_dim: int
    layers: int = 2
    hidden: int = 64
    stack_factor: int = 3
    mtl_branch: bool = False
    ce_head: bool = False  # bare framewise classifier on h, no projections
    bottleneck_dim: int = 0  # 0 -> hidden // 2 (concat restores width)
    align_vocab: int = 0  # framewise label alphabet, needed for either CE branch
    dropout: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.stack_factor < 1:
            raise ValueError("stack factor must be >= 1")
        if self.mtl_branch and self.ce_head:
            raise ValueError("mtl projections and bare CE head are exclusive")
        if self.bottleneck_dim == 0:
            self.bottleneck_dim = self.hidden // 2
        if (self.mtl_branch or self.ce_head) and self.align_vocab < 1:
            raise ValueError("a CE branch requires align_vocab")

    @property
    def output_dim(self):
        return 2 * self.bottleneck_dim if self.mtl_branch else self.hidden


@dataclass
class DecoderConfig:
    vocab: int
    layers: int = 1
    hidden: int = 64
    embed_dim: int = 32
    label_smoothing: float = 0.2
    dropout: float = 0.1

    def __post_init__(self):
        if self.vocab <= EOS:
            raise ValueError("vocab must include PAD=0 and EOS=1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label smoothing must be in [0, 1)")


def _uniform(rng, shape, fan_in=None):
    s = 1.0 / np.sqrt(fan_in if fan_in is not None else shape[0])
    return tz.param(rng.uniform(-s, s, size=shape))


def init_gru_params(prefix, input_dim, hidden, rng, params):
    for gate in ("z", "r", "n"):
        params[f"{prefix}.gru.w_{gate}"] = _uniform(rng, (input_dim, hidden))
        params[f"{prefix}.gru.u_{gate}"] = _uniform(rng, (hidden, hidden))
        params[f"{prefix}.gru.b_{gate}"] = tz.param(np.zeros(hidden))
    params[f"{prefix}.ln.gain"] = tz.param(np.ones(hidden))
    params[f"{prefix}.ln.bias"] = tz.param(np.zeros(hidden))


def init_encoder_params(cfg: EncoderConfig, rng, params=None):
    params = {} if params is None else params
    for layer in range(cfg.layers):
        in_dim = cfg.input_dim if layer == 0 else cfg.hidden
        init_gru_params(f"enc.l{layer}", in_dim, cfg.hidden, rng, params)
    if cfg.mtl_branch:
        nb = cfg.bottleneck_dim
        params["enc.mtl.ce_proj.w"] = _uniform(rng, (cfg.hidden, nb))
        params["enc.mtl.ce_proj.b"] = tz.param(np.zeros(nb))
        params["enc.mtl.s2s_proj.w"] = _uniform(rng, (cfg.hidden, nb))
        params["enc.mtl.s2s_proj.b"] = tz.param(np.zeros(nb))
        params["enc.mtl.ce_out.w"] = _uniform(rng, (nb, cfg.align_vocab))
        params["enc.mtl.ce_out.b"] = tz.param(np.zeros(cfg.align_vocab))
    if cfg.ce_head:
        params["enc.ce_head.w"] = _uniform(rng, (cfg.hidden, cfg.align_vocab))
        params["enc.ce_head.b"] = tz.param(np.zeros(cfg.align_vocab))
    return params


def init_decoder_params(cfg: DecoderConfig, context_dim, rng, params=None):
    params = {} if params is None else params
    params["dec.embed.w"] = _uniform(rng, (cfg.vocab, cfg.embed_dim), fan_in=cfg.embed_dim)
    for layer in range(cfg.layers):
        in_dim = cfg.embed_dim + context_dim if layer == 0 else cfg.hidden
        init_gru_params(f"dec.l{layer}", in_dim, cfg.hidden, rng, params)
    params["dec.out.w"] = _uniform(rng, (cfg.hidden, cfg.vocab))
    params["dec.out.b"] = tz.param(np.zeros(cfg.vocab))
    return params


def layer_norm(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / tz.sqrt(var + eps) * gain + bias


def gru_step(x, h, params, prefix, ln=True):
    """One GRU update h -> h'; layer norm applied to the new state.

    Works on single vectors or batched (B, dim) inputs. ``ln=False``
    gives the bare cell (update gate saturated at 1 leaves the state
    untouched exactly).
    """
    p = lambda name: params[f"{prefix}.gru.{name}"]
    xz = x @ p("w_z") + p("b_z")
    xr = x @ p("w_r") + p("b_r")
    xn = x @ p("w_n") + p("b_n")
    h_new = _gru_core(xz, xr, xn, h, params, prefix)
    if ln:
        h_new = layer_norm(h_new, params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])
    return h_new


def _gru_core(xz, xr, xn, h, params, prefix):
    p = lambda name: params[f"{prefix}.gru.{name}"]
    z = tz.sigmoid(xz + h @ p("u_z"))
    r = tz.sigmoid(xr + h @ p("u_r"))
    n = tz.tanh(xn + r * (h @ p("u_n")))
    return z * h + (1.0 - z) * n


def gru_layer(x_seq, params, prefix, h0=None):
    """Run one GRU layer over a (B, T, In) sequence; returns (B, T, H).

    Input projections are precomputed in one matmul per gate; the
    recurrence itself stays a step loop.
    """
    p = lambda name: params[f"{prefix}.gru.{name}"]
    B, T = x_seq.shape[0], x_seq.shape[1]
    H = p("u_z").shape[0]
    xz = x_seq @ p("w_z") + p("b_z")
    xr = x_seq @ p("w_r") + p("b_r")
    xn = x_seq @ p("w_n") + p("b_n")
    h = Tensor(np.zeros((B, H))) if h0 is None else h0
    gain, bias = params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"]
    outs = []
    for t in range(T):
        h = _gru_core(xz[:, t], xr[:, t], xn[:, t], h, params, prefix)
        h = layer_norm(h, gain, bias)
        outs.append(h.reshape((B, 1, H)))
    return tz.concat(outs, axis=1)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def encode(frames, cfg: EncoderConfig, params, mask=None, training=False, rng=None):
    """Run the encoder stack over stacked frames.

    frames: (T', F') or (B, T', F'); mask: optional (B, T') validity
    mask. Returns (h, ce_logits, s2s_features) with the same leading
    shape. Padded positions are zeroed in both h and s2s_features so
    downstream windows and convolutions see exact zeros past T'.
    """
    single = frames.ndim == 2
    x = frames.reshape((1,) + frames.shape) if single else frames
    mask_arr = None if mask is None else np.asarray(mask, dtype=bool)
    for layer in range(cfg.layers):
        x = gru_layer(x, params, f"enc.l{layer}")
        if mask_arr is not None:
            x = x * Tensor(mask_arr[:, :, None].astype(float))
        if layer < cfg.layers - 1:
            x = dropout(x, cfg.dropout, rng, training)
    h = x
    if cfg.mtl_branch:
        ce_bneck = h @ params["enc.mtl.ce_proj.w"] + params["enc.mtl.ce_proj.b"]
        s2s_bneck = h @ params["enc.mtl.s2s_proj.w"] + params["enc.mtl.s2s_proj.b"]
        ce_logits = ce_bneck @ params["enc.mtl.ce_out.w"] + params["enc.mtl.ce_out.b"]
        s2s = tz.concat([ce_bneck, s2s_bneck], axis=-1)
        if mask_arr is not None:
            valid = Tensor(mask_arr[:, :, None].astype(float))
            s2s = s2s * valid
            ce_logits = ce_logits * valid
    else:
        ce_logits = None
        if cfg.ce_head:
            ce_logits = h @ params["enc.ce_head.w"] + params["enc.ce_head.b"]
            if mask_arr is not None:
                ce_logits = ce_logits * Tensor(mask_arr[:, :, None].astype(float))
        s2s = h
    if single:
        h = h.reshape(h.shape[1:])
        s2s = s2s.reshape(s2s.shape[1:])
        if ce_logits is not None:
            ce_logits = ce_logits.reshape(ce_logits.shape[1:])
    return h, ce_logits, s2s


def init_decoder_state(cfg: DecoderConfig, batch=None):
    shape = (cfg.hidden,) if batch is None else (batch, cfg.hidden)
    return [Tensor(np.zeros(shape)) for _ in range(cfg.layers)]


def decode_step(y_prev, state, c, cfg: DecoderConfig, params, training=False, rng=None):
    """Advance the decoder one token.

    y_prev: int id or (B,) ids; state: per-layer hidden list; c: context
    vector (D',) or (B, D'). Returns (new state list, logits over vocab).
    """
    ids = np.asarray(y_prev, dtype=np.int64)
    if np.any(ids >= cfg.vocab) or np.any(ids < 0):
        raise ValueError(f"token id out of range [0, {cfg.vocab})")
    emb = tz.take_rows(params["dec.embed.w"], ids)
    x = tz.concat([emb, c], axis=-1)
    new_state = []
    for layer in range(cfg.layers):
        h = gru_step(x, state[layer], params, f"dec.l{layer}")
        new_state.append(h)
        x = dropout(h, cfg.dropout, rng, training) if layer < cfg.layers - 1 else h
    logits = x @ params["dec.out.w"] + params["dec.out.b"]
    return new_state, logits


def label_smoothed_ce(logits, targets, smoothing=0.0, mask=None):
    """Cross-entropy against an epsilon-smoothed target distribution.

    logits: (L, K) or (B, L, K); targets: matching int array. The loss is
    the mean over unmasked positions within each utterance, then the mean
    over utterances. All positions masked -> 0.

    Smoothed target: 1-eps on the true class, eps/(K-1) on each other.
    """
    targets = np.asarray(targets, dtype=np.int64)
    single = logits.ndim == 2
    if single:
        logits = logits.reshape((1,) + logits.shape)
        targets = targets[None, :]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[None, :]
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    B, L, K = logits.shape
    logp = tz.log_softmax(logits, axis=-1)
    bi, li = np.meshgrid(np.arange(B), np.arange(L), indexing="ij")
    logp_target = logp[bi, li, np.clip(targets, 0, K - 1)]
    eps = float(smoothing)
    if eps == 0.0:
        nll = -logp_target
    else:
        total = tz.sum_(logp, axis=-1)
        nll = -((1.0 - eps) * logp_target + (eps / (K - 1)) * (total - logp_target))
    m = mask.astype(float)
    counts = np.maximum(m.sum(axis=1), 1.0)
    per_utt = tz.sum_(nll * Tensor(m), axis=1) / Tensor(counts)
    return per_utt.mean()


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig
    attention_dim: int = 32
    chunk_width: int = 4
    conv_kernel: int = 5
    noise_std: float = 1.0
    clip_eps: float = 1e-6
    # Monotonic fire-bias init; scale toward zero for short utterances so
    # sigmoid(r) * T' stays near one expected fire per token at the start.
    fire_bias_init: float = -4.0

    @property
    def conv_lookahead(self):
        return self.conv_kernel // 2


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)


def init_model(config: ModelConfig, seed=0) -> Model:
    from .mocha import init_attention_params

    rng = np.random.default_rng(seed)
    params = {}
    init_encoder_params(config.encoder, rng, params)
    init_decoder_params(config.decoder, config.encoder.output_dim, rng, params)
    init_attention_params(
        "att.mono", config.encoder.output_dim, config.decoder.hidden,
        config.attention_dim, config.conv_kernel, rng, params,
        r_init=config.fire_bias_init,
    )
    init_attention_params(
        "att.chunk", config.encoder.output_dim, config.decoder.hidden,
        config.attention_dim, config.conv_kernel, rng, params,
        r_init=config.fire_bias_init,
    )
    return Model(config=config, params=params)
