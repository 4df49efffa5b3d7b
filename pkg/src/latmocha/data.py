"""Synthetic corpora with gold alignments, serialization, and batching.

Each utterance is a sequence of fixed-symbol segments rendered as noisy
one-hot frames. The framewise labels play the role of an external hard
alignment; gold token boundaries are segment end frames, stored in
post-stacking index space (1-based) because all latency math runs there.

Two task flavors share one generator. In the segmental task, token i is
segment i's symbol, so a causal model needs no future context. In the
lookahead task, token i mixes the symbols of segments i..i+lookshift,
so an accurate model must read into later segments before it can commit
-- which is what gives the latency-reduction objectives something to
remove.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .model import EOS, PAD


class CorpusFormatError(Exception):
    """Structurally invalid corpus file (bad line, missing field, bad type)."""


@dataclass
class Utterance:
    id: str
    frames: np.ndarray  # (T_raw, F) float
    align: np.ndarray  # (T_raw,) int framewise labels
    tokens: np.ndarray  # (L,) int, EOS-terminated
    boundaries: np.ndarray  # (L,) int, 1-based post-stacking end frames

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.align = np.asarray(self.align, dtype=np.int64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.boundaries = np.asarray(self.boundaries, dtype=np.int64)
        if len(self.tokens) != len(self.boundaries):
            raise ValueError(f"{self.id}: tokens and boundaries must have equal length")
        if len(self.align) != len(self.frames):
            raise ValueError(f"{self.id}: align must label every raw frame")
        if len(self.tokens) == 0 or self.tokens[-1] != EOS:
            raise ValueError(f"{self.id}: token sequence must end with EOS")


def gen_segmental_task(n, vocab, durations=(4, 8), noise_std=0.1, seed=0,
                       segments=(3, 8), stack_factor=3):
    """Corpus where each token is recognizable from its own segment."""
    return gen_lookahead_task(n, vocab, durations, noise_std, lookshift=0,
                              seed=seed, segments=segments, stack_factor=stack_factor)


def gen_lookahead_task(n, vocab, durations=(4, 8), noise_std=0.1, lookshift=1,
                       seed=0, segments=(3, 8), stack_factor=3):
    """Corpus where token i = (sym_i + sym_{i+lookshift}) mod vocab.

    lookshift=0 degenerates to the segmental task (the pair collapses to
    the symbol itself). Gold boundary of token i is the end of segment i;
    with lookshift >= 1 the deciding evidence only arrives `lookshift`
    segments later, so gold boundaries are intentionally earlier than any
    accurate causal firing point, and larger lookshift forces longer
    waits without enlarging the 2-symbol output table.
    """
    if vocab < 2:
        raise ValueError("need at least 2 content symbols")
    if lookshift < 0:
        raise ValueError("lookshift must be >= 0")
    if durations[0] < 1 or durations[0] > durations[1]:
        raise ValueError("bad duration range")
    if durations[0] < stack_factor:
        raise ValueError("min duration below stack factor breaks boundary strictness")
    min_segments = max(segments[0], lookshift + 1)
    rng = np.random.default_rng(seed)
    corpus = []
    for u in range(n):
        urng = np.random.default_rng(rng.integers(2**63))
        n_seg = int(urng.integers(min_segments, max(segments[1], min_segments) + 1))
        syms = urng.integers(0, vocab, size=n_seg)
        durs = urng.integers(durations[0], durations[1] + 1, size=n_seg)
        t_raw = int(durs.sum())
        align = np.repeat(syms, durs)
        frames = np.eye(vocab)[align]
        if noise_std > 0:
            frames = frames + urng.normal(0.0, noise_std, size=frames.shape)
        t_stacked = math.ceil(t_raw / stack_factor)
        raw_ends = np.cumsum(durs)
        n_tok = n_seg - lookshift
        if lookshift == 0:
            tokens = [int(syms[i]) + 2 for i in range(n_tok)]
        else:
            tokens = [int((syms[i] + syms[i + lookshift]) % vocab) + 2 for i in range(n_tok)]
        bounds = [math.ceil(raw_ends[i] / stack_factor) for i in range(n_tok)]
        corpus.append(Utterance(
            id=f"u{u:06d}",
            frames=frames,
            align=align,
            tokens=np.array(tokens + [EOS]),
            boundaries=np.array(bounds + [t_stacked]),
        ))
    return corpus


FIELDS = ("id", "frames", "align", "tokens", "boundaries")


def write_jsonl(path, corpus):
    with open(path, "w", encoding="utf-8") as fh:
        for u in corpus:
            rec = {
                "id": u.id,
                "frames": u.frames.tolist(),
                "align": u.align.tolist(),
                "tokens": u.tokens.tolist(),
                "boundaries": u.boundaries.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path):
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record: {e}") from e
            for f in FIELDS:
                if f not in rec:
                    raise CorpusFormatError(f"{path}:{lineno}: missing field '{f}'")
            try:
                corpus.append(Utterance(
                    id=str(rec["id"]),
                    frames=np.asarray(rec["frames"], dtype=np.float64),
                    align=np.asarray(rec["align"], dtype=np.int64),
                    tokens=np.asarray(rec["tokens"], dtype=np.int64),
                    boundaries=np.asarray(rec["boundaries"], dtype=np.int64),
                ))
            except (ValueError, TypeError) as e:
                raise CorpusFormatError(f"{path}:{lineno}: {e}") from e
    return corpus


def stack_frames(frames, factor):
    """Concatenate groups of `factor` consecutive frames (zero-padded tail).

    (T_raw, F) -> (ceil(T_raw/factor), F*factor).
    """
    if factor < 1:
        raise ValueError("stack factor must be >= 1")
    frames = np.asarray(frames, dtype=np.float64)
    if factor == 1:
        return frames
    t_raw, f_dim = frames.shape
    t_out = math.ceil(t_raw / factor)
    padded = np.zeros((t_out * factor, f_dim))
    padded[:t_raw] = frames
    return padded.reshape(t_out, factor * f_dim)


def stack_boundary(b, factor):
    """Map a 1-based raw-frame boundary into post-stacking space."""
    return math.ceil(b / factor)


def stack_align(align, factor):
    """Framewise labels after stacking: each group takes its last raw label."""
    align = np.asarray(align)
    if factor == 1:
        return align.copy()
    t_out = math.ceil(len(align) / factor)
    idx = np.minimum((np.arange(t_out) + 1) * factor, len(align)) - 1
    return align[idx]


@dataclass
class Batch:
    frames: np.ndarray  # (B, T', F') stacked, zero-padded
    frame_mask: np.ndarray  # (B, T') bool
    tokens: np.ndarray  # (B, L) PAD-padded
    token_mask: np.ndarray  # (B, L) bool
    boundaries: np.ndarray | None  # (B, L) padded with each utterance's T'
    align: np.ndarray | None  # (B, T') stacked labels, PAD rows 0
    n_frames: np.ndarray  # (B,) true stacked lengths
    n_tokens: np.ndarray  # (B,) true token counts
    ids: list

    @property
    def size(self):
        return self.frames.shape[0]


def batch_pad(utterances, stack_factor=1):
    """Stack, pad, and mask a list of utterances into one dense batch."""
    if not utterances:
        raise ValueError("empty batch")
    stacked = [stack_frames(u.frames, stack_factor) for u in utterances]
    n_frames = np.array([s.shape[0] for s in stacked])
    n_tokens = np.array([len(u.tokens) for u in utterances])
    B, T, L = len(utterances), int(n_frames.max()), int(n_tokens.max())
    F = stacked[0].shape[1]
    frames = np.zeros((B, T, F))
    frame_mask = np.zeros((B, T), dtype=bool)
    tokens = np.full((B, L), PAD, dtype=np.int64)
    token_mask = np.zeros((B, L), dtype=bool)
    boundaries = np.zeros((B, L), dtype=np.int64)
    align = np.zeros((B, T), dtype=np.int64)
    for k, (u, s) in enumerate(zip(utterances, stacked)):
        t, l = s.shape[0], len(u.tokens)
        frames[k, :t] = s
        frame_mask[k, :t] = True
        tokens[k, :l] = u.tokens
        token_mask[k, :l] = True
        boundaries[k, :l] = u.boundaries
        boundaries[k, l:] = t  # inert under the delay mask
        align[k, :t] = stack_align(u.align, stack_factor)
    return Batch(frames, frame_mask, tokens, token_mask, boundaries, align,
                 n_frames, n_tokens, [u.id for u in utterances])
