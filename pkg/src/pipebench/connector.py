"""Fixed-point digit tokenization over a 14-symbol vocabulary.

The vocabulary has no decimal point, so a value in [0, 1] is written as its
``D`` fractional digits with an implicit leading ``0.``. Values are separated
by spaces, and ``:`` divides the context from the target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DecodeError

VOCAB = "0123456789 -e:"
SYMBOL_TO_ID = {s: i for i, s in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)
SPACE = SYMBOL_TO_ID[" "]
MINUS = SYMBOL_TO_ID["-"]  # reserved, never emitted
EXP = SYMBOL_TO_ID["e"]  # reserved, never emitted
SEP = SYMBOL_TO_ID[":"]
DEFAULT_TAU = 0.1


@dataclass(frozen=True)
class FormatSpec:
    decimals: int = 3
    values_per_group: int = 2

    def __post_init__(self):
        if self.decimals < 1:
            raise ValueError(f"decimals must be >= 1, got {self.decimals}")

    @property
    def target_len(self) -> int:
        """Tokens in the target slot: x digits, a space, y digits."""
        return 2 * self.decimals + 1


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    sep_pos: int | None = None

    def __post_init__(self):
        if any(not 0 <= i < VOCAB_SIZE for i in self.ids):
            raise ValueError("token id outside the vocabulary")
        seps = [k for k, i in enumerate(self.ids) if i == SEP]
        if len(seps) > 1:
            raise ValueError("more than one separator token")
        expected = seps[0] if seps else None
        if self.sep_pos != expected:
            raise ValueError(f"sep_pos {self.sep_pos} disagrees with ids (separator at {expected})")

    @classmethod
    def from_ids(cls, ids: Sequence[int]) -> "TokenSeq":
        ids = tuple(int(i) for i in ids)
        return cls(ids, ids.index(SEP) if SEP in ids else None)

    @classmethod
    def from_string(cls, text: str) -> "TokenSeq":
        try:
            return cls.from_ids([SYMBOL_TO_ID[c] for c in text])
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} is not in the vocabulary") from None

    def __str__(self) -> str:
        return "".join(VOCAB[i] for i in self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def context(self) -> tuple[int, ...]:
        return self.ids if self.sep_pos is None else self.ids[: self.sep_pos]

    @property
    def target(self) -> tuple[int, ...]:
        return () if self.sep_pos is None else self.ids[self.sep_pos + 1 :]


def sequence_length(n_values: int, decimals: int, with_target: bool = True) -> int:
    n = n_values * decimals + (n_values - 1)
    if with_target:
        n += 1 + 2 * decimals + 1
    return n


def quantize(values, decimals: int) -> np.ndarray:
    """Clamp to [0, 1] and round half-up to ``decimals`` digits, as integers.

    The product is snapped to 1e-6 of a unit first so that decimal ties such as
    0.8985 round up even when their binary value sits just below the tie. The
    result is capped at ``10**decimals - 1``; the encoding has no room for 1.0.
    """
    scale = 10**decimals
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0, posinf=1.0, neginf=0.0)
    x = np.round(np.clip(v, 0.0, 1.0) * scale, 6)
    q = np.floor(x + 0.5).astype(np.int64)
    return np.minimum(q, scale - 1)


def digits_of(q: np.ndarray, decimals: int) -> np.ndarray:
    """Integer array ``(...)`` to its zero-padded digit array ``(..., decimals)``."""
    q = np.asarray(q, dtype=np.int64)
    powers = 10 ** np.arange(decimals - 1, -1, -1, dtype=np.int64)
    return (q[..., None] // powers) % 10


def encode_value(v: float, spec: FormatSpec | int) -> list[int]:
    d = spec.decimals if isinstance(spec, FormatSpec) else spec
    return digits_of(quantize(v, d), d).tolist()


def decode_value(ids: Sequence[int], spec: FormatSpec | int) -> float:
    d = spec.decimals if isinstance(spec, FormatSpec) else spec
    if len(ids) != d:
        raise DecodeError(f"expected {d} digit tokens, got {len(ids)}")
    q = 0
    for pos, t in enumerate(ids):
        if not 0 <= t <= 9:
            raise DecodeError(f"non-digit token {t} at position {pos}", position=pos)
        q = q * 10 + int(t)
    return q / 10**d


def decode_point(ids: Sequence[int], spec: FormatSpec | int) -> tuple[float, float]:
    """Read a target slot ``x-digits, space, y-digits``."""
    d = spec.decimals if isinstance(spec, FormatSpec) else spec
    if len(ids) != 2 * d + 1:
        raise DecodeError(f"target slot needs {2 * d + 1} tokens, got {len(ids)}")
    if ids[d] != SPACE:
        raise DecodeError(f"expected a space at position {d}, got token {ids[d]}", position=d)
    try:
        x = decode_value(ids[:d], d)
    except DecodeError as e:
        raise DecodeError(str(e), position=e.position) from None
    try:
        y = decode_value(ids[d + 1 :], d)
    except DecodeError as e:
        pos = None if e.position is None else e.position + d + 1
        raise DecodeError(f"non-digit token at position {pos}", position=pos) from None
    return x, y


def encode_batch(context: np.ndarray, targets: np.ndarray | None, decimals: int) -> np.ndarray:
    """Token ids for a batch of flat context values ``(N, V)`` and optional targets ``(N, 2)``.

    With targets the row ends ``: x y``; without, each row is context only.
    """
    context = np.atleast_2d(np.asarray(context, dtype=np.float64))
    n, nv = context.shape
    digs = digits_of(quantize(context, decimals), decimals)  # (N, V, D)
    block = np.concatenate([digs, np.full((n, nv, 1), SPACE, dtype=np.int64)], axis=2)
    ids = block.reshape(n, -1)[:, :-1]
    if targets is not None:
        t = digits_of(quantize(np.asarray(targets, dtype=np.float64).reshape(n, 2), decimals), decimals)
        tail = np.concatenate(
            [np.full((n, 1), SEP), t[:, 0], np.full((n, 1), SPACE), t[:, 1]], axis=1
        )
        ids = np.concatenate([ids, tail], axis=1)
    return ids


def encode_sequence(context: Sequence, target=None, spec: FormatSpec | None = None) -> TokenSeq:
    """Tokenize context points (x then y for each) and, optionally, a target point."""
    spec = spec or FormatSpec()
    if len(context) == 0:
        raise ValueError("context must hold at least one point")
    flat = [v for p in context for v in _xy(p)]
    tgt = None if target is None else np.array([_xy(target)])
    return TokenSeq.from_ids(encode_batch(np.array([flat]), tgt, spec.decimals)[0])


def _xy(p) -> tuple[float, float]:
    if hasattr(p, "x"):
        return (p.x, p.y)
    x, y = p
    return (float(x), float(y))


def hard_digits(v: torch.Tensor, slot: int) -> torch.Tensor:
    """``floor(clamp(v) * 10**slot) mod 10`` in float64.

    A nudge of about one part in 1e9 lifts products such as ``0.29 * 100`` that
    land a few ulps under an integer; it is far below the 1e-8 spacing of any
    quantized value so it never carries a genuine digit over.
    """
    x = v.detach().to(torch.float64).clamp(0.0, 1.0) * 10.0**slot
    return (torch.floor(x + 1e-9 + x.abs() * 1e-13) % 10).long()


def soft_digit_weights(v: torch.Tensor, slot: int, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Softmax over digits by proximity of the slot's phase to each digit center."""
    u = v.clamp(0.0, 1.0) * 10.0 ** (slot - 1)
    phase = (u - torch.floor(u)) * 10.0
    centers = torch.arange(10, dtype=v.dtype, device=v.device) + 0.5
    return torch.softmax(-(phase.unsqueeze(-1) - centers).abs() / tau, dim=-1)


def soft_digit_embed(v: torch.Tensor, slot: int, table: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Embedding of digit ``slot`` (1-based) of ``v``: hard lookup forward, soft gradient backward.

    ``table`` holds the ten digit embeddings. The table receives the gradient of
    the hard lookup; ``v`` receives the gradient of the soft mixture.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    hard = F.embedding(hard_digits(v, slot), table)
    soft = soft_digit_weights(v, slot, tau) @ table.detach().to(v.dtype)
    return hard + (soft - soft.detach()).to(hard.dtype)
