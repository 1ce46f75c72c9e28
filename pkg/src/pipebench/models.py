"""Coordinate-regression CNN, digit-level decoder transformer, and their assemblies."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import connector as cn
from .errors import CheckpointError, DecodeError, ShapeError


class SequenceLengthError(ShapeError):
    pass


@dataclass(frozen=True)
class CnnSpec:
    height: int = 224
    width: int = 224
    channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 128)
    hidden: int = 256
    outputs: int = 6

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.outputs < 1:
            raise ValueError("CNN needs at least one output")
        if min(self.height, self.width) < 2 ** len(self.widths):
            raise ValueError("input too small for the pooling stages")

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.height, self.width
        for _ in self.widths:
            h, w = h // 2, w // 2
        return h, w


@dataclass(frozen=True)
class TransformerSpec:
    vocab_size: int = cn.VOCAB_SIZE
    d_model: int = 128
    heads: int = 4
    layers: int = 4
    ff: int = 512
    max_len: int = cn.sequence_length(6, 3)

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


def composite_context_len(outputs: int, decimals: int) -> int:
    return cn.sequence_length(outputs, decimals, with_target=True)


@dataclass(frozen=True)
class CompositeSpec:
    cnn: CnnSpec = field(default_factory=lambda: CnnSpec(outputs=76))
    format: cn.FormatSpec = field(default_factory=lambda: cn.FormatSpec(decimals=6))
    transformer: TransformerSpec = field(
        default_factory=lambda: TransformerSpec(max_len=composite_context_len(76, 6))
    )
    tau: float = cn.DEFAULT_TAU

    def __post_init__(self):
        need = composite_context_len(self.cnn.outputs, self.format.decimals)
        if self.transformer.max_len < need:
            raise ValueError(f"transformer max_len {self.transformer.max_len} < required {need}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @classmethod
    def build(cls, height: int, width: int, outputs: int = 76, decimals: int = 6, tau: float = cn.DEFAULT_TAU,
              **transformer_kw) -> "CompositeSpec":
        return cls(
            cnn=CnnSpec(height=height, width=width, outputs=outputs),
            format=cn.FormatSpec(decimals=decimals),
            transformer=TransformerSpec(max_len=composite_context_len(outputs, decimals), **transformer_kw),
            tau=tau,
        )


def spec_to_dict(spec) -> dict:
    return asdict(spec)


def spec_from_dict(kind: str, d: dict):
    if kind == "cnn":
        return CnnSpec(**d)
    if kind == "transformer":
        return TransformerSpec(**d)
    if kind == "composite":
        return CompositeSpec(
            cnn=CnnSpec(**d["cnn"]),
            format=cn.FormatSpec(**d["format"]),
            transformer=TransformerSpec(**d["transformer"]),
            tau=d["tau"],
        )
    raise ValueError(f"unknown model kind {kind!r}")


def images_to_input(images: np.ndarray) -> torch.Tensor:
    """uint8 ``(N, H, W)`` on white background to float ``(N, 1, H, W)`` ink in [0, 1]."""
    x = torch.from_numpy(np.asarray(images, dtype=np.float32))
    return (1.0 - x / 255.0).unsqueeze(1)


class CoordCNN(nn.Module):
    """Four conv/ReLU/max-pool stages, a hidden dense layer, and sigmoid outputs."""

    def __init__(self, spec: CnnSpec, zero_head: bool = True):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        c = spec.channels
        for w in spec.widths:
            layers += [nn.Conv2d(c, w, 3, stride=1, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c = w
        self.features = nn.Sequential(*layers)
        fh, fw = spec.feature_hw
        self.hidden = nn.Linear(c * fh * fw, spec.hidden)
        self.act = nn.ReLU()
        self.out = nn.Linear(spec.hidden, spec.outputs)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        if zero_head:
            # every output starts at sigmoid(0) = 0.5
            nn.init.zeros_(self.out.weight)

    @property
    def first_conv(self) -> nn.Conv2d:
        return self.features[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.spec
        expected = (s.channels, s.height, s.width)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input (N, {s.channels}, {s.height}, {s.width}), got {tuple(x.shape)}")
        h = self.features(x).flatten(1)
        return torch.sigmoid(self.out(self.act(self.hidden(h))))


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, past=None):
        b, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (z.view(b, t, self.heads, hd).transpose(1, 2) for z in (q, k, v))
        offset = 0
        if past is not None:
            offset = past[0].shape[2]
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        qpos = torch.arange(offset, offset + t, device=x.device)[:, None]
        kpos = torch.arange(k.shape[2], device=x.device)[None, :]
        att = att.masked_fill(kpos > qpos, float("-inf"))
        y = torch.softmax(att, dim=-1) @ v
        y = y.transpose(1, 2).reshape(b, t, d)
        return self.proj(y), (k, v)


class Block(nn.Module):
    def __init__(self, spec: TransformerSpec):
        super().__init__()
        self.ln1 = nn.LayerNorm(spec.d_model)
        self.attn = CausalSelfAttention(spec.d_model, spec.heads)
        self.ln2 = nn.LayerNorm(spec.d_model)
        self.fc = nn.Linear(spec.d_model, spec.ff)
        self.fc_out = nn.Linear(spec.ff, spec.d_model)

    def forward(self, x, past=None):
        a, kv = self.attn(self.ln1(x), past)
        x = x + a
        x = x + self.fc_out(F.gelu(self.fc(self.ln2(x))))
        return x, kv


class DigitTransformer(nn.Module):
    """Decoder-only transformer over the 14-symbol vocabulary with learned positions."""

    def __init__(self, spec: TransformerSpec):
        super().__init__()
        self.spec = spec
        self.tok = nn.Embedding(spec.vocab_size, spec.d_model)
        self.pos = nn.Embedding(spec.max_len, spec.d_model)
        self.blocks = nn.ModuleList(Block(spec) for _ in range(spec.layers))
        self.ln_f = nn.LayerNorm(spec.d_model)
        self.head = nn.Linear(spec.d_model, spec.vocab_size)
        # unit-scale embeddings and xavier qkv; small-scale embeddings stall on a long plateau
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, 0.0, 1.0)
        for blk in self.blocks:
            nn.init.xavier_uniform_(blk.attn.qkv.weight)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok(ids)

    def forward(self, ids: torch.Tensor | None = None, embeds: torch.Tensor | None = None,
                past: list | None = None, return_cache: bool = False):
        """Logits ``(B, T, vocab)`` for token ids or pre-positional embeddings."""
        if embeds is None:
            if ids is None:
                raise ValueError("need ids or embeds")
            embeds = self.tok(ids)
        offset = 0 if past is None else past[0][0].shape[2]
        t = embeds.shape[1]
        if offset + t > self.spec.max_len:
            raise SequenceLengthError(f"sequence length {offset + t} exceeds max_len {self.spec.max_len}")
        x = embeds + self.pos(torch.arange(offset, offset + t, device=embeds.device))
        cache = []
        for i, blk in enumerate(self.blocks):
            x, kv = blk(x, None if past is None else past[i])
            cache.append(kv)
        logits = self.head(self.ln_f(x))
        return (logits, cache) if return_cache else logits

    @torch.no_grad()
    def generate(self, prefix: torch.Tensor, n_steps: int, embeds: bool = False) -> torch.Tensor:
        """Greedy continuation of a prefix (ids, or embeddings when ``embeds``)."""
        if embeds:
            logits, cache = self(embeds=prefix, return_cache=True)
        else:
            logits, cache = self(ids=prefix, return_cache=True)
        out = []
        nxt = logits[:, -1].argmax(-1)
        for step in range(n_steps):
            out.append(nxt)
            if step == n_steps - 1:
                break
            logits, cache = self(ids=nxt[:, None], past=cache, return_cache=True)
            nxt = logits[:, -1].argmax(-1)
        return torch.stack(out, dim=1)


def decode_targets(ids: np.ndarray, decimals: int) -> list[tuple[float, float] | None]:
    """Decode each row of a generated target slot; malformed rows become None."""
    out = []
    for row in np.asarray(ids):
        try:
            out.append(cn.decode_point(row.tolist(), decimals))
        except DecodeError:
            out.append(None)
    return out


def target_loss(logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target_ids.reshape(-1))


class SymbolicStage:
    """Teacher-forced training and greedy inference helpers for the transformer stage."""

    def __init__(self, model: DigitTransformer, decimals: int):
        self.model = model
        self.decimals = decimals

    @property
    def target_len(self) -> int:
        return 2 * self.decimals + 1

    def loss(self, ids: torch.Tensor) -> torch.Tensor:
        """Cross-entropy over the target slot of full sequences ``(B, L)``."""
        n = self.target_len
        logits = self.model(ids[:, :-1])
        return target_loss(logits[:, -n:], ids[:, -n:])

    def predict_values(self, values: np.ndarray, batch: int = 500) -> list[tuple[float, float] | None]:
        """Greedy prediction from flat context values ``(N, V)``."""
        out: list = []
        self.model.eval()
        for s in range(0, len(values), batch):
            ctx = cn.encode_batch(values[s : s + batch], None, self.decimals)
            ctx = np.concatenate([ctx, np.full((len(ctx), 1), cn.SEP)], axis=1)
            gen = self.model.generate(torch.from_numpy(ctx), self.target_len)
            out.extend(decode_targets(gen.numpy(), self.decimals))
        return out


class CompositeModel(nn.Module):
    """CNN feeding the transformer through a straight-through digit connector."""

    def __init__(self, spec: CompositeSpec):
        super().__init__()
        self.spec = spec
        # a zero head would block all gradient into the CNN on the first step
        self.cnn = CoordCNN(spec.cnn, zero_head=False)
        self.transformer = DigitTransformer(spec.transformer)

    @property
    def decimals(self) -> int:
        return self.spec.format.decimals

    def rounded_values(self, values: torch.Tensor) -> torch.Tensor:
        """Round to ``D`` decimals on the forward pass, identity gradient backward."""
        q = cn.quantize(values.detach().cpu().numpy(), self.decimals)
        hard = torch.from_numpy(q / 10.0**self.decimals).to(values.device)
        v64 = values.to(torch.float64)
        return v64 + (hard - v64).detach()

    def context_embeds(self, values: torch.Tensor) -> torch.Tensor:
        """Embedded context ``v v ... v :`` for CNN outputs ``(B, M)``."""
        d = self.decimals
        table = self.transformer.tok.weight
        r = self.rounded_values(values)
        slots = [cn.soft_digit_embed(r, i, table[:10], self.spec.tau) for i in range(1, d + 1)]
        b, m = values.shape
        dm = table.shape[1]
        space = table[cn.SPACE].expand(b, m, 1, dm)
        grid = torch.cat([torch.stack(slots, dim=2), space], dim=2).reshape(b, m * (d + 1), dm)
        sep = table[cn.SEP].expand(b, 1, dm)
        return torch.cat([grid[:, :-1], sep], dim=1)

    def context_tokens(self, values: torch.Tensor) -> np.ndarray:
        """Token ids the connector feeds the transformer, including the trailing separator."""
        d = self.decimals
        r = self.rounded_values(values)
        digs = torch.stack([cn.hard_digits(r, i) for i in range(1, d + 1)], dim=2)
        b, m = values.shape
        grid = torch.cat([digs, torch.full((b, m, 1), cn.SPACE)], dim=2).reshape(b, -1)[:, :-1]
        return torch.cat([grid, torch.full((b, 1), cn.SEP)], dim=1).numpy()

    def forward(self, images: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits over the target slot ``(B, 2D+1, vocab)``."""
        ctx = self.context_embeds(self.cnn(images)).to(self.transformer.tok.weight.dtype)
        tgt = self.transformer.embed(target_ids[:, :-1])
        logits = self.transformer(embeds=torch.cat([ctx, tgt], dim=1))
        n = target_ids.shape[1]
        return logits[:, ctx.shape[1] - 1 : ctx.shape[1] - 1 + n]

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> tuple[list, torch.Tensor]:
        """Greedy target points (None on decode failure) and the generated ids."""
        ctx = self.context_embeds(self.cnn(images)).to(self.transformer.tok.weight.dtype)
        ids = self.transformer.generate(ctx, 2 * self.decimals + 1, embeds=True)
        return decode_targets(ids.numpy(), self.decimals), ids


class ChainedModel:
    """Independently trained CNN and transformer joined by the hard connector."""

    def __init__(self, cnn: CoordCNN, transformer: DigitTransformer, decimals: int = 3):
        self.cnn = cnn
        self.stage = SymbolicStage(transformer, decimals)

    @torch.no_grad()
    def predict_images(self, images: torch.Tensor, batch: int = 256) -> list:
        self.cnn.eval()
        vals = torch.cat([self.cnn(images[s : s + batch]) for s in range(0, len(images), batch)])
        return self.stage.predict_values(vals.double().numpy())


_MAGIC = b"PBCK"
_VERSION = 1


def save_checkpoint(path: str | Path, kind: str, spec, module: nn.Module) -> None:
    """Write spec echo plus named float32 tensors in a flat binary layout.

    Layout: magic, u32 version, u32 header length, JSON header, raw little-endian
    float32 data in header order.
    """
    tensors = [(k, v.detach().to(torch.float32).cpu().numpy()) for k, v in module.state_dict().items()]
    header = {
        "kind": kind,
        "spec": spec_to_dict(spec),
        "tensors": [{"name": k, "shape": list(a.shape)} for k, a in tensors],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<II", _VERSION, len(hb)) + hb)
        for _, a in tensors:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if data[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen])
    pos = 12 + hlen
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(t["shape"]).copy()
        pos += 4 * n
    return header, arrays


def build_model(kind: str, spec) -> nn.Module:
    if kind == "cnn":
        return CoordCNN(spec)
    if kind == "transformer":
        return DigitTransformer(spec)
    if kind == "composite":
        return CompositeModel(spec)
    raise ValueError(f"unknown model kind {kind!r}")


def load_checkpoint(path: str | Path, kind: str, spec=None) -> nn.Module:
    """Rebuild a model from ``path``; ``spec``, when given, must match the stored echo."""
    header, arrays = read_checkpoint(path)
    if header["kind"] != kind:
        raise CheckpointError(f"{path}: holds a {header['kind']} model, not {kind}")
    stored = spec_from_dict(kind, header["spec"])
    if spec is not None and spec_to_dict(spec) != spec_to_dict(stored):
        raise CheckpointError(f"{path}: stored spec {header['spec']} differs from requested {spec_to_dict(spec)}")
    model = build_model(kind, stored)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    model.load_state_dict(state)
    return model


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
