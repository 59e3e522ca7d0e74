"""Conditioning branches: character-level encoder and instruction encoder.

Both emit (L, 64) sequences with a validity mask (False at PAD) so the
denoiser's cross-attention can consume either without reshaping. The
character encoder keeps its 32-dim character embedding; the instruction
encoder is a compact 2-layer transformer over a closed word-level
vocabulary trained jointly with the rest of the model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import CharsetError, LengthError, VocabError
from .fonts import CHARSET

D_CTX = 64
CHAR_EMBED_DIM = 32


@dataclass
class EncoderOutput:
    embeddings: Tensor  # (..., L, D_CTX)
    valid: np.ndarray  # (..., L) bool, False at PAD


class CharVocab:
    """PAD/BOS/EOS plus the printable glyph charset; dense ids from 0."""

    PAD, BOS, EOS = 0, 1, 2

    def __init__(self, charset: str = CHARSET, max_len: int = 24):
        self.charset = charset
        self.max_len = max_len
        self._ids = {ch: i + 3 for i, ch in enumerate(charset)}
        self._chars = {i: ch for ch, i in self._ids.items()}

    def __len__(self):
        return len(self.charset) + 3

    def tokenize(self, text: str) -> np.ndarray:
        if len(text) > self.max_len - 2:
            raise LengthError(
                f"text of length {len(text)} exceeds max {self.max_len - 2}: {text!r}"
            )
        ids = [self.BOS]
        for ch in text:
            if ch not in self._ids:
                raise CharsetError(f"character {ch!r} (U+{ord(ch):04X}) not in charset")
            ids.append(self._ids[ch])
        ids.append(self.EOS)
        ids.extend([self.PAD] * (self.max_len - len(ids)))
        return np.array(ids, dtype=np.int64)

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (self.PAD, self.BOS):
                continue
            if i == self.EOS:
                break
            if i not in self._chars:
                raise VocabError(f"id {i} out of range for char vocab of size {len(self)}")
            out.append(self._chars[i])
        return "".join(out)

    def to_dict(self):
        return {"charset": self.charset, "max_len": self.max_len}

    @classmethod
    def from_dict(cls, d):
        return cls(d["charset"], d["max_len"])


_TOKEN_RE = re.compile(r'"|:|,|-|[^\s":,\-]+')


class InstrVocab:
    """Word-level vocabulary over everything the instruction templates emit."""

    PAD, UNK = 0, 1

    def __init__(self, tokens: list, max_len: int = 24):
        self.tokens = list(tokens)
        self.max_len = max_len
        self._ids = {t: i + 2 for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens) + 2

    @classmethod
    def build(cls, words, colors, font_labels, max_len: int = 24) -> "InstrVocab":
        seen: dict = {}
        fixed = ["Write", '"', "in", "color", ":", "and", "font", ",", "-"]
        for tok in fixed + list(words) + list(colors):
            seen.setdefault(tok, None)
        for label in font_labels:
            for tok in _TOKEN_RE.findall(label):
                seen.setdefault(tok, None)
        return cls(list(seen), max_len)

    @staticmethod
    def split(text: str) -> list:
        return _TOKEN_RE.findall(text)

    def tokenize(self, rendered: str) -> np.ndarray:
        toks = self.split(rendered)[: self.max_len]
        ids = [self._ids.get(t, self.UNK) for t in toks]
        ids.extend([self.PAD] * (self.max_len - len(ids)))
        return np.array(ids, dtype=np.int64)

    def unk_count(self, rendered: str) -> int:
        return sum(1 for t in self.split(rendered) if t not in self._ids)

    def to_dict(self):
        return {"tokens": self.tokens, "max_len": self.max_len}

    @classmethod
    def from_dict(cls, d):
        return cls(d["tokens"], d["max_len"])


def _self_attention(x: Tensor, valid: np.ndarray, wq: nn.Linear, wk: nn.Linear,
                    wv: nn.Linear, wo: nn.Linear, heads: int) -> Tensor:
    """Multi-head self-attention over (B, L, D) with PAD keys masked out."""
    b, l, d = x.shape
    hd = d // heads
    q = wq(x).reshape(b, l, heads, hd).transpose(0, 2, 1, 3)
    k = wk(x).reshape(b, l, heads, hd).transpose(0, 2, 1, 3)
    v = wv(x).reshape(b, l, heads, hd).transpose(0, 2, 1, 3)
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    bias = np.where(valid[:, None, None, :], 0.0, -1e9).astype(x.dtype)
    attn = ad.softmax(scores + Tensor(bias), axis=-1)
    out = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, l, d)
    return wo(out)


class CharEncoder(nn.Module):
    """Character ids -> (L, 64): 32-dim embedding + learned positions +
    one self-attention layer + linear projection."""

    def __init__(self, rng, vocab: CharVocab, heads: int = 4, dtype=np.float32):
        d = CHAR_EMBED_DIM
        self.vocab = vocab
        self.heads = heads
        self.embed = nn.Embedding(rng, len(vocab), d, dtype)
        self.pos = nn.Embedding(rng, vocab.max_len, d, dtype)
        self.norm = nn.LayerNorm(d, dtype=dtype)
        self.wq = nn.Linear(rng, d, d, bias=False, dtype=dtype)
        self.wk = nn.Linear(rng, d, d, bias=False, dtype=dtype)
        self.wv = nn.Linear(rng, d, d, bias=False, dtype=dtype)
        self.wo = nn.Linear(rng, d, d, bias=False, dtype=dtype)
        self.proj = nn.Linear(rng, d, D_CTX, dtype=dtype)

    def __call__(self, ids: np.ndarray) -> EncoderOutput:
        ids = np.atleast_2d(ids)
        b, l = ids.shape
        valid = ids != CharVocab.PAD
        x = self.embed(ids) + self.pos(np.broadcast_to(np.arange(l), (b, l)))
        x = x + _self_attention(self.norm(x), valid, self.wq, self.wk, self.wv,
                                self.wo, self.heads)
        return EncoderOutput(self.proj(x), valid)


class InstrEncoder(nn.Module):
    """Instruction ids -> (L, 64): 2-layer pre-norm transformer, 4 heads."""

    def __init__(self, rng, vocab: InstrVocab, layers: int = 2, heads: int = 4,
                 mlp_mult: int = 2, dtype=np.float32):
        d = D_CTX
        self.vocab = vocab
        self.heads = heads
        self.embed = nn.Embedding(rng, len(vocab), d, dtype)
        self.pos = nn.Embedding(rng, vocab.max_len, d, dtype)
        self.blocks = []
        for _ in range(layers):
            self.blocks.append({
                "norm1": nn.LayerNorm(d, dtype=dtype),
                "wq": nn.Linear(rng, d, d, bias=False, dtype=dtype),
                "wk": nn.Linear(rng, d, d, bias=False, dtype=dtype),
                "wv": nn.Linear(rng, d, d, bias=False, dtype=dtype),
                "wo": nn.Linear(rng, d, d, bias=False, dtype=dtype),
                "norm2": nn.LayerNorm(d, dtype=dtype),
                "fc1": nn.Linear(rng, d, mlp_mult * d, dtype=dtype),
                "fc2": nn.Linear(rng, mlp_mult * d, d, dtype=dtype),
            })

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        for i, blk in enumerate(self.blocks):
            for name, mod in blk.items():
                base = f"blocks.{i}.{name}"
                full = f"{prefix}.{base}" if prefix else base
                yield from mod.named_parameters(full)

    def __call__(self, ids: np.ndarray) -> EncoderOutput:
        ids = np.atleast_2d(ids)
        b, l = ids.shape
        valid = ids != InstrVocab.PAD
        x = self.embed(ids) + self.pos(np.broadcast_to(np.arange(l), (b, l)))
        for blk in self.blocks:
            x = x + _self_attention(blk["norm1"](x), valid, blk["wq"], blk["wk"],
                                    blk["wv"], blk["wo"], self.heads)
            x = x + blk["fc2"](ad.silu(blk["fc1"](blk["norm2"](x))))
        return EncoderOutput(x, valid)
