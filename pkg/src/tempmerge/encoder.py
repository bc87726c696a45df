"""Mean-pool + affine dense encoder, LoRA adapters and the checkpoint format.

An input is pooled as the mean of its token embedding rows ``m`` and mapped
to ``W_eff @ m + b`` where ``W_eff = proj_w + (alpha / r) * B @ A`` when an
adapter is attached.  Everything is float64.

Rows are computed independently of batch size (sparse pooling followed by a
broadcast multiply-and-reduce rather than a BLAS product), so encoding one
text alone or inside a batch gives bitwise-identical vectors.
"""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"

_TOKEN_RE = re.compile(r"[^\W_]+")


class EncoderError(ValueError):
    pass


class CheckpointError(EncoderError):
    pass


def tokenize(text: str) -> list:
    """Lower-cased alphanumeric runs; punctuation is dropped."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Frozen token <-> id map; ids 0 and 1 are reserved for pad and unk."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise EncoderError("vocab must start with <pad>, <unk>")
        if len(set(tokens)) != len(tokens):
            raise EncoderError("duplicate tokens in vocab")
        self._tokens = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        seen = set()
        for t in texts:
            seen.update(tokenize(t))
        seen.discard(PAD_TOKEN)
        seen.discard(UNK_TOKEN)
        return cls([PAD_TOKEN, UNK_TOKEN] + sorted(seen))

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def tokens(self) -> tuple:
        return self._tokens

    def encode(self, text: str) -> list:
        return [self._ids.get(t, UNK) for t in tokenize(text)]

    def serialize(self) -> str:
        return "".join(t + "\n" for t in self._tokens)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


TENSOR_NAMES = ("embed", "proj_w", "proj_b")


@dataclass
class EncoderParams:
    embed: np.ndarray   # [V, d]
    proj_w: np.ndarray  # [d, d]
    proj_b: np.ndarray  # [d]
    vocab_hash: str = ""

    def __post_init__(self):
        self.embed = np.ascontiguousarray(self.embed, dtype=np.float64)
        self.proj_w = np.ascontiguousarray(self.proj_w, dtype=np.float64)
        self.proj_b = np.ascontiguousarray(self.proj_b, dtype=np.float64)
        self.validate()

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def dim(self) -> int:
        return self.embed.shape[1]

    def tensors(self) -> dict:
        return {"embed": self.embed, "proj_w": self.proj_w, "proj_b": self.proj_b}

    def validate(self) -> None:
        V, d = self.embed.shape if self.embed.ndim == 2 else (None, None)
        if V is None or self.proj_w.shape != (d, d) or self.proj_b.shape != (d,):
            raise EncoderError(
                f"inconsistent shapes: embed {self.embed.shape}, proj_w {self.proj_w.shape}, "
                f"proj_b {self.proj_b.shape}")
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                raise EncoderError(f"non-finite entries in {name}")

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.embed.copy(), self.proj_w.copy(), self.proj_b.copy(), self.vocab_hash)

    def digest(self) -> str:
        """SHA-256 over the tensor bytes and vocab hash; stable across save/load."""
        h = hashlib.sha256()
        h.update(self.vocab_hash.encode())
        for name in TENSOR_NAMES:
            h.update(self.tensors()[name].astype("<f8").tobytes())
        return h.hexdigest()

    @classmethod
    def init_random(cls, vocab_size: int, dim: int, seed: int = 0, vocab_hash: str = "",
                    embed_scale: float = 1.0) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        embed = rng.standard_normal((vocab_size, dim)) * embed_scale
        embed[PAD] = 0.0
        return cls(embed, np.eye(dim), np.zeros(dim), vocab_hash)


@dataclass
class LoraAdapter:
    A: np.ndarray  # [r, d]
    B: np.ndarray  # [d, r]
    alpha: float = 8.0
    target: str = "proj_w"

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        r = self.A.shape[0]
        if r < 1 or self.B.shape != (self.A.shape[1], r) or r > self.A.shape[1]:
            raise EncoderError(f"bad LoRA shapes A {self.A.shape}, B {self.B.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    @classmethod
    def init(cls, dim: int, rank: int = 4, alpha: float = 8.0, seed: int = 0) -> "LoraAdapter":
        if not 1 <= rank <= dim:
            raise EncoderError(f"LoRA rank must be in [1, {dim}], got {rank}")
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((rank, dim)) / np.sqrt(dim)
        return cls(A, np.zeros((dim, rank)), alpha)


def effective_weight(params: EncoderParams, adapter: Optional[LoraAdapter] = None) -> np.ndarray:
    if adapter is None:
        return params.proj_w
    if adapter.target != "proj_w":
        raise EncoderError(f"unknown LoRA target {adapter.target!r}")
    if adapter.A.shape[1] != params.dim:
        raise EncoderError(f"adapter dim {adapter.A.shape[1]} != encoder dim {params.dim}")
    return params.proj_w + adapter.delta()


def pooling_matrix(token_lists: Sequence[Sequence[int]], vocab_size: int) -> sp.csr_matrix:
    """Sparse ``[n, V]`` matrix whose rows average the listed embedding rows."""
    indptr = [0]
    indices = []
    data = []
    for row, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise EncoderError(f"empty input (row {row})")
        w = 1.0 / len(toks)
        indices.extend(toks)
        data.extend([w] * len(toks))
        indptr.append(len(indices))
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.max() >= vocab_size or indices.min() < 0):
        bad = int(indices[(indices >= vocab_size) | (indices < 0)][0])
        raise EncoderError(f"out-of-vocab id {bad} (V={vocab_size})")
    m = sp.csr_matrix((np.asarray(data), indices, np.asarray(indptr)),
                      shape=(len(token_lists), vocab_size))
    m.sum_duplicates()
    return m


def affine(pooled: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Row-wise ``weight @ x + bias`` with a batch-size-independent reduction order."""
    return (pooled[:, None, :] * weight[None, :, :]).sum(axis=-1) + bias


def encode_batch(params: EncoderParams, token_lists: Sequence[Sequence[int]],
                 adapter: Optional[LoraAdapter] = None) -> np.ndarray:
    pooled = pooling_matrix(token_lists, params.vocab_size) @ params.embed
    return affine(np.asarray(pooled), effective_weight(params, adapter), params.proj_b)


def encode(params: EncoderParams, adapter: Optional[LoraAdapter], tokens: Sequence[int]) -> np.ndarray:
    """Embed one token-id list; raises on empty input or out-of-vocab ids."""
    if len(tokens) == 0:
        raise EncoderError("empty input")
    return encode_batch(params, [tokens], adapter)[0]


def similarity(q: np.ndarray, d: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if q.shape != d.shape:
        raise EncoderError(f"dimension mismatch: {q.shape} vs {d.shape}")
    return float(np.dot(q, d))


def token_contributions(params: EncoderParams, q_tokens: Sequence[int], p_tokens: Sequence[int],
                        adapter: Optional[LoraAdapter] = None) -> np.ndarray:
    """Split a query-passage score into per-token-pair terms.

    Each side is written as a sum of parts, ``W_eff @ E[t] / L`` per token
    plus the bias as a final part, so entry ``[i, j]`` is the dot product of
    query part ``i`` and passage part ``j``.  The matrix has shape
    ``[len(q) + 1, len(p) + 1]`` (last row and column are the bias) and sums
    to the full similarity.
    """
    if len(q_tokens) == 0 or len(p_tokens) == 0:
        raise EncoderError("empty input")
    W = effective_weight(params, adapter)
    for toks in (q_tokens, p_tokens):
        if min(toks) < 0 or max(toks) >= params.vocab_size:
            raise EncoderError("out-of-vocab id")

    def parts(toks):
        rows = params.embed[np.asarray(toks)] @ W.T / len(toks)
        return np.vstack([rows, params.proj_b[None, :]])

    return parts(q_tokens) @ parts(p_tokens).T


def materialize_lora(params: EncoderParams, adapter: LoraAdapter) -> EncoderParams:
    """Fold the adapter into ``proj_w``; the result encodes identically."""
    return replace(params.copy(), proj_w=effective_weight(params, adapter).copy())


# -- checkpoint format -------------------------------------------------------
#
#   magic    8 bytes  b"TMRGCKPT"
#   version  u32 LE
#   V, d     u64 LE each
#   vocab    32 bytes raw sha-256 of the serialized vocab (zeros when unknown)
#   payload  embed [V*d], proj_w [d*d], proj_b [d] as float64 LE, row-major

MAGIC = b"TMRGCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQQ32s")


def save_checkpoint(params: EncoderParams, path) -> None:
    vh = bytes.fromhex(params.vocab_hash) if params.vocab_hash else bytes(32)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, params.vocab_size, params.dim, vh))
        for name in TENSOR_NAMES:
            fh.write(params.tensors()[name].astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> EncoderParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"truncated header: {len(raw)} bytes < {_HEADER.size}")
    magic, version, V, d, vh = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic: found {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version: found {version}, expected {FORMAT_VERSION}")
    if V < 1 or d < 1:
        raise CheckpointError(f"bad shape: V={V}, d={d}")
    expected = _HEADER.size + 8 * (V * d + d * d + d)
    if len(raw) != expected:
        raise CheckpointError(f"payload size mismatch: found {len(raw)} bytes, expected {expected} "
                              f"for V={V}, d={d}")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    embed = flat[: V * d].reshape(V, d)
    proj_w = flat[V * d: V * d + d * d].reshape(d, d)
    proj_b = flat[V * d + d * d:]
    vocab_hash = "" if vh == bytes(32) else vh.hex()
    try:
        return EncoderParams(embed.copy(), proj_w.copy(), proj_b.copy(), vocab_hash)
    except EncoderError as exc:
        raise CheckpointError(f"invalid tensors: {exc}") from exc
