"""Sentence side: tokenization, token embedding lookup, GRU encoding,
and the per-space affine projections of the sentence vector.

The token embedding table is frozen (it stands in for a pre-trained
word-vector model); lookups produce plain constants, so the table never
appears on a gradient tape.
"""

from __future__ import annotations

import string
import zlib
from dataclasses import dataclass, field

import numpy as np

from mvse.autodiff import Tensor, add, matvec, mul, sigmoid, tanh
from mvse.config import SPACE_ACTION, SPACE_GLOBAL, SPACE_SEQUENTIAL, Dims

_PUNCT = str.maketrans("", "", string.punctuation)
_OOV_SALT = 0x0FF5EED


class EmptySentenceError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip ASCII punctuation."""
    if not text or not text.strip():
        raise EmptySentenceError("empty sentence")
    tokens = [w.translate(_PUNCT) for w in text.lower().split()]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise EmptySentenceError("empty sentence after punctuation stripping")
    return tokens


def stable_token_hash(token: str) -> int:
    return zlib.crc32(token.encode("utf-8"))


@dataclass
class EmbeddingTable:
    """Frozen token-vector table with a configurable OOV policy."""

    vocab: dict[str, int]
    vectors: np.ndarray  # [V, E]
    oov_policy: str = "zero"  # or "hashed-random"

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"embedding table must be [V, E], got {self.vectors.shape}")
        if self.vocab and max(self.vocab.values()) >= self.vectors.shape[0]:
            raise ValueError("vocab index exceeds table rows")
        if self.oov_policy not in ("zero", "hashed-random"):
            raise ValueError(f"unknown oov policy {self.oov_policy!r}")

    @property
    def token_dim(self) -> int:
        return self.vectors.shape[1]

    def _oov_vector(self, token: str) -> np.ndarray:
        if self.oov_policy == "zero":
            return np.zeros(self.token_dim)
        rng = np.random.default_rng(
            np.random.SeedSequence([_OOV_SALT, stable_token_hash(token)])
        )
        return rng.normal(scale=1.0 / np.sqrt(self.token_dim), size=self.token_dim)

    def row(self, token: str) -> tuple[np.ndarray, bool]:
        """(vector, in_vocab) for one token."""
        idx = self.vocab.get(token)
        if idx is None:
            return self._oov_vector(token), False
        return self.vectors[idx].copy(), True

    @staticmethod
    def random(vocab_size: int, token_dim: int, seed: int, oov_policy: str = "zero") -> "EmbeddingTable":
        """Deterministic stand-in table when no pre-trained vectors exist."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AB1E]))
        vectors = rng.normal(scale=1.0 / np.sqrt(token_dim), size=(vocab_size, token_dim))
        vocab = {f"w{i}": i for i in range(vocab_size)}
        return EmbeddingTable(vocab=vocab, vectors=vectors, oov_policy=oov_policy)


def lookup(tokens: list[str], table: EmbeddingTable) -> Tensor:
    """Stack token vectors into a [T, E] constant."""
    if not tokens:
        raise EmptySentenceError("empty sentence")
    rows = [table.row(t)[0] for t in tokens]
    return Tensor(np.stack(rows))


def lookup_indices(indices: list[int], table_vectors: np.ndarray) -> Tensor:
    """Index-based lookup used for corpus sentences stored as id lists."""
    if len(indices) == 0:
        raise EmptySentenceError("empty sentence")
    arr = np.asarray(table_vectors, dtype=np.float64)
    return Tensor(arr[np.asarray(indices, dtype=np.int64)])


@dataclass
class GruParams:
    """Update gate z, reset gate r, candidate c; input->hidden and
    hidden->hidden matrices plus biases."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_c: Tensor
    u_c: Tensor
    b_c: Tensor

    def named(self, prefix: str = "gru") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def gru_encode(token_vectors: Tensor, params: GruParams) -> Tensor:
    """Run the token vectors through a GRU; return the final hidden state.

    Standard gate equations with a zero initial state:
        z = sigmoid(Wz x + Uz h + bz)
        r = sigmoid(Wr x + Ur h + br)
        c = tanh(Wc x + Uc (r * h) + bc)
        h' = (1 - z) * h + z * c
    """
    t_steps = token_vectors.data.shape[0]
    if t_steps < 1:
        raise EmptySentenceError("empty sentence")
    hidden = params.b_z.data.shape[0]
    h = Tensor(np.zeros(hidden))
    for t in range(t_steps):
        x = Tensor(token_vectors.data[t])
        z = sigmoid(add(add(matvec(params.w_z, x), matvec(params.u_z, h)), params.b_z))
        r = sigmoid(add(add(matvec(params.w_r, x), matvec(params.u_r, h)), params.b_r))
        c = tanh(add(add(matvec(params.w_c, x), matvec(params.u_c, mul(r, h))), params.b_c))
        h = add(mul(1.0 - z, h), mul(z, c))
    return h


@dataclass
class TextProjections:
    """Per-space affine maps applied to the sentence vector."""

    weights: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for space, (w, b) in self.weights.items():
            out[f"proj.{space}.w"] = w
            out[f"proj.{space}.b"] = b
        return out


_VALID_SPACES = (SPACE_GLOBAL, SPACE_SEQUENTIAL, SPACE_ACTION)


def project_text(phi: Tensor, space: str, projections: TextProjections) -> Tensor:
    """g_space(y) = W phi + b for the requested embedding space."""
    if space not in _VALID_SPACES:
        raise ValueError(f"unknown embedding space {space!r}; expected one of {_VALID_SPACES}")
    if space not in projections.weights:
        raise ValueError(f"space {space!r} has no configured text projection")
    w, b = projections.weights[space]
    return add(matvec(w, phi), b)


def projection_out_dim(space: str, dims: Dims) -> int:
    if space == SPACE_ACTION:
        return dims.c_action
    return dims.embed_dim
