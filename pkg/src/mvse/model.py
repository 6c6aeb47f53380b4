"""Model assembly: parameter construction, naming, and the forward paths
that turn a (video, sentence) pair into per-space and fused similarities.

Every learnable tensor is addressable as "module.name" in a flat map so
the optimizer and the checkpoint format stay format-agnostic about the
architecture. One GRU encodes the sentence once; each active space then
applies its own affine projection to the shared sentence vector.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mvse.autodiff import Tensor
from mvse.config import (
    SPACE_ACTION,
    SPACE_GLOBAL,
    SPACE_SEQUENTIAL,
    Dims,
    resolve_spaces,
)
from mvse.fusion import GateParams, make_fuser
from mvse.text import (
    EmbeddingTable,
    GruParams,
    TextProjections,
    gru_encode,
    lookup,
    lookup_indices,
    project_text,
    projection_out_dim,
)
from mvse.visual import (
    AttentionParams,
    GlobalHeadParams,
    LstmParams,
    SequentialHeadParams,
    VideoFeature,
    action_embed,
    chunk_sample,
    global_embed,
    sequential_embed,
    space_similarity,
)

_INIT_SALT = 0x1417


def _init_tensor(name: str, shape: tuple[int, ...], fan_in: int, seed: int) -> Tensor:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], independently seeded
    per tensor name so adding a space never shifts other initializations."""
    rng = np.random.default_rng(
        np.random.SeedSequence([_INIT_SALT, seed, zlib.crc32(name.encode())])
    )
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


@dataclass
class ModelParams:
    """All learnable tensors of the configured architecture."""

    dims: Dims
    spaces: tuple[str, ...]
    gru: GruParams
    projections: TextProjections
    global_head: GlobalHeadParams | None
    sequential_head: SequentialHeadParams | None
    gate: GateParams

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.gru.named())
        out.update(self.projections.named())
        if self.global_head is not None:
            out.update(self.global_head.named())
        if self.sequential_head is not None:
            out.update(self.sequential_head.named())
        out.update(self.gate.named())
        if len(out) != len(set(out)):
            raise ValueError("duplicate parameter names")
        return out


def init_params(dims: Dims, spaces: tuple[str, ...], seed: int) -> ModelParams:
    h, e, d = dims.hidden, dims.token_dim, dims.embed_dim
    a, flat = dims.attn_dim, dims.grid_flat

    def t(name, shape, fan_in):
        return _init_tensor(name, shape, fan_in, seed)

    gru = GruParams(
        w_z=t("gru.w_z", (h, e), e), u_z=t("gru.u_z", (h, h), h), b_z=t("gru.b_z", (h,), h),
        w_r=t("gru.w_r", (h, e), e), u_r=t("gru.u_r", (h, h), h), b_r=t("gru.b_r", (h,), h),
        w_c=t("gru.w_c", (h, e), e), u_c=t("gru.u_c", (h, h), h), b_c=t("gru.b_c", (h,), h),
    )

    projections = TextProjections()
    for space in spaces:
        out_dim = projection_out_dim(space, dims)
        projections.weights[space] = (
            t(f"proj.{space}.w", (out_dim, h), h),
            t(f"proj.{space}.b", (out_dim,), h),
        )

    global_head = None
    if SPACE_GLOBAL in spaces:
        global_head = GlobalHeadParams(
            w=t("head.global.w", (d, dims.c_global), dims.c_global),
            b=t("head.global.b", (d,), dims.c_global),
        )

    sequential_head = None
    if SPACE_SEQUENTIAL in spaces:
        attention = AttentionParams(
            w_p=t("attn.w_p", (a, flat), flat), b_p=t("attn.b_p", (a,), flat),
            w_q=t("attn.w_q", (a, h), h), b_q=t("attn.b_q", (a,), h),
            w_a=t("attn.w_a", (dims.grid_cells, a), a), b_a=t("attn.b_a", (dims.grid_cells,), a),
        )
        lstm = LstmParams(
            w_i=t("lstm.w_i", (h, flat), flat), u_i=t("lstm.u_i", (h, h), h), b_i=t("lstm.b_i", (h,), h),
            w_f=t("lstm.w_f", (h, flat), flat), u_f=t("lstm.u_f", (h, h), h),
            b_f=Tensor(np.ones(h)),  # forget gate starts open
            w_g=t("lstm.w_g", (h, flat), flat), u_g=t("lstm.u_g", (h, h), h), b_g=t("lstm.b_g", (h,), h),
            w_o=t("lstm.w_o", (h, flat), flat), u_o=t("lstm.u_o", (h, h), h), b_o=t("lstm.b_o", (h,), h),
        )
        sequential_head = SequentialHeadParams(attention=attention, lstm=lstm)

    gate = GateParams(w=t("gate.w", (len(spaces), h), h))
    return ModelParams(
        dims=dims, spaces=tuple(spaces), gru=gru, projections=projections,
        global_head=global_head, sequential_head=sequential_head, gate=gate,
    )


def params_from_arrays(
    dims: Dims, spaces: tuple[str, ...], arrays: dict[str, np.ndarray]
) -> ModelParams:
    """Rebuild a ModelParams whose tensors hold the given arrays (used when
    loading a checkpoint)."""
    params = init_params(dims, spaces, seed=0)
    named = params.named()
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise ValueError(
            f"checkpoint parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, tensor in named.items():
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint tensor {name} has shape {arr.shape}, expected {tensor.data.shape}"
            )
        tensor.data = arr
    return params


class Model:
    """Bundles parameters with the embedding table and exposes the
    similarity computations used by training and retrieval."""

    def __init__(self, params: ModelParams, table: EmbeddingTable):
        self.params = params
        self.table = table

    @property
    def dims(self) -> Dims:
        return self.params.dims

    @property
    def spaces(self) -> tuple[str, ...]:
        return self.params.spaces

    @classmethod
    def new(cls, dims: Dims, spaces: tuple[str, ...] | str, seed: int, table: EmbeddingTable) -> "Model":
        if isinstance(spaces, str):
            spaces = resolve_spaces(spaces)
        return cls(init_params(dims, spaces, seed), table)

    # -- sentence side ------------------------------------------------

    def phi_from_tokens(self, tokens: list[str]) -> Tensor:
        vecs = lookup(tokens, self.table)
        return gru_encode(vecs, self.params.gru)

    def phi_from_indices(self, indices: list[int]) -> Tensor:
        vecs = lookup_indices(indices, self.table.vectors)
        return gru_encode(vecs, self.params.gru)

    def text_embedding(self, phi: Tensor, space: str) -> Tensor:
        return project_text(phi, space, self.params.projections)

    def text_embeddings(self, phi: Tensor) -> dict[str, Tensor]:
        return {space: self.text_embedding(phi, space) for space in self.spaces}

    # -- video side ----------------------------------------------------

    def frame_indices(self, video: VideoFeature, mode: str = "first", rng=0) -> list[int]:
        return chunk_sample(video.n_frames, self.dims.n_chunks, mode=mode, rng_seed=rng)

    def video_static_embeddings(
        self, video: VideoFeature, indices: list[int]
    ) -> dict[str, Tensor]:
        """Embeddings that do not depend on the sentence (global, action)."""
        out: dict[str, Tensor] = {}
        if SPACE_GLOBAL in self.spaces:
            out[SPACE_GLOBAL] = global_embed(video, indices, self.params.global_head)
        if SPACE_ACTION in self.spaces:
            out[SPACE_ACTION] = action_embed(video)
        return out

    def sequential_embedding(self, video: VideoFeature, indices: list[int], phi: Tensor) -> Tensor:
        return sequential_embed(video, indices, phi, self.params.sequential_head)

    # -- pair similarity ------------------------------------------------

    def pair_similarities(
        self,
        video: VideoFeature,
        phi: Tensor,
        text_embs: dict[str, Tensor] | None = None,
        static_embs: dict[str, Tensor] | None = None,
        indices: list[int] | None = None,
    ) -> dict[str, Tensor]:
        """Per-space cosine similarities for one (video, sentence) pair.

        ``text_embs``/``static_embs`` allow batch callers to reuse
        per-sentence and per-video work across the pair grid.
        """
        if indices is None:
            indices = self.frame_indices(video)
        if text_embs is None:
            text_embs = self.text_embeddings(phi)
        if static_embs is None:
            static_embs = self.video_static_embeddings(video, indices)
        sims: dict[str, Tensor] = {}
        for space in self.spaces:
            if space == SPACE_SEQUENTIAL:
                f = self.sequential_embedding(video, indices, phi)
            else:
                f = static_embs[space]
            sims[space] = space_similarity(f, text_embs[space])
        return sims

    def fused_similarity(
        self, phi: Tensor, sims: dict[str, Tensor], fuse_mode: str = "weighted"
    ) -> tuple[Tensor, Tensor]:
        fuser = make_fuser(fuse_mode)
        ordered = [sims[space] for space in self.spaces]
        return fuser(phi, ordered, self.params.gate)
