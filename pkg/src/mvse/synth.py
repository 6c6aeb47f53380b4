"""Synthetic planted-correlation corpus.

Each video gets a quantized latent code. The code is cut into three
slices whose sizes follow the signal split rho = (global, sequential,
action):

* the global slice is mixed linearly into every frame's appearance
  vector;
* the sequential slice is mixed into the grid features after a cyclic
  shift by the frame position, so the information is keyed to frame
  ORDER (order-agnostic pooling averages the shifts out);
* the action slice is mixed into the per-video action vector.

Sentences are token sequences that spell out the quantized code, one
token per (dimension, level) pair, prefixed with a marker token. In
"split" sentence mode, alternating sentences carry only the global or
only the sequential slice, which creates two query populations whose
useful evidence lives in different embedding spaces.

Because the generative code is known, tests can decode sentences exactly
and compute information-theoretic ceilings for single-space probes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mvse.config import Dims
from mvse.dataio import Dataset, Manifest, _f32_round, default_video_id

_STREAMS = ("codes", "mix_global", "mix_grid", "mix_action", "noise", "table")


@dataclass
class SynthConfig:
    dims: Dims
    n_videos: int = 200
    sentences_per_video: int = 2
    rho: tuple[float, float, float] = (1.0, 0.0, 0.0)
    noise_sigma: float = 0.05
    seed: int = 0
    latent_total: int = 12
    quant_levels: int = 4
    sentence_mode: str = "full"  # or "split"
    train_fraction: float = 0.75
    n_frames: int | None = None  # defaults to dims.n_chunks

    def __post_init__(self):
        if self.n_videos < 2:
            raise ValueError(f"need at least 2 videos, got {self.n_videos}")
        if self.sentences_per_video < 1:
            raise ValueError("need at least one sentence per video")
        if len(self.rho) != 3 or any(r < 0 for r in self.rho):
            raise ValueError(f"invalid signal split {self.rho}: weights must be nonnegative")
        if abs(sum(self.rho) - 1.0) > 1e-9:
            raise ValueError(f"invalid signal split {self.rho}: weights must sum to 1")
        if self.quant_levels < 2:
            raise ValueError("need at least 2 quantization levels")
        if self.latent_total < 1:
            raise ValueError("latent_total must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.sentence_mode not in ("full", "split"):
            raise ValueError(f"unknown sentence mode {self.sentence_mode!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.sentence_mode == "split" and (self.slice_sizes()[0] == 0 or self.slice_sizes()[1] == 0):
            raise ValueError("split sentence mode needs signal in both global and sequential slices")

    def slice_sizes(self) -> tuple[int, int, int]:
        l = self.latent_total
        c1 = round(self.rho[0] * l)
        c2 = round((self.rho[0] + self.rho[1]) * l)
        return c1, c2 - c1, l - c2

    def frames(self) -> int:
        return self.n_frames if self.n_frames is not None else self.dims.n_chunks

    @property
    def n_markers(self) -> int:
        return 2 if self.sentence_mode == "split" else self.sentences_per_video

    @property
    def vocab_size(self) -> int:
        return self.latent_total * self.quant_levels + self.n_markers


@dataclass
class SynthGroundTruth:
    """Generator internals exposed for oracle-style tests and probes."""

    config: SynthConfig
    codes: np.ndarray                 # [V, L] quantized latents
    mix_global: np.ndarray            # [C_g, l_g]
    mix_grid: np.ndarray              # [G*G*C_s, l_s]
    mix_action: np.ndarray            # [C_a, l_a]
    levels: np.ndarray                # quantization level values

    def slices(self) -> tuple[slice, slice, slice]:
        l_g, l_s, l_a = self.config.slice_sizes()
        return slice(0, l_g), slice(l_g, l_g + l_s), slice(l_g + l_s, l_g + l_s + l_a)

    def content_token(self, dim: int, level_index: int) -> int:
        return dim * self.config.quant_levels + level_index

    def marker_token(self, which: int) -> int:
        return self.config.latent_total * self.config.quant_levels + which

    def decode_sentence(self, tokens: list[int]) -> tuple[np.ndarray, np.ndarray]:
        """(code estimate, mask of dimensions the sentence mentions)."""
        q = self.config.quant_levels
        z = np.zeros(self.config.latent_total)
        mask = np.zeros(self.config.latent_total, dtype=bool)
        content_limit = self.config.latent_total * q
        for t in tokens:
            if t >= content_limit:
                continue  # marker
            dim, lvl = divmod(t, q)
            z[dim] = self.levels[lvl]
            mask[dim] = True
        return z, mask


@dataclass
class SynthResult:
    dataset: Dataset
    manifests: dict[str, Manifest]
    truth: SynthGroundTruth


def _spawn(seed: int) -> dict[str, np.random.Generator]:
    root = np.random.SeedSequence([0x5EED5, seed])
    children = root.spawn(len(_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(_STREAMS, children)}


def _sentence_tokens(
    truth: SynthGroundTruth, video: int, which: int
) -> list[int]:
    cfg = truth.config
    levels = truth.levels
    code = truth.codes[video]
    level_index = {float(v): i for i, v in enumerate(levels)}
    g_sl, s_sl, a_sl = truth.slices()
    if cfg.sentence_mode == "split":
        population = which % 2
        dims_covered = range(g_sl.start, g_sl.stop) if population == 0 else range(s_sl.start, s_sl.stop)
        marker = truth.marker_token(population)
    else:
        dims_covered = range(cfg.latent_total)
        marker = truth.marker_token(which)
    tokens = [marker]
    for d in dims_covered:
        tokens.append(truth.content_token(d, level_index[float(code[d])]))
    return tokens


def synth_generate(cfg: SynthConfig) -> SynthResult:
    """Build the dataset, its train/test manifests, and the ground truth."""
    dims = cfg.dims
    rngs = _spawn(cfg.seed)
    v, f = cfg.n_videos, cfg.frames()
    l_g, l_s, l_a = cfg.slice_sizes()
    levels = np.linspace(-1.0, 1.0, cfg.quant_levels)

    codes = levels[rngs["codes"].integers(0, cfg.quant_levels, size=(v, cfg.latent_total))]

    def mixer(rng, rows: int, cols: int) -> np.ndarray:
        if cols == 0:
            return np.zeros((rows, 0))
        return rng.normal(scale=1.0 / np.sqrt(cols), size=(rows, cols))

    mix_global = mixer(rngs["mix_global"], dims.c_global, l_g)
    mix_grid = mixer(rngs["mix_grid"], dims.grid_flat, l_s)
    mix_action = mixer(rngs["mix_action"], dims.c_action, l_a)

    z_g = codes[:, :l_g]
    z_s = codes[:, l_g: l_g + l_s]
    z_a = codes[:, l_g + l_s:]

    noise = rngs["noise"]
    global_frames = np.tile((z_g @ mix_global.T)[:, None, :], (1, f, 1))
    global_frames = global_frames + cfg.noise_sigma * noise.normal(size=global_frames.shape)

    grid_frames = np.zeros((v, f, dims.grid_flat))
    if l_s:
        for frame in range(f):
            shifted = np.roll(z_s, -(frame % l_s), axis=1)
            grid_frames[:, frame, :] = shifted @ mix_grid.T
    grid_frames = grid_frames + cfg.noise_sigma * noise.normal(size=grid_frames.shape)
    grid_frames = grid_frames.reshape(v, f, dims.grid, dims.grid, dims.c_spatial)

    action_vecs = z_a @ mix_action.T
    action_vecs = action_vecs + cfg.noise_sigma * noise.normal(size=action_vecs.shape)

    table = rngs["table"].normal(
        scale=1.0 / np.sqrt(dims.token_dim), size=(cfg.vocab_size, dims.token_dim)
    )

    truth = SynthGroundTruth(
        config=cfg, codes=codes, mix_global=mix_global, mix_grid=mix_grid,
        mix_action=mix_action, levels=levels,
    )

    sentences: list[list[int]] = []
    for i in range(v):
        for s in range(cfg.sentences_per_video):
            sentences.append(_sentence_tokens(truth, i, s))

    dataset = Dataset(
        global_frames=_f32_round(global_frames),
        grid_frames=_f32_round(grid_frames),
        action_vecs=_f32_round(action_vecs),
        embedding_vectors=_f32_round(table),
        sentences=sentences,
    )

    n_train = round(cfg.train_fraction * v)
    n_train = min(max(n_train, 1), v - 1)  # both splits stay nonempty

    def entry(i: int, sentence_filter=None) -> tuple[str, int, tuple[int, ...]]:
        sents = tuple(
            i * cfg.sentences_per_video + s
            for s in range(cfg.sentences_per_video)
            if sentence_filter is None or sentence_filter(s)
        )
        return (default_video_id(i), i, sents)

    manifests = {
        "train": Manifest("train", [entry(i) for i in range(n_train)]),
        "test": Manifest("test", [entry(i) for i in range(n_train, v)]),
    }
    if cfg.sentence_mode == "split":
        manifests["test_popA"] = Manifest(
            "test_popA", [entry(i, lambda s: s % 2 == 0) for i in range(n_train, v)]
        )
        manifests["test_popB"] = Manifest(
            "test_popB", [entry(i, lambda s: s % 2 == 1) for i in range(n_train, v)]
        )
    return SynthResult(dataset=dataset, manifests=manifests, truth=truth)


# ---------------------------------------------------------------------------
# Probes: generator-side oracles used by tests
# ---------------------------------------------------------------------------


def probe_recall_at_1(result: SynthResult, manifest_name: str = "test", space: str = "global") -> float:
    """Retrieval accuracy of an untrained probe that decodes each sentence
    with the generator's own codebook and nearest-neighbors against the raw
    features of one space."""
    truth = result.truth
    ds = result.dataset
    manifest = result.manifests[manifest_name]
    g_sl, s_sl, a_sl = truth.slices()
    if space == "global":
        sl, mix = g_sl, truth.mix_global
        gallery_feats = {idx: ds.global_frames[idx].mean(axis=0) for _, idx, _ in manifest.entries}
    elif space == "action":
        sl, mix = a_sl, truth.mix_action
        gallery_feats = {idx: ds.action_vecs[idx] for _, idx, _ in manifest.entries}
    else:
        raise ValueError(f"probe has no raw-feature reading for space {space!r}")

    hits = 0
    queries = manifest.queries()
    gallery = sorted(gallery_feats)  # ascending index: first strict max wins ties
    for vid, idx, sent in queries:
        z_hat, _ = truth.decode_sentence(ds.sentences[sent])
        predicted = mix @ z_hat[sl]
        pn = np.linalg.norm(predicted)
        best_idx, best_sim = None, -np.inf
        for g_idx in gallery:
            feat = gallery_feats[g_idx]
            fn = np.linalg.norm(feat)
            sim = float(predicted @ feat / (pn * fn)) if pn > 0 and fn > 0 else 0.0
            if sim > best_sim:
                best_idx, best_sim = g_idx, sim
        if best_idx == idx:
            hits += 1
    return hits / len(queries)


def slice_collision_ceiling(result: SynthResult, manifest_name: str = "test", space: str = "global") -> float:
    """Best possible R@1 for a decision rule that sees only one slice of
    the code: when several gallery videos share the query's slice value,
    ties break by ascending index, so only the first of each collision
    group can be retrieved."""
    truth = result.truth
    manifest = result.manifests[manifest_name]
    g_sl, s_sl, a_sl = truth.slices()
    sl = {"global": g_sl, "sequential": s_sl, "action": a_sl}[space]
    hits = 0
    queries = manifest.queries()
    for vid, idx, sent in queries:
        key = truth.codes[idx, sl]
        first = min(
            g_idx
            for _, g_idx, _ in manifest.entries
            if np.array_equal(truth.codes[g_idx, sl], key)
        )
        if first == idx:
            hits += 1
    return hits / len(queries)
