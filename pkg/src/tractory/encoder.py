"""The five per-step feature streams feeding the direction model:

1. multi-scale encodings of the diffusion ODF volume, interpolated at the
   current point (optionally with the raw 27-voxel neighborhood) and at a
   look-ahead point half a voxel along the previous direction;
2. the strided history of previous step directions;
3. normalized distances to five fixed cortex keypoints;
4. multi-scale encodings of the tissue segmentation map;
5. the fixel-prior directions (raw sign-aligned pair, or conv-encoded).

Feature volumes are computed once per subject and shared read-only; the
per-step assembly is a pure function of (volumes, weights, point, history).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import layers
from .errors import CheckpointError
from .fixel import FixelMap, fixels_at
from .rng import stream
from .volume import LabelVolume, Volume

N_TISSUE_CLASSES = 5
N_ODF_CHANNELS = 45
N_FIXEL_CHANNELS = 6
N_KEYPOINTS = 5
HISTORY_DEPTH = 12          # ring buffer length; slots are indices 1,3,..,11 back
HISTORY_OFFSETS = (1, 3, 5, 7, 9, 11)


@dataclass(frozen=True)
class FeatureConfig:
    """Architecture and layout constants for the feature streams.

    The default channel plan (8, 16, 32) is the desk-scale preset; the
    full-scale plan (64, 128, 256) is available via ``paper_scale``.
    """

    conv_channels: tuple = (8, 16, 32)
    seg_channels: tuple = (8, 16, 32)
    fixel_channels: tuple = (8, 16, 32)
    include_neighborhood: bool = True
    neighborhood_at_lookahead: bool = False
    lookahead_voxels: float = 0.5
    history_slots: int = 6
    fixel_features: str = "raw"           # "raw" | "conv"
    odf_encoder: str = "conv"             # "conv" | "transformer"
    patch_edge: int = 8
    transformer_blocks: int = 4
    transformer_units: int = 3
    attention_heads: int = 4
    embed_dim: int = 128

    @classmethod
    def paper_scale(cls, **overrides) -> "FeatureConfig":
        overrides.setdefault("conv_channels", (64, 128, 256))
        return cls(**overrides)

    def __post_init__(self):
        for name in ("conv_channels", "seg_channels", "fixel_channels"):
            chans = tuple(int(c) for c in getattr(self, name))
            if len(chans) != 3 or min(chans) < 1:
                raise ValueError(f"{name} must be three positive channel counts")
            object.__setattr__(self, name, chans)
        if self.fixel_features not in ("raw", "conv"):
            raise ValueError("fixel_features must be 'raw' or 'conv'")
        if self.odf_encoder not in ("conv", "transformer"):
            raise ValueError("odf_encoder must be 'conv' or 'transformer'")
        if self.history_slots != len(HISTORY_OFFSETS):
            raise ValueError("history_slots is fixed at 6")

    # -- deterministic feature layout ------------------------------------

    def slices(self) -> dict:
        """Named slices of the assembled feature vector, in layout order."""
        odf_interp = sum(self.conv_channels)
        out, pos = {}, 0

        def add(name, width):
            nonlocal pos
            out[name] = slice(pos, pos + width)
            pos += width

        add("odf_current", odf_interp
            + (27 * self.conv_channels[0] if self.include_neighborhood else 0))
        add("odf_lookahead", odf_interp
            + (27 * self.conv_channels[0] if self.neighborhood_at_lookahead else 0))
        add("history", 3 * self.history_slots)
        add("position", N_KEYPOINTS)
        add("segmentation", sum(self.seg_channels))
        add("fixel", 6 if self.fixel_features == "raw" else sum(self.fixel_channels))
        return out

    @property
    def feature_length(self) -> int:
        return max(s.stop for s in self.slices().values())

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureConfig":
        doc = dict(doc)
        for name in ("conv_channels", "seg_channels", "fixel_channels"):
            if name in doc:
                doc[name] = tuple(doc[name])
        return cls(**doc)


@dataclass
class ConvStack:
    """Three 3x3x3 conv layers: full-res, then two stride-2 downsamplings."""

    weights: list  # [(W, b)] x 3, float32

    @classmethod
    def create(cls, rng, in_channels: int, channels: tuple) -> "ConvStack":
        w = []
        prev = in_channels
        for c in channels:
            fan = 27 * prev
            w.append((layers.he_init(rng, (3, 3, 3, prev, c), fan),
                      np.zeros(c, dtype=np.float32)))
            prev = c
        return cls(weights=w)

    def arrays(self):
        for i, (W, b) in enumerate(self.weights):
            yield f"w{i}", W
            yield f"b{i}", b


@dataclass
class TransformerWeights:
    embed_w: np.ndarray
    embed_b: np.ndarray
    units: list          # dicts of per-unit arrays
    decoder: list        # [(W, b)] transposed-conv stages, coarse to fine

    @classmethod
    def create(cls, rng, cfg: FeatureConfig, n_in: int = N_ODF_CHANNELS):
        d = cfg.embed_dim
        patch_len = cfg.patch_edge ** 3 * n_in
        embed_w = layers.he_init(rng, (patch_len, d), patch_len)
        embed_b = np.zeros(d, dtype=np.float32)
        units = []
        for _ in range(cfg.transformer_blocks * cfg.transformer_units):
            units.append({
                "ln1_g": np.ones(d, dtype=np.float32),
                "ln1_b": np.zeros(d, dtype=np.float32),
                "wq": layers.he_init(rng, (d, d), d),
                "wk": layers.he_init(rng, (d, d), d),
                "wv": layers.he_init(rng, (d, d), d),
                "wo": layers.he_init(rng, (d, d), d),
                "ln2_g": np.ones(d, dtype=np.float32),
                "ln2_b": np.zeros(d, dtype=np.float32),
                "mlp_w1": layers.he_init(rng, (d, 2 * d), d),
                "mlp_b1": np.zeros(2 * d, dtype=np.float32),
                "mlp_w2": layers.he_init(rng, (2 * d, d), 2 * d),
                "mlp_b2": np.zeros(d, dtype=np.float32),
            })
        c1, c2, c3 = cfg.conv_channels
        decoder = []
        prev = d
        for cout in (c3, c2, c1):
            decoder.append((layers.he_init(rng, (2, 2, 2, prev, cout), 8 * prev),
                            np.zeros(cout, dtype=np.float32)))
            prev = cout
        return cls(embed_w, embed_b, units, decoder)


@dataclass
class EncoderWeights:
    odf: ConvStack
    seg: ConvStack
    fixel: ConvStack
    transformer: TransformerWeights | None = None

    @classmethod
    def create(cls, cfg: FeatureConfig, seed: int = 0,
               with_transformer: bool = False) -> "EncoderWeights":
        odf = ConvStack.create(stream(seed, 1), N_ODF_CHANNELS, cfg.conv_channels)
        seg = ConvStack.create(stream(seed, 2), N_TISSUE_CLASSES, cfg.seg_channels)
        fix = ConvStack.create(stream(seed, 3), N_FIXEL_CHANNELS, cfg.fixel_channels)
        tw = None
        if with_transformer or cfg.odf_encoder == "transformer":
            tw = TransformerWeights.create(stream(seed, 4), cfg)
        return cls(odf=odf, seg=seg, fixel=fix, transformer=tw)


def _pad_to_multiple(data: np.ndarray, multiple: int) -> np.ndarray:
    dims = np.asarray(data.shape[:3])
    target = -(-dims // multiple) * multiple
    if np.all(target == dims):
        return data
    warnings.warn(f"volume dims {tuple(dims)} zero-padded to {tuple(target)} "
                  "for multi-scale encoding")
    out = np.zeros(tuple(target) + data.shape[3:], dtype=data.dtype)
    out[: dims[0], : dims[1], : dims[2]] = data
    return out


def _scaled_volume(arr: np.ndarray, base: Volume, factor: int) -> Volume:
    affine = base.affine.copy()
    affine[:3, :3] *= factor
    return Volume(arr.astype(np.float32),
                  spacing=tuple(s * factor for s in base.spacing), affine=affine)


def conv_encode(data: np.ndarray, stack: ConvStack, base: Volume):
    """Apply a 3-layer stack -> feature volumes at scales 1, 1/2, 1/4."""
    x = _pad_to_multiple(np.asarray(data, dtype=np.float64), 4)
    (w1, b1), (w2, b2), (w3, b3) = stack.weights
    f1 = layers.relu(layers.conv3d(x, w1, b1, stride=1))
    f2 = layers.relu(layers.conv3d(f1, w2, b2, stride=2))
    f3 = layers.relu(layers.conv3d(f2, w3, b3, stride=2))
    return (_scaled_volume(f1, base, 1), _scaled_volume(f2, base, 2),
            _scaled_volume(f3, base, 4))


def conv_encode_odf(odf: Volume, weights: EncoderWeights, cfg: FeatureConfig):
    if odf.channels != N_ODF_CHANNELS:
        raise ValueError(f"ODF volume must have {N_ODF_CHANNELS} channels")
    return conv_encode(odf.data, weights.odf, odf)


def encode_segmentation(labels: LabelVolume, weights: EncoderWeights,
                        cfg: FeatureConfig):
    onehot = np.zeros(labels.dims + (N_TISSUE_CLASSES,), dtype=np.float64)
    for c in range(N_TISSUE_CLASSES):
        onehot[..., c] = labels.labels == c
    base = Volume(onehot.astype(np.float32), spacing=labels.spacing,
                  affine=labels.affine)
    return conv_encode(onehot, weights.seg, base)


def encode_fixels(fm: FixelMap, weights: EncoderWeights, cfg: FeatureConfig):
    field6 = np.asarray(fm.directions, dtype=np.float64).reshape(fm.dims + (6,))
    base = Volume(field6.astype(np.float32), spacing=fm.spacing, affine=fm.affine)
    return conv_encode(field6, weights.fixel, base)


def transformer_encode_odf(odf: Volume, weights: EncoderWeights,
                           cfg: FeatureConfig):
    """Inference-only transformer encoder over the whole ODF volume.

    Patch-embeds the volume, runs pre-norm attention units, and decodes
    token features back to the three conv scales through transposed
    convolutions merged with the conv stack's skip maps.
    """
    tw = weights.transformer
    if tw is None:
        raise CheckpointError("checkpoint has no transformer weights")
    p = cfg.patch_edge
    dims = np.asarray(odf.dims)
    if np.any(dims % p):
        raise ValueError(f"grid dims {tuple(dims)} not divisible by patch edge {p}")
    if p % 4 or (p & (p - 1)):
        raise ValueError("patch edge must be a power of two >= 4")
    x = np.asarray(odf.data, dtype=np.float64)
    gx, gy, gz = dims // p
    patches = (x.reshape(gx, p, gy, p, gz, p, -1)
               .transpose(0, 2, 4, 1, 3, 5, 6)
               .reshape(gx * gy * gz, -1))
    if patches.shape[1] != tw.embed_w.shape[0]:
        raise CheckpointError("transformer weights do not match the patch size")
    tokens = patches @ np.float64(tw.embed_w) + np.float64(tw.embed_b)
    tokens += layers.sinusoidal_encoding(len(tokens), tokens.shape[1])
    for u in tw.units:
        normed = layers.layer_norm(tokens, u["ln1_g"], u["ln1_b"])
        attended, _ = layers.multi_head_attention(
            normed, u["wq"], u["wk"], u["wv"], u["wo"], cfg.attention_heads)
        tokens = tokens + attended
        normed = layers.layer_norm(tokens, u["ln2_g"], u["ln2_b"])
        hidden = layers.relu(normed @ np.float64(u["mlp_w1"]) + np.float64(u["mlp_b1"]))
        tokens = tokens + hidden @ np.float64(u["mlp_w2"]) + np.float64(u["mlp_b2"])

    grid = tokens.reshape(gx, gy, gz, -1)
    # nearest-neighbor upsample the token grid to 1/8 resolution, then three
    # transposed-conv stages double it to 1/4, 1/2 and full, each merged with
    # the conv stack's skip map at that scale
    if p < 8:
        raise ValueError("patch edge must be at least 8 for the decoder staging")
    while grid.shape[0] < dims[0] // 8:
        grid = _upsample_tokens(grid)
    s1, s2, s3 = conv_encode_odf(odf, weights, cfg)
    u3 = layers.conv3d_transpose2(grid, *tw.decoder[0])
    f3 = layers.relu(u3 + np.asarray(s3.data, dtype=np.float64))
    f2 = layers.relu(layers.conv3d_transpose2(f3, *tw.decoder[1])
                     + np.asarray(s2.data, dtype=np.float64))
    f1 = layers.relu(layers.conv3d_transpose2(f2, *tw.decoder[2])
                     + np.asarray(s1.data, dtype=np.float64))
    return (_scaled_volume(f1, odf, 1), _scaled_volume(f2, odf, 2),
            _scaled_volume(f3, odf, 4))


def _upsample_tokens(grid: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(np.repeat(grid, 2, axis=0), 2, axis=1), 2, axis=2)


def lookahead_point(p_vox, u_prev, delta: float = 0.5):
    """Hypothetical next point p + delta * u in voxel coordinates.

    A zero previous direction (no history yet) returns p itself.
    """
    p_vox = np.asarray(p_vox, dtype=float)
    u = np.asarray(u_prev, dtype=float)
    single = p_vox.ndim == 1
    p2 = np.atleast_2d(p_vox).copy()
    u2 = np.atleast_2d(u)
    norms = np.linalg.norm(u2, axis=1, keepdims=True)
    unit = np.divide(u2, norms, out=np.zeros_like(u2), where=norms > 1e-12)
    p2 += delta * unit
    return p2[0] if single else p2


def position_vector(p_world, keypoints) -> np.ndarray:
    """Distances to the five keypoints, normalized to sum to 1."""
    keypoints = np.asarray(keypoints, dtype=float)
    if keypoints.shape != (N_KEYPOINTS, 3):
        raise ValueError("exactly five keypoints required")
    p = np.asarray(p_world, dtype=float)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    r = np.linalg.norm(pts[:, None, :] - keypoints[None, :, :], axis=2)
    total = r.sum(axis=1, keepdims=True)
    out = np.divide(r, total, out=np.full_like(r, 1.0 / N_KEYPOINTS),
                    where=total > 1e-12)
    return out[0] if single else out


def history_vector(dir_buffer) -> np.ndarray:
    """Strided history slots: directions 1, 3, 5, 7, 9, 11 steps back.

    ``dir_buffer`` is (..., 12, 3), newest last; before a streamline has
    taken 12 steps the buffer is pre-filled with the launch direction.
    """
    buf = np.asarray(dir_buffer, dtype=float)
    idx = [-k for k in HISTORY_OFFSETS]
    out = buf[..., idx, :]
    return out.reshape(buf.shape[:-2] + (3 * len(HISTORY_OFFSETS),))


def fresh_history(launch_dirs) -> np.ndarray:
    """A (n, 12, 3) ring buffer pre-filled with the launch direction."""
    d = np.atleast_2d(np.asarray(launch_dirs, dtype=float))
    return np.repeat(d[:, None, :], HISTORY_DEPTH, axis=1)


def push_history(buf: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Append the newest step direction, dropping the oldest."""
    out = np.concatenate([buf[:, 1:, :], dirs[:, None, :]], axis=1)
    return out


@dataclass
class FeatureState:
    """Everything needed to assemble step features for one subject."""

    cfg: FeatureConfig
    odf_feats: tuple            # (F1, F2, F3) Volumes
    seg_feats: tuple
    keypoints: np.ndarray
    labels: LabelVolume
    fa: Volume
    fixels: FixelMap | None = None
    fixel_feats: tuple | None = None

    def __post_init__(self):
        if self.cfg.fixel_features == "raw" and self.fixels is None:
            raise ValueError("raw fixel features need a FixelMap")
        if self.cfg.fixel_features == "conv" and self.fixel_feats is None:
            raise ValueError("conv fixel features need encoded fixel volumes")

    @property
    def base(self) -> Volume:
        return self.odf_feats[0]

    def features(self, p_world, u_prev, history_buf) -> np.ndarray:
        """Assemble the (n, feature_length) step-feature matrix.

        Pure and deterministic in its inputs; the layout follows
        ``FeatureConfig.slices`` exactly.
        """
        cfg = self.cfg
        pts = np.atleast_2d(np.asarray(p_world, dtype=float))
        u = np.atleast_2d(np.asarray(u_prev, dtype=float))
        n = len(pts)
        parts = []

        q = self.base.world_to_voxel(pts)
        parts.append(self._odf_block(pts, q, cfg.include_neighborhood))

        u_vox = self.base.world_dir_to_voxel(u)
        q_look = lookahead_point(q, u_vox, cfg.lookahead_voxels)
        p_look = self.base.voxel_to_world(q_look)
        parts.append(self._odf_block(p_look, q_look, cfg.neighborhood_at_lookahead))

        parts.append(history_vector(history_buf))
        parts.append(position_vector(pts, self.keypoints))

        parts.append(np.concatenate([f.interp(f.world_to_voxel(pts))
                                     for f in self.seg_feats], axis=1))

        if cfg.fixel_features == "raw":
            fx = fixels_at(self.fixels, q, u)
            parts.append(fx.reshape(n, 6))
        else:
            parts.append(np.concatenate([f.interp(f.world_to_voxel(pts))
                                         for f in self.fixel_feats], axis=1))
        out = np.concatenate(parts, axis=1)
        return out

    def _odf_block(self, pts_world, q_base, with_neighborhood: bool) -> np.ndarray:
        f1, f2, f3 = self.odf_feats
        cols = [f1.interp(q_base),
                f2.interp(f2.world_to_voxel(pts_world)),
                f3.interp(f3.world_to_voxel(pts_world))]
        if with_neighborhood:
            nb = f1.neighborhood(q_base)
            cols.append(nb.reshape(len(nb), -1))
        return np.concatenate(cols, axis=1)


def assemble(p_world, state: FeatureState, u_prev, history_buf) -> np.ndarray:
    """Single-point StepFeatures vector (see FeatureState.features)."""
    hist = np.asarray(history_buf, dtype=float)
    if hist.ndim == 2:
        hist = hist[None]
    out = state.features(np.atleast_2d(p_world), np.atleast_2d(u_prev), hist)
    return out[0]


def encode_subject(odf: Volume, labels: LabelVolume, fa: Volume,
                   fixels: FixelMap, keypoints, weights: EncoderWeights,
                   cfg: FeatureConfig) -> FeatureState:
    """Run all encoders once and bundle the result for tracking/training."""
    if cfg.odf_encoder == "transformer":
        odf_feats = transformer_encode_odf(odf, weights, cfg)
    else:
        odf_feats = conv_encode_odf(odf, weights, cfg)
    seg_feats = encode_segmentation(labels, weights, cfg)
    fixel_feats = None
    if cfg.fixel_features == "conv":
        fixel_feats = encode_fixels(fixels, weights, cfg)
    return FeatureState(cfg=cfg, odf_feats=odf_feats, seg_feats=seg_feats,
                        keypoints=np.asarray(keypoints, dtype=float), labels=labels,
                        fa=fa, fixels=fixels, fixel_feats=fixel_feats)
