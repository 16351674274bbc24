"""The trainable direction predictor and its training machinery.

``DirectionModel`` is a scikit-learn style estimator: an MLP head over the
assembled step features, trained with plain SGD on the concentration-
weighted alignment loss −κ·⟨û, u⟩ (the vMF negative log-likelihood minus
its κ-only normalizer term, which is reported but not differentiated).
All gradient math runs in float64 against float32-stored weights and is
verified against central finite differences.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from . import layers, vmf
from .encoder import FeatureConfig, EncoderWeights, ConvStack, TransformerWeights
from .errors import CheckpointError
from .rng import stream


def check_features(X, n_features: int | None = None) -> np.ndarray:
    """Validate a (n, d) finite float feature matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2D feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_unit_targets(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 3:
        raise ValueError("targets must be (n, 3) direction vectors")
    norms = np.linalg.norm(y, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("target directions must be unit norm")
    return y


def alignment_loss(pred_unit, targets, kappa) -> float:
    """Mean of −κ·⟨û, u⟩ over the batch (minimized at û = u for κ > 0)."""
    dots = np.einsum("ij,ij->i", pred_unit, targets)
    return float(np.mean(-np.asarray(kappa, dtype=float) * dots))


def vmf_nll(pred_unit, targets, kappa) -> float:
    """Full per-sample vMF NLL −κ⟨û,u⟩ − log C(κ), averaged (reporting only)."""
    kappa = np.asarray(kappa, dtype=float)
    return alignment_loss(pred_unit, targets, kappa) - float(np.mean(vmf.log_c(kappa)))


@dataclass
class TrainBatch:
    """Assembled step features, unit targets and per-sample concentration."""

    features: np.ndarray
    targets: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        self.features = check_features(self.features)
        self.targets = check_unit_targets(self.targets)
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if self.kappa.shape != (len(self.features),):
            raise ValueError("kappa must be one value per sample")
        if np.any(self.kappa < 0):
            raise ValueError("kappa must be nonnegative")

    def __len__(self):
        return len(self.features)


class DirectionModel(RegressorMixin, BaseEstimator):
    """MLP direction regressor: features -> unit propagation direction.

    Hidden layers use rectifier nonlinearities; the final 3-unit linear
    output is normalized to a unit vector. ``fit`` expects unit-norm
    targets and optional per-sample ``kappa`` weights (default 1).

    Training is plain SGD with a fixed shuffle order per seed, float64
    gradient accumulation and float32 weight storage, so identical seeds
    give bit-identical results.
    """

    def __init__(self, hidden_layers=(128, 64), learning_rate=1e-3,
                 batch_size=4096, max_epochs=60, tol=1e-4, patience=5,
                 seed=0, standardize=True):
        self.hidden_layers = hidden_layers
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.tol = tol
        self.patience = patience
        self.seed = seed
        self.standardize = standardize

    # -- core math --------------------------------------------------------

    def _forward_raw(self, X, weights=None):
        """Pre-normalization output and per-layer activations."""
        weights = weights if weights is not None else self.weights_
        acts = [X]
        h = X
        for i, (W, b) in enumerate(weights):
            z = layers.dense(h, np.float64(W), np.float64(b))
            if i < len(weights) - 1:
                h = layers.relu(z)
                acts.extend([z, h])
            else:
                h = z
                acts.append(z)
        return h, acts

    def _apply_scaling(self, X):
        if self.standardize:
            return (X - self.mean_) / self.scale_
        return X

    def _backward(self, X, y, kappa, weights=None):
        """Loss and gradients of mean(−κ⟨û,u⟩) w.r.t. every weight."""
        weights = weights if weights is not None else self.weights_
        n = len(X)
        v, acts = self._forward_raw(X, weights)
        u, _ = layers.normalize_rows(v)
        loss = alignment_loss(u, y, kappa)
        du = -(kappa[:, None] * y) / n
        dv = layers.normalize_rows_backward(v, du)
        grads = [None] * len(weights)
        dy = dv
        for i in range(len(weights) - 1, -1, -1):
            W, _ = weights[i]
            x_in = acts[2 * i]
            dW, db, dx = layers.dense_backward(x_in, np.float64(W), dy)
            grads[i] = (dW, db)
            if i > 0:
                z_prev = acts[2 * i - 1]
                dy = layers.relu_backward(z_prev, dx)
        return loss, grads

    def _init_weights(self, n_features: int):
        rng = stream(self.seed, 7)
        sizes = [n_features, *self.hidden_layers, 3]
        out = []
        for din, dout in zip(sizes[:-1], sizes[1:]):
            out.append((layers.he_init(rng, (din, dout), din),
                        np.zeros(dout, dtype=np.float32)))
        return out

    # -- sklearn surface ---------------------------------------------------

    def fit(self, X, y, kappa=None):
        X = check_features(X)
        y = check_unit_targets(y)
        if len(X) != len(y):
            raise ValueError("features and targets disagree in length")
        kappa = (np.ones(len(X)) if kappa is None
                 else np.asarray(kappa, dtype=np.float64))
        if kappa.shape != (len(X),) or np.any(kappa < 0):
            raise ValueError("kappa must be one nonnegative value per sample")

        self.n_features_in_ = X.shape[1]
        if self.standardize:
            # quantized to float32 so in-memory and reloaded models agree bitwise;
            # (near-)constant features scale by 1 instead of exploding
            std = X.std(axis=0)
            std[std < 1e-7] = 1.0
            self.mean_ = X.mean(axis=0).astype(np.float32).astype(np.float64)
            self.scale_ = std.astype(np.float32).astype(np.float64)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        Xs = self._apply_scaling(X)

        self.weights_ = self._init_weights(X.shape[1])
        shuffle_rng = stream(self.seed, 11)
        lr = float(self.learning_rate)
        batch = max(1, int(self.batch_size))
        curve = []
        for _ in range(int(self.max_epochs)):
            order = shuffle_rng.permutation(len(Xs))
            epoch_loss = 0.0
            for start in range(0, len(Xs), batch):
                take = order[start:start + batch]
                loss, grads = self._backward(Xs[take], y[take], kappa[take])
                epoch_loss += loss * len(take)
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite training loss; aborting")
                if lr > 0.0:
                    new_weights = []
                    for (W, b), (dW, db) in zip(self.weights_, grads):
                        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
                            raise FloatingPointError("non-finite gradient; aborting")
                        new_weights.append((
                            (np.float64(W) - lr * dW).astype(np.float32),
                            (np.float64(b) - lr * db).astype(np.float32)))
                    self.weights_ = new_weights
            epoch_loss /= len(Xs)
            curve.append(epoch_loss)
            # plateau stop: relative improvement across the last `patience`
            # epochs below tol
            if len(curve) > self.patience:
                window = curve[-(self.patience + 1):]
                if window[0] - min(window[1:]) < self.tol * max(1.0, abs(window[0])):
                    break
        self.loss_curve_ = np.asarray(curve)
        self.norm_term_ = -float(np.mean(vmf.log_c(kappa)))
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise NotFittedError("this DirectionModel is not fitted yet")

    def predict(self, X):
        """Unit direction per row; rows whose raw output is ~zero fall back
        to +z (see predict_directions for the tracker's fallback path)."""
        dirs, fallback = self.predict_directions(X)
        dirs[fallback] = (0.0, 0.0, 1.0)
        return dirs

    def predict_directions(self, X, last_dirs=None):
        """(directions, fallback_mask): zero-output rows take ``last_dirs``.

        The fallback mask flags rows where the MLP emitted a (near-)zero
        vector before normalization; those are passed through from the
        previous step direction when provided.
        """
        self._check_fitted()
        X = check_features(X, self.n_features_in_)
        v, _ = self._forward_raw(self._apply_scaling(X))
        u, norms = layers.normalize_rows(v)
        fallback = norms <= 1e-12
        if last_dirs is not None and np.any(fallback):
            u[fallback] = np.asarray(last_dirs, dtype=float)[fallback]
        return u, fallback

    def score(self, X, y, kappa=None):
        """Mean cosine alignment (1 is perfect) — higher is better."""
        u, _ = self.predict_directions(X)
        return float(np.mean(np.einsum("ij,ij->i", u, check_unit_targets(y))))


def grad_check(model: DirectionModel, batch: TrainBatch, eps: float = 1e-5,
               max_weights: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    Samples up to ``max_weights`` coordinates across all layers; both sides
    evaluate in float64 from the same float32-valued base point.
    """
    model._check_fitted()
    X = model._apply_scaling(check_features(batch.features, model.n_features_in_))
    y, kappa = batch.targets, batch.kappa
    base = [(np.float64(W), np.float64(b)) for W, b in model.weights_]
    _, grads = model._backward(X, y, kappa, weights=base)

    flat = []
    for li, (W, b) in enumerate(base):
        for j in range(W.size):
            flat.append((li, 0, j))
        for j in range(b.size):
            flat.append((li, 1, j))
    rng = stream(seed, 13)
    picks = (flat if len(flat) <= max_weights
             else [flat[i] for i in rng.choice(len(flat), max_weights, replace=False)])

    def loss_at(weights):
        v, _ = model._forward_raw(X, weights)
        u, _ = layers.normalize_rows(v)
        return alignment_loss(u, y, kappa)

    worst = 0.0
    for li, part, j in picks:
        perturbed = [(W.copy(), b.copy()) for W, b in base]
        arr = perturbed[li][part]
        arr.flat[j] += eps
        hi = loss_at(perturbed)
        arr.flat[j] -= 2 * eps
        lo = loss_at(perturbed)
        fd = (hi - lo) / (2 * eps)
        analytic = grads[li][part].flat[j]
        denom = max(abs(fd), abs(analytic), 1e-8)
        worst = max(worst, abs(fd - analytic) / denom)
    return worst


def conv_grad_check(seed: int = 0, stride: int = 1, eps: float = 1e-5) -> float:
    """Finite-difference check of the conv3d backward pass on a tiny field."""
    rng = stream(seed, 17)
    x = rng.standard_normal((4, 4, 4, 2))
    W = rng.standard_normal((3, 3, 3, 2, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    proj = rng.standard_normal(layers.conv3d(x, W, b, stride=stride).shape)

    def loss(Wv, bv, xv):
        return float((layers.conv3d(xv, Wv, bv, stride=stride) * proj).sum())

    dW, db, dx = layers.conv3d_backward(x, W, proj, stride=stride)
    worst = 0.0
    W64, b64 = np.float64(W), np.float64(b)
    for arr, grad in ((W64, dW), (b64, db), (x, dx)):
        idx = rng.choice(arr.size, size=min(20, arr.size), replace=False)
        for j in idx:
            orig = arr.flat[j]
            arr.flat[j] = orig + eps
            hi = loss(W64, b64, x)
            arr.flat[j] = orig - eps
            lo = loss(W64, b64, x)
            arr.flat[j] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(grad.flat[j]), 1e-8)
            worst = max(worst, abs(fd - grad.flat[j]) / denom)
    return worst


def build_training_set(dataset, feature_state, alpha: float = 1600.0,
                       seed: int = 0, augment: bool = True) -> TrainBatch:
    """Walk every reference streamline and emit one sample per step.

    At step i the features are assembled at p_i, the target is the step's
    unit direction vMF-jittered with κ = α·FA(p_i)², and κ is stored as the
    loss weight. The history buffer records the *jittered* directions (and
    pads the pre-launch slots with a draw around the first tangent), so
    training histories carry the same wobble the tracker's sampled steps
    produce at test time.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    from .encoder import HISTORY_DEPTH

    rng = stream(seed, 19)
    feats, targets, kappas = [], [], []
    for track in dataset.reference_streamlines:
        pts = np.asarray(track, dtype=float)
        if len(pts) < 2:
            continue
        steps = np.diff(pts, axis=0)
        norms = np.linalg.norm(steps, axis=1)
        if np.any(norms < 1e-9):
            continue
        dirs = steps / norms[:, None]
        n = len(dirs)
        fa_here = np.clip(feature_state.fa.interp(
            feature_state.fa.world_to_voxel(pts[:-1]))[:, 0], 0.0, 1.0)
        kap = vmf.kappa_from_fa(fa_here, alpha)
        if augment:
            xi = rng.random((n + 1, 2))
            y = vmf.sample_from_uniforms(dirs, kap, xi[:n, 0], xi[:n, 1])
            launch = vmf.sample_from_uniforms(dirs[0], kap[0], xi[n, 0], xi[n, 1])
            recorded = y
        else:
            y = dirs
            launch = dirs[0]
            recorded = dirs
        # history window at step i holds the directions taken at steps
        # i-12 .. i-1, launch-padded
        padded = np.concatenate(
            [np.repeat(launch[None, :], HISTORY_DEPTH, axis=0), recorded[:-1]], axis=0)
        hist_rows = sliding_window_view(padded, HISTORY_DEPTH, axis=0).transpose(0, 2, 1)
        u_prev = hist_rows[:, -1, :]
        X = feature_state.features(pts[:-1], u_prev, hist_rows)
        feats.append(X)
        targets.append(y)
        kappas.append(kap)
    if not feats:
        raise ValueError("dataset has no usable reference streamlines")
    return TrainBatch(features=np.concatenate(feats),
                      targets=np.concatenate(targets),
                      kappa=np.concatenate(kappas))


# -- checkpoint format -----------------------------------------------------------

@dataclass
class Checkpoint:
    """A trained tracking model: feature config + encoder weights + MLP head."""

    feature_config: FeatureConfig
    encoder: EncoderWeights
    model: DirectionModel
    metadata: dict = field(default_factory=dict)


def _checkpoint_arrays(ckpt: Checkpoint):
    """(name, float32 array) pairs in canonical manifest order."""
    out = []
    for stack_name in ("odf", "seg", "fixel"):
        stack: ConvStack = getattr(ckpt.encoder, stack_name)
        for key, arr in stack.arrays():
            out.append((f"encoder.{stack_name}.{key}", arr))
    if ckpt.encoder.transformer is not None:
        tw = ckpt.encoder.transformer
        out.append(("transformer.embed_w", tw.embed_w))
        out.append(("transformer.embed_b", tw.embed_b))
        for ui, unit in enumerate(tw.units):
            for key in sorted(unit):
                out.append((f"transformer.unit{ui:02d}.{key}", unit[key]))
        for di, (W, b) in enumerate(tw.decoder):
            out.append((f"transformer.decoder{di}.w", W))
            out.append((f"transformer.decoder{di}.b", b))
    model = ckpt.model
    model._check_fitted()
    for li, (W, b) in enumerate(model.weights_):
        out.append((f"mlp.layer{li}.w", W))
        out.append((f"mlp.layer{li}.b", b))
    out.append(("scaling.mean", model.mean_.astype(np.float32)))
    out.append(("scaling.scale", model.scale_.astype(np.float32)))
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``manifest.json`` + ``weights.bin`` into directory ``path``.

    The blob is the little-endian float32 concatenation of all arrays in
    manifest order; the manifest pins shapes, configs and a content hash.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = _checkpoint_arrays(ckpt)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    manifest = {
        "format": "tractory-checkpoint-v1",
        "feature_config": ckpt.feature_config.to_dict(),
        "mlp": {k: v for k, v in ckpt.model.get_params().items()},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "metadata": ckpt.metadata,
    }
    (path / "weights.bin").write_bytes(blob)
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"not a checkpoint directory: {path}") from exc
    if manifest.get("format") != "tractory-checkpoint-v1":
        raise CheckpointError(f"{path}: unknown checkpoint format")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: weight blob hash mismatch (corrupt file?)")
    expect = sum(int(np.prod(a["shape"])) for a in manifest["arrays"])
    if expect * 4 != len(blob):
        raise CheckpointError(f"{path}: blob length disagrees with manifest shapes")

    arrays = {}
    offset = 0
    for spec in manifest["arrays"]:
        size = int(np.prod(spec["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset * 4)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
        offset += size

    cfg = FeatureConfig.from_dict(manifest["feature_config"])

    def stack(prefix, n_layers=3):
        return ConvStack(weights=[(arrays[f"{prefix}.w{i}"], arrays[f"{prefix}.b{i}"])
                                  for i in range(n_layers)])

    transformer = None
    if "transformer.embed_w" in arrays:
        n_units = cfg.transformer_blocks * cfg.transformer_units
        units = []
        for ui in range(n_units):
            keys = [k for k in arrays if k.startswith(f"transformer.unit{ui:02d}.")]
            units.append({k.split(".")[-1]: arrays[k] for k in keys})
        decoder = [(arrays[f"transformer.decoder{di}.w"],
                    arrays[f"transformer.decoder{di}.b"]) for di in range(3)]
        transformer = TransformerWeights(arrays["transformer.embed_w"],
                                         arrays["transformer.embed_b"], units, decoder)
    encoder = EncoderWeights(odf=stack("encoder.odf"), seg=stack("encoder.seg"),
                             fixel=stack("encoder.fixel"), transformer=transformer)

    model = DirectionModel(**manifest["mlp"])
    weights = []
    li = 0
    while f"mlp.layer{li}.w" in arrays:
        weights.append((arrays[f"mlp.layer{li}.w"], arrays[f"mlp.layer{li}.b"]))
        li += 1
    if not weights:
        raise CheckpointError(f"{path}: checkpoint holds no MLP layers")
    model.weights_ = weights
    model.mean_ = np.float64(arrays["scaling.mean"])
    model.scale_ = np.float64(arrays["scaling.scale"])
    model.n_features_in_ = weights[0][0].shape[0]
    return Checkpoint(feature_config=cfg, encoder=encoder, model=model,
                      metadata=manifest.get("metadata", {}))
