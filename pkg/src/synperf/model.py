"""Bolus characterization, per-voxel sequence encoder, spatial correlation and regression head."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers
from .config import from_kv, to_kv
from .data import CaseRecord, DataError, MapKind, PerfusionMap, read_array, read_kv, write_array, write_kv
from .objective import LossConfig, LossKind, variance_map


@dataclass(frozen=True)
class ModelConfig:
    use_bcs: bool = True
    use_spatial_correlation: bool = True
    use_loss_weighting: bool = True
    use_augmentation: bool = True
    loss_kind: LossKind = LossKind.WEIGHTED_LAPLACE_NLL
    target_kind: MapKind = MapKind.TMAX
    # None centers the patch on the default vessel location of the volume
    bcs_center: tuple | None = None
    bcs_size: tuple = (16, 16)
    bcs_kernel: tuple = (3, 3, 3)
    bcs_hidden: int = 16
    bcs_embed_dim: int = 16
    encoder_channels: tuple = (64, 128, 256)
    encoder_kernel_sizes: tuple = (5, 5, 3)
    pool_factor: int = 2
    encode_dim: int = 256
    spatial_kernel: tuple = (3, 3)
    spatial_channels: int = 128
    dense_dim: int = 64
    activation: str = "selu"
    init: str = "xavier_uniform"
    input_dropout: float = 0.0
    conv_dropout: float = 0.5
    fc_dropout: float = 0.0
    batch_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "target_kind", MapKind(self.target_kind))
        if self.encode_dim != self.encoder_channels[-1]:
            raise ValueError("encode_dim must equal the last encoder channel count")
        if len(self.encoder_channels) != 3 or len(self.encoder_kernel_sizes) != 3:
            raise ValueError("the encoder has exactly three convolutions")
        if self.pool_factor != 2:
            raise ValueError("only pool_factor 2 is supported")
        if self.activation != "selu" or self.init != "xavier_uniform" or self.batch_norm:
            raise ValueError("only selu, xavier_uniform and no batch norm are supported")
        if self.input_dropout != 0.0:
            raise ValueError("input dropout is not supported")
        if any(k % 2 == 0 for k in tuple(self.encoder_kernel_sizes) + tuple(self.bcs_kernel) + tuple(self.spatial_kernel)):
            raise ValueError("kernel sizes must be odd")

    def loss_config(self) -> LossConfig:
        return LossConfig(loss_kind=self.loss_kind, weighted=self.use_loss_weighting)

    @property
    def encoder_in_channels(self) -> int:
        return 2 + (self.bcs_embed_dim if self.use_bcs else 0)


VARIANTS = {
    "A": {},
    "B": {"use_augmentation": False},
    "C": {"use_spatial_correlation": False},
    "D": {"use_bcs": False},
    "E": {"use_loss_weighting": False},
}


def variant(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Ablation variant A (full) or B-E with one component removed."""
    return dataclasses.replace(base or ModelConfig(), **VARIANTS[name])


def ttp_rbf_config(kind: MapKind, base: ModelConfig | None = None, **overrides) -> ModelConfig:
    """Reduced architecture with squared loss for TTP or RBF targets."""
    kw = dict(loss_kind=LossKind.SQUARED, use_bcs=False, use_spatial_correlation=False, target_kind=MapKind(kind))
    kw.update(overrides)
    return dataclasses.replace(base or ModelConfig(), **kw)


@dataclass(frozen=True, eq=False)
class PredictionResult:
    p_hat: PerfusionMap
    b_hat: np.ndarray
    sigma2: np.ndarray
    seconds: float = 0.0


@dataclass
class Batch:
    """Row-band patches plus the per-case inputs they share.

    signals: (B, T, rows, cols) standardized sequence patches
    case_index: (B,) index of each patch's case in the per-case arrays
    bcs_inputs: (n_cases, T, h, w) vessel patch sequences
    time_features: (n_cases, T) standardized frame times
    """

    signals: np.ndarray
    case_index: np.ndarray
    bcs_inputs: np.ndarray
    time_features: np.ndarray


def time_feature(frame_times) -> np.ndarray:
    t = np.asarray(frame_times, dtype=np.float64)
    std = t.std()
    return (t - t.mean()) / (std if std > 0 else 1.0)


def bcs_window(cfg: ModelConfig, spatial_shape) -> tuple:
    """Index slices (slice, rows, cols) of the vessel patch inside a volume."""
    from .phantom import default_vessel_center

    center = cfg.bcs_center if cfg.bcs_center is not None else default_vessel_center(spatial_shape)
    s, r, c = (int(v) for v in center)
    h, w = cfg.bcs_size
    r0, c0 = r - h // 2, c - w // 2
    if not (0 <= s < spatial_shape[0] and r0 >= 0 and c0 >= 0 and r0 + h <= spatial_shape[1] and c0 + w <= spatial_shape[2]):
        raise DataError(f"BCS patch {h}x{w} at {center} out of bounds for volume {spatial_shape}")
    return s, slice(r0, r0 + h), slice(c0, c0 + w)


def extract_bcs_patch(seq_data, cfg: ModelConfig) -> np.ndarray:
    s, rows, cols = bcs_window(cfg, seq_data.shape[1:])
    return seq_data[:, s, rows, cols]


# voxel-frames per inference batch (4 desk-scale patches)
PREDICT_VOXEL_FRAMES = 4 * 8 * 64 * 40


class Model:
    """Parameters plus the output scaling that maps standardized predictions to physical units."""

    def __init__(self, cfg: ModelConfig, params: dict, target_scale=(0.0, 1.0)):
        self.cfg = cfg
        self.params = params
        self.target_scale = (float(target_scale[0]), float(target_scale[1]))
        self._check()

    # -- construction -----------------------------------------------------

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32, target_scale=(0.0, 1.0)):
        shapes = param_shapes(cfg)
        params = {}
        for name, shape in shapes.items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                params[name] = layers.xavier_uniform(rng, shape, dtype)
        return cls(cfg, params, target_scale)

    def _check(self):
        expected = param_shapes(self.cfg)
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match config {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, config needs {shape}")
            if not np.isfinite(self.params[name]).all():
                raise ValueError(f"parameter {name} is not finite")
        if not self.target_scale[1] > 0:
            raise ValueError("target scale must be positive")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.target_scale)

    # -- forward / backward -------------------------------------------------

    def forward_batch(self, batch: Batch, rng: np.random.Generator | None = None):
        """Return (p_std, log_b_std, cache); ``rng`` enables dropout (training mode)."""
        cfg, P = self.cfg, self.params
        dt = self.dtype
        B, T, pr, pc = batch.signals.shape
        N = pr * pc
        n_cases = batch.bcs_inputs.shape[0]
        cache = {"shape": (B, T, pr, pc), "case_index": np.asarray(batch.case_index), "n_cases": n_cases}

        shared = [batch.time_features.astype(dt)[..., None]]
        if cfg.use_bcs:
            emb, cache["bcs"] = self._bcs_forward(batch.bcs_inputs.astype(dt))
            shared.append(emb)
        shared = np.concatenate(shared, axis=-1)  # (n_cases, T, 1 [+ E])

        # first conv: the signal channel is per voxel, time + BCS channels are per case
        w1 = P["enc1_w"]
        g, cache["gcols"] = layers.conv_same(shared, w1[:, 1:, :], P["enc1_b"])
        cache["shared_shape"] = shared.shape
        x = batch.signals.astype(dt).transpose(0, 2, 3, 1).reshape(B * N, T, 1)
        y, cache["scols"] = layers.conv_same(x, w1[:, :1, :])
        y = y.reshape(B, N, T, -1)
        y += g[cache["case_index"]][:, None]
        h = layers.selu(y.reshape(B * N, T, -1), inplace=True)
        acts = [h]
        pools = []
        for i in (2, 3):
            pooled, first = layers.maxpool2(h)
            pools.append((first, h.shape[1]))
            z, cache[f"enc{i}_cols"] = layers.conv_same(pooled, P[f"enc{i}_w"], P[f"enc{i}_b"])
            cache[f"enc{i}_in_shape"] = pooled.shape
            h = layers.selu(z, inplace=True)
            acts.append(h)
        cache["acts"], cache["pools"] = acts, pools
        feat = h.mean(axis=1)  # (M, encode_dim)
        mask = layers.dropout_mask(rng, feat.shape, cfg.conv_dropout, dt)
        if mask is not None:
            feat = feat * mask
        cache["conv_drop"] = mask

        feat = feat.reshape(B, pr, pc, -1)
        if cfg.use_spatial_correlation:
            zs, cache["sp_cols"] = layers.conv_same(feat, P["sp_w"], P["sp_b"])
            hs = layers.selu(zs, inplace=True)
            hd = layers.selu(hs @ P["dense_w"] + P["dense_b"], inplace=True)
            cache.update(sp_in_shape=feat.shape, hs=hs, hd=hd)
            fmask = layers.dropout_mask(rng, hd.shape, cfg.fc_dropout, dt)
            top = hd * fmask if fmask is not None else hd
            cache["fc_drop"] = fmask
        else:
            top = feat
        cache["top"] = top
        out = top @ P["head_w"] + P["head_b"]
        return out[..., 0], out[..., 1], cache

    def _bcs_forward(self, patches):
        P = self.params
        a1, c1 = layers.conv_same(patches[..., None], P["bcs1_w"], P["bcs1_b"])
        a1 = layers.selu(a1, inplace=True)
        a2, c2 = layers.conv_same(a1, P["bcs2_w"], P["bcs2_b"])
        a2 = layers.selu(a2, inplace=True)
        emb = a2.mean(axis=(2, 3))
        return emb, dict(in_shape=patches.shape + (1,), a1=a1, c1=c1, a2=a2, c2=c2)

    def backward(self, cache, d_p_std, d_log_b):
        """Gradients of a scalar loss w.r.t. every parameter, given output gradients."""
        cfg, P = self.cfg, self.params
        dt = self.dtype
        B, T, pr, pc = cache["shape"]
        N = pr * pc
        grads = {}
        dout = np.stack([d_p_std, d_log_b], axis=-1).astype(dt)
        top = cache["top"]
        grads["head_w"] = top.reshape(-1, top.shape[-1]).T @ dout.reshape(-1, 2)
        grads["head_b"] = dout.reshape(-1, 2).sum(axis=0)
        dtop = dout @ P["head_w"].T

        if cfg.use_spatial_correlation:
            dhd = dtop * cache["fc_drop"] if cache["fc_drop"] is not None else dtop
            dzd = layers.selu_backward(cache["hd"], dhd)
            hs = cache["hs"]
            grads["dense_w"] = hs.reshape(-1, hs.shape[-1]).T @ dzd.reshape(-1, dzd.shape[-1])
            grads["dense_b"] = dzd.reshape(-1, dzd.shape[-1]).sum(axis=0)
            dzs = layers.selu_backward(hs, dzd @ P["dense_w"].T)
            dfeat, grads["sp_w"], grads["sp_b"] = layers.conv_same_backward(
                dzs, cache["sp_cols"], P["sp_w"], cache["sp_in_shape"])
        else:
            dfeat = dtop
        dfeat = dfeat.reshape(B * N, -1)
        if cache["conv_drop"] is not None:
            dfeat = dfeat * cache["conv_drop"]

        acts, pools = cache["acts"], cache["pools"]
        T3 = acts[-1].shape[1]
        dh = np.broadcast_to((dfeat / T3)[:, None, :], acts[-1].shape)
        for i in (3, 2):
            dz = layers.selu_backward(acts[i - 1], dh)
            dpooled, grads[f"enc{i}_w"], grads[f"enc{i}_b"] = layers.conv_same_backward(
                dz, cache[f"enc{i}_cols"], P[f"enc{i}_w"], cache[f"enc{i}_in_shape"])
            first, t_prev = pools[i - 2]
            dh = layers.maxpool2_backward(dpooled, first, t_prev)
        dz1 = layers.selu_backward(acts[0], dh)  # (B*N, T, F1)

        w1 = P["enc1_w"]
        _, dw_sig, _ = layers.conv_same_backward(dz1, cache["scols"], w1[:, :1, :], (B * N, T, 1), need_dx=False)
        dg_patch = dz1.reshape(B, N, T, -1).sum(axis=1)
        dg = np.zeros((cache["n_cases"], T, dg_patch.shape[-1]), dtype=dt)
        np.add.at(dg, cache["case_index"], dg_patch)
        dshared, dw_shared, db1 = layers.conv_same_backward(
            dg, cache["gcols"], w1[:, 1:, :], cache["shared_shape"], need_dx=cfg.use_bcs)
        grads["enc1_w"] = np.concatenate([dw_sig, dw_shared], axis=1)
        grads["enc1_b"] = db1

        if cfg.use_bcs:
            grads.update(self._bcs_backward(cache["bcs"], dshared[..., 1:]))
        return {k: v.astype(dt, copy=False) for k, v in grads.items()}

    def _bcs_backward(self, c, demb):
        P = self.params
        grads = {}
        a2 = c["a2"]
        n, T, h, w, E = a2.shape
        da2 = np.broadcast_to((demb / (h * w))[:, :, None, None, :], a2.shape)
        dz2 = layers.selu_backward(a2, da2)
        da1, grads["bcs2_w"], grads["bcs2_b"] = layers.conv_same_backward(dz2, c["c2"], P["bcs2_w"], c["a1"].shape)
        dz1 = layers.selu_backward(c["a1"], da1)
        _, grads["bcs1_w"], grads["bcs1_b"] = layers.conv_same_backward(
            dz1, c["c1"], P["bcs1_w"], c["in_shape"], need_dx=False)
        return grads

    # -- physical units -----------------------------------------------------

    def to_physical(self, p_std, log_b_std):
        """(p_hat, log_b) in target units."""
        mean, std = self.target_scale
        return p_std.astype(np.float64) * std + mean, log_b_std.astype(np.float64) + math.log(std)

    # -- whole cases --------------------------------------------------------

    def case_inputs(self, seq_data, frame_times):
        """Per-case BCS input and time feature arrays with a leading case axis."""
        if self.cfg.use_bcs:
            bcs = extract_bcs_patch(seq_data, self.cfg)[None]
        else:
            bcs = np.zeros((1, seq_data.shape[0], 1, 1), dtype=self.dtype)
        return bcs, time_feature(frame_times)[None]

    def predict_arrays(self, seq_data, frame_times, patch_rows: int, batch_patches: int = 4):
        """Full-volume (p_std, log_b_std) from non-overlapping row bands.

        Batches shrink below ``batch_patches`` when a patch is large, to bound
        activation memory.
        """
        T, S, R, C = seq_data.shape
        if R % patch_rows:
            raise ValueError(f"patch rows {patch_rows} must divide volume rows {R}")
        batch_patches = max(1, min(batch_patches, PREDICT_VOXEL_FRAMES // (patch_rows * C * T)))
        bcs, tf = self.case_inputs(seq_data, frame_times)
        p = np.zeros((S, R, C), dtype=np.float64)
        lb = np.zeros((S, R, C), dtype=np.float64)
        coords = [(s, r) for s in range(S) for r in range(0, R, patch_rows)]
        for i in range(0, len(coords), batch_patches):
            chunk = coords[i:i + batch_patches]
            sig = np.stack([seq_data[:, s, r:r + patch_rows, :] for s, r in chunk])
            batch = Batch(sig, np.zeros(len(chunk), dtype=np.int64), bcs, tf)
            ps, ls, _ = self.forward_batch(batch)
            for j, (s, r) in enumerate(chunk):
                p[s, r:r + patch_rows] = ps[j]
                lb[s, r:r + patch_rows] = ls[j]
        return p, lb

    def predict_case(self, case: CaseRecord, patch_rows: int, batch_patches: int = 4) -> PredictionResult:
        if case.seq_stats is None:
            raise DataError(f"case {case.case_id} is not preprocessed (no standardization statistics)")
        t0 = time.perf_counter()
        p_std, lb_std = self.predict_arrays(case.sequence.data, case.sequence.frame_times, patch_rows, batch_patches)
        p_hat, log_b = self.to_physical(p_std, lb_std)
        b_hat = np.exp(log_b)
        return PredictionResult(PerfusionMap(p_hat, self.cfg.target_kind), b_hat, variance_map(b_hat),
                                time.perf_counter() - t0)

    # -- checkpoint -----------------------------------------------------------

    def save(self, directory, extra: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, arr in self.params.items():
            write_array(directory / f"{name}.pfsn", np.asarray(arr, dtype=np.float32))
        meta = {"format": "synperf-checkpoint-1", "params": ",".join(sorted(self.params))}
        for name in sorted(self.params):
            meta[f"shape.{name}"] = "x".join(str(s) for s in self.params[name].shape)
        meta["target_mean"] = repr(self.target_scale[0])
        meta["target_std"] = repr(self.target_scale[1])
        meta.update(to_kv(self.cfg, prefix="model."))
        meta.update(extra or {})
        write_kv(directory / "manifest.txt", meta)
        return directory

    @classmethod
    def load(cls, directory) -> "Model":
        directory = Path(directory)
        meta = read_kv(directory / "manifest.txt")
        if meta.get("format") != "synperf-checkpoint-1":
            raise DataError(f"{directory} is not a checkpoint")
        cfg = from_kv(ModelConfig, meta, prefix="model.")
        expected = param_shapes(cfg)
        names = meta["params"].split(",")
        if sorted(names) != sorted(expected):
            raise DataError("checkpoint parameters do not match its model config")
        params = {}
        for name in names:
            arr = read_array(directory / f"{name}.pfsn")
            declared = tuple(int(s) for s in meta[f"shape.{name}"].split("x"))
            if arr.shape != declared or arr.shape != expected[name]:
                raise DataError(f"checkpoint array {name} has shape {arr.shape}, expected {expected[name]}")
            params[name] = arr
        return cls(cfg, params, (float(meta["target_mean"]), float(meta["target_std"])))


def param_shapes(cfg: ModelConfig) -> dict:
    k1, k2, k3 = cfg.encoder_kernel_sizes
    f1, f2, f3 = cfg.encoder_channels
    shapes = {}
    if cfg.use_bcs:
        kb = tuple(cfg.bcs_kernel)
        shapes["bcs1_w"] = kb + (1, cfg.bcs_hidden)
        shapes["bcs1_b"] = (cfg.bcs_hidden,)
        shapes["bcs2_w"] = kb + (cfg.bcs_hidden, cfg.bcs_embed_dim)
        shapes["bcs2_b"] = (cfg.bcs_embed_dim,)
    shapes["enc1_w"] = (k1, cfg.encoder_in_channels, f1)
    shapes["enc1_b"] = (f1,)
    shapes["enc2_w"] = (k2, f1, f2)
    shapes["enc2_b"] = (f2,)
    shapes["enc3_w"] = (k3, f2, f3)
    shapes["enc3_b"] = (f3,)
    head_in = f3
    if cfg.use_spatial_correlation:
        shapes["sp_w"] = tuple(cfg.spatial_kernel) + (f3, cfg.spatial_channels)
        shapes["sp_b"] = (cfg.spatial_channels,)
        shapes["dense_w"] = (cfg.spatial_channels, cfg.dense_dim)
        shapes["dense_b"] = (cfg.dense_dim,)
        head_in = cfg.dense_dim
    shapes["head_w"] = (head_in, 2)
    shapes["head_b"] = (2,)
    return shapes


# ---------------------------------------------------------------------------
# stage-level entry points (inference mode)


def bcs_encode(patch_seq, model: Model) -> np.ndarray:
    """(frames, h, w) vessel patch sequence -> (frames, bcs_embed_dim)."""
    patch_seq = np.asarray(patch_seq, dtype=model.dtype)
    if patch_seq.shape[1:] != tuple(model.cfg.bcs_size):
        raise DataError(f"BCS patch must be {model.cfg.bcs_size}, got {patch_seq.shape[1:]}")
    emb, _ = model._bcs_forward(patch_seq[None])
    return emb[0]


def encode_voxel_sequences(voxels, frame_times, bcs, model: Model) -> np.ndarray:
    """(N, frames) voxel series -> (N, encode_dim); ``bcs`` is (frames, E) or None."""
    cfg, P = model.cfg, model.params
    voxels = np.asarray(voxels, dtype=model.dtype)
    N, T = voxels.shape
    shared = [time_feature(frame_times).astype(model.dtype)[:, None]]
    if cfg.use_bcs:
        if bcs is None or bcs.shape[0] != T:
            raise DataError(f"BCS encoding frames {None if bcs is None else bcs.shape[0]} != voxel frames {T}")
        shared.append(np.asarray(bcs, dtype=model.dtype))
    shared = np.concatenate(shared, axis=-1)[None]
    g, _ = layers.conv_same(shared, P["enc1_w"][:, 1:, :], P["enc1_b"])
    y, _ = layers.conv_same(voxels[..., None], P["enc1_w"][:, :1, :])
    h = layers.selu(y + g)
    for i in (2, 3):
        pooled, _ = layers.maxpool2(h)
        z, _ = layers.conv_same(pooled, P[f"enc{i}_w"], P[f"enc{i}_b"])
        h = layers.selu(z)
    return h.mean(axis=1)


def spatial_correlate(encodings, model: Model) -> np.ndarray:
    """(rows, cols, encode_dim) single-slice patch -> (rows, cols, dense_dim); identity when disabled."""
    cfg, P = model.cfg, model.params
    encodings = np.asarray(encodings, dtype=model.dtype)
    if encodings.ndim != 3 or encodings.shape[-1] != cfg.encode_dim:
        raise DataError(f"expected (rows, cols, {cfg.encode_dim}) encodings, got {encodings.shape}")
    if not cfg.use_spatial_correlation:
        return encodings
    z, _ = layers.conv_same(encodings[None], P["sp_w"], P["sp_b"])
    h = layers.selu(z)
    return layers.selu(h @ P["dense_w"] + P["dense_b"])[0]


def regress(features, model: Model):
    """features (..., C) -> (p_std, b_hat_std) with b = exp(second output)."""
    out = np.asarray(features, dtype=model.dtype) @ model.params["head_w"] + model.params["head_b"]
    return out[..., 0], np.exp(out[..., 1].astype(np.float64))


def forward(case: CaseRecord, model: Model, patch_rows: int | None = None) -> PredictionResult:
    """Whole-case inference with patches of ``patch_rows`` rows (default: rows * 32 / 256)."""
    rows = case.sequence.spatial_shape[1]
    if patch_rows is None:
        patch_rows = default_patch_rows(rows)
    return model.predict_case(case, patch_rows)


def default_patch_rows(rows: int) -> int:
    """The 32-of-256 row band, scaled to the volume height."""
    pr = max(1, rows * 32 // 256)
    while rows % pr:
        pr -= 1
    return pr
