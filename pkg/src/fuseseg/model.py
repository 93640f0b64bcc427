"""Two-branch multimodal segmentation network with gated feature fusion.

The RGB branch consumes the color image; the auxiliary branch consumes the
stacked thermal and lidar channels. Each encoder stage is a stride-2 3x3
convolution followed by a rectifier. At every stage the branches are fused
as f = a_rgb + g * a_aux, where the gate g is the sigmoid of a pointwise
projection of the concatenated stage features. Each decoder head upsamples
its per-stage features to full resolution (nearest neighbour), concatenates
them, and applies a pointwise projection to class logits:

    joint head      <- fused features of every stage
    rgb head        <- RGB-branch features only
    auxiliary head  <- auxiliary-branch features only

The rgb/auxiliary heads exist only in multihead configurations and are not
used at inference time. Everything runs in float64 and forward/backward are
implemented directly in numpy, so gradients are exact and runs are
bit-reproducible.

Checkpoint container (see save_checkpoint): the ASCII magic line
"FUSESEG-CKPT-1\\n", a 4-byte little-endian length, a UTF-8 JSON header
{"config": {...}, "tensors": [{"name", "shape"}, ...]}, then the raw
little-endian float64 buffers concatenated in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataio import IGNORE, FrameBundle

MODALITIES = ("rgb", "thermal", "lidar")
_CKPT_MAGIC = b"FUSESEG-CKPT-1\n"
_token_counter = count(1)


class ModelError(ValueError):
    """Bad configuration, shape mismatch, or stale forward cache."""


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    classes: int = 4
    height: int = 64
    width: int = 64
    multihead: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.stages < 1:
            raise ModelError("stages must be >= 1")
        if len(self.channels) != self.stages:
            raise ModelError(f"need {self.stages} channel counts, got {self.channels}")
        if any(c <= 0 for c in self.channels):
            raise ModelError("channel counts must be positive")
        if self.classes < 2:
            raise ModelError("need at least two classes")
        factor = 2 ** self.stages
        if self.height % factor or self.width % factor:
            raise ModelError(f"input {self.height}x{self.width} must be divisible "
                             f"by 2^stages = {factor}")


@dataclass(eq=False)
class Params:
    """Named parameter tensors plus the config they were built for."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    token: int = field(default_factory=lambda: next(_token_counter))

    def updated(self, tensors: dict[str, np.ndarray]) -> "Params":
        return Params(config=self.config, tensors=tensors)

    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())


@dataclass(eq=False)
class PredictionSet:
    """Class logits (classes, h, w). z_rgb/z_aux are None without multihead."""

    z_joint: np.ndarray
    z_rgb: np.ndarray | None = None
    z_aux: np.ndarray | None = None


@dataclass(eq=False)
class ForwardCache:
    params_token: int
    mask: frozenset
    nodes: dict


def tensor_names(config: ModelConfig) -> list[str]:
    names = []
    for s in range(1, config.stages + 1):
        names += [f"enc_rgb{s}_w", f"enc_rgb{s}_b",
                  f"enc_aux{s}_w", f"enc_aux{s}_b",
                  f"gate{s}_w", f"gate{s}_b"]
    names += ["head_joint_w", "head_joint_b"]
    if config.multihead:
        names += ["head_rgb_w", "head_rgb_b", "head_aux_w", "head_aux_b"]
    return names


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Scaled-normal fan-in initialization for weights; biases start at zero.

    Heads are drawn after the shared trunk, so single-head and multihead
    configurations share identical trunk initializations for a given seed.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}

    def draw(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    in_rgb, in_aux = 3, 2
    total = 0
    for s, ch in enumerate(config.channels, start=1):
        tensors[f"enc_rgb{s}_w"] = draw((ch, in_rgb, 3, 3), in_rgb * 9)
        tensors[f"enc_rgb{s}_b"] = np.zeros(ch)
        tensors[f"enc_aux{s}_w"] = draw((ch, in_aux, 3, 3), in_aux * 9)
        tensors[f"enc_aux{s}_b"] = np.zeros(ch)
        tensors[f"gate{s}_w"] = draw((ch, 2 * ch), 2 * ch)
        tensors[f"gate{s}_b"] = np.zeros(ch)
        in_rgb = in_aux = ch
        total += ch
    heads = ["head_joint"]
    if config.multihead:
        heads += ["head_rgb", "head_aux"]
    for head in heads:
        tensors[f"{head}_w"] = draw((config.classes, total), total)
        tensors[f"{head}_b"] = np.zeros(config.classes)
    return Params(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# Layer primitives (float64, explicit caches)


def _conv_s2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 stride-2 pad-1 convolution. Returns (y, col) with col cached."""
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
    ho, wo = win.shape[1], win.shape[2]
    col = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * 9)
    y = col @ w.reshape(w.shape[0], -1).T + b
    return y.T.reshape(w.shape[0], ho, wo), col


def _conv_s2_backward(dy: np.ndarray, col: np.ndarray, w: np.ndarray,
                      x_shape: tuple):
    c, h, wd = x_shape
    cout, ho, wo = dy.shape
    dy_flat = dy.reshape(cout, ho * wo).T
    wf = w.reshape(cout, -1)
    dw = (dy_flat.T @ col).reshape(w.shape)
    db = dy_flat.sum(axis=0)
    dcol = (dy_flat @ wf).reshape(ho, wo, c, 3, 3)
    dxp = np.zeros((c, h + 2, wd + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2] += \
                dcol[:, :, :, ki, kj].transpose(2, 0, 1)
    return dxp[:, 1:h + 1, 1:wd + 1], dw, db


def _pointwise_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("oc,chw->ohw", w, x) + b[:, None, None]


def _pointwise_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dw = np.einsum("ohw,chw->oc", dy, x)
    db = dy.sum(axis=(1, 2))
    dx = np.einsum("oc,ohw->chw", w, dy)
    return dx, dw, db


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _upsample_nearest(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    return np.broadcast_to(x[:, :, None, :, None],
                           (c, h, k, w, k)).reshape(c, h * k, w * k)


def _downsum(dy: np.ndarray, k: int) -> np.ndarray:
    c, h, w = dy.shape
    return dy.reshape(c, h // k, k, w // k, k).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# Forward / backward


def _branch_inputs(bundle: FrameBundle, mask: frozenset):
    # dtype follows the bundle so gradient checks can run the whole forward
    # pass at extended precision.
    rgb = np.zeros_like(bundle.rgb) if "rgb" in mask else bundle.rgb
    thermal = np.zeros_like(bundle.thermal) if "thermal" in mask else bundle.thermal
    lidar = np.zeros_like(bundle.lidar) if "lidar" in mask else bundle.lidar
    x_rgb = np.ascontiguousarray(rgb.transpose(2, 0, 1))
    x_aux = np.stack((thermal, lidar))
    return x_rgb, x_aux


def forward(params: Params, bundle: FrameBundle,
            mask: frozenset = frozenset()) -> tuple[PredictionSet, ForwardCache]:
    """Run both branches and all heads; returns predictions plus the cache
    needed for an exact backward pass."""
    cfg = params.config
    bad = set(mask) - set(MODALITIES)
    if bad:
        raise ModelError(f"unknown modalities in mask: {sorted(bad)}")
    if bundle.labels.shape != (cfg.height, cfg.width):
        raise ModelError(f"bundle is {bundle.labels.shape}, config expects "
                         f"({cfg.height}, {cfg.width})")
    t = params.tensors
    x_rgb, x_aux = _branch_inputs(bundle, frozenset(mask))

    nodes: dict = {"x_rgb0": x_rgb, "x_aux0": x_aux}
    a_rgb, a_aux = x_rgb, x_aux
    for s in range(1, cfg.stages + 1):
        z_r, col_r = _conv_s2_forward(a_rgb, t[f"enc_rgb{s}_w"], t[f"enc_rgb{s}_b"])
        z_a, col_a = _conv_s2_forward(a_aux, t[f"enc_aux{s}_w"], t[f"enc_aux{s}_b"])
        a_rgb, a_aux = np.maximum(z_r, 0.0), np.maximum(z_a, 0.0)
        u = np.concatenate((a_rgb, a_aux))
        g = _sigmoid(_pointwise_forward(u, t[f"gate{s}_w"], t[f"gate{s}_b"]))
        f = a_rgb + g * a_aux
        nodes[f"s{s}"] = {"col_r": col_r, "col_a": col_a,
                          "mask_r": z_r > 0, "mask_a": z_a > 0,
                          "a_rgb": a_rgb, "a_aux": a_aux, "u": u, "g": g, "f": f,
                          "in_shape_r": (x_rgb if s == 1 else nodes[f"s{s - 1}"]["a_rgb"]).shape,
                          "in_shape_a": (x_aux if s == 1 else nodes[f"s{s - 1}"]["a_aux"]).shape}

    def decode(head: str, key: str) -> np.ndarray:
        feat = np.concatenate([
            _upsample_nearest(nodes[f"s{s}"][key], 2 ** s)
            for s in range(1, cfg.stages + 1)])
        nodes[f"feat_{head}"] = feat
        return _pointwise_forward(feat, t[f"{head}_w"], t[f"{head}_b"])

    preds = PredictionSet(z_joint=decode("head_joint", "f"))
    if cfg.multihead:
        preds.z_rgb = decode("head_rgb", "a_rgb")
        preds.z_aux = decode("head_aux", "a_aux")
    return preds, ForwardCache(params_token=params.token,
                               mask=frozenset(mask), nodes=nodes)


def backward(params: Params, cache: ForwardCache,
             dlogits: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter tensor.

    dlogits maps head outputs ("z_joint", "z_rgb", "z_aux") to the loss
    gradient at that head; missing heads contribute nothing.
    """
    if cache.params_token != params.token:
        raise ModelError("stale forward cache: parameters have changed since forward")
    cfg = params.config
    t = params.tensors
    nodes = cache.nodes
    grads = {name: np.zeros_like(tensor) for name, tensor in t.items()}

    df = {s: np.zeros_like(nodes[f"s{s}"]["f"]) for s in range(1, cfg.stages + 1)}
    da_rgb = {s: np.zeros_like(nodes[f"s{s}"]["a_rgb"]) for s in range(1, cfg.stages + 1)}
    da_aux = {s: np.zeros_like(nodes[f"s{s}"]["a_aux"]) for s in range(1, cfg.stages + 1)}

    def undecode(head: str, key: str, dz: np.ndarray, sink: dict):
        feat = nodes[f"feat_{head}"]
        dfeat, dw, db = _pointwise_backward(dz, feat, t[f"{head}_w"])
        grads[f"{head}_w"] += dw
        grads[f"{head}_b"] += db
        offset = 0
        for s in range(1, cfg.stages + 1):
            ch = cfg.channels[s - 1]
            sink[s] += _downsum(dfeat[offset:offset + ch], 2 ** s)
            offset += ch

    if "z_joint" in dlogits and dlogits["z_joint"] is not None:
        undecode("head_joint", "f", dlogits["z_joint"], df)
    if cfg.multihead and dlogits.get("z_rgb") is not None:
        undecode("head_rgb", "a_rgb", dlogits["z_rgb"], da_rgb)
    if cfg.multihead and dlogits.get("z_aux") is not None:
        undecode("head_aux", "a_aux", dlogits["z_aux"], da_aux)

    for s in range(cfg.stages, 0, -1):
        n = nodes[f"s{s}"]
        ch = cfg.channels[s - 1]
        d_r = da_rgb[s] + df[s]
        d_a = da_aux[s] + df[s] * n["g"]
        dg = df[s] * n["a_aux"]
        dpre = dg * n["g"] * (1.0 - n["g"])
        du, dwg, dbg = _pointwise_backward(dpre, n["u"], t[f"gate{s}_w"])
        grads[f"gate{s}_w"] += dwg
        grads[f"gate{s}_b"] += dbg
        d_r = d_r + du[:ch]
        d_a = d_a + du[ch:]

        dz_r = d_r * n["mask_r"]
        dz_a = d_a * n["mask_a"]
        dx_r, dw_r, db_r = _conv_s2_backward(dz_r, n["col_r"], t[f"enc_rgb{s}_w"],
                                             n["in_shape_r"])
        dx_a, dw_a, db_a = _conv_s2_backward(dz_a, n["col_a"], t[f"enc_aux{s}_w"],
                                             n["in_shape_a"])
        grads[f"enc_rgb{s}_w"] += dw_r
        grads[f"enc_rgb{s}_b"] += db_r
        grads[f"enc_aux{s}_w"] += dw_a
        grads[f"enc_aux{s}_b"] += db_a
        if s > 1:
            da_rgb[s - 1] += dx_r
            da_aux[s - 1] += dx_a
    return grads


def mask_modality(bundle: FrameBundle, modality: str) -> FrameBundle:
    """New bundle with the given channel zeroed; everything else shared."""
    if modality not in MODALITIES:
        raise ModelError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    out = FrameBundle(rgb=bundle.rgb, thermal=bundle.thermal, lidar=bundle.lidar,
                      labels=bundle.labels, valid=dict(bundle.valid),
                      timestamp=bundle.timestamp, frame_id=bundle.frame_id,
                      lidar_cloud=bundle.lidar_cloud, tags=dict(bundle.tags))
    if modality == "rgb":
        out.rgb = np.zeros_like(bundle.rgb)
    elif modality == "thermal":
        out.thermal = np.zeros_like(bundle.thermal)
    else:
        out.lidar = np.zeros_like(bundle.lidar)
    out.valid[modality] = False
    return out


def _log_softmax_terms(logits: np.ndarray, labels: np.ndarray, ignore_id: int):
    k, h, w = logits.shape
    if labels.shape != (h, w):
        raise ModelError(f"labels {labels.shape} do not match logits {(h, w)}")
    keep = labels != ignore_id
    n = int(keep.sum())
    # Non-finite logits surface as a non-finite loss, which training aborts
    # on; keep the intermediate arithmetic quiet.
    with np.errstate(invalid="ignore"):
        shifted = logits - logits.max(axis=0, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    safe = np.where(keep, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[None], axis=0)[0]
    return keep, n, safe, logp, picked


def softmax_ce(logits: np.ndarray, labels: np.ndarray,
               ignore_id: int = IGNORE) -> float:
    """Mean cross entropy over non-ignored pixels; 0 when all are ignored."""
    loss, _ = softmax_ce_grad(logits, labels, ignore_id)
    return loss


def softmax_ce_value(logits: np.ndarray, labels: np.ndarray,
                     ignore_id: int = IGNORE):
    """Cross entropy as a numpy scalar in the dtype of the logits.

    Keeps extended precision intact when the forward pass runs at
    longdouble (used by the finite-difference gradient check).
    """
    keep, n, _, _, picked = _log_softmax_terms(logits, labels, ignore_id)
    if n == 0:
        return logits.dtype.type(0.0)
    return -(picked * keep).sum() / n


def softmax_ce_grad(logits: np.ndarray, labels: np.ndarray,
                    ignore_id: int = IGNORE) -> tuple[float, np.ndarray]:
    """Loss plus its gradient with respect to the logits."""
    keep, n, safe, logp, picked = _log_softmax_terms(logits, labels, ignore_id)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    loss = float(-(picked * keep).sum() / n)
    grad = np.exp(logp)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, safe[None], 1.0, axis=0)
    grad = (grad - onehot) * (keep / n)
    return loss, grad


def predict(params: Params, bundle: FrameBundle,
            mask: frozenset = frozenset()) -> np.ndarray:
    """Argmax of the joint logits; ties go to the smallest class id."""
    preds, _ = forward(params, bundle, mask)
    return preds.z_joint.argmax(axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: Params, path: Path) -> None:
    cfg = params.config
    header = {
        "config": {"stages": cfg.stages, "channels": list(cfg.channels),
                   "classes": cfg.classes, "height": cfg.height,
                   "width": cfg.width, "multihead": cfg.multihead},
        "tensors": [{"name": name, "shape": list(t.shape)}
                    for name, t in params.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for entry in header["tensors"]:
            fh.write(np.ascontiguousarray(params.tensors[entry["name"]],
                                          dtype="<f8").tobytes())


def load_checkpoint(path: Path) -> Params:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ModelError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        cfg = ModelConfig(**{**header["config"],
                             "channels": tuple(header["config"]["channels"])})
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ModelError(f"{path}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            if not np.all(np.isfinite(tensors[entry["name"]])):
                raise ModelError(f"{path}: non-finite values in {entry['name']}")
    return Params(config=cfg, tensors=tensors)
