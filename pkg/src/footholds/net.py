"""Encoder-decoder per-pixel classifier over foothold patch images.

Topology follows the efficient-residual-factorization recipe: downsamplers
concatenate a stride-2 3x3 convolution with 2x2 max pooling; the workhorse is
the factorized residual block (3x1, 1x3, then a dilated 3x1/1x3 pair, with an
identity skip); the decoder mirrors the encoder with stride-2 transposed
convolutions and a final 2x2 transposed-conv classifier.  Spatial sizes run
40 -> 20 -> 10 -> 5 -> 10 -> 20 -> 40.

Everything is plain numpy.  Parameters live in a flat name -> array dict so
the finite-difference checks and the optimizer can treat the model as one
vector.  Training runs in float32; gradient checks run the same code in
float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .labeler import NUM_CLASSES
from .layers import (Adam, conv2d_backward, conv2d_forward, convT2d_backward,
                     convT2d_forward, maxpool2_backward, maxpool2_forward,
                     relu_backward, relu_forward, weighted_ce_forward)


class NetError(Exception):
    pass


class DivergenceError(NetError):
    """Training loss stopped being finite."""


@dataclass
class NetConfig:
    """Channel widths and block counts; defaults are the desk-scale model."""

    widths: tuple[int, int, int] = (8, 16, 32)
    mid_blocks: int = 5
    deep_blocks: int = 8
    up_blocks: tuple[int, int] = (2, 2)
    dilation_cycle: tuple[int, ...] = (2, 4, 8, 16)
    classes: int = NUM_CLASSES
    input_size: int = 40

    def validate(self):
        w0, w1, w2 = self.widths
        # each downsampler's conv emits (out - in) channels next to the pool
        if not (w0 > 1 and w1 > w0 and w2 > w1):
            raise NetError("widths must strictly increase from 2 on")
        if self.classes < 2:
            raise NetError("need at least two classes")
        if self.input_size % 8 != 0 or self.input_size < 8:
            raise NetError("input size must be a positive multiple of 8")
        if min(self.mid_blocks, self.deep_blocks, *self.up_blocks) < 0:
            raise NetError("block counts must be nonnegative")
        if not self.dilation_cycle:
            raise NetError("dilation cycle must be nonempty")

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "mid_blocks": self.mid_blocks,
                "deep_blocks": self.deep_blocks,
                "up_blocks": list(self.up_blocks),
                "dilation_cycle": list(self.dilation_cycle),
                "classes": self.classes, "input_size": self.input_size}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        cfg = cls(widths=tuple(d["widths"]), mid_blocks=d["mid_blocks"],
                  deep_blocks=d["deep_blocks"],
                  up_blocks=tuple(d["up_blocks"]),
                  dilation_cycle=tuple(d["dilation_cycle"]),
                  classes=d["classes"], input_size=d["input_size"])
        cfg.validate()
        return cfg


def full_scale_config() -> NetConfig:
    """Widths for the full-size model; the default config is the desk-scale
    reduction of the same layout."""
    return NetConfig(widths=(16, 64, 128))


@dataclass
class TrainConfig:
    lr: float = 5e-4
    lr_decay: float = 0.98
    epochs: int = 30
    batch_size: int = 16
    weight_decay: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    eval_cap: int = 256        # samples per split for per-epoch metrics

    def validate(self):
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise NetError("need lr > 0 and decay in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise NetError("epochs and batch size must be positive")
        if self.weight_decay < 0:
            raise NetError("weight decay must be nonnegative")
        if not 0 <= self.val_fraction < 1:
            raise NetError("val fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "lr_decay": self.lr_decay,
                "epochs": self.epochs, "batch_size": self.batch_size,
                "weight_decay": self.weight_decay, "seed": self.seed,
                "val_fraction": self.val_fraction, "eval_cap": self.eval_cap}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# Layout and parameters

def _layout(cfg: NetConfig):
    """Ordered structural units; drives init, forward and backward alike."""
    w0, w1, w2 = cfg.widths
    units = [("down", "down1", 1, w0), ("down", "down2", w0, w1)]
    for i in range(cfg.mid_blocks):
        units.append(("block", f"mid{i + 1}", w1, 1))
    units.append(("down", "down3", w1, w2))
    cyc = cfg.dilation_cycle
    for i in range(cfg.deep_blocks):
        units.append(("block", f"deep{i + 1}", w2, cyc[i % len(cyc)]))
    units.append(("deconv", "up1", w2, w1))
    for i in range(cfg.up_blocks[0]):
        units.append(("block", f"up1b{i + 1}", w1, 1))
    units.append(("deconv", "up2", w1, w0))
    for i in range(cfg.up_blocks[1]):
        units.append(("block", f"up2b{i + 1}", w0, 1))
    units.append(("head", "head", w0, cfg.classes))
    return units


def _he(rng, shape, fan_in, dtype, scale=1.0):
    return (rng.standard_normal(shape) * scale
            * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> dict:
    """He-initialized parameter dict in deterministic insertion order."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def add_conv(name, co, ci, kh, kw, scale=1.0):
        p[name + ".W"] = _he(rng, (co, ci, kh, kw), ci * kh * kw, dtype, scale)
        p[name + ".b"] = np.zeros(co, dtype=dtype)

    def add_deconv(name, ci, co, k):
        p[name + ".W"] = _he(rng, (ci, co, k, k), ci * k * k, dtype)
        p[name + ".b"] = np.zeros(co, dtype=dtype)

    for kind, name, a, b in _layout(cfg):
        if kind == "down":
            add_conv(name, b - a, a, 3, 3)
        elif kind == "block":
            add_conv(name + ".c1", a, a, 3, 1)
            add_conv(name + ".c2", a, a, 1, 3)
            add_conv(name + ".c3", a, a, 3, 1)
            # damp the residual branch so the stack starts near identity;
            # without normalization the additive variance otherwise grows
            # linearly in depth and swamps the logits at init
            add_conv(name + ".c4", a, a, 1, 3, scale=0.1)
        elif kind == "deconv":
            add_deconv(name, a, b, 3)
        elif kind == "head":
            add_deconv(name, a, b, 2)
    return p


def params_like(params: dict, fill=0.0) -> dict:
    return {k: np.full_like(v, fill) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Forward / backward

def _block_forward(p, name, x, d):
    c1, k1 = conv2d_forward(x, p[name + ".c1.W"], p[name + ".c1.b"],
                            pad=(1, 0))
    r1, m1 = relu_forward(c1)
    c2, k2 = conv2d_forward(r1, p[name + ".c2.W"], p[name + ".c2.b"],
                            pad=(0, 1))
    r2, m2 = relu_forward(c2)
    c3, k3 = conv2d_forward(r2, p[name + ".c3.W"], p[name + ".c3.b"],
                            dilation=(d, 1), pad=(d, 0))
    r3, m3 = relu_forward(c3)
    c4, k4 = conv2d_forward(r3, p[name + ".c4.W"], p[name + ".c4.b"],
                            dilation=(1, d), pad=(0, d))
    y, mo = relu_forward(x + c4)
    return y, (k1, m1, k2, m2, k3, m3, k4, mo)


def _block_backward(p, name, dy, cache, grads):
    k1, m1, k2, m2, k3, m3, k4, mo = cache
    dsum = relu_backward(dy, mo)
    dx4, dW, db = conv2d_backward(dsum, k4)
    grads[name + ".c4.W"] += dW
    grads[name + ".c4.b"] += db
    dr3 = relu_backward(dx4, m3)
    dx3, dW, db = conv2d_backward(dr3, k3)
    grads[name + ".c3.W"] += dW
    grads[name + ".c3.b"] += db
    dr2 = relu_backward(dx3, m2)
    dx2, dW, db = conv2d_backward(dr2, k2)
    grads[name + ".c2.W"] += dW
    grads[name + ".c2.b"] += db
    dr1 = relu_backward(dx2, m1)
    dx1, dW, db = conv2d_backward(dr1, k1)
    grads[name + ".c1.W"] += dW
    grads[name + ".c1.b"] += db
    return dx1 + dsum            # identity skip


def forward(params: dict, cfg: NetConfig, x: np.ndarray):
    """Logits (N,C,H,W) for inputs (N,1,H,W) in [0,1]; returns (y, tape)."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise NetError(f"expected (N,1,H,W) input, got {x.shape}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise NetError("spatial size must be divisible by 8")
    tape = []
    for kind, name, a, b in _layout(cfg):
        if kind == "down":
            conv, kc = conv2d_forward(x, params[name + ".W"],
                                      params[name + ".b"], stride=2,
                                      pad=(1, 1))
            pool, kp = maxpool2_forward(x)
            cat = np.concatenate([conv, pool], axis=1)
            x, mask = relu_forward(cat)
            tape.append((kind, name, (kc, kp, conv.shape[1], mask)))
        elif kind == "block":
            x, cache = _block_forward(params, name, x, b)
            tape.append((kind, name, cache))
        elif kind == "deconv":
            x, cache = convT2d_forward(x, params[name + ".W"],
                                       params[name + ".b"], stride=2,
                                       pad=1, out_pad=1)
            y, mask = relu_forward(x)
            x = y
            tape.append((kind, name, (cache, mask)))
        elif kind == "head":
            x, cache = convT2d_forward(x, params[name + ".W"],
                                       params[name + ".b"], stride=2)
            tape.append((kind, name, (cache,)))
    return x, tape


def backward(params: dict, cfg: NetConfig, dy: np.ndarray, tape) -> dict:
    grads = params_like(params)
    for kind, name, cache in reversed(tape):
        if kind == "head":
            dy, dW, db = convT2d_backward(dy, cache[0])
            grads[name + ".W"] += dW
            grads[name + ".b"] += db
        elif kind == "deconv":
            kc, mask = cache
            dy = relu_backward(dy, mask)
            dy, dW, db = convT2d_backward(dy, kc)
            grads[name + ".W"] += dW
            grads[name + ".b"] += db
        elif kind == "block":
            dy = _block_backward(params, name, dy, cache, grads)
        elif kind == "down":
            kc, kp, nconv, mask = cache
            dcat = relu_backward(dy, mask)
            dconv, dW, db = conv2d_backward(dcat[:, :nconv], kc)
            grads[name + ".W"] += dW
            grads[name + ".b"] += db
            dpool = maxpool2_backward(dcat[:, nconv:], kp)
            dy = dconv + dpool
    return grads


def loss_and_grads(params: dict, cfg: NetConfig, x, labels, class_w,
                   weight_decay: float):
    """(total loss, grads dict); loss = weighted CE mean + wd/2 * ||params||^2."""
    logits, tape = forward(params, cfg, x)
    ce, dlogits = weighted_ce_forward(logits, labels, class_w)
    grads = backward(params, cfg, dlogits, tape)
    reg = 0.0
    if weight_decay:
        for name, p in params.items():
            reg += 0.5 * weight_decay * float(np.vdot(p, p))
            grads[name] += (weight_decay * p).astype(p.dtype)
    return ce + reg, grads


def loss_value(params: dict, cfg: NetConfig, x, labels, class_w,
               weight_decay: float) -> float:
    logits, _ = forward(params, cfg, x)
    ce, _ = weighted_ce_forward(logits, labels, class_w)
    reg = sum(0.5 * weight_decay * float(np.vdot(p, p))
              for p in params.values()) if weight_decay else 0.0
    return ce + reg


def predict(params: dict, cfg: NetConfig, images: np.ndarray) -> np.ndarray:
    """Class id map (N,H,W) from uint8 images (N,H,W)."""
    x = images_to_input(images, dtype=next(iter(params.values())).dtype)
    logits, _ = forward(params, cfg, x)
    return logits.argmax(axis=1)


def images_to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (N,H,W) or (H,W) -> (N,1,H,W) scaled to [0,1]."""
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    return (arr.astype(dtype) / 255.0)[:, None]


# ---------------------------------------------------------------------------
# Metrics

def metrics(pred: np.ndarray, gt: np.ndarray,
            classes: int = NUM_CLASSES) -> dict:
    """Pixel accuracy and IoU; classes absent from both maps are excluded."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise NetError("prediction and ground truth shapes differ")
    acc = float((pred == gt).mean())
    iou = np.full(classes, np.nan)
    for k in range(classes):
        p = pred == k
        g = gt == k
        union = int(p.sum() + g.sum() - (p & g).sum())
        if union:
            iou[k] = (p & g).sum() / union
    present = ~np.isnan(iou)
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return {"accuracy": acc, "iou": iou, "mean_iou": miou}


# ---------------------------------------------------------------------------
# Training

def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** epoch


def split_dataset(n: int, val_fraction: float, seed: int):
    """Deterministic train/validation index split."""
    order = np.random.default_rng([seed, 2]).permutation(n)
    n_val = int(round(n * val_fraction))
    return order[n_val:], order[:n_val]


def train(images: np.ndarray, labels: np.ndarray, class_w: np.ndarray,
          net_cfg: NetConfig, train_cfg: TrainConfig,
          log=None) -> tuple[dict, list[dict]]:
    """Adam training; returns (params, per-epoch metric records).

    Deterministic for a fixed seed: the split, the shuffles and every
    reduction run in a fixed order.
    """
    net_cfg.validate()
    train_cfg.validate()
    if len(images) == 0:
        raise NetError("empty dataset")
    if len(images) != len(labels):
        raise NetError("image/label count mismatch")
    class_w = np.asarray(class_w, dtype=np.float32)
    if class_w.shape != (net_cfg.classes,):
        raise NetError("class weight vector length mismatch")

    tr_idx, va_idx = split_dataset(len(images), train_cfg.val_fraction,
                                   train_cfg.seed)
    if len(tr_idx) == 0:
        raise NetError("validation split leaves no training data")
    params = init_params(net_cfg, seed=train_cfg.seed)
    opt = Adam()
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    x_all = images_to_input(images)
    y_all = np.ascontiguousarray(labels.astype(np.int64))

    history = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at_epoch(train_cfg, epoch)
        order = tr_idx[shuffle_rng.permutation(len(tr_idx))]
        total, seen = 0.0, 0
        for i0 in range(0, len(order), train_cfg.batch_size):
            batch = order[i0: i0 + train_cfg.batch_size]
            loss, grads = loss_and_grads(params, net_cfg, x_all[batch],
                                         y_all[batch], class_w,
                                         train_cfg.weight_decay)
            if not np.isfinite(loss):
                raise DivergenceError(f"training diverged at epoch {epoch}: "
                                      f"loss {loss}")
            opt.step(params, grads, lr)
            total += loss * len(batch)
            seen += len(batch)
        record = {"epoch": epoch, "lr": lr, "loss": total / max(seen, 1)}
        for split, idx in (("train", tr_idx), ("val", va_idx)):
            if len(idx) == 0:
                continue
            cap = idx[:train_cfg.eval_cap]
            m = _eval_batched(params, net_cfg, images[cap], labels[cap])
            record[f"{split}_accuracy"] = m["accuracy"]
            record[f"{split}_mean_iou"] = m["mean_iou"]
        history.append(record)
        if log is not None:
            log(record)
    return params, history


def _eval_batched(params, cfg, images, labels, batch=64):
    preds = np.concatenate([predict(params, cfg, images[i: i + batch])
                            for i in range(0, len(images), batch)])
    return metrics(preds, labels, cfg.classes)


def evaluate(params: dict, cfg: NetConfig, images, labels) -> dict:
    """Full-split metrics, batched."""
    return _eval_batched(params, cfg, images, labels)


# ---------------------------------------------------------------------------
# Model container

_MAGIC = b"FTHNET\x00\x01"


def save_model(path, params: dict, cfg: NetConfig,
               class_w: np.ndarray) -> None:
    """Versioned little-endian binary: header JSON + packed float32 tensors."""
    tensors = []
    payload = bytearray()
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape),
                        "offset": len(payload), "nbytes": len(data)})
        payload += data
    header = json.dumps({
        "config": cfg.to_dict(),
        "class_weights": np.asarray(class_w, dtype=np.float64).tolist(),
        "tensors": tensors,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_model(path):
    """(params, NetConfig, class_weights) from a model file."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise NetError(f"{path}: not a model file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    cfg = NetConfig.from_dict(header["config"])
    params = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]: t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(t["shape"])
        params[t["name"]] = arr.astype(np.float32)
    expected = set(init_params(cfg, seed=0))
    if set(params) != expected:
        raise NetError(f"{path}: tensor set does not match the config")
    class_w = np.asarray(header["class_weights"], dtype=np.float32)
    return params, cfg, class_w
