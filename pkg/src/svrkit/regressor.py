"""Slice-to-anchor regression network, training loop and checkpoints.

The network maps a normalised 2D slice to three anchor points (9 outputs in
three heads).  Targets are divided by ``target_scale`` mm for conditioning;
:func:`forward` always returns millimetres.
"""
from __future__ import annotations

import contextlib
import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .geometry import AnchorTriplet, DegenerateGeometryError, RigidPose, anchor_error, pose_from_anchors
from .losses import anchor_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SVRKCKPT"
CHECKPOINT_VERSION = 1


class ConfigMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def desk_layers() -> list[dict]:
    return [
        {"type": "conv", "out": 16, "kernel": 5, "stride": 1, "pad": 2},
        {"type": "pool", "kernel": 2, "stride": 2},
        {"type": "conv", "out": 32, "kernel": 5, "stride": 1, "pad": 2},
        {"type": "pool", "kernel": 2, "stride": 2},
        {"type": "conv", "out": 64, "kernel": 3, "stride": 1, "pad": 1},
        {"type": "pool", "kernel": 2, "stride": 2},
        {"type": "fc", "width": 128},
    ]


@dataclass
class NetConfig:
    input_size: int = 64
    layers: list = field(default_factory=desk_layers)
    seed: int = 0
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    target_scale: float = 32.0

    def __post_init__(self):
        if self.input_size < 1:
            raise ValueError("input_size must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.target_scale <= 0:
            raise ValueError("target_scale must be positive")
        layer_shapes(self)


def reference_config() -> NetConfig:
    """CaffeNet-derived topology on 256x256 inputs (documented, not trained)."""
    return NetConfig(
        input_size=256,
        layers=[
            {"type": "conv", "out": 96, "kernel": 11, "stride": 4, "pad": 0},
            {"type": "pool", "kernel": 3, "stride": 2},
            {"type": "lrn"},
            {"type": "conv", "out": 256, "kernel": 5, "stride": 1, "pad": 2, "groups": 2},
            {"type": "pool", "kernel": 3, "stride": 2},
            {"type": "lrn"},
            {"type": "conv", "out": 384, "kernel": 3, "stride": 1, "pad": 1},
            {"type": "conv", "out": 384, "kernel": 3, "stride": 1, "pad": 1, "groups": 2},
            {"type": "conv", "out": 256, "kernel": 3, "stride": 1, "pad": 1, "groups": 2},
            {"type": "pool", "kernel": 3, "stride": 2},
            {"type": "fc", "width": 4096},
            {"type": "fc", "width": 4096},
            {"type": "fc", "width": 1000},
        ],
    )


def _pool_out(n, k, s):
    # ceil rounding, but the last window must start inside the input
    out = -(-(n - k) // s) + 1
    if (out - 1) * s >= n:
        out -= 1
    return out


def layer_shapes(cfg: NetConfig) -> list[dict]:
    """Per-layer output shape and parameter count, computed analytically."""
    c, n = 1, cfg.input_size
    flat = None
    rows = []
    for i, layer in enumerate(cfg.layers):
        kind = layer["type"]
        params = 0
        if kind == "conv":
            if flat is not None:
                raise ValueError("conv layer after fully-connected layer")
            g = layer.get("groups", 1)
            if c % g or layer["out"] % g:
                raise ValueError(f"layer {i}: channels not divisible by groups")
            k, s, p = layer["kernel"], layer.get("stride", 1), layer.get("pad", 0)
            n = (n + 2 * p - k) // s + 1
            params = layer["out"] * (c // g) * k * k + layer["out"]
            c = layer["out"]
        elif kind == "pool":
            if flat is not None:
                raise ValueError("pool layer after fully-connected layer")
            n = _pool_out(n, layer["kernel"], layer.get("stride", layer["kernel"]))
        elif kind == "lrn":
            pass
        elif kind == "fc":
            fan_in = flat if flat is not None else c * n * n
            params = layer["width"] * fan_in + layer["width"]
            flat = layer["width"]
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        if n < 1:
            raise ValueError(f"layer {i} ({kind}) produces an empty feature map")
        rows.append({"type": kind, "shape": (flat,) if flat is not None else (c, n, n), "params": params})
    fan_in = flat if flat is not None else c * n * n
    for h in range(3):
        rows.append({"type": "head", "shape": (3,), "params": 3 * fan_in + 3})
    return rows


def parameter_count(cfg: NetConfig) -> int:
    return sum(r["params"] for r in layer_shapes(cfg))


class AnchorNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        shapes = layer_shapes(cfg)
        feats = []
        fcs = []
        prev = (1, cfg.input_size, cfg.input_size)
        for layer, row in zip(cfg.layers, shapes):
            kind = layer["type"]
            if kind == "conv":
                conv = nn.Conv2d(prev[0], layer["out"], layer["kernel"], layer.get("stride", 1), layer.get("pad", 0),
                                 groups=layer.get("groups", 1))
                feats += [conv, nn.ReLU()]
            elif kind == "pool":
                feats.append(nn.MaxPool2d(layer["kernel"], layer.get("stride", layer["kernel"]), ceil_mode=True))
            elif kind == "lrn":
                feats.append(nn.LocalResponseNorm(5, alpha=1e-4, beta=0.75))
            elif kind == "fc":
                fcs += [nn.Linear(int(np.prod(prev)), layer["width"]), nn.ReLU()]
            prev = row["shape"]
        self.features = nn.Sequential(*feats)
        self.fc = nn.Sequential(*fcs)
        self.heads = nn.ModuleList([nn.Linear(int(np.prod(prev)), 3) for _ in range(3)])

    def forward(self, x):
        x = self.features(x)
        x = self.fc(torch.flatten(x, 1))
        return torch.stack([h(x) for h in self.heads], dim=1)


@dataclass
class ModelState:
    config: NetConfig
    net: AnchorNet
    log: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seed


@contextlib.contextmanager
def single_thread():
    """Pin torch to one intra-op thread so float reductions are reproducible."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _init_params(net: AnchorNet, seed: int):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                gain = 3.0 if any(mod is h for h in net.heads) else 6.0
                bound = math.sqrt(gain / fan_in)
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen) * 2 * bound - bound)
                mod.bias.zero_()


def init_model(cfg: NetConfig) -> ModelState:
    """Fan-in scaled uniform weights and zero biases, deterministic in ``cfg.seed``."""
    net = AnchorNet(cfg)
    _init_params(net, cfg.seed)
    net.eval()
    return ModelState(copy.deepcopy(cfg), net, [])


def _as_batch(images, cfg: NetConfig, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise ConfigMismatchError(f"expected {cfg.input_size}x{cfg.input_size} images, got {arr.shape[-2:]}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).to(dtype)[:, None]


def forward(m: ModelState, images) -> np.ndarray:
    """Anchor predictions in mm, shape (B, 3, 3) with rows (pc, pl, pr).

    Images are evaluated one at a time: torch picks convolution kernels by
    batch size, and a prediction must not depend on its batch neighbours.
    """
    x = _as_batch(images, m.config, next(m.net.parameters()).dtype)
    with torch.no_grad(), single_thread():
        out = torch.cat([m.net(x[i:i + 1]) for i in range(len(x))]) if len(x) else torch.zeros(0, 3, 3)
    return out.double().numpy() * m.config.target_scale


def predict(m: ModelState, image) -> RigidPose:
    """Pose of one slice; collinear anchor predictions raise DegenerateGeometryError."""
    return pose_from_anchors(AnchorTriplet.from_array(forward(m, image)[0]))


def predict_many(m: ModelState, images, chunk: int = 256):
    """Returns (anchors (N,3,3), list of RigidPose or None for prediction failures)."""
    images = np.asarray(images)
    preds = np.concatenate([forward(m, images[i:i + chunk]) for i in range(0, len(images), chunk)]) if len(images) else np.zeros((0, 3, 3))
    poses = []
    for a in preds:
        try:
            poses.append(pose_from_anchors(AnchorTriplet.from_array(a)))
        except DegenerateGeometryError:
            poses.append(None)
    return preds, poses


def mean_anchor_error(m: ModelState, images, anchors) -> float:
    preds = np.concatenate([forward(m, images[i:i + 256]) for i in range(0, len(images), 256)])
    return float(np.mean([anchor_error(AnchorTriplet.from_array(g), AnchorTriplet.from_array(p))
                          for g, p in zip(np.asarray(anchors), preds)]))


def _batch_loss_grad(out: torch.Tensor, targets: np.ndarray):
    """Mean anchor loss over the batch and its gradient w.r.t. the network output."""
    pred = out.detach().double().numpy()
    grads = np.empty_like(pred)
    total = 0.0
    for i in range(len(pred)):
        lg = anchor_loss(pred[i], targets[i])
        total += lg.value
        grads[i] = lg.grad.reshape(3, 3)
    b = len(pred)
    return total / b, torch.from_numpy(grads / b).to(out.dtype)


def train(m: ModelState, images, anchors, epochs: int | None = None) -> ModelState:
    """Mini-batch SGD with momentum on the summed three-head anchor loss.

    ``images`` (N, S, S) in [0, 1]; ``anchors`` (N, 3, 3) in mm.  Returns a new
    state; the input state is left untouched.
    """
    cfg = m.config
    images = np.asarray(images, dtype=np.float32)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3, 3)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(images) != len(anchors):
        raise ValueError("images and anchors differ in length")
    if images.min() < -1e-6 or images.max() > 1 + 1e-6:
        raise ValueError("training images must be intensity-normalised to [0, 1]")
    epochs = cfg.epochs if epochs is None else epochs
    net = copy.deepcopy(m.net)
    x_all = _as_batch(images, cfg)
    targets = anchors / cfg.target_scale
    rng = np.random.default_rng(cfg.seed)
    history = list(m.log)
    start = len(history)
    with single_thread():
        opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
        net.train()
        for ep in range(epochs):
            order = rng.permutation(len(images))
            loss_sum = err_sum = 0.0
            for b0 in range(0, len(order), cfg.batch_size):
                idx = order[b0:b0 + cfg.batch_size]
                opt.zero_grad()
                out = net(x_all[idx])
                loss, grad = _batch_loss_grad(out, targets[idx])
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"loss became non-finite at epoch {start + ep + 1}, batch {b0 // cfg.batch_size}; "
                        f"lower learning_rate (currently {cfg.learning_rate})"
                    )
                out.backward(grad)
                opt.step()
                pred = out.detach().double().numpy() * cfg.target_scale
                loss_sum += loss * len(idx)
                err_sum += sum(anchor_error(AnchorTriplet.from_array(anchors[j]), AnchorTriplet.from_array(p))
                               for j, p in zip(idx, pred))
            entry = {"epoch": start + ep + 1, "mean_loss": loss_sum / len(order),
                     "mean_anchor_error_mm": err_sum / len(order)}
            history.append(entry)
            log.info("epoch %d loss %.6f anchor error %.3f mm", entry["epoch"], entry["mean_loss"],
                     entry["mean_anchor_error_mm"])
        net.eval()
    return ModelState(copy.deepcopy(cfg), net, history)


def backprop_check(m: ModelState, images, anchors, h: float = 1e-6) -> float:
    """Max relative error between back-propagated and central-difference gradients.

    Runs in float64 over every parameter; only sensible for tiny networks.
    Relative errors use ``max(|analytic|, |numeric|, 1e-6)`` as denominator.
    """
    net = copy.deepcopy(m.net).double()
    x = _as_batch(images, m.config, torch.float64)
    targets = np.asarray(anchors, dtype=np.float64).reshape(-1, 3, 3) / m.config.target_scale

    def loss_at():
        with torch.no_grad():
            return _batch_loss_grad(net(x), targets)[0]

    net.zero_grad()
    out = net(x)
    _, grad = _batch_loss_grad(out, targets)
    out.backward(grad)
    worst = 0.0
    with torch.no_grad():
        for p in net.parameters():
            flat = p.view(-1)
            analytic = p.grad.view(-1).clone()
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_at()
                flat[i] = orig - h
                down = loss_at()
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = analytic[i].item()
                worst = max(worst, abs(num - a) / max(abs(a), abs(num), 1e-6))
    return worst


# --------------------------------------------------------------------------
# checkpoints


def _param_items(net: nn.Module):
    return [(k, v) for k, v in net.state_dict().items()]


def save_checkpoint(m: ModelState, path) -> Path:
    """Header: magic, u32 version, u32 JSON length, JSON; then f32 LE parameters in state_dict order."""
    items = _param_items(m.net)
    header = {
        "config": asdict(m.config),
        "seed": m.seed,
        "log": m.log,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in items],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(v.detach().cpu().float().numpy().astype("<f4").tobytes() for _, v in items)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob + payload)
    return path


def load_checkpoint(path, input_size: int | None = None) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an svrkit checkpoint")
    version, n = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    cfg = NetConfig(**header["config"])
    if input_size is not None and cfg.input_size != input_size:
        raise ConfigMismatchError(f"checkpoint expects {cfg.input_size}px inputs, got {input_size}px")
    net = AnchorNet(cfg)
    state = net.state_dict()
    offset = 16 + n
    expected = sum(int(np.prod(p["shape"])) for p in header["params"]) * 4
    if len(raw) - offset != expected:
        raise CheckpointError(f"{path}: parameter payload is {len(raw) - offset} bytes, expected {expected}")
    for p in header["params"]:
        if p["name"] not in state or list(state[p["name"]].shape) != p["shape"]:
            raise ConfigMismatchError(f"{path}: parameter {p['name']} does not match the configuration")
        count = int(np.prod(p["shape"]))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(p["shape"])
        state[p["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    net.load_state_dict(state)
    net.eval()
    return ModelState(cfg, net, header["log"])
