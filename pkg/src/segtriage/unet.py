"""Small encoder-decoder segmentation network with hand-written backprop.

Two pooling levels, skip connections, a two-channel softmax head, and
three dropout sites (after the bottleneck and after each decoder block).
Everything is plain numpy; gradients are derived by hand and checked
against finite differences in the tests.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .rng import RngStream
from .tensor import (
    TensorError,
    conv2d_backward_batch,
    conv2d_batch,
    dropout_mask,
    load_tns,
    maxpool2d_batch,
    maxpool2d_backward_batch,
    save_tns,
    softmax_batch,
    upsample_nearest_batch,
    upsample_nearest_backward_batch,
)


class DivergenceError(ArithmeticError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    channels: tuple[int, int, int] = (8, 16, 32)
    num_classes: int = 2
    kernel: int = 3

    def layer_defs(self) -> list[tuple[str, int, int, int]]:
        """Ordered (name, c_in, c_out, kernel) for every conv layer."""
        c1, c2, cb = self.channels
        k = self.kernel
        return [
            ("enc1_conv1", self.in_channels, c1, k),
            ("enc1_conv2", c1, c1, k),
            ("enc2_conv1", c1, c2, k),
            ("enc2_conv2", c2, c2, k),
            ("bot_conv1", c2, cb, k),
            ("bot_conv2", cb, cb, k),
            ("dec2_conv1", cb + c2, c2, k),
            ("dec2_conv2", c2, c2, k),
            ("dec1_conv1", c2 + c1, c1, k),
            ("dec1_conv2", c1, c1, k),
            ("head", c1, self.num_classes, 1),
        ]


@dataclass
class ModelParams:
    """Named conv parameter blocks; shapes validated against the architecture."""

    arch: Architecture
    blocks: dict[str, tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        defs = self.arch.layer_defs()
        names = [d[0] for d in defs]
        if list(self.blocks.keys()) != names:
            raise TensorError(f"parameter blocks must be exactly {names} in order")
        for name, ci, co, k in defs:
            kern, bias = self.blocks[name]
            if kern.shape != (co, ci, k, k):
                raise TensorError(f"{name}: kernel shape {kern.shape} != {(co, ci, k, k)}")
            if bias.shape != (co,):
                raise TensorError(f"{name}: bias shape {bias.shape} != {(co,)}")
            if not (np.all(np.isfinite(kern)) and np.all(np.isfinite(bias))):
                raise TensorError(f"{name}: non-finite parameters")

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {n: (k.copy(), b.copy()) for n, (k, b) in self.blocks.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.arch,
            {n: (k.astype(dtype), b.astype(dtype)) for n, (k, b) in self.blocks.items()},
        )

    def ravel(self) -> np.ndarray:
        """All parameters as one flat vector (kernel then bias, layer order)."""
        return np.concatenate([np.concatenate([k.ravel(), b.ravel()]) for k, b in self.blocks.values()])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 8
    dropout_p: float = 0.25
    seed: int = 42
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")


# ---------------------------------------------------------------------------
# initialization


def he_kernel(rng: RngStream, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Normal(0, sqrt(2/fan_in)) draws, float32."""
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(size=shape, std=std).astype(np.float32)


def init_he(arch: Architecture, rng: RngStream) -> ModelParams:
    """He-normal kernels (fan_in = c_in*k*k), zero biases, per-layer streams."""
    blocks: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name, ci, co, k in arch.layer_defs():
        child = rng.derive("init", name)
        kern = he_kernel(child, (co, ci, k, k), ci * k * k)
        blocks[name] = (kern, np.zeros(co, dtype=np.float32))
    return ModelParams(arch, blocks)


# ---------------------------------------------------------------------------
# forward / backward

_DROPOUT_SITES = 3


def _check_spatial(h: int, w: int):
    if h % 4 != 0 or w % 4 != 0:
        raise TensorError(f"spatial dims must be divisible by 4, got {h}x{w}")


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _forward_batch(
    params: ModelParams,
    xb: np.ndarray,
    dropout_p: float = 0.0,
    rng: RngStream | None = None,
    want_cache: bool = False,
):
    """Run the network on [B,C,H,W]; returns (logits, cache-or-None).

    Dropout masks are drawn from streams derived off ``rng`` per site, so
    two calls with equal-keyed streams see identical masks.
    """
    if dropout_p > 0.0 and rng is None:
        raise TensorError("dropout requires an rng stream")
    b, c, h, w = xb.shape
    if c != params.arch.in_channels:
        raise TensorError(f"expected {params.arch.in_channels} input channels, got {c}")
    _check_spatial(h, w)
    blocks = params.blocks
    k = params.arch.kernel
    pad = k // 2

    def conv(name: str, x: np.ndarray, p: int) -> np.ndarray:
        kern, bias = blocks[name]
        return conv2d_batch(x, kern, bias, p)

    def site_mask(i: int, shape: tuple[int, ...]):
        if dropout_p <= 0.0:
            return None
        return dropout_mask(shape, dropout_p, rng.derive("dropout", i))

    with np.errstate(over="ignore", invalid="ignore"):
        a_e1_1 = _relu(conv("enc1_conv1", xb, pad))
        e1 = _relu(conv("enc1_conv2", a_e1_1, pad))
        p1, i1 = maxpool2d_batch(e1)
        a_e2_1 = _relu(conv("enc2_conv1", p1, pad))
        e2 = _relu(conv("enc2_conv2", a_e2_1, pad))
        p2, i2 = maxpool2d_batch(e2)
        a_b_1 = _relu(conv("bot_conv1", p2, pad))
        b2 = _relu(conv("bot_conv2", a_b_1, pad))
        m0 = site_mask(0, b2.shape)
        bd = b2 if m0 is None else b2 * m0
        c2 = np.concatenate([upsample_nearest_batch(bd), e2], axis=1)
        a_d2_1 = _relu(conv("dec2_conv1", c2, pad))
        d2 = _relu(conv("dec2_conv2", a_d2_1, pad))
        m1 = site_mask(1, d2.shape)
        dd2 = d2 if m1 is None else d2 * m1
        c1 = np.concatenate([upsample_nearest_batch(dd2), e1], axis=1)
        a_d1_1 = _relu(conv("dec1_conv1", c1, pad))
        d1 = _relu(conv("dec1_conv2", a_d1_1, pad))
        m2 = site_mask(2, d1.shape)
        dd1 = d1 if m2 is None else d1 * m2
        logits = conv("head", dd1, 0)
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite activations in forward pass")
    if not want_cache:
        return logits, None
    cache = {
        "x": xb, "a_e1_1": a_e1_1, "e1": e1, "p1": p1, "i1": i1,
        "a_e2_1": a_e2_1, "e2": e2, "p2": p2, "i2": i2,
        "a_b_1": a_b_1, "b2": b2, "m0": m0, "c2": c2,
        "a_d2_1": a_d2_1, "d2": d2, "m1": m1, "c1": c1,
        "a_d1_1": a_d1_1, "d1": d1, "m2": m2, "dd1": dd1,
    }
    return logits, cache


def _backward_batch(params: ModelParams, cache: dict, dlogits: np.ndarray) -> dict:
    """Gradients for every parameter block given d(loss)/d(logits)."""
    blocks = params.blocks
    _, _, cb = params.arch.channels
    pad = params.arch.kernel // 2
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def conv_back(name: str, dout, x, p):
        dk, db, dx = conv2d_backward_batch(dout, x, blocks[name][0], p)
        grads[name] = (dk, db)
        return dx

    def gate(d, act):
        return d * (act > 0)

    d_dd1 = conv_back("head", dlogits, cache["dd1"], 0)
    d_d1 = d_dd1 if cache["m2"] is None else d_dd1 * cache["m2"]
    dz = gate(d_d1, cache["d1"])
    d_a = conv_back("dec1_conv2", dz, cache["a_d1_1"], pad)
    dz = gate(d_a, cache["a_d1_1"])
    d_c1 = conv_back("dec1_conv1", dz, cache["c1"], pad)
    c_up1 = cache["d2"].shape[1]
    d_dd2 = upsample_nearest_backward_batch(d_c1[:, :c_up1])
    d_e1_skip = d_c1[:, c_up1:]
    d_d2 = d_dd2 if cache["m1"] is None else d_dd2 * cache["m1"]
    dz = gate(d_d2, cache["d2"])
    d_a = conv_back("dec2_conv2", dz, cache["a_d2_1"], pad)
    dz = gate(d_a, cache["a_d2_1"])
    d_c2 = conv_back("dec2_conv1", dz, cache["c2"], pad)
    d_bd = upsample_nearest_backward_batch(d_c2[:, :cb])
    d_e2_skip = d_c2[:, cb:]
    d_b2 = d_bd if cache["m0"] is None else d_bd * cache["m0"]
    dz = gate(d_b2, cache["b2"])
    d_a = conv_back("bot_conv2", dz, cache["a_b_1"], pad)
    dz = gate(d_a, cache["a_b_1"])
    d_p2 = conv_back("bot_conv1", dz, cache["p2"], pad)
    d_e2 = maxpool2d_backward_batch(d_p2, cache["i2"]) + d_e2_skip
    dz = gate(d_e2, cache["e2"])
    d_a = conv_back("enc2_conv2", dz, cache["a_e2_1"], pad)
    dz = gate(d_a, cache["a_e2_1"])
    d_p1 = conv_back("enc2_conv1", dz, cache["p1"], pad)
    d_e1 = maxpool2d_backward_batch(d_p1, cache["i1"]) + d_e1_skip
    dz = gate(d_e1, cache["e1"])
    d_a = conv_back("enc1_conv2", dz, cache["a_e1_1"], pad)
    dz = gate(d_a, cache["a_e1_1"])
    conv_back("enc1_conv1", dz, cache["x"], pad)
    return grads


def forward(
    params: ModelParams,
    x: np.ndarray,
    dropout_p: float = 0.0,
    rng: RngStream | None = None,
) -> np.ndarray:
    """Logits [K,H,W] for a single image [C,H,W]; H and W divisible by 4."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise TensorError(f"forward expects [C,H,W], got shape {x.shape}")
    logits, _ = _forward_batch(params, x[None], dropout_p, rng, want_cache=False)
    return logits[0]


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean per-pixel cross-entropy and d(loss)/d(logits) for [B,K,H,W] logits."""
    probs = softmax_batch(logits)
    b, k, h, w = probs.shape
    p_true = np.take_along_axis(probs, labels[:, None].astype(np.int64), axis=1)[:, 0]
    loss = float(-np.mean(np.log(np.maximum(p_true.astype(np.float64), 1e-300))))
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[:, None].astype(np.int64), 1.0, axis=1)
    dlogits = (probs - onehot) / float(b * h * w)
    return loss, dlogits


def loss_and_grad(
    params: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    dropout_p: float = 0.0,
    rng: RngStream | None = None,
):
    """Cross-entropy loss and exact gradients for the sampled dropout masks.

    Mask draws depend only on the stream key of ``rng``, so repeating the
    call with an equal-keyed stream recomputes with the same masks.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.shape[0] == 0:
        raise TensorError("images must be a nonempty [B,C,H,W] batch")
    if labels.shape != (images.shape[0],) + images.shape[2:]:
        raise TensorError("labels must be [B,H,W] matching the image batch")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TensorError("labels must be integers")
    if labels.min() < 0 or labels.max() >= params.arch.num_classes:
        raise TensorError("labels out of class range")
    logits, cache = _forward_batch(params, images, dropout_p, rng, want_cache=True)
    loss, dlogits = softmax_xent(logits, labels)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    grads = _backward_batch(params, cache, dlogits)
    return loss, grads


# ---------------------------------------------------------------------------
# training


def _batches(n: int, batch_size: int, perm: np.ndarray) -> Iterator[np.ndarray]:
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train(params: ModelParams, images: np.ndarray, labels: np.ndarray, config: TrainConfig):
    """Mini-batch training; returns (new params, per-epoch mean loss trace).

    Deterministic given config.seed: the epoch shuffle and every dropout
    draw come from streams derived off that seed. The input parameters
    are copied, never mutated.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.shape[0] == 0:
        raise TensorError("training set must be a nonempty [N,C,H,W] array")
    n = images.shape[0]
    out = params.copy()
    root = RngStream(config.seed)
    adam_m = {name: (np.zeros_like(k), np.zeros_like(b)) for name, (k, b) in out.blocks.items()}
    adam_v = {name: (np.zeros_like(k), np.zeros_like(b)) for name, (k, b) in out.blocks.items()}
    step = 0
    trace: list[float] = []
    for epoch in range(config.epochs):
        perm = root.derive("shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        for i, idx in enumerate(_batches(n, config.batch_size, perm)):
            step_rng = root.derive("step", epoch, i)
            try:
                loss, grads = loss_and_grad(out, images[idx], labels[idx], config.dropout_p, step_rng)
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", epoch) from exc
            epoch_loss += loss * len(idx)
            step += 1
            for name, (gk, gb) in grads.items():
                kern, bias = out.blocks[name]
                if config.optimizer == "sgd":
                    kern -= config.learning_rate * gk.astype(np.float32)
                    bias -= config.learning_rate * gb.astype(np.float32)
                else:
                    mk, mb = adam_m[name]
                    vk, vb = adam_v[name]
                    for theta, g, m, v in ((kern, gk, mk, vk), (bias, gb, mb, vb)):
                        g = g.astype(np.float32)
                        m *= config.beta1
                        m += (1.0 - config.beta1) * g
                        v *= config.beta2
                        v += (1.0 - config.beta2) * g * g
                        mhat = m / (1.0 - config.beta1**step)
                        vhat = v / (1.0 - config.beta2**step)
                        theta -= config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
            for name, (kern, bias) in out.blocks.items():
                if not (np.all(np.isfinite(kern)) and np.all(np.isfinite(bias))):
                    raise DivergenceError(f"non-finite parameters in {name} at epoch {epoch}", epoch)
        trace.append(epoch_loss / n)
    return out, trace


# ---------------------------------------------------------------------------
# MC-dropout sampling


@dataclass
class SampleStack:
    """T stochastic softmax fields [T,K,H,W] plus the draw provenance."""

    probs: np.ndarray
    seed: int
    dropout_p: float

    def __post_init__(self):
        if self.probs.ndim != 4 or self.probs.shape[0] < 1:
            raise TensorError("sample stack must be [T,K,H,W] with T >= 1")
        if self.probs.shape[1] < 2:
            raise TensorError("sample stack needs at least two channels")
        sums = self.probs.sum(axis=1, dtype=np.float64)
        if not np.all(np.abs(sums - 1.0) <= 1e-6):
            raise TensorError("per-pixel channel sums must equal 1 within 1e-6")

    @property
    def T(self) -> int:
        return int(self.probs.shape[0])


def mc_sample(params: ModelParams, x: np.ndarray, T: int, dropout_p: float, seed: int) -> SampleStack:
    """T dropout forward passes; per-sample streams keyed by (seed, index).

    The stream derivation is stateless, so computing the samples in any
    order (or in parallel) yields an identical stack.
    """
    if T < 1:
        raise TensorError("T must be >= 1")
    root = RngStream(seed)
    x = np.asarray(x, dtype=np.float32)
    slabs = []
    for t in range(T):
        logits = forward(params, x, dropout_p, root.derive("mc", t))
        slabs.append(softmax_batch(logits[None])[0])
    return SampleStack(np.stack(slabs).astype(np.float32), seed, dropout_p)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    directory: str | os.PathLike,
    params: ModelParams,
    dropout_p: float | None = None,
    seed: int | None = None,
    epoch: int | None = None,
    extra: dict | None = None,
) -> None:
    """Write one TNS1 file per parameter block plus a JSON manifest."""
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    layers = []
    for name, (kern, bias) in params.blocks.items():
        save_tns(os.path.join(directory, f"{name}.kernel.tns"), kern)
        save_tns(os.path.join(directory, f"{name}.bias.tns"), bias)
        layers.append({"name": name, "kernel_shape": list(kern.shape), "bias_shape": list(bias.shape)})
    manifest = {
        "format": "model-checkpoint-v1",
        "in_channels": params.arch.in_channels,
        "channels": list(params.arch.channels),
        "num_classes": params.arch.num_classes,
        "kernel": params.arch.kernel,
        "layers": layers,
        "dropout_p": dropout_p,
        "seed": seed,
        "epoch": epoch,
    }
    if extra:
        manifest.update(extra)
    tmp = os.path.join(directory, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(directory, "manifest.json"))


def load_checkpoint(directory: str | os.PathLike):
    """Read a checkpoint directory; returns (ModelParams, manifest dict)."""
    directory = os.fspath(directory)
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    arch = Architecture(
        in_channels=manifest["in_channels"],
        channels=tuple(manifest["channels"]),
        num_classes=manifest["num_classes"],
        kernel=manifest["kernel"],
    )
    blocks: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for entry in manifest["layers"]:
        name = entry["name"]
        kern = load_tns(os.path.join(directory, f"{name}.kernel.tns"))
        bias = load_tns(os.path.join(directory, f"{name}.bias.tns"))
        if list(kern.shape) != entry["kernel_shape"] or list(bias.shape) != entry["bias_shape"]:
            raise TensorError(f"checkpoint shape mismatch for layer {name}")
        blocks[name] = (kern, bias)
    return ModelParams(arch, blocks), manifest
