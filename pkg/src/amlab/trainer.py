"""A small ReLU MLP embedder, momentum SGD and the deterministic training loop."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from amlab.losses import Batch, ClassifierHead, LossConfig, Variant, loss_forward_backward, predict
from amlab.margin import lambda_at
from amlab.norm import DegenerateFeatureError
from amlab.numeric import Rng

CHECKPOINT_MAGIC = b"AMLB"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    def __init__(self, iteration, loss, reason=None):
        super().__init__(reason or f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    layer_widths: tuple = (32, 64, 64, 3)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 3:
            raise ValueError("need input, at least one hidden layer and an embedding layer")
        if widths[-1] < 2:
            raise ValueError("embedding dimension must be >= 2")
        if min(widths) < 1:
            raise ValueError("layer widths must be positive")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def embed_dim(self):
        return self.layer_widths[-1]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer recipe; defaults follow the face-model schedule scaled down."""

    lr_base: float = 0.1
    lr_decay_iters: tuple = ()
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    total_iters: int = 300
    seed: int = 0

    def __post_init__(self):
        decay = tuple(int(i) for i in self.lr_decay_iters)
        object.__setattr__(self, "lr_decay_iters", decay)
        if any(b <= a for a, b in zip(decay, decay[1:])):
            raise ValueError("lr_decay_iters must be strictly increasing")
        if decay and decay[-1] >= self.total_iters:
            raise ValueError("lr_decay_iters must be < total_iters")
        if self.batch_size < 1 or self.total_iters < 1:
            raise ValueError("batch_size and total_iters must be positive")


def lr_at(opt, iteration):
    passed = sum(1 for t in opt.lr_decay_iters if iteration >= t)
    return opt.lr_base * opt.lr_decay_factor**passed


class Mlp:
    """Fully connected ReLU network; the last layer is linear and gives the embedding."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or len(weights) < 2:
            raise ValueError("need matching weight/bias lists with at least two layers")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64).ravel() for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input width {w.shape[1]} != {self.weights[i - 1].shape[0]}")

    @classmethod
    def he_normal(cls, config, rng):
        widths = config.layer_widths
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(rng.normals((fan_out, fan_in), 0.0, np.sqrt(2.0 / fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def embed_dim(self):
        return self.weights[-1].shape[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"input of shape {x.shape} does not match network width {self.input_dim}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out):
        """Gradients of the weights and biases given d(loss)/d(output)."""
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            gw[i] = g.T @ acts[i]
            gb[i] = g.sum(axis=0)
            if i:
                g = g @ self.weights[i]
        return gw, gb

    def tensors(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b[None, :]
        return out


def embed(net, inputs):
    out, _ = net.forward(inputs)
    return out


def sgd_step(params, grads, velocity, opt, lr, decay):
    """Momentum SGD with L2 weight decay.

    ``params``, ``grads`` and ``velocity`` map names to arrays; ``decay`` is
    the set of names that receive weight decay.  Returns new (params, velocity).
    """
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name in decay:
            g = g + opt.weight_decay * p
        v = opt.momentum * velocity.get(name, np.zeros_like(p)) - lr * g
        new_v[name] = v
        new_p[name] = p + v
    return new_p, new_v


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    net: Mlp | None = None
    head: ClassifierHead | None = None


def train(dataset, mlp, loss, opt):
    """Train embedder + head on ``dataset``; fully determined by ``opt.seed``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.inputs.shape[1] != mlp.layer_widths[0]:
        raise ValueError(f"dataset width {dataset.inputs.shape[1]} != network input {mlp.layer_widths[0]}")
    rng = Rng(opt.seed)
    net = Mlp.he_normal(mlp, rng)
    head = ClassifierHead.random(dataset.class_count, mlp.embed_dim, rng, normalized=loss.weight_norm)

    names = [f"w{i}" for i in range(len(net.weights))] + [f"b{i}" for i in range(len(net.biases))] + ["head"]
    decay = {n for n in names if not n.startswith("b")}
    velocity = {}
    history = TrainHistory()
    n = len(dataset)
    epoch_len = -(-n // opt.batch_size)
    it = 0
    while it < opt.total_iters:
        perm = rng.permutation(n)
        for start in range(0, n, opt.batch_size):
            if it >= opt.total_iters:
                break
            idx = perm[start : start + opt.batch_size]
            feats, acts = net.forward(dataset.inputs[idx])
            if not np.all(np.isfinite(feats)):
                raise DivergenceError(it, float("nan"), f"non-finite features at iteration {it}")
            try:
                out = loss_forward_backward(Batch(feats, dataset.labels[idx]), head, loss, it)
            except DegenerateFeatureError as exc:
                raise DivergenceError(it, float("nan"), f"collapsed features at iteration {it}: {exc}") from None
            if not np.isfinite(out.loss):
                raise DivergenceError(it, out.loss)
            gw, gb = net.backward(acts, out.grad_features)
            lr = lr_at(opt, it)
            history.losses.append(out.loss)
            history.lrs.append(lr)
            history.lambdas.append(lambda_at(loss.lambda_schedule, it) if loss.variant is Variant.A_SOFTMAX else 0.0)

            params = {f"w{i}": w for i, w in enumerate(net.weights)}
            params.update({f"b{i}": b for i, b in enumerate(net.biases)})
            params["head"] = head.weights
            grads = {f"w{i}": g for i, g in enumerate(gw)}
            grads.update({f"b{i}": g for i, g in enumerate(gb)})
            grads["head"] = out.grad_weights
            params, velocity = sgd_step(params, grads, velocity, opt, lr, decay)
            net.weights = [params[f"w{i}"] for i in range(len(net.weights))]
            net.biases = [params[f"b{i}"] for i in range(len(net.biases))]
            head.weights = params["head"]
            if loss.weight_norm:
                head.renormalize()
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise DivergenceError(it, float("nan"))
            it += 1
        history.epoch_accuracy.append(train_accuracy(net, head, dataset))
    history.net = net
    history.head = head
    return history


def train_accuracy(net, head, dataset):
    return float(np.mean(predict(embed(net, dataset.inputs), head) == dataset.labels))


def save_checkpoint(path, net, head):
    """Little-endian layout: magic, u32 version, then per tensor
    u32 name length, UTF-8 name, u32 rows, u32 cols, rows*cols f64."""
    tensors = net.tensors()
    tensors["head.weight"] = head.weights
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an AMLB checkpoint")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    tensors = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(data):
                raise CheckpointError(f"{path}: tensor {name} truncated")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt tensor table ({exc})") from None
    layers = sorted({int(k[5:].split(".")[0]) for k in tensors if k.startswith("layer")})
    try:
        net = Mlp(
            [tensors[f"layer{i}.weight"] for i in layers],
            [tensors[f"layer{i}.bias"] for i in layers],
        )
        head = ClassifierHead(tensors["head.weight"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: inconsistent tensors ({exc})") from None
    return net, head
