"""The trainable head on a frozen extractor: bottleneck linear -> batch norm -> classifier.

Explicit forward, backward, and SGD-with-momentum update in numpy, plus the
fixed equiangular-tight-frame classifier variant and the binary wire format
used as the federation payload. Parameters are held in float64 so gradient
checks stay tight; the wire format truncates to float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DEFAULT_BOTTLENECK = 256

HEAD_MAGIC = b"HEAD"
_HEAD_HEADER = struct.Struct("<4sIIIBff")  # magic, in_dim, bottleneck, C, mode, bn momentum, bn eps

_MODE_CODES = {"trainable": 0, "etf_fixed": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


class HeadFormatError(ValueError):
    """Corrupt or truncated head payload."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @staticmethod
    def init(dim: int) -> "BatchNormState":
        return BatchNormState(
            gamma=np.ones(dim),
            beta=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
        )

    def clone(self) -> "BatchNormState":
        return BatchNormState(
            self.gamma.copy(), self.beta.copy(),
            self.running_mean.copy(), self.running_var.copy(),
            self.momentum, self.epsilon,
        )


class HeadParams:
    """All trainable state: bottleneck weights, BN state, classifier weights.

    In etf_fixed mode the classifier rows are frozen unit-norm simplex
    prototypes; they are copied, never averaged or stepped.
    """

    TENSOR_ORDER = (
        "bottleneck_weight", "bottleneck_bias",
        "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var",
        "classifier_weight", "classifier_bias",
    )

    def __init__(self, bottleneck_weight, bottleneck_bias, bn, classifier_weight,
                 classifier_bias, classifier_mode="trainable"):
        if classifier_mode not in _MODE_CODES:
            raise ValueError(f"unknown classifier_mode {classifier_mode!r}")
        self.bottleneck_weight = np.asarray(bottleneck_weight, dtype=np.float64)
        self.bottleneck_bias = np.asarray(bottleneck_bias, dtype=np.float64)
        self.bn = bn
        self.classifier_weight = np.asarray(classifier_weight, dtype=np.float64)
        self.classifier_bias = np.asarray(classifier_bias, dtype=np.float64)
        self.classifier_mode = classifier_mode

    @property
    def in_dim(self) -> int:
        return self.bottleneck_weight.shape[1]

    @property
    def bottleneck_dim(self) -> int:
        return self.bottleneck_weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier_weight.shape[0]

    @staticmethod
    def init(in_dim, num_classes, bottleneck_dim=DEFAULT_BOTTLENECK, seed=0,
             classifier_mode="trainable") -> "HeadParams":
        """Symmetric uniform fan-in initialization, seed-controlled."""
        rng = np.random.default_rng(seed)
        b1 = 1.0 / np.sqrt(in_dim)
        b2 = 1.0 / np.sqrt(bottleneck_dim)
        if classifier_mode == "etf_fixed":
            cw = init_etf(num_classes, bottleneck_dim)
            cb = np.zeros(num_classes)
        else:
            cw = rng.uniform(-b2, b2, size=(num_classes, bottleneck_dim))
            cb = rng.uniform(-b2, b2, size=num_classes)
        return HeadParams(
            bottleneck_weight=rng.uniform(-b1, b1, size=(bottleneck_dim, in_dim)),
            bottleneck_bias=rng.uniform(-b1, b1, size=bottleneck_dim),
            bn=BatchNormState.init(bottleneck_dim),
            classifier_weight=cw,
            classifier_bias=cb,
            classifier_mode=classifier_mode,
        )

    def clone(self) -> "HeadParams":
        return HeadParams(
            self.bottleneck_weight.copy(), self.bottleneck_bias.copy(),
            self.bn.clone(),
            self.classifier_weight.copy(), self.classifier_bias.copy(),
            self.classifier_mode,
        )

    def tensors(self) -> dict:
        """Every state tensor in wire order (includes BN running statistics)."""
        return {
            "bottleneck_weight": self.bottleneck_weight,
            "bottleneck_bias": self.bottleneck_bias,
            "bn_gamma": self.bn.gamma,
            "bn_beta": self.bn.beta,
            "bn_running_mean": self.bn.running_mean,
            "bn_running_var": self.bn.running_var,
            "classifier_weight": self.classifier_weight,
            "classifier_bias": self.classifier_bias,
        }

    def trainable_names(self) -> tuple:
        names = ["bottleneck_weight", "bottleneck_bias", "bn_gamma", "bn_beta"]
        if self.classifier_mode == "trainable":
            names += ["classifier_weight", "classifier_bias"]
        return tuple(names)


@dataclass
class HeadGrads:
    bottleneck_weight: np.ndarray
    bottleneck_bias: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def tensors(self) -> dict:
        return {
            "bottleneck_weight": self.bottleneck_weight,
            "bottleneck_bias": self.bottleneck_bias,
            "bn_gamma": self.bn_gamma,
            "bn_beta": self.bn_beta,
            "classifier_weight": self.classifier_weight,
            "classifier_bias": self.classifier_bias,
        }

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors().values())


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _bn_stats(params: HeadParams, z: np.ndarray, train: bool):
    if train:
        mean = z.mean(axis=0)
        var = z.var(axis=0)  # biased, used for normalization
    else:
        mean = params.bn.running_mean
        var = params.bn.running_var
    return mean, var


def forward(params: HeadParams, batch, train=False, update_running=True):
    """(features, logits, probs) for a batch of extractor embeddings.

    Train mode normalizes with batch statistics (B >= 2) and, unless
    `update_running` is off, folds them into the running estimates. Eval mode
    is a pure function of the parameters.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"batch must be [B, {params.in_dim}], got {x.shape}")
    if train and x.shape[0] < 2:
        raise ValueError("train mode needs batch size >= 2 for batch statistics")
    z = x @ params.bottleneck_weight.T + params.bottleneck_bias
    mean, var = _bn_stats(params, z, train)
    if train and update_running:
        m = params.bn.momentum
        n = x.shape[0]
        unbiased = var * n / (n - 1)
        params.bn.running_mean = (1 - m) * params.bn.running_mean + m * mean
        params.bn.running_var = (1 - m) * params.bn.running_var + m * unbiased
    xhat = (z - mean) / np.sqrt(var + params.bn.epsilon)
    features = params.bn.gamma * xhat + params.bn.beta
    logits = features @ params.classifier_weight.T + params.classifier_bias
    return features, logits, softmax(logits)


def backward(params: HeadParams, batch, grad_logits, train=True) -> HeadGrads:
    """Gradients of a scalar loss wrt trainable tensors, given dL/dlogits.

    Recomputes the forward pass without touching running statistics; the
    caller is expected to have run the stat-updating forward already.
    """
    x = np.asarray(batch, dtype=np.float64)
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (x.shape[0], params.num_classes):
        raise ValueError(f"grad_logits must be [B, {params.num_classes}], got {g.shape}")
    z = x @ params.bottleneck_weight.T + params.bottleneck_bias
    mean, var = _bn_stats(params, z, train)
    inv_std = 1.0 / np.sqrt(var + params.bn.epsilon)
    xhat = (z - mean) * inv_std
    features = params.bn.gamma * xhat + params.bn.beta

    d_cw = g.T @ features
    d_cb = g.sum(axis=0)
    d_feat = g @ params.classifier_weight
    d_gamma = (d_feat * xhat).sum(axis=0)
    d_beta = d_feat.sum(axis=0)
    d_xhat = d_feat * params.bn.gamma
    if train:
        n = x.shape[0]
        d_z = (inv_std / n) * (
            n * d_xhat
            - d_xhat.sum(axis=0)
            - xhat * (d_xhat * xhat).sum(axis=0)
        )
    else:
        d_z = d_xhat * inv_std
    d_bw = d_z.T @ x
    d_bb = d_z.sum(axis=0)
    if params.classifier_mode == "etf_fixed":
        d_cw = np.zeros_like(params.classifier_weight)
        d_cb = np.zeros_like(params.classifier_bias)
    return HeadGrads(d_bw, d_bb, d_gamma, d_beta, d_cw, d_cb)


@dataclass
class OptimizerState:
    """SGD with momentum: velocity buffers congruent to every trainable tensor."""

    velocity: dict
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0

    @staticmethod
    def init(params: HeadParams, learning_rate, momentum=0.9,
             weight_decay=0.0) -> "OptimizerState":
        vel = {
            name: np.zeros_like(params.tensors()[name])
            for name in params.trainable_names()
        }
        return OptimizerState(vel, learning_rate, momentum, weight_decay)


def sgd_step(params: HeadParams, grads: HeadGrads, opt: OptimizerState) -> HeadParams:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v. In place."""
    tensors = params.tensors()
    grad_tensors = grads.tensors()
    for name in params.trainable_names():
        p = tensors[name]
        v = opt.velocity[name]
        if v.shape != p.shape or grad_tensors[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}")
        v *= opt.momentum
        v += grad_tensors[name] + opt.weight_decay * p
        p -= opt.learning_rate * v
    return params


def init_etf(num_classes: int, dim: int) -> np.ndarray:
    """C unit-norm prototypes with every pairwise inner product -1/(C-1).

    Built from an orthonormal basis of the complement of the all-ones vector
    (Householder reflection), scaled by sqrt(C/(C-1)) and embedded into the
    first C-1 coordinates. Requires dim >= C-1.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if dim < num_classes - 1:
        raise ValueError(f"dim {dim} < C-1 = {num_classes - 1}")
    c = num_classes
    ones_dir = np.full(c, 1.0 / np.sqrt(c))
    v = np.zeros(c)
    v[0] = 1.0
    v -= ones_dir
    h = np.eye(c) - 2.0 * np.outer(v, v) / (v @ v)  # maps e1 -> ones/sqrt(C)
    basis = h[:, 1:]  # [C, C-1], orthonormal columns, each orthogonal to ones
    prototypes = np.zeros((c, dim))
    prototypes[:, : c - 1] = np.sqrt(c / (c - 1.0)) * basis
    return prototypes


def serialized_value_count(in_dim, bottleneck_dim, num_classes) -> int:
    """Float32 values on the wire: trainable tensors plus BN running stats."""
    return (
        in_dim * bottleneck_dim + bottleneck_dim
        + 4 * bottleneck_dim
        + num_classes * bottleneck_dim + num_classes
    )


def trainable_param_count(in_dim, bottleneck_dim, num_classes) -> int:
    """Learnable parameters: bottleneck, BN affine, classifier."""
    return (
        in_dim * bottleneck_dim + bottleneck_dim
        + 2 * bottleneck_dim
        + num_classes * bottleneck_dim + num_classes
    )


def head_payload_bytes(in_dim, bottleneck_dim, num_classes) -> int:
    return _HEAD_HEADER.size + 4 * serialized_value_count(in_dim, bottleneck_dim, num_classes)


def serialize_head(params: HeadParams) -> bytes:
    """Wire payload: fixed header then tensors in field order, float32 LE."""
    parts = [
        _HEAD_HEADER.pack(
            HEAD_MAGIC, params.in_dim, params.bottleneck_dim, params.num_classes,
            _MODE_CODES[params.classifier_mode],
            params.bn.momentum, params.bn.epsilon,
        )
    ]
    for name in HeadParams.TENSOR_ORDER:
        parts.append(params.tensors()[name].astype("<f4").tobytes())
    return b"".join(parts)


def deserialize_head(payload: bytes) -> HeadParams:
    if len(payload) < _HEAD_HEADER.size:
        raise HeadFormatError("payload shorter than the fixed header")
    magic, in_dim, bd, c, mode_code, bn_momentum, bn_eps = _HEAD_HEADER.unpack_from(payload, 0)
    if magic != HEAD_MAGIC:
        raise HeadFormatError(f"bad magic {magic!r}")
    if mode_code not in _MODE_NAMES:
        raise HeadFormatError(f"unknown classifier mode code {mode_code}")
    expected = head_payload_bytes(in_dim, bd, c)
    if len(payload) != expected:
        raise HeadFormatError(f"payload is {len(payload)} bytes, expected {expected}")
    off = _HEAD_HEADER.size
    shapes = {
        "bottleneck_weight": (bd, in_dim),
        "bottleneck_bias": (bd,),
        "bn_gamma": (bd,),
        "bn_beta": (bd,),
        "bn_running_mean": (bd,),
        "bn_running_var": (bd,),
        "classifier_weight": (c, bd),
        "classifier_bias": (c,),
    }
    arrays = {}
    for name in HeadParams.TENSOR_ORDER:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        arrays[name] = arr.astype(np.float64).reshape(shapes[name])
        off += 4 * count
    bn = BatchNormState(
        gamma=arrays["bn_gamma"], beta=arrays["bn_beta"],
        running_mean=arrays["bn_running_mean"], running_var=arrays["bn_running_var"],
        momentum=float(bn_momentum), epsilon=float(bn_eps),
    )
    return HeadParams(
        arrays["bottleneck_weight"], arrays["bottleneck_bias"], bn,
        arrays["classifier_weight"], arrays["classifier_bias"],
        _MODE_NAMES[mode_code],
    )


def write_head(params: HeadParams, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_head(params))


def read_head(path) -> HeadParams:
    with open(path, "rb") as f:
        return deserialize_head(f.read())
