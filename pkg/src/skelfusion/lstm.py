"""Minimal bidirectional LSTM action classifier in plain numpy.

Poses are embedded by a ReLU layer, read by one past-to-future and one
future-to-past LSTM cell, and the final states ``[h_l | h'_1]`` feed a
softmax head. Gradients are computed by backpropagation through time.

Gate blocks in the stacked LSTM weights are ordered (input, forget, output,
candidate); each cell's weight matrix acts on the concatenation ``[x | h]``.
"""
from __future__ import annotations

import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from skelfusion._io import atomic_write_bytes
from skelfusion.errors import DataValidationError, TrainingDivergedError
from skelfusion.skeleton import Action

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
PROB_FLOOR = 1e-12
GATES = ("input", "forget", "output", "candidate")
PARAM_NAMES = ("W_E", "b_E", "W_fw", "b_fw", "W_bw", "b_bw", "W_C", "b_C")


@dataclass(frozen=True)
class Dims:
    joints: int
    embed: int
    hidden: int
    classes: int

    def __post_init__(self):
        if min(self.joints, self.embed, self.hidden, self.classes) < 1:
            raise DataValidationError(f"all dims must be positive: {self}")
        if self.hidden % 2:
            raise DataValidationError(f"hidden size must be even, got {self.hidden}")

    @property
    def half(self) -> int:
        return self.hidden // 2

    @property
    def input_size(self) -> int:
        return self.joints * 3


@dataclass
class BiLstmParams:
    W_E: np.ndarray  # (3j, E)
    b_E: np.ndarray  # (E,)
    W_fw: np.ndarray  # (E + H/2, 4 * H/2)
    b_fw: np.ndarray  # (4 * H/2,)
    W_bw: np.ndarray
    b_bw: np.ndarray
    W_C: np.ndarray  # (H, m)
    b_C: np.ndarray  # (m,)

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d = self.dims
        expected = {
            "W_E": (d.input_size, d.embed),
            "b_E": (d.embed,),
            "W_fw": (d.embed + d.half, 4 * d.half),
            "b_fw": (4 * d.half,),
            "W_bw": (d.embed + d.half, 4 * d.half),
            "b_bw": (4 * d.half,),
            "W_C": (d.hidden, d.classes),
            "b_C": (d.classes,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DataValidationError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self) -> Dims:
        if self.W_E.ndim != 2 or self.W_E.shape[0] % 3 or self.W_C.ndim != 2:
            raise DataValidationError("malformed parameter shapes")
        return Dims(self.W_E.shape[0] // 3, self.W_E.shape[1], self.W_C.shape[0], self.W_C.shape[1])

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for n in PARAM_NAMES:
            yield n, getattr(self, n)

    def copy(self) -> "BiLstmParams":
        return BiLstmParams(*(a.copy() for a in self.arrays()))

    def gate(self, direction: str, name: str) -> tuple[np.ndarray, np.ndarray]:
        """View of one gate's (weight, bias) block for ``direction`` in {"fw", "bw"}."""
        W, b = getattr(self, f"W_{direction}"), getattr(self, f"b_{direction}")
        k = GATES.index(name)
        hh = self.dims.half
        return W[:, k * hh : (k + 1) * hh], b[k * hh : (k + 1) * hh]

    @classmethod
    def zeros(cls, dims: Dims) -> "BiLstmParams":
        e, hh = dims.embed, dims.half
        return cls(
            np.zeros((dims.input_size, e)), np.zeros(e),
            np.zeros((e + hh, 4 * hh)), np.zeros(4 * hh),
            np.zeros((e + hh, 4 * hh)), np.zeros(4 * hh),
            np.zeros((dims.hidden, dims.classes)), np.zeros(dims.classes),
        )

    @classmethod
    def init(cls, dims: Dims, seed: int, init_scale: float = 0.08, forget_bias: float = 1.0):
        """Uniform(-init_scale, init_scale) everywhere, forget-gate bias shifted by ``forget_bias``."""
        rng = np.random.default_rng(seed)
        p = cls.zeros(dims)
        for a in p.arrays():
            a[...] = rng.uniform(-init_scale, init_scale, size=a.shape)
        hh = dims.half
        p.b_fw[hh : 2 * hh] += forget_bias
        p.b_bw[hh : 2 * hh] += forget_bias
        return p

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def save_params(params: BiLstmParams, path: str | os.PathLike, metadata: dict | None = None) -> None:
    """Write an ``.npz`` with a format version; float64 values round-trip bit-exactly.

    ``metadata`` (JSON-serializable, e.g. class labels) is stored alongside.
    """
    buf = io.BytesIO()
    extra = {"metadata": np.array(json.dumps(metadata or {}, sort_keys=True))}
    np.savez(buf, format_version=np.array(MODEL_FORMAT_VERSION), **extra, **dict(params.items()))
    atomic_write_bytes(path, buf.getvalue())


def load_model(path: str | os.PathLike) -> tuple[BiLstmParams, dict]:
    try:
        z = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataValidationError(f"{path}: not a model file: {exc}") from exc
    with z:
        if "format_version" not in z or int(z["format_version"]) != MODEL_FORMAT_VERSION:
            raise DataValidationError(f"{path}: unsupported model file version")
        missing = [n for n in PARAM_NAMES if n not in z]
        if missing:
            raise DataValidationError(f"{path}: missing tensors {missing}")
        params = BiLstmParams(*(z[n].astype(np.float64) for n in PARAM_NAMES))
        metadata = json.loads(str(z["metadata"])) if "metadata" in z else {}
    return params, metadata


def load_params(path: str | os.PathLike) -> BiLstmParams:
    return load_model(path)[0]


# -- single-sequence inference ------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def flatten_pose(pose: np.ndarray) -> np.ndarray:
    return np.asarray(pose, dtype=np.float64).reshape(-1)


def embed_pose(pose: np.ndarray, params: BiLstmParams) -> np.ndarray:
    """ReLU(P . W_E + b_E) for one pose (``(j, 3)`` or flat)."""
    x = flatten_pose(pose)
    if x.shape[0] != params.W_E.shape[0]:
        raise DataValidationError(f"pose has {x.shape[0]} values, W_E expects {params.W_E.shape[0]}")
    return np.maximum(x @ params.W_E + params.b_E, 0.0)


def lstm_step(x, h, c, W, b):
    hh = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W + b
    i = _sigmoid(z[..., :hh])
    f = _sigmoid(z[..., hh : 2 * hh])
    o = _sigmoid(z[..., 2 * hh : 3 * hh])
    g = np.tanh(z[..., 3 * hh :])
    c = f * c + i * g
    return o * np.tanh(c), c


def run_cell(xs: np.ndarray, W: np.ndarray, b: np.ndarray, state=None):
    """Run one LSTM cell over ``xs`` (l, E) in the given order.

    Returns the per-step hidden states and the final ``(h, c)``; passing that
    state back in continues the recurrence exactly where it stopped.
    """
    hh = W.shape[1] // 4
    h, c = (np.zeros(hh), np.zeros(hh)) if state is None else state
    hs = []
    for x in xs:
        h, c = lstm_step(x, h, c, W, b)
        hs.append(h)
    return np.array(hs).reshape(len(hs), hh), (h, c)


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    predicted_class_index: int  # 0-based


def _check_action(action: Action, params: BiLstmParams):
    if action.num_joints != params.dims.joints:
        raise DataValidationError(
            f"action {action.id!r}: {action.num_joints} joints, model expects {params.dims.joints}"
        )


def forward(action: Action, params: BiLstmParams) -> Prediction:
    _check_action(action, params)
    X = action.poses.reshape(action.length, -1)
    A = np.maximum(X @ params.W_E + params.b_E, 0.0)
    _, (h_last, _) = run_cell(A, params.W_fw, params.b_fw)
    _, (h_first, _) = run_cell(A[::-1], params.W_bw, params.b_bw)
    logits = np.concatenate([h_last, h_first]) @ params.W_C + params.b_C
    if not np.all(np.isfinite(logits)):
        raise TrainingDivergedError(f"action {action.id!r}: non-finite logits")
    p = _softmax(logits)
    return Prediction(p, int(np.argmax(p)))


classify = forward


def loss(prediction: Prediction, target_class: int) -> float:
    """Cross-entropy -log p[target] with p floored at 1e-12."""
    p = prediction.probabilities
    if not 0 <= target_class < p.shape[0]:
        raise DataValidationError(f"target class {target_class} out of range [0, {p.shape[0]})")
    return -math.log(max(float(p[target_class]), PROB_FLOOR))


# -- batched forward / backward -----------------------------------------------
#
# Sequences of different lengths run in lockstep; a sequence's state stops
# updating after its last pose. The reverse cell reads each sequence
# right-aligned so it starts at that sequence's own last pose.


def _pack(actions: Sequence[Action]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([a.length for a in actions], dtype=np.int64)
    D = actions[0].num_joints * 3
    X = np.zeros((len(actions), int(lengths.max()), D))
    for k, a in enumerate(actions):
        if a.num_joints * 3 != D:
            raise DataValidationError("actions in one batch must share a joint count")
        X[k, : a.length] = a.poses.reshape(a.length, D)
    return X, lengths


def _reverse_index(lengths: np.ndarray, L: int) -> tuple[np.ndarray, np.ndarray]:
    s = np.arange(L)[None, :]
    idx = lengths[:, None] - 1 - s
    active = idx >= 0
    return np.where(active, idx, 0), active


def _run_batch(A, active, W, b):
    B, L, _ = A.shape
    hh = W.shape[1] // 4
    h = np.zeros((B, hh))
    c = np.zeros((B, hh))
    cache = []
    for t in range(L):
        m = active[:, t : t + 1]
        xh = np.concatenate([A[:, t], h], axis=1)
        z = xh @ W + b
        i = _sigmoid(z[:, :hh])
        f = _sigmoid(z[:, hh : 2 * hh])
        o = _sigmoid(z[:, 2 * hh : 3 * hh])
        g = np.tanh(z[:, 3 * hh :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache.append((xh, c, i, f, o, g, tc))
        h = np.where(m, h_new, h)
        c = np.where(m, c_new, c)
    return h, cache


def _backprop_batch(dh, cache, active, W, E):
    B = dh.shape[0]
    hh = W.shape[1] // 4
    L = len(cache)
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[1])
    dA = np.zeros((B, L, E))
    dc = np.zeros((B, hh))
    for t in range(L - 1, -1, -1):
        xh, c_prev, i, f, o, g, tc = cache[t]
        m = active[:, t : t + 1]
        do = dh * tc
        dct = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dct * g * i * (1.0 - i),
                dct * c_prev * f * (1.0 - f),
                do * o * (1.0 - o),
                dct * i * (1.0 - g * g),
            ],
            axis=1,
        )
        dz *= m
        dW += xh.T @ dz
        db += dz.sum(axis=0)
        dxh = dz @ W.T
        dA[:, t] = dxh[:, :E]
        dh = np.where(m, dxh[:, E:], dh)
        dc = np.where(m, dct * f, dc)
    return dW, db, dA


def _batch_forward(X, lengths, params: BiLstmParams, keep_cache: bool):
    B, L, _ = X.shape
    Z = X @ params.W_E + params.b_E
    A = np.maximum(Z, 0.0)
    fw_active = np.arange(L)[None, :] < lengths[:, None]
    ridx, bw_active = _reverse_index(lengths, L)
    A_rev = A[np.arange(B)[:, None], ridx] * bw_active[:, :, None]
    h_fw, cache_fw = _run_batch(A, fw_active, params.W_fw, params.b_fw)
    h_bw, cache_bw = _run_batch(A_rev, bw_active, params.W_bw, params.b_bw)
    hcat = np.concatenate([h_fw, h_bw], axis=1)
    logits = hcat @ params.W_C + params.b_C
    if not np.all(np.isfinite(logits)):
        raise TrainingDivergedError("non-finite logits (training diverged?)")
    P = _softmax(logits)
    if not keep_cache:
        return P, None
    return P, (Z, fw_active, bw_active, ridx, hcat, cache_fw, cache_bw)


def predict_proba(params: BiLstmParams, actions: Sequence[Action], batch_size: int = 64) -> np.ndarray:
    """Class probabilities for many actions at once, shape (N, m)."""
    if not actions:
        return np.zeros((0, params.dims.classes))
    for a in actions:
        _check_action(a, params)
    out = []
    for start in range(0, len(actions), batch_size):
        X, lengths = _pack(actions[start : start + batch_size])
        out.append(_batch_forward(X, lengths, params, keep_cache=False)[0])
    return np.concatenate(out, axis=0)


def _batch_loss_and_grads(X, lengths, targets, params: BiLstmParams, weights):
    """Sum over the batch of weights[k] * loss_k and its gradient."""
    B, L, D = X.shape
    E = params.W_E.shape[1]
    P, (Z, fw_active, bw_active, ridx, hcat, cache_fw, cache_bw) = _batch_forward(
        X, lengths, params, keep_cache=True
    )
    rows = np.arange(B)
    losses = -np.log(np.maximum(P[rows, targets], PROB_FLOOR))
    dlogits = P.copy()
    dlogits[rows, targets] -= 1.0
    dlogits *= weights[:, None]

    g = BiLstmParams.zeros(params.dims)
    g.W_C[...] = hcat.T @ dlogits
    g.b_C[...] = dlogits.sum(axis=0)
    dh = dlogits @ params.W_C.T
    hh = params.dims.half
    dW, db, dA_fw = _backprop_batch(dh[:, :hh], cache_fw, fw_active, params.W_fw, E)
    g.W_fw[...], g.b_fw[...] = dW, db
    dW, db, dA_rev = _backprop_batch(dh[:, hh:], cache_bw, bw_active, params.W_bw, E)
    g.W_bw[...], g.b_bw[...] = dW, db

    dA = dA_fw
    dA_rev = dA_rev * bw_active[:, :, None]
    np.add.at(dA, (np.repeat(rows, L), ridx.reshape(-1)), dA_rev.reshape(B * L, E))
    dZ = dA * (Z > 0)
    g.W_E[...] = X.reshape(B * L, D).T @ dZ.reshape(B * L, E)
    g.b_E[...] = (dZ * fw_active[:, :, None]).sum(axis=(0, 1))
    return float((weights * losses).sum()), losses, g


def backward(action: Action, target: int, params: BiLstmParams) -> BiLstmParams:
    """Exact gradient of ``loss(forward(action), target)`` w.r.t. every parameter."""
    _check_action(action, params)
    if not 0 <= target < params.dims.classes:
        raise DataValidationError(f"target class {target} out of range")
    X, lengths = _pack([action])
    _, _, grads = _batch_loss_and_grads(X, lengths, np.array([target]), params, np.ones(1))
    return grads


def batch_gradient(
    actions: Sequence[Action], targets: Sequence[int], params: BiLstmParams
) -> tuple[float, BiLstmParams]:
    """Mean loss over the batch and the gradient of that mean."""
    X, lengths = _pack(actions)
    w = np.full(len(actions), 1.0 / len(actions))
    total, _, grads = _batch_loss_and_grads(X, lengths, np.asarray(targets), params, w)
    return total, grads



def numerical_gradient(action: Action, target: int, params: BiLstmParams, eps: float = 1e-5) -> BiLstmParams:
    """Central finite differences of the single-action loss, one entry at a time.

    Uses the single-sequence ``forward`` path, so it shares no code with
    ``backward`` beyond the parameter container.
    """
    probe = params.copy()
    out = BiLstmParams.zeros(params.dims)
    for (_, p), (_, g) in zip(probe.items(), out.items()):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + eps
            up = loss(forward(action, probe), target)
            flat[k] = keep - eps
            down = loss(forward(action, probe), target)
            flat[k] = keep
            gflat[k] = (up - down) / (2 * eps)
    return out


def max_relative_error(a: BiLstmParams, b: BiLstmParams, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor) over every parameter entry.

    Central differences at eps=1e-5 carry roundoff of roughly
    ``machine_eps * loss / eps`` (about 1e-11), so relative error is
    meaningless for entries far below that; the floor turns the check into an
    absolute one (``floor * tolerance``) for gradients smaller than ``floor``.
    """
    worst = 0.0
    for x, y in zip(a.arrays(), b.arrays()):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst

# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    init_scale: float = 0.08
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or int(self.epochs) != self.epochs:
            raise DataValidationError("epochs must be a non-negative integer")
        if not self.learning_rate > 0:
            raise DataValidationError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise DataValidationError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise DataValidationError("batch_size must be positive")
        if not self.init_scale > 0:
            raise DataValidationError("init_scale must be positive")


EpochCallback = Callable[[int, BiLstmParams, float], None]


@dataclass
class _Adam:
    lr: float
    beta1: float
    beta2: float
    eps: float
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: BiLstmParams, grads: BiLstmParams):
        if not self.m:
            self.m = [np.zeros_like(a) for a in params.arrays()]
            self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(
    train_set: Sequence[tuple[Action, int]],
    config: TrainConfig,
    dims: Dims,
    on_epoch: EpochCallback | None = None,
) -> BiLstmParams:
    """Mini-batch cross-entropy training from a seeded initialization.

    ``on_epoch(epoch, params, mean_loss)`` runs after every epoch (1-based);
    ``params`` is live and must be copied if kept.
    """
    if not train_set:
        raise DataValidationError("empty training set")
    actions = [a for a, _ in train_set]
    targets = np.array([int(y) for _, y in train_set])
    if targets.min() < 0 or targets.max() >= dims.classes:
        raise DataValidationError("training target outside [0, m)")
    for a in actions:
        if a.num_joints != dims.joints:
            raise DataValidationError(f"action {a.id!r}: {a.num_joints} joints, expected {dims.joints}")

    rng = np.random.default_rng(config.seed)
    params = BiLstmParams.init(dims, int(rng.integers(2**62)), config.init_scale, config.forget_bias)
    X_all, len_all = _pack(actions)
    adam = _Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    n = len(actions)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            lengths = len_all[idx]
            X = X_all[idx, : int(lengths.max())]
            w = np.full(len(idx), 1.0 / len(idx))
            total, losses, grads = _batch_loss_and_grads(X, lengths, targets[idx], params, w)
            if not np.all(np.isfinite(losses)):
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}")
            epoch_loss += float(losses.sum())
            if config.optimizer == "adam":
                adam.step(params, grads)
            else:
                for p, g in zip(params.arrays(), grads.arrays()):
                    p -= config.learning_rate * g
        mean_loss = epoch_loss / n
        if not math.isfinite(mean_loss) or not params.is_finite():
            raise TrainingDivergedError(f"training diverged in epoch {epoch} (mean loss {mean_loss})")
        log.debug("epoch %d mean loss %.6f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, params, mean_loss)
    return params


# -- evaluation -----------------------------------------------------------------

@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    rows: list[tuple[str, int, int]]  # (action id, true index, predicted index)


def evaluate(params: BiLstmParams, test_set: Sequence[tuple[Action, int]]) -> Evaluation:
    if not test_set:
        raise DataValidationError("empty test set")
    probs = predict_proba(params, [a for a, _ in test_set])
    pred = probs.argmax(axis=1)
    rows = [(a.id, int(y), int(p)) for (a, y), p in zip(test_set, pred)]
    correct = sum(1 for _, y, p in rows if y == p)
    return Evaluation(correct / len(rows), rows)
