"""Feed-forward ReLU network trained with Adam, written directly on numpy.

Prediction path for one raw input ``x``::

    z = forward(model, (x - in_mean) / in_scale)         # affine/ReLU chain
    y = decode(z)                                        # physical outputs

``decode`` is the output head. Bounded coordinates (voltage magnitudes) use
``lo + (hi - lo) * sigmoid(z)``. Unbounded ones (angles) use
``out_mean + out_scale * z``. Training minimizes the MSE between
``(y - out_mean) / out_scale`` and the equally standardized targets, so the
loss always lives in one standardized space whatever the head.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"AUGOPFNN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True, eq=False)
class Scaler:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        if self.mean.shape != self.scale.shape:
            raise ValueError("scaler mean/scale shapes differ")
        if np.any(self.scale == 0) or not np.all(np.isfinite(self.scale)):
            raise ValueError("scaler scale must be finite and nonzero")

    @classmethod
    def identity(cls, n: int) -> Scaler:
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def from_stats(cls, stats: dict) -> Scaler:
        return cls(np.array(stats["mean"]), np.array(stats["scale"]))

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.mean

    def stats(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    max_epochs: int = 4000
    learning_rate: float = 1e-4
    final_learning_rate: float | None = None   # geometric decay target; None keeps the rate fixed
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.final_learning_rate is not None and not self.final_learning_rate > 0:
            raise ValueError("final_learning_rate must be > 0")

    def rate(self, epoch: int) -> float:
        """Learning rate for ``epoch``, decaying geometrically when a final rate is set."""
        if self.final_learning_rate is None or self.max_epochs < 2:
            return self.learning_rate
        frac = epoch / (self.max_epochs - 1)
        return self.learning_rate * (self.final_learning_rate / self.learning_rate) ** frac


@dataclass(eq=False)
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass(eq=False)
class MlpModel:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]                 # (fan_in, fan_out)
    biases: list[np.ndarray]
    input_scaler: Scaler
    output_scaler: Scaler
    head_lo: np.ndarray                       # NaN where unbounded
    head_hi: np.ndarray
    seed: int = 0
    adam: AdamState | None = None
    info: dict = field(default_factory=dict)

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def bounded(self) -> np.ndarray:
        return np.isfinite(self.head_lo) & np.isfinite(self.head_hi)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> MlpModel:
        adam = None if self.adam is None else AdamState([m.copy() for m in self.adam.m],
                                                         [v.copy() for v in self.adam.v], self.adam.step)
        return replace(self, weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases],
                       adam=adam, info=dict(self.info))


def init_mlp(layer_sizes, seed: int = 0, input_scaler: Scaler | None = None,
             output_scaler: Scaler | None = None, head_lo=None, head_hi=None) -> MlpModel:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((i, o)) * np.sqrt(2.0 / i) for i, o in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(o) for o in sizes[1:]]
    d_in, d_out = sizes[0], sizes[-1]
    lo = np.full(d_out, np.nan) if head_lo is None else np.asarray(head_lo, dtype=float)
    hi = np.full(d_out, np.nan) if head_hi is None else np.asarray(head_hi, dtype=float)
    if lo.shape != (d_out,) or hi.shape != (d_out,):
        raise ValueError("head bounds must match the output size")
    model = MlpModel(sizes, weights, biases,
                     input_scaler if input_scaler is not None else Scaler.identity(d_in),
                     output_scaler if output_scaler is not None else Scaler.identity(d_out),
                     lo, hi, seed=seed)
    if model.input_scaler.mean.shape != (d_in,) or model.output_scaler.mean.shape != (d_out,):
        raise ValueError("scaler dimensions do not match the layer sizes")
    return model


def forward(model: MlpModel, x: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Affine/ReLU chain on scaled input; last layer affine. Accepts ``(d_in,)`` or ``(n, d_in)``."""
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != model.d_in:
        raise ValueError(f"input has {h.shape[-1]} features, model expects {model.d_in}")
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        if cache is not None:
            cache.append(h)
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode(model: MlpModel, z: np.ndarray) -> np.ndarray:
    """Network output to physical units through the output head."""
    y = model.output_scaler.inverse(z)
    bd = model.bounded
    if np.any(bd):
        lo, hi = model.head_lo[bd], model.head_hi[bd]
        y[..., bd] = lo + (hi - lo) * _sigmoid(z[..., bd])
    return y


def _standardized(model: MlpModel, z: np.ndarray):
    """Standardized prediction and its elementwise derivative w.r.t. ``z``."""
    s = z.copy()
    ds = np.ones_like(z)
    bd = model.bounded
    if np.any(bd):
        lo, hi = model.head_lo[bd], model.head_hi[bd]
        sg = _sigmoid(z[..., bd])
        sc = model.output_scaler.scale[bd]
        s[..., bd] = (lo + (hi - lo) * sg - model.output_scaler.mean[bd]) / sc
        ds[..., bd] = (hi - lo) * sg * (1.0 - sg) / sc
    return s, ds


def predict(model: MlpModel, x_raw: np.ndarray) -> np.ndarray:
    """Raw features in, physical outputs out."""
    return decode(model, forward(model, model.input_scaler.transform(x_raw)))


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def batch_loss(model: MlpModel, x_scaled: np.ndarray, t_scaled: np.ndarray) -> float:
    s, _ = _standardized(model, forward(model, x_scaled))
    return mse_loss(s, t_scaled)


def backward(model: MlpModel, x_scaled: np.ndarray, t_scaled: np.ndarray):
    """Loss and gradients ``[dW0, db0, dW1, db1, ...]`` of the standardized-space MSE."""
    x_scaled = np.atleast_2d(x_scaled)
    t_scaled = np.atleast_2d(t_scaled)
    cache: list[np.ndarray] = []
    z = forward(model, x_scaled, cache)
    s, ds = _standardized(model, z)
    diff = s - t_scaled
    loss = float(np.mean(diff * diff))
    g = (2.0 / diff.size) * diff * ds
    grads: list[np.ndarray] = []
    for k in range(len(model.weights) - 1, -1, -1):
        a = cache[k]
        grads.append(g.sum(axis=0))
        grads.append(a.T @ g)
        if k:
            g = (g @ model.weights[k].T) * (a > 0)
    grads.reverse()
    return loss, grads


def adam_update(model: MlpModel, state: AdamState, grads: list[np.ndarray], config: TrainConfig,
                lr: float | None = None) -> None:
    """One bias-corrected Adam step, in place. ``lr`` overrides the configured rate."""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = config.learning_rate if lr is None else lr
    for p, g, m, v in zip(model.params(), grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float | None
    seconds: float


def train(model: MlpModel, x_train: np.ndarray, t_train: np.ndarray, config: TrainConfig,
          x_val: np.ndarray | None = None, t_val: np.ndarray | None = None, log_every: int = 0,
          logger=None) -> tuple[MlpModel, list[EpochRecord]]:
    """Minibatch Adam on already-scaled arrays.

    ``train_mse`` is the size-weighted mean of batch losses in that epoch.
    Returns a trained copy; the input model is untouched.
    """
    if len(x_train) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    if model.adam is None:
        model.adam = AdamState.zeros_like(model.params())
    rng = np.random.default_rng(config.shuffle_seed)
    n = len(x_train)
    history: list[EpochRecord] = []
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        lr = config.rate(epoch)
        total = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads = backward(model, x_train[idx], t_train[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, bi)
            adam_update(model, model.adam, grads, config, lr)
            total += loss * idx.size
        val = batch_loss(model, x_val, t_val) if x_val is not None and len(x_val) else None
        history.append(EpochRecord(epoch, total / n, val, time.perf_counter() - t0))
        if logger is not None and log_every and (epoch % log_every == 0 or epoch == config.max_epochs - 1):
            logger.info("epoch %d train %.3e val %s", epoch, total / n, "-" if val is None else f"{val:.3e}")
    return model, history


# --------------------------------------------------------------------------
# checkpoints

def _param_bytes(model: MlpModel) -> bytes:
    blocks = [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params()]
    return b"".join(blocks)


def param_digest(model: MlpModel) -> str:
    return hashlib.sha256(_param_bytes(model)).hexdigest()


def save_model(model: MlpModel, path: str | Path | None = None, config_digest: str | None = None) -> bytes:
    """Header JSON plus little-endian f8 blocks ``W0, b0, W1, b1, ...`` then Adam ``m``/``v``."""
    body = _param_bytes(model)
    adam = b""
    if model.adam is not None:
        adam = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in model.adam.m + model.adam.v)

    def enc(a):
        return [None if not np.isfinite(v) else float(v) for v in a]

    head = {
        "format": "augopf-mlp", "version": FORMAT_VERSION, "layer_sizes": list(model.layer_sizes),
        "seed": model.seed, "input_scaler": model.input_scaler.stats(),
        "output_scaler": model.output_scaler.stats(), "head_lo": enc(model.head_lo), "head_hi": enc(model.head_hi),
        "param_digest": hashlib.sha256(body).hexdigest(), "adam_step": None if model.adam is None else model.adam.step,
        "config_digest": config_digest, "info": model.info,
    }
    hb = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    raw = MAGIC + np.uint32(FORMAT_VERSION).tobytes() + np.uint64(len(hb)).tobytes() + hb + body + adam
    if path is not None:
        Path(path).write_bytes(raw)
    return raw


def load_model(source: str | Path | bytes, expected_sizes=None) -> MlpModel:
    raw = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic or truncated header)")
    version = int(np.frombuffer(raw[8:12], "<u4")[0])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(raw[12:20], "<u8")[0])
    try:
        head = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    sizes = tuple(head["layer_sizes"])
    if expected_sizes is not None and tuple(expected_sizes) != sizes:
        raise CheckpointError(f"checkpoint layer sizes {list(sizes)} differ from expected {list(expected_sizes)}")
    shapes = []
    for i, o in zip(sizes[:-1], sizes[1:]):
        shapes += [(i, o), (o,)]
    n = sum(int(np.prod(s)) for s in shapes)
    off = 20 + hlen
    if len(raw) < off + 8 * n:
        raise CheckpointError("checkpoint truncated")
    body = raw[off:off + 8 * n]
    if hashlib.sha256(body).hexdigest() != head["param_digest"]:
        raise CheckpointError("parameter digest mismatch")
    flat = np.frombuffer(body, "<f8")
    params, k = [], 0
    for s in shapes:
        size = int(np.prod(s))
        params.append(flat[k:k + size].reshape(s).copy())
        k += size
    adam = None
    if head["adam_step"] is not None:
        rest = raw[off + 8 * n:]
        if len(rest) != 16 * n:
            raise CheckpointError("checkpoint truncated (optimizer state)")
        af = np.frombuffer(rest, "<f8")
        moments, k = [], 0
        for s in shapes * 2:
            size = int(np.prod(s))
            moments.append(af[k:k + size].reshape(s).copy())
            k += size
        adam = AdamState(moments[:len(shapes)], moments[len(shapes):], int(head["adam_step"]))

    def dec(a):
        return np.array([np.nan if v is None else v for v in a], dtype=float)

    return MlpModel(sizes, params[0::2], params[1::2], Scaler.from_stats(head["input_scaler"]),
                    Scaler.from_stats(head["output_scaler"]), dec(head["head_lo"]), dec(head["head_hi"]),
                    seed=int(head["seed"]), adam=adam, info=head.get("info", {}))
