"""Two-layer perceptron with hand-written backprop, and its two finetuning modes.

``train_shira`` masks weight gradients with a Hadamard product right before
the optimizer step, so every weight whose mask bit is 0 keeps its initial
value bit for bit. ``train_lora`` freezes the base weights and learns
factors ``A (n x r)``, ``B (r x m)`` whose scaled product ``scale * A @ B``
is added to the target weight in the forward pass.

Layout: ``y = W2 @ tanh(W1 @ x + b1) + b2`` with row-vector batches, i.e.
``X`` has shape ``(batch, n_in)``.
"""

from __future__ import annotations

import csv
import io
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError, TrainingError
from .store import SparseAdapter, apply

WEIGHT_TENSORS = ("W1", "W2")
BIAS_TENSORS = ("b1", "b2")
SCALING_RULES = ("alpha_over_r", "alpha_over_sqrt_r", "unit")
ACTIVATIONS = ("tanh", "identity")
# weights beyond this cannot be stored as adapter values; treated as divergence
STORABLE_MAX = float(np.finfo(np.float32).max)


def _storable(arrays):
    return all(np.abs(a).max(initial=0.0) <= STORABLE_MAX for a in arrays)


@dataclass
class ToyModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.W1 = np.array(self.W1, dtype=np.float64)
        self.W2 = np.array(self.W2, dtype=np.float64)
        self.b1 = np.array(self.b1, dtype=np.float64).ravel()
        self.b2 = np.array(self.b2, dtype=np.float64).ravel()
        if self.W1.ndim != 2 or self.W2.ndim != 2:
            raise ShapeError("weights must be 2-D")
        if self.W2.shape[1] != self.W1.shape[0]:
            raise ShapeError(f"W2 {self.W2.shape} does not follow W1 {self.W1.shape}")
        if self.b1.size != self.W1.shape[0] or self.b2.size != self.W2.shape[0]:
            raise ShapeError("bias sizes do not match weights")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_in(self):
        return self.W1.shape[1]

    @property
    def n_out(self):
        return self.W2.shape[0]

    def copy(self):
        return ToyModel(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.activation)

    def tensors(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def with_weights(self, **weights):
        m = self.copy()
        for name, value in weights.items():
            setattr(m, name, np.array(value, dtype=np.float64))
        m.__post_init__()
        return m

    def n_params(self):
        return sum(t.size for t in self.tensors().values())


def init_model(n_in=64, n_hidden=128, n_out=32, seed=0, activation="tanh"):
    """Random model with ``N(0, 1/fan_in)`` weights and ``N(0, 0.01)`` biases."""
    rng = np.random.default_rng(seed)
    return ToyModel(
        W1=rng.standard_normal((n_hidden, n_in)) / math.sqrt(n_in),
        b1=0.1 * rng.standard_normal(n_hidden),
        W2=rng.standard_normal((n_out, n_hidden)) / math.sqrt(n_hidden),
        b2=0.1 * rng.standard_normal(n_out),
        activation=activation,
    )


def _act(model, z):
    return np.tanh(z) if model.activation == "tanh" else z


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_in:
        raise ShapeError(f"input must have shape (batch, {model.n_in}), got {x.shape}")
    return x


def forward(model, x):
    x = _check_input(model, x)
    h = _act(model, x @ model.W1.T + model.b1)
    return h @ model.W2.T + model.b2


def mse(y, target):
    return float(np.mean((y - target) ** 2))


def backward(model, x, target, loss="mse"):
    """Gradients of the mean squared error w.r.t. ``W1, b1, W2, b2``."""
    if loss != "mse":
        raise ParameterError(f"unsupported loss {loss!r}")
    x = _check_input(model, x)
    target = np.asarray(target, dtype=np.float64)
    h = _act(model, x @ model.W1.T + model.b1)
    y = h @ model.W2.T + model.b2
    if target.shape != y.shape:
        raise ShapeError(f"target shape {target.shape} does not match output {y.shape}")
    dy = 2.0 * (y - target) / y.size
    dh = dy @ model.W2
    dz = dh * (1.0 - h * h) if model.activation == "tanh" else dh
    return {
        "W1": dz.T @ x,
        "b1": dz.sum(axis=0),
        "W2": dy.T @ h,
        "b2": dy.sum(axis=0),
    }


def loss_and_grads(model, x, target):
    grads = backward(model, x, target)
    return mse(forward(model, x), target), grads


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    steps: int = 2000
    batch_size: int = 64
    optimizer: str = "sgd"
    seed: int = 0
    loss: str = "mse"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ParameterError("steps must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError("optimizer must be 'sgd' or 'adam'")
        if self.loss != "mse":
            raise ParameterError("only the mse loss is supported")


class _Optimizer:
    """SGD / Adam over a dict of named arrays, updated in place."""

    def __init__(self, config):
        self.config = config
        self.t = 0
        self.m = {}
        self.v = {}

    def steps(self, grads):
        cfg = self.config
        if cfg.optimizer == "sgd":
            return {k: cfg.learning_rate * g for k, g in grads.items()}
        self.t += 1
        b1, b2 = cfg.betas
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            out[k] = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        return out


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    FIELDS = ("step", "loss", "grad_norm_masked", "grad_norm_total")

    def record(self, step, loss, masked, total):
        self.rows.append({"step": step, "loss": loss, "grad_norm_masked": masked, "grad_norm_total": total})

    @property
    def losses(self):
        return np.array([r["loss"] for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.FIELDS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# Teacher-student tasks


@dataclass
class TeacherTask:
    """Regression onto a teacher whose weights carry a sparse perturbation.

    Inputs are Gaussian with per-feature standard deviation ``input_scale``.
    The student starts from ``teacher`` (the "pretrained" model) and has to
    learn the perturbation.
    """

    teacher: ToyModel
    perturbation: dict
    input_scale: np.ndarray = None

    def __post_init__(self):
        if isinstance(self.perturbation, SparseAdapter):
            self.perturbation = {self.perturbation.name: self.perturbation}
        for name, adapter in self.perturbation.items():
            if adapter.density > 0.02 + 1e-12:
                raise ParameterError(f"perturbation of {name} denser than 2%")
        if self.input_scale is None:
            self.input_scale = np.ones(self.teacher.n_in)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64)
        self.target_model = self.teacher.with_weights(
            **{name: apply(getattr(self.teacher, name), a) for name, a in self.perturbation.items()}
        )

    def sample(self, n, rng):
        x = rng.standard_normal((n, self.teacher.n_in)) * self.input_scale
        return x, forward(self.target_model, x)

    def heldout(self, n=1024, seed=10_000):
        return self.sample(n, np.random.default_rng(seed))

    def support_masks(self):
        """Masks equal to the perturbation support (the oracle mask)."""
        from .masks import Mask

        masks = {}
        for name in WEIGHT_TENSORS:
            rows, cols = getattr(self.teacher, name).shape
            idx = self.perturbation[name].indices if name in self.perturbation else []
            masks[name] = Mask.from_indices(rows, cols, idx)
        return masks


def make_teacher_task(base, density=0.02, scale=1.0, tensor="W1", seed=0, active_features=None, leak=0.0):
    """Perturb ``density`` of ``tensor`` with ``N(0, scale^2)`` values.

    ``active_features`` restricts both the input distribution and, for
    ``W1``, the perturbed columns to a subset of input features; inactive
    features get standard deviation ``leak``.
    """
    rng = np.random.default_rng(seed)
    rows, cols = getattr(base, tensor).shape
    allowed = np.arange(rows * cols)
    input_scale = np.ones(base.n_in)
    if active_features is not None:
        active = np.asarray(active_features)
        input_scale = np.full(base.n_in, float(leak))
        input_scale[active] = 1.0
        if tensor == "W1":
            allowed = allowed[np.isin(allowed % cols, active)]
    k = int(math.floor(density * rows * cols))
    idx = np.sort(rng.choice(allowed, size=k, replace=False))
    vals = scale * rng.standard_normal(k)
    vals[vals == 0] = scale
    return TeacherTask(base, {tensor: SparseAdapter(tensor, rows, cols, idx, vals)}, input_scale)


def evaluate(model, task, n=1024, seed=10_000):
    x, y = task.heldout(n, seed)
    return mse(forward(model, x), y)


def _norm(arrays):
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))


def train_shira(model, masks, task, config, train_biases=False):
    """Finetune only the masked weight entries.

    ``masks`` maps weight names to :class:`~shira.masks.Mask`; weights without
    a mask are frozen. ``masks=None`` trains every weight with no masking at
    all (plain finetuning). Biases are frozen unless ``train_biases``.
    Returns ``(trained_model, TrainLog)``; the input model is not modified.
    """
    out = model.copy()
    bits = {}
    unmasked = masks is None
    for name in WEIGHT_TENSORS:
        if unmasked:
            break
        w = getattr(out, name)
        if name in masks:
            mask = masks[name]
            b = mask.bits if hasattr(mask, "bits") else np.asarray(mask, dtype=bool)
            if b.shape != w.shape:
                raise ShapeError(f"mask for {name} has shape {b.shape}, weight has {w.shape}")
            bits[name] = b
        else:
            bits[name] = np.zeros(w.shape, dtype=bool)
    trainable = list(WEIGHT_TENSORS) if unmasked else [n for n in WEIGHT_TENSORS if bits[n].any()]
    if train_biases:
        trainable += list(BIAS_TENSORS)

    rng = np.random.default_rng(config.seed)
    opt = _Optimizer(config)
    log = TrainLog()
    for step in range(config.steps):
        x, y = task.sample(config.batch_size, rng)
        loss, grads = loss_and_grads(out, x, y)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}", step=step)
        total = _norm(grads[n] for n in WEIGHT_TENSORS)
        if unmasked:
            masked = {n: grads[n] for n in WEIGHT_TENSORS}
        else:
            masked = {n: grads[n] * bits[n] for n in WEIGHT_TENSORS if n in trainable}
        if train_biases:
            masked.update({n: grads[n] for n in BIAS_TENSORS})
        log.record(step, loss, _norm(masked[n] for n in masked if n in WEIGHT_TENSORS), total)
        updates = opt.steps(masked)
        for name, delta in updates.items():
            param = getattr(out, name)
            if name in bits:
                np.subtract(param, delta, out=param, where=bits[name])
            else:
                param -= delta
        if not _storable(getattr(out, n) for n in trainable):
            raise TrainingError(f"weights left the storable range at step {step}", step=step)
    return out, log


# LoRA baseline


@dataclass
class LoraAdapter:
    """Low-rank update ``scale * A @ B`` for the weight named ``target``."""

    target: str
    A: np.ndarray
    B: np.ndarray
    alpha: float = 1.0
    scaling_rule: str = "alpha_over_r"

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.float64)
        self.B = np.array(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ShapeError(f"LoRA factors {self.A.shape} and {self.B.shape} are incompatible")
        if self.scaling_rule not in SCALING_RULES:
            raise ParameterError(f"scaling_rule must be one of {SCALING_RULES}")

    @property
    def r(self):
        return self.A.shape[1]

    def effective_scale(self):
        return effective_scale(self)

    def delta(self):
        return self.effective_scale() * (self.A @ self.B)


def effective_scale(adapter):
    """``alpha / r``, ``alpha / sqrt(r)`` or 1 depending on the scaling rule.

    A :class:`~shira.store.SparseAdapter` has no rank-dependent scale: 1.
    """
    if isinstance(adapter, SparseAdapter):
        return 1.0
    rule = adapter.scaling_rule
    if rule == "alpha_over_r":
        return adapter.alpha / adapter.r
    if rule == "alpha_over_sqrt_r":
        return adapter.alpha / math.sqrt(adapter.r)
    return 1.0


def init_lora(target, shape, r, alpha=1.0, scaling_rule="alpha_over_r", init="input_gaussian", seed=0):
    """Fresh LoRA factors for a weight of ``shape = (n, m)``.

    ``input_gaussian``: ``B ~ N(0, 1/m)``, ``A = 0`` (the usual choice).
    ``output_gaussian``: ``A ~ N(0, 1)``, ``B = 0``.
    ``zeros``: both zero; a saddle point where nothing is learned.
    """
    n, m = shape
    if not 1 <= r <= min(n, m):
        raise ParameterError(f"rank {r} outside [1, {min(n, m)}]")
    rng = np.random.default_rng(seed)
    A = np.zeros((n, r))
    B = np.zeros((r, m))
    if init == "input_gaussian":
        B = rng.standard_normal((r, m)) / math.sqrt(m)
    elif init == "output_gaussian":
        A = rng.standard_normal((n, r))
    elif init != "zeros":
        raise ParameterError(f"unknown init {init!r}")
    return LoraAdapter(target, A, B, alpha, scaling_rule)


def fuse_loras(model, loras):
    """Model with every LoRA update added densely to its target weight."""
    weights = {}
    for lora in loras.values() if isinstance(loras, dict) else loras:
        base = weights.get(lora.target, getattr(model, lora.target))
        weights[lora.target] = base + lora.delta()
    return model.with_weights(**weights)


def lora_gradients(model, loras, x, target):
    """Loss and gradients w.r.t. every LoRA factor (base weights frozen)."""
    fused = fuse_loras(model, loras)
    loss, grads = loss_and_grads(fused, x, target)
    out = {}
    for key, lora in loras.items():
        g = grads[lora.target]
        s = lora.effective_scale()
        out[(key, "A")] = s * (g @ lora.B.T)
        out[(key, "B")] = s * (lora.A.T @ g)
    return loss, out, grads


def train_lora(model, targets, r, alpha, scaling_rule, config, task, init="input_gaussian"):
    """Train rank-``r`` LoRA factors on ``targets`` with the base model frozen.

    Returns ``({target: LoraAdapter}, TrainLog)``.
    """
    if isinstance(targets, str):
        targets = [targets]
    loras = {}
    for i, name in enumerate(targets):
        if name not in WEIGHT_TENSORS:
            raise ParameterError(f"unknown target tensor {name!r}")
        loras[name] = init_lora(name, getattr(model, name).shape, r, alpha, scaling_rule, init, seed=config.seed + 7919 * (i + 1))
    rng = np.random.default_rng(config.seed)
    opt = _Optimizer(config)
    log = TrainLog()
    for step in range(config.steps):
        x, y = task.sample(config.batch_size, rng)
        loss, grads, dense = lora_gradients(model, loras, x, y)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}", step=step)
        log.record(step, loss, _norm(grads.values()), _norm(dense[n] for n in WEIGHT_TENSORS))
        updates = opt.steps(grads)
        for (key, factor), delta in updates.items():
            param = getattr(loras[key], factor)
            param -= delta
        if not _storable(m for l in loras.values() for m in (l.A, l.B)):
            raise TrainingError(f"LoRA factors left the storable range at step {step}", step=step)
    return loras, log


def extract_adapters(trained, base):
    """Sparse adapters ``W_new - W`` for every weight that changed."""
    from .store import extract

    out = {}
    for name in WEIGHT_TENSORS:
        a = extract(getattr(trained, name), getattr(base, name), name)
        if a.nnz:
            out[name] = a
    return out


def apply_adapters(model, adapters, alpha=1.0):
    """Model with sparse adapters switched in (``W + alpha * S``)."""
    if isinstance(adapters, SparseAdapter):
        adapters = [adapters]
    weights = {}
    for a in adapters.values() if isinstance(adapters, dict) else adapters:
        base = weights.get(a.name, getattr(model, a.name))
        weights[a.name] = apply(base, a, alpha)
    return model.with_weights(**weights)


def savez_stable(path, arrays):
    """Like ``np.savez`` but byte-for-byte reproducible (fixed zip timestamps)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def save_model(model, path):
    arrays = {"W1": model.W1, "b1": model.b1, "W2": model.W2, "b2": model.b2, "activation": np.array(model.activation)}
    savez_stable(path, arrays)


def load_model(path):
    with np.load(path) as data:
        return ToyModel(data["W1"], data["b1"], data["W2"], data["b2"], str(data["activation"]))


def save_loras(loras, path):
    arrays = {}
    for name, l in loras.items():
        arrays[f"{name}.A"] = l.A
        arrays[f"{name}.B"] = l.B
        arrays[f"{name}.meta"] = np.array([l.alpha, SCALING_RULES.index(l.scaling_rule)], dtype=np.float64)
    savez_stable(path, arrays)


def load_loras(path):
    out = {}
    with np.load(path) as data:
        names = sorted({k.rsplit(".", 1)[0] for k in data.files})
        for name in names:
            alpha, rule = data[f"{name}.meta"]
            out[name] = LoraAdapter(name, data[f"{name}.A"], data[f"{name}.B"], float(alpha), SCALING_RULES[int(rule)])
    return out

