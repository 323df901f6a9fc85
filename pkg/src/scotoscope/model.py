"""MLP and 1D-CNN classifiers, their training loop and evaluation.

Both models take a window of ``input_len`` samples and put a normalization
layer at the input: a learnable batch norm (``BN``) or, for windows already
divided by the subject mean, an identity (``PP``).
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn_engine as nn
from .errors import (
    BatchTooSmall,
    ConfigError,
    EmptyTestSet,
    InputTooShort,
    ParseError,
    ShapeMismatch,
    SingleClassTrainSet,
)

LABELS = ("HC", "PD")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

CNN_MIN_INPUT = 16


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "MLP" or "CNN1D"
    input_len: int
    norm_mode: str  # "BN" or "PP"
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.kind not in ("MLP", "CNN1D"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.norm_mode not in ("BN", "PP"):
            raise ConfigError(f"unknown norm mode {self.norm_mode!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")

    def layer_shapes(self):
        """Output shape (without batch axis) after each named stage."""
        n = self.input_len
        if self.kind == "MLP":
            return [("input", (n,)), ("dense1", (128,)), ("dense2", (64,)), ("logits", (2,))]
        c1 = n - 5 + 1
        p = c1 // 2
        c2 = p - 3 + 1
        return [
            ("input", (n,)),
            ("conv1", (16, c1)),
            ("pool", (16, p)),
            ("conv2", (32, c2)),
            ("flatten", (32 * c2,)),
            ("dense", (10,)),
            ("logits", (2,)),
        ]


def build_cnn(input_len, norm_mode="BN", dropout_rate=0.2):
    """Batch norm -> dropout -> conv(16, 5) -> relu -> maxpool(2) -> conv(32, 3)
    -> relu -> flatten -> dense(10) -> relu -> dense(2) -> softmax."""
    if input_len < CNN_MIN_INPUT:
        raise InputTooShort(f"1D-CNN needs at least {CNN_MIN_INPUT} samples, got {input_len}")
    return ModelSpec("CNN1D", int(input_len), norm_mode, dropout_rate)


def build_mlp(input_len, norm_mode="BN", dropout_rate=0.2):
    """Batch norm -> dropout -> dense(128) -> relu -> dense(64) -> relu
    -> dense(2) -> softmax."""
    if input_len < 1:
        raise InputTooShort("MLP needs at least one input sample")
    return ModelSpec("MLP", int(input_len), norm_mode, dropout_rate)


def build_model(arch, input_len, norm_mode, dropout_rate=0.2):
    arch = arch.upper()
    if arch in ("CNN", "CNN1D", "1D-CNN"):
        return build_cnn(input_len, norm_mode, dropout_rate)
    if arch == "MLP":
        return build_mlp(input_len, norm_mode, dropout_rate)
    raise ConfigError(f"unknown architecture {arch!r}")


class Network:
    """Fixed sequence of layers with a softmax head."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        rng = np.random.default_rng([seed, 0])
        n = spec.input_len
        norm = nn.BatchNorm(n) if spec.norm_mode == "BN" else nn.Identity()
        layers = [norm, nn.Dropout(spec.dropout_rate, seed=[seed, 1])]
        if spec.kind == "MLP":
            layers += [
                nn.Dense(n, 128, rng), nn.ReLU(),
                nn.Dense(128, 64, rng), nn.ReLU(),
                nn.Dense(64, 2, rng),
            ]
        else:
            flat = spec.layer_shapes()[4][1][0]
            layers += [
                nn.AddChannel(),
                # input gradient only matters if a trainable layer sits below
                nn.Conv1D(1, 16, 5, rng, need_input_grad=spec.norm_mode == "BN"), nn.ReLU(),
                nn.MaxPool1D(2),
                nn.Conv1D(16, 32, 3, rng), nn.ReLU(),
                nn.Flatten(),
                nn.Dense(flat, 10, rng), nn.ReLU(),
                nn.Dense(10, 2, rng),
            ]
        self.layers = layers

    def logits(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_len:
            raise ShapeMismatch(f"expected (batch, {self.spec.input_len}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def forward(self, x, train=False):
        """Class probabilities, shape (batch, 2)."""
        return nn.softmax(self.logits(x, train))

    def backward(self, grad_logits):
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break
        return g

    def predict(self, x, batch_size=256):
        x = np.asarray(x, dtype=np.float64)
        out = [self.logits(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def named_params(self):
        return {
            f"{i}.{name}": arr
            for i, layer in enumerate(self.layers)
            for name, arr in layer.params.items()
        }

    def named_grads(self):
        return {
            f"{i}.{name}": arr
            for i, layer in enumerate(self.layers)
            for name, arr in layer.grads.items()
        }

    def n_params(self):
        return sum(p.size for p in self.named_params().values())

    def state(self):
        """Ordered list of every persisted array (params then buffers, per layer)."""
        arrays = []
        for layer in self.layers:
            arrays += [layer.params[k] for k in sorted(layer.params)]
            arrays += [layer.buffers()[k] for k in sorted(layer.buffers())]
        return arrays

    def load_state(self, arrays):
        it = iter(arrays)
        for layer in self.layers:
            for k in sorted(layer.params):
                src = next(it)
                if src.shape != layer.params[k].shape:
                    raise ShapeMismatch(f"stored array shape {src.shape} != {layer.params[k].shape}")
                layer.params[k][...] = src
            for k, buf in sorted(layer.buffers().items()):
                buf[...] = next(it)

    def architecture(self):
        return {"spec": asdict(self.spec), "layers": [layer.describe() for layer in self.layers]}


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    early_stop_patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.early_stop_patience < 1 or self.lr <= 0:
            raise ConfigError("max_epochs, early_stop_patience and lr must be positive")
        if self.batch_size < 2:
            raise BatchTooSmall("batch_size must be at least 2 (batch norm)")


@dataclass
class TrainedModel:
    spec: ModelSpec
    network: Network
    history: list = field(default_factory=list)  # dicts: epoch, loss, val_acc
    best_epoch: int = 0

    def save(self, path):
        arch = self.network.architecture()
        arch["best_epoch"] = self.best_epoch
        nn.write_params(path, self.network.state(), arch)

    @classmethod
    def load(cls, path):
        try:
            with open(str(path) + ".json", encoding="utf-8") as fh:
                arch = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read architecture sidecar: {exc}", path=str(path) + ".json") from exc
        spec = ModelSpec(**arch["spec"])
        net = Network(spec)
        net.load_state(nn.read_params(path))
        return cls(spec, net, [], arch.get("best_epoch", 0))


def windows_to_arrays(windows):
    """Stack windows into ``(X, y)`` with HC -> 0, PD -> 1."""
    if not windows:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    x = np.stack([w.values for w in windows]).astype(np.float64)
    y = np.array([LABEL_INDEX[w.label] for w in windows], dtype=np.int64)
    return x, y


def _as_arrays(data):
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    return windows_to_arrays(data)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    starts = list(range(0, n, batch_size))
    # a trailing batch of one cannot be batch-normalized; fold it into the previous
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    bounds = starts[1:] + [n]
    return [order[s:e] for s, e in zip(starts, bounds)]


def train(spec, train_data, val_data, config=TrainConfig(), on_epoch=None):
    """Mini-batch Adam on softmax cross-entropy with early stopping.

    ``train_data`` and ``val_data`` are lists of windows or ``(X, y)`` pairs.
    The returned model carries the parameters of the epoch with the best
    validation accuracy (earliest on ties). ``on_epoch`` is called with each
    history record as it is produced.
    """
    x_tr, y_tr = _as_arrays(train_data)
    x_va, y_va = _as_arrays(val_data)
    if len(np.unique(y_tr)) < 2:
        raise SingleClassTrainSet("training set must contain both classes")
    if len(x_tr) < 2:
        raise BatchTooSmall("need at least two training windows")
    if x_tr.shape[1] != spec.input_len:
        raise ShapeMismatch(f"windows have {x_tr.shape[1]} samples, model expects {spec.input_len}")

    net = Network(spec, seed=config.seed)
    state = nn.AdamState()
    params = net.named_params()
    shuffle_rng = np.random.default_rng([config.seed, 2])

    history = []
    best = (-1.0, 0, None)
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(x_tr), config.batch_size, shuffle_rng):
            logits = net.logits(x_tr[idx], train=True)
            loss, grad = nn.softmax_cross_entropy(logits, y_tr[idx])
            net.backward(grad)
            nn.adam_step(params, net.named_grads(), state, lr=config.lr)
            total += loss * len(idx)
            count += len(idx)
        loss = total / count
        if not np.isfinite(loss):
            raise FloatingPointError(f"training loss diverged at epoch {epoch}")
        val_acc = accuracy(net, x_va, y_va) if len(x_va) else float("nan")
        record = {"epoch": epoch, "loss": loss, "val_acc": val_acc}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if val_acc > best[0]:
            best = (val_acc, epoch, [a.copy() for a in net.state()])
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break
    if best[2] is not None:
        net.load_state(best[2])
    return TrainedModel(spec, net, history, best[1] or len(history))


def accuracy(network, x, y):
    if len(x) == 0:
        raise EmptyTestSet("cannot score an empty set")
    return float(np.mean(network.predict(x) == y))


def evaluate(model, test_data):
    """Fraction of test windows whose argmax prediction matches the label."""
    net = model.network if isinstance(model, TrainedModel) else model
    x, y = _as_arrays(test_data)
    return accuracy(net, x, y)
