"""The 12-layer scratch CNN, its training loop, feature extraction and
hyperparameter random search.

Layer inventory (in order)::

    conv1 pool1 conv2 pool2 conv3 pool3 conv4 batchnorm pool4 flatten dropout dense

Every conv applies ReLU. Batch normalization follows the fourth conv's ReLU,
so the Grad-CAM target (conv4 post-ReLU) is the deepest spatial map.
"""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import engine as E
from .dataset import Dataset
from .features import FeatureMatrix
from .rng import child_seed, make_rng

log = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass(frozen=True)
class ModelSpec:
    input_size: int = 32
    filters: tuple[int, ...] = (32, 64, 128, 128)
    kernels: tuple[int, ...] = (3, 3, 3, 3)
    stride: int = 1
    pool: int = 2
    dropout: float = 0.3
    num_classes: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if len(self.filters) != 4 or len(self.kernels) != 4:
            raise ModelError("the architecture has exactly four conv layers")
        if min(self.filters) < 1 or min(self.kernels) < 1 or self.stride < 1 or self.pool < 1:
            raise ModelError("filters, kernels, stride and pool must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        self.spatial_sizes()

    def padding(self, i: int) -> int:
        return self.kernels[i] // 2

    def spatial_sizes(self) -> list[int]:
        """Side length after each conv and each pool: [c1, p1, c2, p2, c3, p3, c4, p4]."""
        sizes = []
        s = self.input_size
        for i in range(4):
            s = E.conv_output_size(s, self.kernels[i], self.stride, self.padding(i))
            if s < 1:
                raise ModelError(f"conv{i + 1} output collapses for input size {self.input_size}")
            sizes.append(s)
            if s < self.pool:
                raise ModelError(f"pool{i + 1} window {self.pool} exceeds {s}x{s} map")
            s = (s - self.pool) // self.pool + 1
            sizes.append(s)
        return sizes

    @property
    def last_conv_size(self) -> int:
        return self.spatial_sizes()[6]

    @property
    def feature_dim(self) -> int:
        return self.filters[3] * self.spatial_sizes()[7] ** 2

    def layers(self) -> list[dict]:
        out = []
        for i in range(4):
            out.append({"kind": "conv2d", "filters": self.filters[i], "kernel": self.kernels[i],
                        "stride": self.stride, "padding": self.padding(i), "activation": "relu"})
            if i == 3:
                out.append({"kind": "batchnorm", "momentum": self.bn_momentum, "eps": self.bn_eps})
            out.append({"kind": "maxpool2d", "window": self.pool, "stride": self.pool})
        out.append({"kind": "flatten"})
        out.append({"kind": "dropout", "rate": self.dropout})
        out.append({"kind": "dense", "units": self.num_classes})
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["kernels"] = list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 42
    deterministic: bool = False
    checkpoint_interval: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.checkpoint_interval < 1:
            raise ModelError("epochs, lr and checkpoint_interval must be positive")
        if self.batch_size < 2:
            raise ModelError("batch_size must be at least 2 (batch normalization)")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.train_loss:.6f},{self.train_acc:.6f},"
                f"{self.val_loss:.6f},{self.val_acc:.6f}")


def epochs_to_csv(logs: list[EpochLog]) -> str:
    return "\n".join([EpochLog.CSV_HEADER, *(e.csv_row() for e in logs)]) + "\n"


@dataclass
class ForwardResult:
    logits: E.Tensor
    features: E.Tensor
    activation: E.Tensor


class ScratchCNN:
    """Parameters live in ``params`` (name -> Tensor); batchnorm running
    statistics in ``bn``. ``epochs_trained`` is 0 for a fresh model."""

    def __init__(self, spec: ModelSpec | None = None, seed: int = 42, dtype=None):
        self.spec = spec or ModelSpec()
        self.dtype = np.dtype(dtype or E.get_default_dtype()).type
        self.seed = seed
        self.epochs_trained = 0
        self.best_val_acc = float("nan")
        self.conv_method = "im2col"
        self.params: dict[str, E.Tensor] = {}
        rng = make_rng(seed)
        in_ch = 1
        for i, (f, k) in enumerate(zip(self.spec.filters, self.spec.kernels), start=1):
            self._kaiming(f"conv{i}.weight", (f, in_ch, k, k), in_ch * k * k, rng)
            self._zeros(f"conv{i}.bias", (f,))
            in_ch = f
        self.params["bn.gamma"] = E.Tensor(np.ones(in_ch), requires_grad=True, dtype=self.dtype)
        self._zeros("bn.beta", (in_ch,))
        d = self.spec.feature_dim
        self._kaiming("dense.weight", (d, self.spec.num_classes), d, rng)
        self._zeros("dense.bias", (self.spec.num_classes,))
        self.bn = E.BatchNormState(in_ch, dtype=self.dtype)

    def _kaiming(self, name, shape, fan_in, rng):
        bound = math.sqrt(6.0 / fan_in)
        self.params[name] = E.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, dtype=self.dtype)

    def _zeros(self, name, shape):
        self.params[name] = E.Tensor(np.zeros(shape), requires_grad=True, dtype=self.dtype)

    @property
    def is_trained(self) -> bool:
        return self.epochs_trained > 0

    def parameters(self) -> list[E.Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array needed to reproduce the model: parameters plus running stats."""
        out = {k: t.data for k, t in self.params.items()}
        out["bn.running_mean"] = self.bn.mean
        out["bn.running_var"] = self.bn.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ModelError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, v in arrays.items():
            if v.shape != expected[k].shape:
                raise ModelError(f"{k}: shape {v.shape} != expected {expected[k].shape}")
        for k, t in self.params.items():
            t.data = np.array(arrays[k], dtype=self.dtype)
        self.bn.mean = np.array(arrays["bn.running_mean"], dtype=self.dtype)
        self.bn.var = np.array(arrays["bn.running_var"], dtype=self.dtype)

    def copy(self) -> "ScratchCNN":
        return copy.deepcopy(self)

    def trunk(self, x, train: bool = False) -> E.Tensor:
        """Input to the fourth conv's post-ReLU activation (the Grad-CAM target)."""
        s = self.spec
        x = x if isinstance(x, E.Tensor) else E.Tensor(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != (1, s.input_size, s.input_size):
            raise ModelError(f"expected input [N,1,{s.input_size},{s.input_size}], got {x.shape}")
        p = self.params
        h = x
        for i in range(1, 5):
            h = E.relu(E.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], s.stride,
                                s.padding(i - 1), self.conv_method))
            if i < 4:
                h = E.maxpool2d(h, s.pool, s.pool)
        return h

    def head(self, activation: E.Tensor, train: bool = False,
             rng: np.random.Generator | None = None) -> tuple[E.Tensor, E.Tensor]:
        """Batchnorm, pool, flatten, dropout, dense. Returns (logits, features)."""
        s, p = self.spec, self.params
        h = E.batchnorm(activation, p["bn.gamma"], p["bn.beta"], self.bn, train, s.bn_momentum, s.bn_eps)
        features = E.flatten(E.maxpool2d(h, s.pool, s.pool))
        h = E.dropout(features, s.dropout, train, rng)
        return E.dense(h, p["dense.weight"], p["dense.bias"]), features

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
        activation = self.trunk(x, train)
        logits, features = self.head(activation, train, rng)
        return ForwardResult(logits, features, activation)

    def __call__(self, x, train: bool = False, rng=None) -> E.Tensor:
        return self.forward(x, train, rng).logits


# -- evaluation helpers ---------------------------------------------------------

def predict_logits(model: ScratchCNN, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with E.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.forward(images[i:i + batch_size]).logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


def evaluate_loss_acc(model: ScratchCNN, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    if len(images) == 0:
        return float("nan"), float("nan")
    logits = predict_logits(model, images)
    logp = E.log_softmax(logits.astype(np.float64))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    return loss, float(np.mean(logits.argmax(1) == labels))


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        # a size-1 batch would break train-mode batchnorm
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


@contextlib.contextmanager
def deterministic_numerics(enabled: bool):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


@dataclass
class TrainResult:
    model: ScratchCNN
    logs: list[EpochLog]
    best_model: ScratchCNN
    best_epoch: int
    best_val_acc: float


def train(model: ScratchCNN, dataset: Dataset, config: TrainConfig | None = None,
          on_epoch: Callable[[EpochLog, ScratchCNN], None] | None = None) -> TrainResult:
    """Adam on mean softmax cross-entropy over shuffled minibatches.

    Keeps a copy of the model from the epoch with the best validation
    accuracy (earliest on ties). ``on_epoch`` is called after every epoch.
    """
    config = config or TrainConfig()
    tr = dataset.subset("train")
    va = dataset.subset("val")
    if len(set(tr.labels.tolist())) < 2:
        raise ModelError("training split must contain both classes")
    if len(tr) < 2:
        raise ModelError("training split needs at least 2 images")
    rng = make_rng(child_seed(config.seed, 1))
    opt = E.Adam(model.parameters(), lr=config.lr)
    logs: list[EpochLog] = []
    best = (-1.0, 0, model.copy())
    images = tr.images.astype(model.dtype)
    with deterministic_numerics(config.deterministic):
        for epoch in range(1, config.epochs + 1):
            total_loss = 0.0
            correct = 0
            for idx in _batches(len(tr), config.batch_size, rng):
                opt.zero_grad()
                try:
                    out = model.forward(images[idx], train=True, rng=rng)
                    loss = E.softmax_cross_entropy(out.logits, tr.labels[idx])
                    loss.backward()
                    opt.step()
                except E.NonFiniteError as exc:
                    raise TrainingDiverged(epoch, str(exc)) from None
                total_loss += loss.item() * len(idx)
                correct += int(np.sum(out.logits.data.argmax(1) == tr.labels[idx]))
            model.epochs_trained += 1
            val_loss, val_acc = evaluate_loss_acc(model, va.images, va.labels)
            entry = EpochLog(epoch, total_loss / len(tr), correct / len(tr), val_loss, val_acc)
            if not math.isfinite(entry.train_loss):
                raise TrainingDiverged(epoch)
            logs.append(entry)
            log.info("epoch %d: %s", epoch, entry.csv_row())
            score = val_acc if math.isfinite(val_acc) else entry.train_acc
            if score > best[0]:
                model.best_val_acc = score
                best = (score, epoch, model.copy())
            if on_epoch is not None:
                on_epoch(entry, model)
    best_model = best[2]
    best_model.best_val_acc = best[0]
    return TrainResult(model, logs, best_model, best[1], best[0])


def extract_features(model: ScratchCNN, dataset: Dataset, batch_size: int = 64) -> FeatureMatrix:
    """Flatten-layer activations in eval mode, one row per image in input order."""
    if not model.is_trained:
        raise ModelError("feature extraction needs a trained model")
    rows = []
    with E.no_grad():
        for i in range(0, len(dataset), batch_size):
            rows.append(model.forward(dataset.images[i:i + batch_size]).features.data)
    X = np.concatenate(rows) if rows else np.zeros((0, model.spec.feature_dim))
    return FeatureMatrix(X, dataset.labels, dataset.ids)


# -- random search --------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    filters: tuple[int, ...] = (16, 32, 64, 128)
    kernels: tuple[int, ...] = (3, 5)
    dropout: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5)
    lr: tuple[float, float] = (1e-4, 1e-2)
    batch_size: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        if not (self.filters and self.kernels and self.dropout and self.batch_size):
            raise ModelError("search space has an empty dimension")
        if not 0 < self.lr[0] <= self.lr[1]:
            raise ModelError("lr range must be positive and ordered")

    def sample(self, rng: np.random.Generator, input_size: int, seed: int, epochs: int,
               deterministic: bool = False) -> tuple[ModelSpec, TrainConfig]:
        pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
        filters = tuple(pick(self.filters) for _ in range(4))
        kernels = tuple(pick(self.kernels) for _ in range(4))
        dropout = pick(self.dropout)
        lr = float(math.exp(rng.uniform(math.log(self.lr[0]), math.log(self.lr[1]))))
        batch = pick(self.batch_size)
        spec = ModelSpec(input_size=input_size, filters=filters, kernels=kernels, dropout=dropout)
        cfg = TrainConfig(epochs=epochs, batch_size=batch, lr=lr, seed=seed, deterministic=deterministic)
        return spec, cfg


@dataclass
class Trial:
    index: int
    spec: ModelSpec
    config: TrainConfig
    val_acc: float
    val_loss: float
    error: str = ""


@dataclass
class SearchResult:
    best_spec: ModelSpec
    best_config: TrainConfig
    best_index: int
    trials: list[Trial] = field(default_factory=list)


def random_search(dataset: Dataset, space: SearchSpace | None = None, trials: int = 5,
                  budget_epochs: int = 3, seed: int = 42, deterministic: bool = False) -> SearchResult:
    """Train ``trials`` sampled configurations for ``budget_epochs`` each.

    The winner has the highest validation accuracy, then the lowest
    validation loss, then the lowest trial index. A diverging trial scores 0.
    """
    if trials < 1:
        raise ModelError("trials must be at least 1")
    space = space or SearchSpace()
    rng = make_rng(seed)
    results: list[Trial] = []
    for i in range(trials):
        trial_seed = child_seed(seed, i)
        spec, cfg = space.sample(rng, dataset.size, trial_seed, budget_epochs, deterministic)
        try:
            res = train(ScratchCNN(spec, seed=trial_seed), dataset, cfg)
            best_log = res.logs[res.best_epoch - 1]
            trial = Trial(i, spec, cfg, res.best_val_acc, best_log.val_loss)
        except TrainingDiverged as exc:
            trial = Trial(i, spec, cfg, 0.0, math.inf, str(exc))
        log.info("trial %d: val_acc=%.4f val_loss=%.4f", i, trial.val_acc, trial.val_loss)
        results.append(trial)
    loss_key = lambda t: t.val_loss if math.isfinite(t.val_loss) else math.inf  # noqa: E731
    best = min(results, key=lambda t: (-t.val_acc, loss_key(t), t.index))
    return SearchResult(best.spec, best.config, best.index, results)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
