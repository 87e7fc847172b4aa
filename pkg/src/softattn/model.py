"""Model assembly, loss, optimizer, training loop and evaluation."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .attention import SoftAttentionBlock, SoftAttentionConfig
from .data import Sample, stack_samples
from .errors import ContractError, NumericError, ParameterError, ShapeError
from .metrics import ConfusionMatrix
from .tensor import Parameter, SeededRng, Tape, Tensor, record, seeded_rng

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


# ---------------------------------------------------------------- loss


def softmax_scores(s: Tensor) -> Tensor:
    """Class probabilities along the last axis (max-subtracted)."""
    if not np.all(np.isfinite(s.data)):
        raise NumericError("softmax_scores got non-finite logits")
    e = np.exp(s.data - s.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return record(
        "softmax", p, (s,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    )


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cce_loss(probs: Tensor, targets) -> Tensor:
    """Batch-mean categorical cross entropy; log is clamped at log(1e-12)."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    p = probs.data
    if p.ndim == 1:
        p, t = p[None, :], t.reshape(1, -1)
    if t.shape != p.shape:
        raise ShapeError(f"targets {t.shape} do not match probabilities {p.shape}")
    if not (((t == 0.0) | (t == 1.0)).all() and (t.sum(axis=1) == 1).all()):
        raise ContractError("targets must be one-hot rows")
    n = p.shape[0]
    clipped = np.maximum(p, LOG_CLAMP)
    loss = -np.sum(t * np.log(clipped)) / n
    grad = np.where(p > LOG_CLAMP, -t / clipped, 0.0) / n
    shape = probs.shape
    return record("cce", np.array(loss), (probs,), lambda g: ((g * grad).reshape(shape),))


# ---------------------------------------------------------------- graph


def build_layer(spec: dict, rng: SeededRng | None = None) -> nn.Layer:
    kind = spec["kind"]
    if kind == "conv2d":
        return nn.Conv2dLayer(spec["in_ch"], spec["out_ch"], tuple(spec["kernel"]),
                              spec["padding"], spec["stride"], spec["bias"], rng)
    if kind == "batchnorm":
        return nn.BatchNormLayer(spec["ch"], spec["momentum"], spec["eps"])
    if kind == "relu":
        return nn.ReLULayer()
    if kind == "maxpool":
        return nn.MaxPoolLayer()
    if kind == "flatten":
        return nn.FlattenLayer()
    if kind == "dropout":
        return nn.DropoutLayer(spec["rate"])
    if kind == "dense":
        return nn.DenseLayer(spec["in_features"], spec["out_features"], rng)
    if kind == "soft_attention":
        kernel = spec["kernel"] if spec["kernel"] == "full" else tuple(spec["kernel"])
        cfg = SoftAttentionConfig(spec["k"], kernel, spec["gamma_init"], spec["dropout"])
        spatial = tuple(spec["spatial"]) if spec.get("spatial") else None
        return SoftAttentionBlock(spec["depth"], cfg, rng or seeded_rng(0), spatial)
    raise ParameterError(f"unknown layer kind {kind!r}")


class ModelGraph:
    """Ordered layers ending in a dense layer with one output per class."""

    def __init__(self, layers: Sequence[nn.Layer], num_classes: int,
                 input_shape: tuple[int, int, int] = (32, 32, 3)):
        self.layers = list(layers)
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        sa = [i for i, layer in enumerate(self.layers) if isinstance(layer, SoftAttentionBlock)]
        if len(sa) > 1:
            raise ParameterError("at most one soft-attention insertion is allowed")
        self.sa_index = sa[0] if sa else None
        last = self.layers[-1] if self.layers else None
        if not isinstance(last, nn.DenseLayer) or last.out_features != num_classes:
            raise ParameterError(f"final layer must be dense with {num_classes} outputs")

    @property
    def sa_block(self) -> SoftAttentionBlock | None:
        return None if self.sa_index is None else self.layers[self.sa_index]

    def forward(self, x, mode: str = nn.INFER, rng: SeededRng | None = None,
                dropout: bool = True, trace: dict | None = None) -> Tensor:
        """Logits ``[n, C]`` for a batch ``[n, H, W, 3]``.

        When ``trace`` is given, every layer output is stored under its index.
        """
        out = x if isinstance(x, Tensor) else Tensor(x)
        if out.ndim == 3:
            out = T.reshape(out, (1,) + out.shape)
        for i, layer in enumerate(self.layers):
            out = layer.forward(out, mode, rng, dropout)
            if trace is not None:
                trace[i] = out
        return out

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_arrays(self) -> dict[str, np.ndarray]:
        named = {}
        for i, layer in enumerate(self.layers):
            for p in layer.parameters():
                named[f"{i}.{p.name}"] = p.data
            for name, buf in layer.buffers().items():
                named[f"{i}.{name}"] = buf
        return named

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        arrays = self.named_arrays()
        if set(arrays) != set(state):
            raise ParameterError("state dict keys do not match the model")
        for k, arr in arrays.items():
            if arr.shape != state[k].shape:
                raise ShapeError(f"{k}: expected {arr.shape}, got {state[k].shape}")
            arr[...] = state[k]

    def spec(self) -> dict:
        return {"num_classes": self.num_classes, "input_shape": list(self.input_shape),
                "layers": [layer.spec() for layer in self.layers]}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def save(self, path) -> None:
        arrays = {f"param:{k}": v for k, v in self.named_arrays().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __spec__=np.array(json.dumps(self.spec(), sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "ModelGraph":
        with np.load(path) as z:
            spec = json.loads(str(z["__spec__"]))
            state = {k[len("param:"):]: z[k] for k in z.files if k.startswith("param:")}
        model = cls([build_layer(s) for s in spec["layers"]], spec["num_classes"],
                    tuple(spec["input_shape"]))
        model.load_state_dict(state)
        return model


def build_mininet(num_classes: int, sa: SoftAttentionConfig | None = None,
                  rng: SeededRng | None = None, input_size: int = 32) -> ModelGraph:
    """Two conv stages, optional soft attention at the second stage, dense head.

    Convolutions feeding batch norm carry no bias (the norm's shift subsumes
    it).  With attention the block supplies the second 2x2 pooling.
    """
    if num_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {num_classes}")
    if input_size < 4 or input_size % 4:
        raise ParameterError(f"input size must be a positive multiple of 4, got {input_size}")
    rng = rng if rng is not None else seeded_rng(0)
    layers: list[nn.Layer] = [
        nn.Conv2dLayer(3, 8, (3, 3), bias=False, rng=rng),
        nn.BatchNormLayer(8),
        nn.ReLULayer(),
        nn.MaxPoolLayer(),
        nn.Conv2dLayer(8, 16, (3, 3), bias=False, rng=rng),
        nn.BatchNormLayer(16),
        nn.ReLULayer(),
    ]
    side = input_size // 2
    if sa is not None:
        layers.append(SoftAttentionBlock(16, sa, rng, (side, side)))
        channels = 32
    else:
        layers.append(nn.MaxPoolLayer())
        channels = 16
    layers += [nn.FlattenLayer(), nn.DenseLayer((side // 2) ** 2 * channels, num_classes, rng)]
    return ModelGraph(layers, num_classes, (input_size, input_size, 3))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.01
    eps: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    moments: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update in place; grads are zeroed afterwards."""
    params = [p for p in params if p.trainable]
    if not params:
        raise ContractError("adam_step called with no trainable parameters")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p in params:
        m, v = state.moments.setdefault(p, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad ** 2
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


# ---------------------------------------------------------------- training


class EarlyStopping:
    """Stop after ``patience`` epochs without a strictly lower validation loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ParameterError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self.best_state: dict | None = None
        self.since_improvement = 0

    def update(self, epoch: int, val_loss: float, model: ModelGraph) -> bool:
        """Record an epoch's loss; True means training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch = val_loss, epoch
            self.best_state = model.state_dict()
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        return self.since_improvement >= self.patience

    def restore(self, model: ModelGraph) -> None:
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


def predict_proba(model: ModelGraph, images: np.ndarray, batch: int = 64) -> np.ndarray:
    chunks = [softmax_scores(model.forward(images[i:i + batch], nn.INFER)).data
              for i in range(0, len(images), batch)]
    return np.concatenate(chunks)


def loss_and_accuracy(model: ModelGraph, samples: Sequence[Sample]) -> tuple[float, float]:
    x, y = stack_samples(samples)
    probs = predict_proba(model, x)
    loss = cce_loss(Tensor(probs), one_hot(y, model.num_classes)).item()
    return loss, float(np.mean(probs.argmax(axis=1) == y))


def batch_loss(model: ModelGraph, x: np.ndarray, y: np.ndarray, mode: str = nn.TRAIN,
               rng: SeededRng | None = None, dropout: bool = True) -> Tensor:
    probs = softmax_scores(model.forward(x, mode, rng, dropout))
    return cce_loss(probs, one_hot(y, model.num_classes))


def train_loop(model: ModelGraph, train: Sequence[Sample], val: Sequence[Sample], epochs: int,
               batch_size: int = 16, stopper: EarlyStopping | None = None,
               rng: SeededRng | None = None, optim: AdamState | None = None):
    """Minibatch Adam training with validation-loss early stopping.

    Returns ``(model, history)``; the model holds the weights of the epoch
    with the lowest validation loss.  Trailing minibatches of one sample are
    skipped because train-mode batch norm needs two.
    """
    if not train or not val:
        raise ParameterError("train and validation sets must be non-empty")
    if batch_size > len(train) or batch_size < 2:
        raise ParameterError(f"batch size {batch_size} invalid for {len(train)} training samples")
    history: list[dict] = []
    if epochs <= 0:
        return model, history
    rng = rng if rng is not None else seeded_rng(0)
    optim = optim if optim is not None else AdamState()
    stopper = stopper if stopper is not None else EarlyStopping(max(epochs, 1))
    x, y = stack_samples(train)
    params = model.parameters()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            with Tape() as tape:
                loss = batch_loss(model, x[idx], y[idx], nn.TRAIN, rng)
            tape.backward(loss)
            adam_step(params, optim)
            losses.append(loss.item())
        train_loss, train_acc = loss_and_accuracy(model, train)
        val_loss, val_acc = loss_and_accuracy(model, val)
        history.append({"epoch": epoch, "batch_loss": float(np.mean(losses)),
                        "train_loss": train_loss, "train_acc": train_acc,
                        "val_loss": val_loss, "val_acc": val_acc})
        log.debug("epoch %d: train %.4f/%.3f val %.4f/%.3f", epoch, train_loss, train_acc,
                  val_loss, val_acc)
        if stopper.update(epoch, val_loss, model):
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    stopper.restore(model)
    return model, history


def evaluate(model: ModelGraph, test: Sequence[Sample]) -> tuple[ConfusionMatrix, np.ndarray]:
    """Confusion matrix (ties go to the lowest class id) and probability scores."""
    if not test:
        raise ParameterError("test set is empty")
    x, y = stack_samples(test)
    scores = predict_proba(model, x)
    return ConfusionMatrix.from_labels(y, scores.argmax(axis=1), model.num_classes), scores
