"""Sequential models, the VGG16 builders and transfer-learning freeze control."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParameterError, ShapeConflictError, StateError, WeightFileError
from .layers import Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, Sigmoid
from .tensor import Rng, Stream
from .weights import read_weight_file, write_weight_file

CLASS_NAMES = ("Female", "Male")

# (filters, convs) per block
VGG16_BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
MINI_BLOCKS = ((8, 1), (16, 1))


class SequentialModel:
    def __init__(self, layers: Sequence[Layer], input_shape, class_names=CLASS_NAMES,
                 head_start: int | None = None):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ParameterError(f"duplicate layer names: {dupes}")
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.class_names = tuple(class_names)
        # index of the first layer appended on top of a base; None = no head
        self.head_start = head_start
        self.shapes = self.infer_shapes()

    def infer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape (without batch axis) of every layer."""
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1] if self.shapes else self.input_shape

    def __getitem__(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def __repr__(self):
        return f"SequentialModel({len(self.layers)} layers, input={self.input_shape})"

    def summary(self) -> str:
        lines = [f"{'layer':<16}{'kind':<11}{'output':<18}{'params':>12}  trainable"]
        for layer, shape in zip(self.layers, self.shapes):
            lines.append(f"{layer.name:<16}{layer.kind:<11}{str(shape):<18}"
                         f"{layer.n_params:>12,}  {layer.trainable if layer.params else '-'}")
        lines.append(f"total {self.parameter_count():,} / trainable {self.trainable_parameter_count():,}")
        return "\n".join(lines)

    # --- parameters --------------------------------------------------------
    def parameter_count(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def trainable_parameter_count(self) -> int:
        return sum(layer.n_params for layer in self.layers if layer.trainable)

    def named_parameters(self):
        for layer in self.layers:
            for key, value in layer.params.items():
                yield f"{layer.name}.{key}", value

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            for key in layer.params:
                layer.params[key] = state[f"{layer.name}.{key}"].copy()

    def init_params(self, seed: int = 0) -> None:
        rng = Rng(seed, Stream.INIT)
        for layer in self.layers:
            layer.init_params(rng)

    def astype(self, dtype) -> "SequentialModel":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.grads.clear()

    # --- passes ------------------------------------------------------------
    def forward(self, x: np.ndarray, mode: str = "infer", rng: Rng | None = None) -> np.ndarray:
        if mode not in ("train", "infer"):
            raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"input: expected [N, {', '.join(map(str, self.input_shape))}], got {list(x.shape)}")
        training = mode == "train"
        for layer in self.layers:
            try:
                x = layer.forward(x, training=training, rng=rng)
            except DimensionError as exc:
                raise DimensionError(f"layer {layer.name!r}: {exc}") from exc
        return x

    def backward(self, grad: np.ndarray, wrt: str = "output", full: bool = False):
        """Back-propagate ``grad`` through the layers in reverse order.

        ``wrt="logits"`` means ``grad`` is already taken with respect to the
        input of a trailing Sigmoid (the fused BCE gradient), so that layer
        is skipped. Propagation stops below the lowest trainable
        parametrized layer unless ``full`` is set, in which case the input
        gradient is returned.
        """
        layers = self.layers
        if wrt == "logits":
            if not layers or not isinstance(layers[-1], Sigmoid):
                raise StateError("wrt='logits' requires a model ending in Sigmoid")
            layers = layers[:-1]
        elif wrt != "output":
            raise ParameterError(f"wrt must be 'output' or 'logits', got {wrt!r}")
        for layer in layers:
            if layer.cache is None:
                raise StateError(f"backward without a train-mode forward ({layer.name!r} has no cache)")
        self.zero_grads()
        if full:
            lowest = 0
        else:
            trainable = [i for i, l in enumerate(layers) if l.params and l.trainable]
            if not trainable:
                return None
            lowest = trainable[0]
        for i in range(len(layers) - 1, lowest - 1, -1):
            grad = layers[i].backward(grad, need_dx=full or i > lowest)
        return grad

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = [self.forward(x[s:s + batch_size], mode="infer") for s in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)[:, 0]

    def predict(self, x: np.ndarray, threshold: float = 0.5) -> list[tuple[str, float]]:
        """Label each sample; p is P(class index 1) and must exceed ``threshold``."""
        p = self.predict_proba(x)
        return [(self.class_names[1] if pi > threshold else self.class_names[0], float(pi)) for pi in p]


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_vgg_base(input_shape=(3, 180, 180), blocks=VGG16_BLOCKS, seed: int = 0) -> SequentialModel:
    """3x3 same-padded ReLU convs in blocks, each followed by 2x2 max pooling."""
    c, h, w = (int(s) for s in input_shape)
    need = 2 ** len(blocks)
    if h < need or w < need:
        raise DimensionError(
            f"input {h}x{w} too small for {len(blocks)} pooling halvings (need >= {need})")
    layers: list[Layer] = []
    in_ch = c
    for b, (filters, n_convs) in enumerate(blocks, start=1):
        for k in range(1, n_convs + 1):
            layers.append(Conv2D(f"block{b}_conv{k}", in_ch, filters))
            in_ch = filters
        layers.append(MaxPool2D(f"block{b}_pool"))
    model = SequentialModel(layers, (c, h, w))
    model.init_params(seed)
    return model


def build_vgg16_base(input_shape=(3, 180, 180), seed: int = 0) -> SequentialModel:
    if int(input_shape[1]) < 32 or int(input_shape[2]) < 32:
        raise DimensionError(f"VGG16 base needs H, W >= 32, got {tuple(input_shape)}")
    return build_vgg_base(input_shape, VGG16_BLOCKS, seed)


def build_gender_classifier(base: SequentialModel, dropout_rate: float = 0.5,
                            seed: int = 0) -> SequentialModel:
    """Append Flatten -> Dropout -> Dense(1) -> Sigmoid to a convolutional base."""
    feat = base.output_shape
    if len(feat) != 3:
        raise DimensionError(f"base must end in a spatial feature map, got {feat}")
    width = int(np.prod(feat))
    head = [Flatten("flatten"), Dropout("dropout", dropout_rate),
            Dense("dense", width, 1), Sigmoid("sigmoid")]
    head[2].init_params(Rng(seed, Stream.INIT + 16))
    return SequentialModel(base.layers + head, base.input_shape, CLASS_NAMES,
                           head_start=len(base.layers))


def build_model(arch: str = "vgg16", input_size: int = 180, dropout_rate: float = 0.5,
                seed: int = 0) -> SequentialModel:
    """Classifier by architecture name: ``vgg16`` or ``mini`` (2 narrow blocks)."""
    shape = (3, input_size, input_size)
    if arch == "vgg16":
        base = build_vgg16_base(shape, seed)
    elif arch == "mini":
        base = build_vgg_base(shape, MINI_BLOCKS, seed)
    else:
        raise ParameterError(f"unknown architecture {arch!r} (expected 'vgg16' or 'mini')")
    return build_gender_classifier(base, dropout_rate, seed)



def conv_layers(model: SequentialModel, base_only: bool = True) -> list[Conv2D]:
    end = model.head_start if (base_only and model.head_start is not None) else len(model.layers)
    return [l for l in model.layers[:end] if isinstance(l, Conv2D)]


def set_trainable(model: SequentialModel, policy: str = "last_k_convs", k: int = 4) -> SequentialModel:
    """Freeze control: ``all``, ``none`` (head only) or ``last_k_convs`` (the
    ``k`` deepest base convs plus the head)."""
    convs = conv_layers(model)
    if policy == "all":
        unfrozen = set(id(c) for c in convs)
    elif policy == "none":
        unfrozen = set()
    elif policy == "last_k_convs":
        if not 0 <= k <= len(convs):
            raise ParameterError(f"k must be in [0, {len(convs)}], got {k}")
        unfrozen = set(id(c) for c in convs[len(convs) - k:])
    else:
        raise ParameterError(f"unknown trainable policy {policy!r}")
    head_start = model.head_start if model.head_start is not None else len(model.layers)
    for i, layer in enumerate(model.layers):
        if i >= head_start:
            layer.trainable = True
        elif isinstance(layer, Conv2D):
            layer.trainable = policy == "all" or id(layer) in unfrozen
        else:
            layer.trainable = policy == "all"
        if not layer.trainable:
            layer.grads.clear()
    return model


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

def save_weights(model: SequentialModel, path) -> None:
    write_weight_file(path, dict(model.named_parameters()))


def load_weights(model: SequentialModel, path, strict: bool = True) -> list[str]:
    """Load parameters by name. Returns the names that were applied.

    With ``strict=False`` entries that match no layer are skipped and model
    parameters missing from the file keep their current values.
    """
    entries = read_weight_file(Path(path))
    targets = {}
    for layer in model.layers:
        for key, value in layer.params.items():
            targets[f"{layer.name}.{key}"] = (layer, key, value)
    seen = set()
    staged = []
    for entry in entries:
        if entry.name not in targets:
            if strict:
                raise ShapeConflictError(f"entry {entry.name!r} matches no model parameter")
            continue
        layer, key, current = targets[entry.name]
        if entry.shape != current.shape:
            raise ShapeConflictError(
                f"entry {entry.name!r} has shape {entry.shape}, model expects {current.shape}")
        staged.append((layer, key, entry.values.astype(current.dtype)))
        seen.add(entry.name)
    if strict:
        missing = sorted(set(targets) - seen)
        if missing:
            raise WeightFileError(f"weight file lacks {len(missing)} parameters, e.g. {missing[:3]}")
    for layer, key, value in staged:
        layer.params[key] = value
    return sorted(seen)
