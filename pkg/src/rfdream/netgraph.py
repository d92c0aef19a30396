"""Sequential convolutional network with reverse-mode gradients.

Layer outputs are indexed from 1; index 0 is the input image.  A forward pass
returns an :class:`ActivationCache` holding every layer output, which the
backward functions consume.  Gradients can be seeded at any layer
(:func:`backward_injected`) or at the loss (:func:`loss_and_grads`).
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .exceptions import FormatError, NonFiniteError, ParameterError, ShapeError
from .tensor import SplitMix64, as_tensor

CONV, RELU, MAXPOOL, GAP, DENSE = "conv", "relu", "maxpool", "gap", "dense"
KINDS = (CONV, RELU, MAXPOOL, GAP, DENSE)
SPATIAL_KINDS = (CONV, RELU, MAXPOOL)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    ``kernel``, ``stride`` and ``padding`` apply to conv and maxpool,
    ``out_channels`` to conv and ``out_units`` to dense.
    """

    kind: str
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    out_units: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ParameterError(f"invalid geometry k={self.kernel} s={self.stride} p={self.padding}")
        if self.kind == CONV and self.out_channels < 1:
            raise ParameterError("conv layer needs out_channels >= 1")
        if self.kind == DENSE and self.out_units < 1:
            raise ParameterError("dense layer needs out_units >= 1")
        if self.kind == MAXPOOL and self.padding >= self.kernel:
            raise ParameterError("maxpool padding must be smaller than its kernel")

    @classmethod
    def conv(cls, out_channels, kernel=3, stride=1, padding=0):
        return cls(CONV, out_channels=out_channels, kernel=kernel, stride=stride, padding=padding)

    @classmethod
    def relu(cls):
        return cls(RELU)

    @classmethod
    def maxpool(cls, kernel=2, stride=2, padding=0):
        return cls(MAXPOOL, kernel=kernel, stride=stride, padding=padding)

    @classmethod
    def gap(cls):
        return cls(GAP)

    @classmethod
    def dense(cls, out_units):
        return cls(DENSE, out_units=out_units)

    @property
    def spatial(self) -> bool:
        return self.kind in SPATIAL_KINDS

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k == "kind" or v != _DEFAULTS[k]}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


_DEFAULTS = {"out_channels": 0, "kernel": 1, "stride": 1, "padding": 0, "out_units": 0}


def output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def infer_shapes(input_shape, layers: Sequence[LayerSpec]) -> list[tuple[int, int, int]]:
    """Per-layer output shapes ``(C, H, W)``, with the input shape first."""
    c, h, w = (int(v) for v in input_shape)
    if min(c, h, w) < 1:
        raise ShapeError(f"input shape must be positive, got {input_shape}")
    shapes = [(c, h, w)]
    flat = False
    for i, spec in enumerate(layers, start=1):
        if spec.spatial and flat:
            raise ShapeError(f"layer {i} ({spec.kind}) follows a non-spatial layer")
        if spec.kind in (CONV, MAXPOOL):
            h = output_size(h, spec.kernel, spec.stride, spec.padding)
            w = output_size(w, spec.kernel, spec.stride, spec.padding)
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i} ({spec.kind}) produces an empty spatial output")
            if spec.kind == CONV:
                c = spec.out_channels
        elif spec.kind == GAP:
            h = w = 1
            flat = True
        elif spec.kind == DENSE:
            c, h, w = spec.out_units, 1, 1
            flat = True
        shapes.append((c, h, w))
    return shapes


def param_shapes(input_shape, layers: Sequence[LayerSpec]) -> dict[str, tuple[int, ...]]:
    shapes = infer_shapes(input_shape, layers)
    out = {}
    for i, spec in enumerate(layers, start=1):
        c_in, h_in, w_in = shapes[i - 1]
        if spec.kind == CONV:
            out[f"{i}.weight"] = (spec.out_channels, c_in, spec.kernel, spec.kernel)
            out[f"{i}.bias"] = (spec.out_channels,)
        elif spec.kind == DENSE:
            out[f"{i}.weight"] = (spec.out_units, c_in * h_in * w_in)
            out[f"{i}.bias"] = (spec.out_units,)
    return out


class ModelGraph:
    """Layer specs plus parameter tensors.

    Parameters
    ----------
    input_shape : (C, H, W)
    layers : sequence of LayerSpec
    params : dict of name -> float32 array, optional
        Defaults to all zeros; use :func:`init_model` for a seeded He init.
    linearize : bool
        Replace ReLU by the identity and max pooling by average pooling over
        the same window.  Used by receptive-field support checks.
    """

    def __init__(self, input_shape, layers, params=None, linearize=False):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = tuple(layers)
        self.shapes = infer_shapes(self.input_shape, self.layers)
        self.linearize = bool(linearize)
        expected = param_shapes(self.input_shape, self.layers)
        if params is None:
            params = {name: np.zeros(shape, np.float32) for name, shape in expected.items()}
        if set(params) != set(expected):
            raise ShapeError(f"parameter names {sorted(params)} do not match {sorted(expected)}")
        self.params = {}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(params[name], dtype=np.float32)
            if arr.shape != shape:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = arr

    def __repr__(self):
        kinds = ",".join(spec.kind for spec in self.layers)
        return f"ModelGraph(input={self.input_shape}, layers=[{kinds}], linearize={self.linearize})"

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "ModelGraph":
        return ModelGraph(self.input_shape, self.layers,
                          {k: v.copy() for k, v in self.params.items()}, self.linearize)

    def with_params(self, params) -> "ModelGraph":
        return ModelGraph(self.input_shape, self.layers, params, self.linearize)

    def linearized(self, flag: bool = True) -> "ModelGraph":
        return ModelGraph(self.input_shape, self.layers, self.params, flag)

    def layer_names(self) -> list[str]:
        names, counts = ["input"], {}
        for spec in self.layers:
            counts[spec.kind] = counts.get(spec.kind, 0) + 1
            names.append(spec.kind if spec.kind == GAP else f"{spec.kind}{counts[spec.kind]}")
        return names

    def conv_layers(self) -> list[int]:
        return [i for i, spec in enumerate(self.layers, start=1) if spec.kind == CONV]

    def to_bytes(self) -> bytes:
        return container.dumps(self._header(), self.params)

    def _header(self) -> dict:
        return {
            "format": "model",
            "input_shape": list(self.input_shape),
            "layers": [spec.to_dict() for spec in self.layers],
            "linearize": self.linearize,
        }

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


class NodeRef(NamedTuple):
    """One node: a channel at a spatial position of a layer output."""

    layer: int
    channel: int
    row: int
    col: int


@dataclass(frozen=True)
class Injection:
    """Where to seed a backward pass with ones.

    Either explicit ``targets`` ``(channel, row, col)`` or every position of
    ``channel``.
    """

    layer: int
    targets: tuple = ()
    channel: int | None = None

    @classmethod
    def node(cls, node: NodeRef) -> "Injection":
        return cls(node.layer, targets=((node.channel, node.row, node.col),))

    @classmethod
    def tiled(cls, layer: int, channel: int) -> "Injection":
        return cls(layer, channel=channel)

    def seed(self, shapes) -> np.ndarray:
        """The ``(C, H, W)`` gradient seed for a model with per-layer ``shapes``."""
        if not 1 <= self.layer < len(shapes):
            raise ParameterError(f"layer {self.layer} out of range 1..{len(shapes) - 1}")
        c, h, w = shapes[self.layer]
        g = np.zeros((c, h, w), np.float32)
        if self.channel is not None:
            if self.targets:
                raise ParameterError("give either targets or a tiled channel, not both")
            if not 0 <= self.channel < c:
                raise ParameterError(f"channel {self.channel} out of range 0..{c - 1}")
            g[self.channel] = 1.0
            return g
        if not self.targets:
            raise ParameterError("injection has no targets")
        for ch, r, col in self.targets:
            if not (0 <= ch < c and 0 <= r < h and 0 <= col < w):
                raise ParameterError(
                    f"target (channel={ch}, row={r}, col={col}) outside layer {self.layer} "
                    f"output of shape {(c, h, w)}"
                )
            g[ch, r, col] = 1.0
        return g


@dataclass
class ActivationCache:
    outputs: list
    argmax: dict = field(default_factory=dict)
    cols: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.outputs) - 1


def he_uniform(rng: SplitMix64, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    u = rng.uniform(int(np.prod(shape)))
    return ((2.0 * u - 1.0) * limit).astype(np.float32).reshape(shape)


def init_model(input_shape, layers, seed: int = 0) -> ModelGraph:
    """He-uniform weights and zero biases, seeded by splitmix64."""
    rng = SplitMix64(seed)
    params = {}
    for name, shape in param_shapes(input_shape, layers).items():
        if name.endswith(".weight"):
            params[name] = he_uniform(rng, shape, int(np.prod(shape[1:])))
        else:
            params[name] = np.zeros(shape, np.float32)
    return ModelGraph(input_shape, layers, params)


def rfnet64_layers(num_classes: int = 4) -> list[LayerSpec]:
    conv, relu, pool = LayerSpec.conv, LayerSpec.relu, LayerSpec.maxpool
    return [
        conv(16, 3, 1, 1), relu(), pool(2, 2),
        conv(32, 3, 1, 1), relu(), pool(2, 2),
        conv(64, 3, 1, 1), relu(), pool(2, 2),
        conv(64, 3, 1, 1), relu(),
        conv(64, 3, 1, 1), relu(),
        conv(64, 3, 1, 1), relu(),
        LayerSpec.gap(),
        LayerSpec.dense(num_classes),
    ]


ARCHITECTURES = {"rfnet-64": ((3, 64, 64), rfnet64_layers)}


def build(arch: str = "rfnet-64", num_classes: int = 4, seed: int = 0) -> ModelGraph:
    if arch not in ARCHITECTURES:
        raise ParameterError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    input_shape, factory = ARCHITECTURES[arch]
    return init_model(input_shape, factory(num_classes), seed)


# -- layer kernels ----------------------------------------------------------

def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _windows(xp, k, s):
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, ::s, ::s]


def _scatter_windows(dwin, in_shape, k, s, p):
    """Adjoint of ``_windows``: add ``(N, C, Ho, Wo, k, k)`` back onto the padded input."""
    n, c, h, w = in_shape
    ho, wo = dwin.shape[2:4]
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), np.float32)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dwin[:, :, :, :, i, j]
    if p:
        dxp = dxp[:, :, p:p + h, p:p + w]
    return dxp


def _im2col(x, spec):
    """Rows are output positions ``(n, r, c)``, columns are taps ``(channel, i, j)``."""
    win = _windows(_pad(x, spec.padding), spec.kernel, spec.stride)
    n, c, ho, wo, k, _ = win.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _conv_forward(x, weight, bias, spec, cols=None):
    if cols is None:
        cols = _im2col(x, spec)
    n = x.shape[0]
    out = cols @ weight.reshape(weight.shape[0], -1).T
    out += bias
    ho = output_size(x.shape[2], spec.kernel, spec.stride, spec.padding)
    wo = output_size(x.shape[3], spec.kernel, spec.stride, spec.padding)
    return np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)), cols


def _conv_backward(x, weight, gy, spec, cols, want_params, want_dx=True):
    k, s, p = spec.kernel, spec.stride, spec.padding
    dx = None
    if want_dx:
        dcol = np.tensordot(gy, weight, axes=([1], [0]))  # N, Ho, Wo, C, k, k
        dx = _scatter_windows(dcol.transpose(0, 3, 1, 2, 4, 5), x.shape, k, s, p)
    if not want_params:
        return dx, None, None
    if cols is None:
        cols = _im2col(x, spec)
    g2 = gy.transpose(0, 2, 3, 1).reshape(-1, gy.shape[1])
    dw = (g2.T @ cols).reshape(weight.shape)
    db = gy.sum(axis=(0, 2, 3))
    return dx, dw.astype(np.float32), db.astype(np.float32)


def _pool_forward(x, spec, linear):
    k, s, p = spec.kernel, spec.stride, spec.padding
    if linear:
        win = _windows(_pad(x, p), k, s)
        return np.ascontiguousarray(win.mean(axis=(4, 5), dtype=np.float32)), None
    win = _windows(_pad(x, p, -np.inf), k, s)
    flat = win.reshape(win.shape[:4] + (k * k,))
    idx = flat.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _pool_backward(x_shape, gy, idx, spec, linear):
    k, s, p = spec.kernel, spec.stride, spec.padding
    if linear:
        dwin = np.broadcast_to((gy / (k * k))[..., None, None], gy.shape + (k, k))
        return _scatter_windows(dwin, x_shape, k, s, p)
    dwin = np.zeros(gy.shape + (k * k,), np.float32)
    np.put_along_axis(dwin, idx[..., None], gy[..., None], axis=-1)
    return _scatter_windows(dwin.reshape(gy.shape + (k, k)), x_shape, k, s, p)


def forward(model: ModelGraph, x, upto: int | None = None, keep_cols: bool = False) -> ActivationCache:
    """Run the network and keep every layer output.

    ``upto`` stops after that layer; later layers are not evaluated.
    ``keep_cols`` also stores the im2col matrices so a parameter backward
    pass can reuse them.
    """
    x = as_tensor(x, "input")
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match model input {model.input_shape}")
    depth = model.n_layers if upto is None else int(upto)
    if not 0 <= depth <= model.n_layers:
        raise ParameterError(f"upto={upto} out of range 0..{model.n_layers}")
    cache = ActivationCache([x])
    for i in range(1, depth + 1):
        spec = model.layers[i - 1]
        with np.errstate(over="ignore", invalid="ignore"):
            y = _layer_forward(model, i, spec, x, cache, keep_cols)
        if not np.all(np.isfinite(y)):
            raise NonFiniteError(f"non-finite activation at layer {i} ({spec.kind})")
        cache.outputs.append(y)
        x = y
    return cache


def _layer_forward(model, i, spec, x, cache, keep_cols):
    if spec.kind == CONV:
        y, cols = _conv_forward(x, model.params[f"{i}.weight"], model.params[f"{i}.bias"], spec)
        if keep_cols:
            cache.cols[i] = cols
        return y
    if spec.kind == RELU:
        return x if model.linearize else np.maximum(x, 0.0)
    if spec.kind == MAXPOOL:
        y, idx = _pool_forward(x, spec, model.linearize)
        cache.argmax[i] = idx
        return y
    if spec.kind == GAP:
        return x.mean(axis=(2, 3), keepdims=True, dtype=np.float32)
    flat = x.reshape(x.shape[0], -1)
    y = flat @ model.params[f"{i}.weight"].T + model.params[f"{i}.bias"]
    return y.reshape(y.shape[0], -1, 1, 1)


def backward(model: ModelGraph, cache: ActivationCache, layer: int, grad,
             want_params=False, want_input=True):
    """Propagate ``grad`` (gradient w.r.t. the output of ``layer``) to the input.

    Returns ``(input_gradient, parameter_gradients)``; the dict is empty
    unless ``want_params`` is set.  Layers above ``layer`` are ignored.
    With ``want_input=False`` the input gradient is skipped and returned as
    None, which saves the most expensive step of a training pass.
    """
    if layer > cache.depth:
        raise ParameterError(f"cache holds {cache.depth} layers, cannot start at layer {layer}")
    g = np.asarray(grad, dtype=np.float32)
    grads = {}
    for i in range(layer, 0, -1):
        spec = model.layers[i - 1]
        x = cache.outputs[i - 1]
        if spec.kind == CONV:
            g, dw, db = _conv_backward(x, model.params[f"{i}.weight"], g, spec,
                                       cache.cols.get(i), want_params, want_input or i > 1)
            if want_params:
                grads[f"{i}.weight"], grads[f"{i}.bias"] = dw, db
        elif spec.kind == RELU:
            if not model.linearize:
                g = g * (x > 0)
        elif spec.kind == MAXPOOL:
            g = _pool_backward(x.shape, g, cache.argmax.get(i), spec, model.linearize)
        elif spec.kind == GAP:
            h, w = x.shape[2:]
            g = np.broadcast_to(g / np.float32(h * w), x.shape).astype(np.float32)
        else:
            flat = x.reshape(x.shape[0], -1)
            g2 = g.reshape(g.shape[0], -1)
            if want_params:
                grads[f"{i}.weight"] = (g2.T @ flat).astype(np.float32)
                grads[f"{i}.bias"] = g2.sum(axis=0).astype(np.float32)
            g = (g2 @ model.params[f"{i}.weight"]).reshape(x.shape)
        if g is None:
            return None, grads
    return np.ascontiguousarray(g, dtype=np.float32), grads


def backward_injected(model: ModelGraph, cache: ActivationCache, inj: Injection) -> np.ndarray:
    """Input gradient of the summed activations at the injection targets."""
    seed = inj.seed(model.shapes)
    if inj.layer > cache.depth:
        raise ParameterError(f"injection layer {inj.layer} was not computed by the forward pass")
    n = cache.outputs[0].shape[0]
    grad = np.broadcast_to(seed, (n,) + seed.shape)
    dx, _ = backward(model, cache, inj.layer, grad)
    if not np.all(np.isfinite(dx)):
        raise NonFiniteError("non-finite input gradient")
    return dx


def injected_objective(cache: ActivationCache, inj: Injection, shapes) -> np.ndarray:
    """Per-sample sum of activations at the injection targets, float64."""
    seed = inj.seed(shapes)
    act = cache.outputs[inj.layer]
    return np.einsum("nchw,chw->n", act.astype(np.float64), seed.astype(np.float64))


def _check_labels(labels, n, num_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ParameterError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError(f"label out of range 0..{num_classes - 1}")
    return labels


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. ``logits`` of shape (N, K)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dz = np.exp(logp)
    dz[np.arange(n), labels] -= 1.0
    return float(loss), (dz / n).astype(np.float32)


def loss_and_grads(model: ModelGraph, batch, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Softmax cross-entropy averaged over the batch, with every parameter gradient."""
    batch = as_tensor(batch, "batch")
    num_classes = model.shapes[-1][0]
    labels = _check_labels(labels, batch.shape[0], num_classes)
    cache = forward(model, batch, keep_cols=True)
    logits = cache.outputs[-1].reshape(batch.shape[0], -1)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    _, grads = backward(model, cache, model.n_layers, dlogits.reshape(cache.outputs[-1].shape),
                        want_params=True, want_input=False)
    return loss, grads


def predict_logits(model: ModelGraph, batch, chunk: int = 256) -> np.ndarray:
    batch = as_tensor(batch, "batch")
    out = [forward(model, batch[i:i + chunk]).outputs[-1].reshape(len(batch[i:i + chunk]), -1)
           for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.shapes[-1][0]), np.float32)


def sgd_step(model: ModelGraph, grads: dict, lr: float) -> ModelGraph:
    """Return a new model with ``params - lr * grads``."""
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    params = {}
    for name, value in model.params.items():
        g = grads.get(name)
        if g is None:
            params[name] = value.copy()
            continue
        g = np.asarray(g, dtype=np.float32)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        params[name] = value - np.float32(lr) * g
    return model.with_params(params)


def save_model(model: ModelGraph, path) -> None:
    container.write(path, model._header(), model.params)


def model_from_bytes(data: bytes) -> ModelGraph:
    meta, tensors = container.loads(data)
    return _from_meta(meta, tensors)


def load_model(path) -> ModelGraph:
    meta, tensors = container.read(path)
    return _from_meta(meta, tensors)


def _from_meta(meta, tensors) -> ModelGraph:
    if meta.get("format") != "model":
        raise FormatError("container does not hold a model")
    try:
        layers = [LayerSpec.from_dict(d) for d in meta["layers"]]
        return ModelGraph(meta["input_shape"], layers, tensors, meta.get("linearize", False))
    except (KeyError, TypeError, ShapeError, ParameterError) as exc:
        raise FormatError(f"inconsistent model header: {exc}") from None


def replace_params(model: ModelGraph, fn) -> ModelGraph:
    """Apply ``fn(name, array)`` to every parameter, returning a new model."""
    return model.with_params({k: fn(k, v) for k, v in model.params.items()})
