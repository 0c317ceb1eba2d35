"""Desk-scale inference engine and manual-gradient trainer.

Forward passes dequantize weight codes on the fly (code * scale) and run
float64 kernels; activations stay real unless fake quantization is
requested.  Training is plain SGD with hand-derived gradients for softmax
cross-entropy, deterministic for a fixed seed.  Fault-aware retraining
views the weights through quantize -> (optional nearest-value projection)
-> stuck-at read on every batch and applies the straight-through gradient
to the underlying real weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .faq import _check_mask, inject
from .faultmodel import apply_faults_array
from .lut import LookupTable
from .mapper import ErrorMask
from .model import QuantizedLayer, QuantizedModel
from .numfmt import QuantSpec, ScaleFactor, compute_scale, dequantize, quantize

ARCHITECTURES = ("mlp2", "smallcnn")

# ---------------------------------------------------------------------------
# float kernels (forward + backward)
# ---------------------------------------------------------------------------


def _conv2d_forward(x, weight, bias, stride, padding):
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got {x.ndim}-D")
    n, c, h, w = x.shape
    k, c2, r, s = weight.shape
    if c2 != c:
        raise ValueError(f"conv2d input has {c} channels, weights expect {c2}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - r) // stride + 1
    ow = (w + 2 * padding - s) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("conv2d kernel larger than padded input")
    cols = np.empty((n, c, r, s, oh, ow), dtype=np.float64)
    for i in range(r):
        for j in range(s):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride,
                                 j : j + stride * ow : stride]
    cols = cols.reshape(n, c * r * s, oh * ow)
    wmat = weight.reshape(k, c * r * s)
    out = np.einsum("kp,npq->nkq", wmat, cols, optimize=True).reshape(n, k, oh, ow)
    out += bias[None, :, None, None]
    return out, (cols, (n, c, h, w), (oh, ow))


def _conv2d_backward(dout, weight, cache, stride, padding):
    cols, (n, c, h, w), (oh, ow) = cache
    k, _, r, s = weight.shape
    dflat = dout.reshape(n, k, oh * ow)
    dweight = np.einsum("nkq,npq->kp", dflat, cols, optimize=True).reshape(weight.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    wmat = weight.reshape(k, c * r * s)
    dcols = np.einsum("kp,nkq->npq", wmat, dflat, optimize=True)
    dcols = dcols.reshape(n, c, r, s, oh, ow)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(r):
        for j in range(s):
            dxp[:, :, i : i + stride * oh : stride,
                j : j + stride * ow : stride] += dcols[:, :, i, j]
    dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
    return dx, dweight, dbias


def _fc_forward(x, weight, bias):
    if x.ndim != 2:
        raise ValueError(f"fc expects 2-D input, got {x.ndim}-D (flatten first)")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"fc input width {x.shape[1]} != fan-in {weight.shape[1]}")
    return x @ weight.T + bias, x


def _fc_backward(dout, weight, cache):
    x = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def _maxpool2x2_forward(x):
    if x.ndim != 4:
        raise ValueError(f"maxpool2x2 expects NCHW input, got {x.ndim}-D")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ValueError("maxpool2x2 input smaller than the pooling window")
    windows = (
        x[:, :, : oh * 2, : ow * 2]
        .reshape(n, c, oh, 2, ow, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, 4)
    )
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, (argmax, (n, c, h, w))


def _maxpool2x2_backward(dout, cache):
    argmax, (n, c, h, w) = cache
    oh, ow = h // 2, w // 2
    dwin = np.zeros((n, c, oh, ow, 4), dtype=np.float64)
    np.put_along_axis(dwin, argmax[..., None], dout[..., None], axis=-1)
    dx = np.zeros((n, c, h, w), dtype=np.float64)
    dx[:, :, : oh * 2, : ow * 2] = (
        dwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh * 2, ow * 2)
    )
    return dx


def _flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def _relu_forward(x):
    return np.maximum(x, 0.0), x > 0.0


# ---------------------------------------------------------------------------
# layer graph execution
# ---------------------------------------------------------------------------


@dataclass
class _FloatLayer:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    activation: str = "linear"
    stride: int = 1
    padding: int = 0

    @property
    def is_weighted(self) -> bool:
        return self.kind in ("conv2d", "fc")


def _run_forward(layers: list[_FloatLayer], x: np.ndarray, keep_caches: bool):
    """Run the layer stack; returns (logits, caches, per-layer outputs)."""
    caches = []
    outputs = []
    for layer in layers:
        if layer.kind == "conv2d":
            x, cache = _conv2d_forward(x, layer.weight, layer.bias,
                                       layer.stride, layer.padding)
        elif layer.kind == "fc":
            x, cache = _fc_forward(x, layer.weight, layer.bias)
        elif layer.kind == "maxpool2x2":
            x, cache = _maxpool2x2_forward(x)
        elif layer.kind == "flatten":
            x, cache = _flatten_forward(x)
        elif layer.kind == "relu":
            x, cache = _relu_forward(x)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        act_cache = None
        if layer.is_weighted and layer.activation == "relu":
            x, act_cache = _relu_forward(x)
        if keep_caches:
            caches.append((cache, act_cache))
        outputs.append(x)
    return x, caches, outputs


def _run_backward(layers: list[_FloatLayer], caches, dout: np.ndarray):
    """Gradients of every weighted layer, aligned with ``layers``."""
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        cache, act_cache = caches[i]
        if act_cache is not None:
            dout = dout * act_cache
        if layer.kind == "conv2d":
            dout, dw, db = _conv2d_backward(dout, layer.weight, cache,
                                            layer.stride, layer.padding)
            grads[i] = (dw, db)
        elif layer.kind == "fc":
            dout, dw, db = _fc_backward(dout, layer.weight, cache)
            grads[i] = (dw, db)
        elif layer.kind == "maxpool2x2":
            dout = _maxpool2x2_backward(dout, cache)
        elif layer.kind == "flatten":
            dout = dout.reshape(cache)
        elif layer.kind == "relu":
            dout = dout * cache
    return grads


def _softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def loss_and_gradients(layers: list[_FloatLayer], x: np.ndarray, labels: np.ndarray):
    """Cross-entropy loss and analytical weight gradients for one batch."""
    logits, caches, _ = _run_forward(layers, x, keep_caches=True)
    loss, dlogits = _softmax_cross_entropy(logits, labels)
    return loss, _run_backward(layers, caches, dlogits)


# ---------------------------------------------------------------------------
# quantized model inference
# ---------------------------------------------------------------------------


def _float_layers(model: QuantizedModel) -> list[_FloatLayer]:
    layers = []
    for layer in model.layers:
        if layer.is_weighted:
            out_dim = layer.codes.shape[0]
            bias = layer.bias if layer.bias is not None else np.zeros(out_dim)
            layers.append(_FloatLayer(
                kind=layer.kind,
                weight=dequantize(layer.codes, layer.scale),
                bias=np.asarray(bias, dtype=np.float64),
                activation=layer.activation,
                stride=layer.stride,
                padding=layer.padding,
            ))
        else:
            layers.append(_FloatLayer(kind=layer.kind))
    return layers


def _fake_quant(x: np.ndarray, scale: ScaleFactor, spec: QuantSpec) -> np.ndarray:
    codes = np.clip(np.rint(x / scale.scale), spec.min_code, spec.max_code)
    return codes * scale.scale


def forward(
    model: QuantizedModel, x: np.ndarray, fake_quant_activations: bool = False
) -> np.ndarray:
    """Logits for a batch; deterministic for identical model and input."""
    x = np.asarray(x, dtype=np.float64)
    scales = model.activation_scales
    if fake_quant_activations:
        if not scales:
            raise ValueError(
                "fake quantization requested but the model has no activation "
                "scales; run calibrate_activation_scales first"
            )
        x = _fake_quant(x, scales["input"], model.spec)
    layers = _float_layers(model)
    if not fake_quant_activations:
        logits, _, _ = _run_forward(layers, x, keep_caches=False)
        return logits
    for i, layer in enumerate(layers):
        x, _, outs = _run_forward([layer], x, keep_caches=False)
        x = _fake_quant(x, scales[f"layer{i}"], model.spec)
    return x


def calibrate_activation_scales(
    model: QuantizedModel, batch: np.ndarray
) -> dict[str, ScaleFactor]:
    """Max-abs scale of the input and of every layer output on one batch."""
    x = np.asarray(batch, dtype=np.float64)
    scales = {"input": compute_scale(x, model.spec, tensor_id="input")}
    _, _, outputs = _run_forward(_float_layers(model), x, keep_caches=False)
    for i, out in enumerate(outputs):
        key = f"layer{i}"
        scales[key] = compute_scale(out, model.spec, tensor_id=key)
    return scales


def evaluate(model: QuantizedModel, dataset, batch_size: int = 512,
             fake_quant_activations: bool = False) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    labels = np.asarray(dataset.labels)
    if labels.min() < 0:
        raise ValueError("labels must be non-negative")
    hits = 0
    for start in range(0, n, batch_size):
        batch = dataset.images[start : start + batch_size]
        logits = forward(model, batch, fake_quant_activations)
        if labels.max() >= logits.shape[1]:
            raise ValueError(
                f"label {labels.max()} outside [0, {logits.shape[1]}) classes"
            )
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + batch_size]))
    return hits / n


# ---------------------------------------------------------------------------
# fixture training
# ---------------------------------------------------------------------------


def _init_layers(architecture: str, input_shape: tuple[int, ...], classes: int,
                 rng: np.random.Generator) -> list[_FloatLayer]:
    def he(fan_in, shape):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    if architecture == "mlp2":
        d = int(np.prod(input_shape))
        h1, h2 = 64, 32
        return [
            _FloatLayer(kind="flatten"),
            _FloatLayer("fc", he(d, (h1, d)), np.zeros(h1), activation="relu"),
            _FloatLayer("fc", he(h1, (h2, h1)), np.zeros(h2), activation="relu"),
            _FloatLayer("fc", he(h2, (classes, h2)), np.zeros(classes)),
        ]
    if architecture == "smallcnn":
        if len(input_shape) != 3:
            raise ValueError("smallcnn needs CHW image input")
        c, h, w = input_shape
        k = 8
        fan = c * 3 * 3
        flat = k * (h // 2) * (w // 2)
        return [
            _FloatLayer("conv2d", he(fan, (k, c, 3, 3)), np.zeros(k),
                        activation="relu", stride=1, padding=1),
            _FloatLayer(kind="maxpool2x2"),
            _FloatLayer(kind="flatten"),
            _FloatLayer("fc", he(flat, (classes, flat)), np.zeros(classes)),
        ]
    raise ValueError(f"unsupported architecture {architecture!r}; "
                     f"choose one of {ARCHITECTURES}")


def _quantize_layers(layers: list[_FloatLayer], spec: QuantSpec) -> QuantizedModel:
    qlayers = []
    for i, layer in enumerate(layers):
        if not layer.is_weighted:
            qlayers.append(QuantizedLayer(kind=layer.kind))
            continue
        scale = compute_scale(layer.weight, spec, tensor_id=f"layer{i}.weight")
        qlayers.append(QuantizedLayer(
            kind=layer.kind,
            codes=quantize(layer.weight, scale, spec),
            scale=scale,
            bias=layer.bias.copy(),
            activation=layer.activation,
            stride=layer.stride,
            padding=layer.padding,
        ))
    return QuantizedModel(layers=tuple(qlayers), spec=spec)


def _sgd_epoch(layers, images, labels, order, learning_rate, batch_size,
               view=None):
    """One pass of minibatch SGD; ``view`` maps true weights to effective ones."""
    for start in range(0, len(order), batch_size):
        batch_idx = order[start : start + batch_size]
        x, y = images[batch_idx], labels[batch_idx]
        if view is None:
            loss_layers = layers
        else:
            loss_layers = view(layers)
        _, grads = loss_and_gradients(loss_layers, x, y)
        for layer, grad in zip(layers, grads):
            if grad is None:
                continue
            layer.weight -= learning_rate * grad[0]
            layer.bias -= learning_rate * grad[1]


def train_fixture(dataset, architecture: str, epochs: int, learning_rate: float,
                  seed: int, batch_size: int = 64,
                  spec: QuantSpec | None = None) -> QuantizedModel:
    """Train a small network from scratch and return its quantized form."""
    spec = spec or QuantSpec()
    rng = np.random.Generator(np.random.PCG64(seed))
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    classes = int(labels.max()) + 1
    layers = _init_layers(architecture, images.shape[1:], classes, rng)
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        _sgd_epoch(layers, images, labels, order, learning_rate, batch_size)
    return _quantize_layers(layers, spec)


# ---------------------------------------------------------------------------
# fault-aware retraining
# ---------------------------------------------------------------------------


def _project_codes(codes: np.ndarray, patterns: np.ndarray,
                   lut: LookupTable) -> np.ndarray:
    half = 1 << (lut.bitwidth - 1)
    return lut.entries[patterns, codes.astype(np.int64) + half]


def _stored_model(model: QuantizedModel, layers: list[_FloatLayer],
                  mask: ErrorMask, lut: LookupTable | None,
                  use_faq: bool) -> QuantizedModel:
    """Quantize the current float weights into the deployable model."""
    qlayers = []
    for qlayer, flayer, patterns in zip(model.layers, layers, mask.patterns):
        if not qlayer.is_weighted:
            qlayers.append(qlayer)
            continue
        codes = quantize(flayer.weight, qlayer.scale, model.spec)
        if use_faq:
            codes = _project_codes(codes, patterns, lut)
        qlayers.append(QuantizedLayer(
            kind=qlayer.kind, codes=codes.astype(np.int16), scale=qlayer.scale,
            bias=flayer.bias.copy(), activation=qlayer.activation,
            stride=qlayer.stride, padding=qlayer.padding,
        ))
    return model.with_layers(tuple(qlayers))


def retrain_with_faq(model: QuantizedModel, mask: ErrorMask,
                     lut: LookupTable | None, dataset, epochs: int,
                     learning_rate: float, use_faq: bool,
                     batch_size: int = 64, seed: int = 0):
    """Fine-tune through the fault model; returns (model, accuracy trace).

    Every batch sees the weights as the accelerator would read them:
    quantized, optionally projected to reachable values, then passed
    through the stuck-at masking.  Gradients update the real weights
    (straight-through).  The trace holds the deployed-and-read accuracy
    before training and after each epoch, ``epochs + 1`` entries total.
    """
    if use_faq and lut is None:
        raise ConfigError("retraining with FAQ requires a lookup table")
    _check_mask(model, mask)
    rng = np.random.Generator(np.random.PCG64(seed))
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)

    layers = []
    for qlayer in model.layers:
        if qlayer.is_weighted:
            bias = qlayer.bias if qlayer.bias is not None else np.zeros(qlayer.codes.shape[0])
            layers.append(_FloatLayer(
                kind=qlayer.kind, weight=dequantize(qlayer.codes, qlayer.scale),
                bias=np.asarray(bias, dtype=np.float64).copy(),
                activation=qlayer.activation, stride=qlayer.stride,
                padding=qlayer.padding,
            ))
        else:
            layers.append(_FloatLayer(kind=qlayer.kind))

    def faulty_view(float_layers):
        viewed = []
        for qlayer, flayer, patterns in zip(model.layers, float_layers, mask.patterns):
            if not flayer.is_weighted:
                viewed.append(flayer)
                continue
            codes = quantize(flayer.weight, qlayer.scale, model.spec)
            if use_faq:
                codes = _project_codes(codes, patterns, lut)
            read = apply_faults_array(codes, patterns, model.bitwidth)
            viewed.append(_FloatLayer(
                kind=flayer.kind, weight=dequantize(read, qlayer.scale),
                bias=flayer.bias, activation=flayer.activation,
                stride=flayer.stride, padding=flayer.padding,
            ))
        return viewed

    def deployed_accuracy():
        stored = _stored_model(model, layers, mask, lut, use_faq)
        return evaluate(inject(stored, mask), dataset)

    trace = [deployed_accuracy()]
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        _sgd_epoch(layers, images, labels, order, learning_rate, batch_size,
                   view=faulty_view)
        trace.append(deployed_accuracy())
    return _stored_model(model, layers, mask, lut, use_faq), trace
