"""Build the attacker's local executable family.

Fake datasets are fixed random noise with fixed labels; small models are
trained from scratch in numpy to memorize them; generated C sources embed the
trained weights as constant arrays and get compiled under controlled flag
sets. Two design rules carry the whole toolkit: weights live in read-only
data (so same-structure binaries share identical .text bytes), and every
kernel accumulates each output element in one fixed order (so an in-process
reference evaluation reproduces the binary bit-for-bit).
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import subprocess
from dataclasses import dataclass, field

import numpy as np

from . import elfimage
from .harness import ExecSpec, RunStatus, run_once
from .oracles import parse_class_predictions, parse_vector_predictions


class BadShape(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class UnderTrained(RuntimeError):
    """Final fit accuracy fell below the well-trained bar."""


class UnsupportedLayer(ValueError):
    pass


class ToolchainMissing(RuntimeError):
    pass


class BaselineMismatch(RuntimeError):
    """Built binary disagrees with the in-process reference evaluation."""


class StructureMismatch(ValueError):
    """Entries that must share model structure / compiler config do not."""


WELL_TRAINED_BAR = 0.90


# --- fake datasets ----------------------------------------------------------


@dataclass(frozen=True)
class FakeDataset:
    seed: int
    inputs: np.ndarray   # (N, *shape) float32 standard-normal noise
    labels: np.ndarray   # (N,) int64 class indices, fixed at creation
    class_count: int

    def __len__(self) -> int:
        return len(self.inputs)


def make_fake_dataset(
    seed: int, n: int, shape: int | tuple[int, ...], class_count: int
) -> FakeDataset:
    """Deterministic noise inputs with a balanced random label assignment.

    Labels are a seeded shuffle of a round-robin vector: random per seed yet
    exactly near-uniform (every class within one count of N/C), which keeps
    the class-balance invariant deterministic instead of probabilistic.
    """
    if isinstance(shape, int):
        shape = (shape,)
    if class_count < 1:
        raise BadShape("class_count must be >= 1")
    if n < class_count:
        raise BadShape(f"need at least one input per class: N={n} < C={class_count}")
    if any(d < 1 for d in shape):
        raise BadShape(f"non-positive input dimension in {shape}")
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((n, *shape), dtype=np.float32)
    labels = rng.permutation(np.arange(n, dtype=np.int64) % class_count)
    return FakeDataset(seed=seed, inputs=inputs, labels=labels, class_count=class_count)


# --- model specs ------------------------------------------------------------


@dataclass(frozen=True)
class Conv2d:
    filters: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Relu:
    pass


Layer = Conv2d | Dense | Relu

ARGMAX_HEAD = "argmax"
SQUASH_HEAD = "squash"  # clamp + rational tanh approximation (generative)


@dataclass(frozen=True)
class ModelSpec:
    """Layer chain with static shapes; the argmax head makes a classifier."""

    input_shape: tuple[int, ...]   # (d,) for flat input, (h, w, c) for images
    layers: tuple[Layer, ...]
    class_count: int
    head: str = ARGMAX_HEAD
    quantized: bool = False

    def __post_init__(self) -> None:
        if self.head not in (ARGMAX_HEAD, SQUASH_HEAD):
            raise UnsupportedLayer(f"unknown head {self.head!r}")
        shapes = self.layer_shapes()  # validates the chain
        out = shapes[-1]
        if int(np.prod(out)) != self.class_count:
            raise ShapeMismatch(
                f"head consumes {int(np.prod(out))} values, class_count is {self.class_count}"
            )

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape after each layer, starting from input_shape."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise ShapeMismatch(f"layer {i}: conv2d needs (h, w, c), got {shape}")
                h, w, _c = shape
                kh, kw = layer.kernel
                s = layer.stride
                if kh > h or kw > w or s < 1:
                    raise ShapeMismatch(f"layer {i}: kernel {layer.kernel} over input {shape}")
                shape = ((h - kh) // s + 1, (w - kw) // s + 1, layer.filters)
            elif isinstance(layer, Dense):
                shape = (layer.units,)
            elif isinstance(layer, Relu):
                pass
            else:
                raise UnsupportedLayer(f"layer {i}: {layer!r}")
            out.append(shape)
        return out

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                layers.append(
                    {"kind": "conv2d", "filters": layer.filters,
                     "kernel": list(layer.kernel), "stride": layer.stride}
                )
            elif isinstance(layer, Dense):
                layers.append({"kind": "dense", "units": layer.units})
            else:
                layers.append({"kind": "relu"})
        return {
            "input_shape": list(self.input_shape),
            "layers": layers,
            "class_count": self.class_count,
            "head": self.head,
            "quantized": self.quantized,
        }

    @staticmethod
    def from_dict(doc: dict) -> "ModelSpec":
        layers: list[Layer] = []
        for item in doc["layers"]:
            if item["kind"] == "conv2d":
                layers.append(
                    Conv2d(item["filters"], tuple(item["kernel"]), item["stride"])
                )
            elif item["kind"] == "dense":
                layers.append(Dense(item["units"]))
            elif item["kind"] == "relu":
                layers.append(Relu())
            else:
                raise UnsupportedLayer(item["kind"])
        return ModelSpec(
            input_shape=tuple(doc["input_shape"]),
            layers=tuple(layers),
            class_count=doc["class_count"],
            head=doc.get("head", ARGMAX_HEAD),
            quantized=doc.get("quantized", False),
        )

    def structure_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def mlp_spec(
    input_dim: int = 64, hidden: int = 32, class_count: int = 10, quantized: bool = False
) -> ModelSpec:
    """Default dense family: input -> hidden -> relu -> classes."""
    return ModelSpec(
        input_shape=(input_dim,),
        layers=(Dense(hidden), Relu(), Dense(class_count)),
        class_count=class_count,
        quantized=quantized,
    )


def conv_spec(
    side: int = 16, filters: int = 4, class_count: int = 10, quantized: bool = False
) -> ModelSpec:
    """Default conv family: side x side x 1 -> conv(filters, 3x3) -> relu -> classes."""
    return ModelSpec(
        input_shape=(side, side, 1),
        layers=(Conv2d(filters, (3, 3), 1), Relu(), Dense(class_count)),
        class_count=class_count,
        quantized=quantized,
    )


def generative_spec(input_dim: int = 16, hidden: int = 32, out_dim: int = 10) -> ModelSpec:
    """Small noise-to-vector model with the squashing head."""
    return ModelSpec(
        input_shape=(input_dim,),
        layers=(Dense(hidden), Relu(), Dense(out_dim)),
        class_count=out_dim,
        head=SQUASH_HEAD,
    )


# --- weights ----------------------------------------------------------------


@dataclass(frozen=True)
class LayerWeights:
    w: np.ndarray           # float32; conv (kh,kw,cin,f), dense (in,out)
    b: np.ndarray           # float32 (out,)
    qw: np.ndarray | None = None   # int8, same shape as w
    qscale: float | None = None    # per-tensor dequantization scale


@dataclass(frozen=True)
class WeightSet:
    tensors: tuple[LayerWeights | None, ...]  # aligned with ModelSpec.layers
    dataset_seed: int
    train_seed: int
    epochs: int
    lr: float
    fit_accuracy: float

    def save(self, path: str) -> None:
        arrays: dict[str, np.ndarray] = {}
        for i, lw in enumerate(self.tensors):
            if lw is None:
                continue
            arrays[f"w{i}"] = lw.w
            arrays[f"b{i}"] = lw.b
            if lw.qw is not None:
                arrays[f"qw{i}"] = lw.qw
                arrays[f"qs{i}"] = np.float32(lw.qscale)
        arrays["meta"] = np.array(
            [self.dataset_seed, self.train_seed, self.epochs], dtype=np.int64
        )
        arrays["meta_f"] = np.array([self.lr, self.fit_accuracy], dtype=np.float64)
        arrays["n_layers"] = np.array([len(self.tensors)], dtype=np.int64)
        np.savez(path, **arrays)

    @staticmethod
    def load(path: str) -> "WeightSet":
        with np.load(path) as data:
            n = int(data["n_layers"][0])
            tensors: list[LayerWeights | None] = []
            for i in range(n):
                if f"w{i}" not in data:
                    tensors.append(None)
                    continue
                qw = data[f"qw{i}"] if f"qw{i}" in data else None
                qs = float(data[f"qs{i}"]) if f"qs{i}" in data else None
                tensors.append(LayerWeights(data[f"w{i}"], data[f"b{i}"], qw, qs))
            ds, ts, ep = (int(v) for v in data["meta"])
            lr, fit = (float(v) for v in data["meta_f"])
        return WeightSet(tuple(tensors), ds, ts, ep, lr, fit)


def quantize_tensor(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric int8 with one scale per tensor; scale chosen so +-max maps to +-127.

    The scale is snapped to the float32 grid up front: the emitted C source and
    the reference forward pass both work in float32, and keeping the canonical
    value at that precision makes save/load round-trips lossless.
    """
    peak = float(np.max(np.abs(w)))
    scale = float(np.float32(peak / 127.0)) if peak > 0 else 1.0
    q = np.clip(np.round(w / scale), -127, 127).astype(np.int8)
    return q, scale


def init_weights(spec: ModelSpec, seed: int) -> list[LayerWeights | None]:
    rng = np.random.default_rng(seed)
    shapes = spec.layer_shapes()
    out: list[LayerWeights | None] = []
    for i, layer in enumerate(spec.layers):
        in_shape = shapes[i]
        if isinstance(layer, Conv2d):
            kh, kw = layer.kernel
            cin = in_shape[2]
            fan_in = kh * kw * cin
            w = rng.standard_normal((kh, kw, cin, layer.filters), dtype=np.float32)
            w *= np.float32(np.sqrt(2.0 / fan_in))
            b = np.zeros(layer.filters, dtype=np.float32)
            out.append(LayerWeights(w, b))
        elif isinstance(layer, Dense):
            fan_in = int(np.prod(in_shape))
            w = rng.standard_normal((fan_in, layer.units), dtype=np.float32)
            w *= np.float32(np.sqrt(2.0 / fan_in))
            b = np.zeros(layer.units, dtype=np.float32)
            out.append(LayerWeights(w, b))
        else:
            out.append(None)
    return out


# --- forward passes ---------------------------------------------------------
#
# Two paths exist on purpose. The training path vectorizes freely (matmuls);
# the exact path reproduces the generated kernels' per-output accumulation
# order in float32 so binary and reference agree to the last bit.


def _conv_indices(in_shape: tuple[int, int, int], layer: Conv2d) -> tuple[np.ndarray, tuple[int, int]]:
    """Flat-input gather indices (positions x taps) for im2col."""
    h, w, cin = in_shape
    kh, kw = layer.kernel
    s = layer.stride
    oh = (h - kh) // s + 1
    ow = (w - kw) // s + 1
    idx = np.empty((oh * ow, kh * kw * cin), dtype=np.int64)
    p = 0
    for i in range(oh):
        for j in range(ow):
            t = 0
            for k in range(kh):
                for l in range(kw):
                    for c in range(cin):
                        idx[p, t] = ((i * s + k) * w + (j * s + l)) * cin + c
                        t += 1
            p += 1
    return idx, (oh, ow)


def _effective_w(lw: LayerWeights, quantized: bool) -> np.ndarray:
    """Weights as the kernel sees them: dequantized int8 or raw float."""
    if quantized and lw.qw is not None:
        return (lw.qw.astype(np.float32) * np.float32(lw.qscale)).astype(np.float32)
    return lw.w


def forward_train(
    spec: ModelSpec, tensors: list[LayerWeights | None], x: np.ndarray
) -> tuple[np.ndarray, list]:
    """Fast float32 forward pass; returns (output, per-layer cache for backprop)."""
    cache = []
    act = x.astype(np.float32)
    shapes = spec.layer_shapes()
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            idx, (oh, ow) = _conv_indices(shapes[i], layer)
            flat = act.reshape(len(act), -1)
            col = flat[:, idx]                             # (n, P, K)
            wmat = tensors[i].w.reshape(-1, layer.filters)  # (K, F)
            out = col @ wmat + tensors[i].b
            cache.append(("conv", col, idx, flat.shape))
            act = out.reshape(len(act), oh, ow, layer.filters)
        elif isinstance(layer, Dense):
            flat = act.reshape(len(act), -1)
            cache.append(("dense", flat))
            act = flat @ tensors[i].w + tensors[i].b
        else:
            cache.append(("relu", act))
            act = np.maximum(act, 0.0).astype(np.float32)
    return act.reshape(len(act), -1), cache


def predict_reference(spec: ModelSpec, weights: WeightSet, x: np.ndarray) -> np.ndarray:
    """Bit-exact mirror of the generated binary; returns logits / head outputs.

    Dense: i-outer accumulation. Conv: (c, k, l)-ordered accumulation per
    output element. All arithmetic float32, no FMA, matching a build with
    floating-point contraction disabled.
    """
    if x.shape[1:] != spec.input_shape:
        raise ShapeMismatch(f"inputs {x.shape[1:]} vs model {spec.input_shape}")
    act = x.astype(np.float32)
    shapes = spec.layer_shapes()
    for li, layer in enumerate(spec.layers):
        lw = weights.tensors[li]
        if isinstance(layer, Conv2d):
            w = _effective_w(lw, spec.quantized)
            kh, kw = layer.kernel
            s = layer.stride
            h, w_in, cin = shapes[li]
            oh, ow = shapes[li + 1][0], shapes[li + 1][1]
            acc = np.empty((len(act), oh, ow, layer.filters), dtype=np.float32)
            acc[:] = lw.b
            src = act.reshape(len(act), h, w_in, cin)
            for c in range(cin):
                for k in range(kh):
                    for l in range(kw):
                        patch = src[:, k : k + oh * s : s, l : l + ow * s : s, c]
                        acc += patch[..., None] * w[k, l, c]
            act = acc
        elif isinstance(layer, Dense):
            w = _effective_w(lw, spec.quantized)
            flat = act.reshape(len(act), -1)
            acc = np.broadcast_to(lw.b, (len(act), layer.units)).astype(np.float32).copy()
            for i in range(w.shape[0]):
                acc += flat[:, i, None] * w[i]
            act = acc
        else:
            act = np.where(act > 0.0, act, np.float32(0.0)).astype(np.float32)
    out = act.reshape(len(act), -1)
    if spec.head == SQUASH_HEAD:
        t = np.minimum(np.maximum(out, np.float32(-3.0)), np.float32(3.0))
        s2 = t * t
        num = t * (np.float32(27.0) + s2)
        den = np.float32(27.0) + np.float32(9.0) * s2
        out = (num / den).astype(np.float32)
    return out


def predict_classes(spec: ModelSpec, weights: WeightSet, x: np.ndarray) -> np.ndarray:
    """Argmax over the exact reference outputs (first maximum wins, like the binary)."""
    return np.argmax(predict_reference(spec, weights, x), axis=1)


# --- training ---------------------------------------------------------------


def _softmax_xent_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(p[np.arange(n), labels] + 1e-12)))
    g = p.astype(np.float32)
    g[np.arange(n), labels] -= 1.0
    return loss, (g / np.float32(n)).astype(np.float32)


def train(
    spec: ModelSpec,
    data: FakeDataset,
    epochs: int = 200,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 32,
) -> WeightSet:
    """Plain minibatch SGD until the model memorizes its fake dataset.

    Classifier heads minimize softmax cross-entropy on the fake labels; the
    squashing head regresses to +-1 one-hot targets with squared error, and
    fit accuracy is argmax agreement with the labels in both cases. Raises
    UnderTrained when the final fit accuracy is below the well-trained bar.
    """
    if data.inputs.shape[1:] != spec.input_shape:
        raise ShapeMismatch(
            f"dataset shape {data.inputs.shape[1:]} vs model {spec.input_shape}"
        )
    if data.class_count != spec.class_count:
        raise ShapeMismatch(
            f"dataset classes {data.class_count} vs model {spec.class_count}"
        )
    tensors = init_weights(spec, seed)
    rng = np.random.default_rng(seed + 1)
    n = len(data)
    x_all = data.inputs
    y_all = data.labels
    targets = None
    if spec.head == SQUASH_HEAD:
        targets = np.full((n, spec.class_count), -1.0, dtype=np.float32)
        targets[np.arange(n), y_all] = 1.0

    for _epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            sel = order[lo : lo + batch_size]
            xb, yb = x_all[sel], y_all[sel]
            out, cache = forward_train(spec, tensors, xb)
            if spec.head == SQUASH_HEAD:
                th = np.tanh(out)
                diff = (th - targets[sel]).astype(np.float32)
                grad = (diff * (1.0 - th * th) * (2.0 / len(sel))).astype(np.float32)
            else:
                _loss, grad = _softmax_xent_grad(out, yb)
            _backward(spec, tensors, cache, grad, np.float32(lr))

    fit = _fit_accuracy(spec, tensors, data)
    weights = _finalize(spec, tensors, data.seed, seed, epochs, lr, fit)
    if fit < WELL_TRAINED_BAR:
        raise UnderTrained(
            f"fit accuracy {fit:.3f} below the well-trained bar {WELL_TRAINED_BAR}"
        )
    return weights


def _backward(
    spec: ModelSpec,
    tensors: list[LayerWeights | None],
    cache: list,
    grad: np.ndarray,
    lr: np.float32,
) -> None:
    """SGD step: walk layers backward, update in place."""
    g = grad
    for li in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[li]
        entry = cache[li]
        if isinstance(layer, Dense):
            flat = entry[1]
            gw = flat.T @ g
            gb = g.sum(axis=0)
            g = (g @ tensors[li].w.T).astype(np.float32)
            tensors[li] = LayerWeights(
                (tensors[li].w - lr * gw).astype(np.float32),
                (tensors[li].b - lr * gb).astype(np.float32),
            )
        elif isinstance(layer, Conv2d):
            _tag, col, idx, flat_shape = entry
            f = layer.filters
            gout = g.reshape(len(g), -1, f)            # (n, P, F)
            wmat = tensors[li].w.reshape(-1, f)
            gw = np.einsum("npk,npf->kf", col, gout).reshape(tensors[li].w.shape)
            gb = gout.sum(axis=(0, 1))
            gcol = gout @ wmat.T                       # (n, P, K)
            gflat = np.zeros(flat_shape, dtype=np.float32)
            np.add.at(
                gflat,
                (np.arange(len(g))[:, None, None], idx[None, :, :]),
                gcol.astype(np.float32),
            )
            g = gflat
            tensors[li] = LayerWeights(
                (tensors[li].w - lr * gw).astype(np.float32),
                (tensors[li].b - lr * gb).astype(np.float32),
            )
        else:  # relu
            pre = entry[1]
            g = (g.reshape(pre.shape) * (pre > 0)).astype(np.float32)


def _finalize(
    spec: ModelSpec,
    tensors: list[LayerWeights | None],
    dataset_seed: int,
    train_seed: int,
    epochs: int,
    lr: float,
    fit: float,
) -> WeightSet:
    final: list[LayerWeights | None] = []
    for lw in tensors:
        if lw is None:
            final.append(None)
        elif spec.quantized:
            qw, qs = quantize_tensor(lw.w)
            final.append(LayerWeights(lw.w, lw.b, qw, qs))
        else:
            final.append(lw)
    return WeightSet(tuple(final), dataset_seed, train_seed, epochs, lr, fit)


def _fit_accuracy(spec: ModelSpec, tensors: list[LayerWeights | None], data: FakeDataset) -> float:
    ws = _finalize(spec, tensors, data.seed, 0, 0, 0.0, 0.0)
    preds = predict_classes(spec, ws, data.inputs)
    return float(np.mean(preds == data.labels))


# --- C code generation ------------------------------------------------------


def _cfloat(v: float) -> str:
    s = f"{float(v):.9g}"
    if not any(ch in s for ch in ".einf"):
        s += ".0"
    return s + "f"


def _format_array(values: np.ndarray, fmt, per_line: int = 6) -> str:
    flat = [fmt(v) for v in values.ravel().tolist()]
    lines = []
    for lo in range(0, len(flat), per_line):
        lines.append("    " + ", ".join(flat[lo : lo + per_line]) + ",")
    return "\n".join(lines)


def _weight_decls(spec: ModelSpec, weights: WeightSet) -> list[tuple[str, str, np.ndarray | None]]:
    """(declaration, array body or scalar, values) per emitted weight symbol."""
    shapes = spec.layer_shapes()
    out: list[tuple[str, str, np.ndarray | None]] = []
    for li, layer in enumerate(spec.layers):
        lw = weights.tensors[li]
        if isinstance(layer, (Conv2d, Dense)):
            if np.any(~np.isfinite(lw.w)) or np.any(~np.isfinite(lw.b)):
                raise UnsupportedLayer(f"layer {li}: non-finite weights")
            if isinstance(layer, Conv2d):
                kh, kw = layer.kernel
                cin = shapes[li][2]
                dims = f"[{kh}][{kw}][{cin}][{layer.filters}]"
                bias_dim = f"[{layer.filters}]"
            else:
                fan_in = int(np.prod(shapes[li]))
                dims = f"[{fan_in}][{layer.units}]"
                bias_dim = f"[{layer.units}]"
            if spec.quantized:
                out.append((f"const int8_t W{li}{dims}", "int8", lw.qw))
                out.append((f"const float W{li}_scale", _cfloat(lw.qscale), None))
            else:
                out.append((f"const float W{li}{dims}", "float", lw.w))
            out.append((f"const float B{li}{bias_dim}", "float", lw.b))
    return out


def emit_weight_source(spec: ModelSpec, weights: WeightSet) -> str:
    """Weight-definition translation unit: every trained tensor as a const array.

    Weights live in their own TU with external linkage so the optimizer
    compiling the kernels cannot see the values. That keeps them out of
    instruction immediates: the kernel .text depends only on the model
    structure, never on the trained values.
    """
    parts = ["/* Generated model weights. Do not edit: regenerate instead. */"]
    parts.append("")
    parts.append("#include <stdint.h>")
    parts.append("")
    for decl, kind, values in _weight_decls(spec, weights):
        if values is None:
            parts.append(f"{decl} = {kind};")
            continue
        parts.append(f"{decl} = {{")
        if kind == "int8":
            parts.append(_format_array(values, lambda v: str(int(v)), 12))
        else:
            parts.append(_format_array(values, _cfloat))
        parts.append("};")
    return "\n".join(parts) + "\n"


def emit_kernel_source(spec: ModelSpec, weights: WeightSet) -> str:
    """Kernel/driver translation unit instantiating the runtime loop nests.

    References the weight arrays as extern const (definitions come from the
    companion weight source); activations are static buffers; main reads the
    tensor file, runs the layer chain per input row, and prints one
    prediction token line per row.
    """
    shapes = spec.layer_shapes()
    rank = 1 + len(spec.input_shape)
    in_count = int(np.prod(spec.input_shape))
    out_count = spec.class_count

    parts: list[str] = []
    parts.append("/* Generated model inference program. Do not edit: regenerate instead. */")
    parts.append("")
    parts.append('#include "fscn_runtime.h"')
    parts.append("")
    for decl, _kind, _values in _weight_decls(spec, weights):
        parts.append(f"extern {decl};")
    parts.append("")

    # Kernel instantiations.
    for li, layer in enumerate(spec.layers):
        in_shape = shapes[li]
        if isinstance(layer, Conv2d):
            h, w, cin = in_shape
            kh, kw = layer.kernel
            if spec.quantized:
                parts.append(
                    f"FSCN_CONV2D_Q(layer{li}_conv, {h}, {w}, {cin}, {kh}, {kw}, "
                    f"{layer.stride}, {layer.filters}, W{li}, W{li}_scale, B{li})"
                )
            else:
                parts.append(
                    f"FSCN_CONV2D(layer{li}_conv, {h}, {w}, {cin}, {kh}, {kw}, "
                    f"{layer.stride}, {layer.filters}, W{li}, B{li})"
                )
        elif isinstance(layer, Dense):
            fan_in = int(np.prod(in_shape))
            if spec.quantized:
                parts.append(
                    f"FSCN_DENSE_Q(layer{li}_dense, {fan_in}, {layer.units}, "
                    f"W{li}, W{li}_scale, B{li})"
                )
            else:
                parts.append(
                    f"FSCN_DENSE(layer{li}_dense, {fan_in}, {layer.units}, W{li}, B{li})"
                )
        else:
            count = int(np.prod(in_shape))
            parts.append(f"FSCN_RELU(layer{li}_relu, {count})")
    if spec.head == ARGMAX_HEAD:
        parts.append(f"FSCN_ARGMAX(head_argmax, {out_count})")
    else:
        parts.append(f"FSCN_SQUASH(head_squash, {out_count})")
    parts.append("")

    # Activation buffers: one per layer output; relu reuses its input buffer.
    parts.append(f"static float buf_in[{in_count}];")
    buf_of = ["buf_in"]
    for li, layer in enumerate(spec.layers):
        if isinstance(layer, Relu):
            buf_of.append(buf_of[-1])
            continue
        count = int(np.prod(shapes[li + 1]))
        parts.append(f"static float buf{li}[{count}];")
        buf_of.append(f"buf{li}")
    parts.append("")

    # Main: header validation, row loop, layer chain, prediction printing.
    parts.append("int main(int argc, char **argv)")
    parts.append("{")
    parts.append("    FscnHeader h;")
    parts.append("    if (argc != 2)")
    parts.append("        return FSCN_EXIT_BADFILE;")
    parts.append('    FILE *f = fopen(argv[1], "r");')
    parts.append("    if (!f)")
    parts.append("        return FSCN_EXIT_BADFILE;")
    parts.append("    if (fscn_read_header(f, &h)) {")
    parts.append("        fclose(f);")
    parts.append("        return FSCN_EXIT_BADFILE;")
    parts.append("    }")
    shape_checks = [f"h.rank != {rank}"]
    for di, dim in enumerate(spec.input_shape):
        shape_checks.append(f"h.dims[{di + 1}] != {dim}")
    shape_checks.append(f"h.class_count != {out_count}")
    parts.append(f"    if ({' || '.join(shape_checks)}) {{")
    parts.append("        fclose(f);")
    parts.append("        return FSCN_EXIT_SHAPE;")
    parts.append("    }")
    parts.append("    for (int row = 0; row < h.dims[0]; row++) {")
    parts.append(f"        if (fscn_read_row(f, buf_in, {in_count})) {{")
    parts.append("            fclose(f);")
    parts.append("            return FSCN_EXIT_BADFILE;")
    parts.append("        }")
    for li, layer in enumerate(spec.layers):
        src = buf_of[li]
        dst = buf_of[li + 1]
        if isinstance(layer, Conv2d):
            parts.append(f"        layer{li}_conv({src}, {dst});")
        elif isinstance(layer, Dense):
            parts.append(f"        layer{li}_dense({src}, {dst});")
        else:
            parts.append(f"        layer{li}_relu({src});")
    final_buf = buf_of[-1]
    if spec.head == ARGMAX_HEAD:
        parts.append(f"        fscn_print_class(head_argmax({final_buf}));")
    else:
        parts.append(f"        head_squash({final_buf});")
        parts.append(f"        fscn_print_vector({final_buf}, {out_count});")
    parts.append("    }")
    parts.append("    fclose(f);")
    parts.append("    return FSCN_EXIT_OK;")
    parts.append("}")
    return "\n".join(parts) + "\n"


# --- tensor files -----------------------------------------------------------


def write_tensor_file(path: str, inputs: np.ndarray, class_count: int) -> str:
    """Write inputs in the runtime's tensor-file format (%.9g round-trips float32)."""
    dims = inputs.shape
    with open(path, "w") as fh:
        fh.write(f"FSCN1 {len(dims)} {' '.join(str(d) for d in dims)} {class_count} f32\n")
        flat = inputs.reshape(len(inputs), -1)
        for row in flat:
            fh.write(" ".join(f"{float(v):.9g}" for v in row.tolist()) + "\n")
    return path


# --- compiler configs and builds --------------------------------------------


@dataclass(frozen=True)
class CompilerConfig:
    opt_level: str = "O3"     # "O0" or "O3"
    vectorize: bool = True    # True: AVX2+FMA; False: scalar only

    def __post_init__(self) -> None:
        if self.opt_level not in ("O0", "O3"):
            raise ValueError(f"opt_level must be O0 or O3, got {self.opt_level!r}")

    def flags(self) -> list[str]:
        base = [
            "-std=c11",
            f"-{self.opt_level}",
            # No FMA contraction: reference evaluation must match bit-for-bit.
            "-ffp-contract=off",
            # No build-id: byte-identical rebuilds.
            "-Wl,--build-id=none",
            # No canary: the stack protector compares against per-run random
            # auxv bytes, so flips landing in that code would score
            # nondeterministically across otherwise identical runs.
            "-fno-stack-protector",
        ]
        if self.vectorize:
            base += ["-mavx2", "-mfma"]
        else:
            base += ["-fno-tree-vectorize"]
        return base

    def config_hash(self) -> str:
        return hashlib.sha256(" ".join(self.flags()).encode()).hexdigest()[:16]

    def tag(self) -> str:
        return f"{self.opt_level.lower()}-{'avx2' if self.vectorize else 'novec'}"


def find_runtime_dir(explicit: str | None = None) -> str:
    """Locate the kernel-runtime kit (include/fscn_runtime.h + src/fscn_io.c).

    An explicit path is authoritative: if it does not hold the kit, fail
    rather than silently building against whatever environment or
    directory-walk discovery turns up instead.
    """

    def has_kit(cand: str) -> bool:
        return os.path.isfile(
            os.path.join(cand, "include", "fscn_runtime.h")
        ) and os.path.isfile(os.path.join(cand, "src", "fscn_io.c"))

    if explicit:
        if has_kit(explicit):
            return os.path.abspath(explicit)
        raise ToolchainMissing(
            f"no kernel-runtime kit at {explicit!r} "
            "(need include/fscn_runtime.h and src/fscn_io.c)"
        )
    candidates = []
    env = os.environ.get("FSCN_RUNTIME_DIR")
    if env:
        candidates.append(env)
    here = os.path.abspath(os.getcwd())
    while True:
        candidates.append(os.path.join(here, "runtime"))
        parent = os.path.dirname(here)
        if parent == here:
            break
        here = parent
    for cand in candidates:
        if has_kit(cand):
            return os.path.abspath(cand)
    raise ToolchainMissing(
        "kernel-runtime kit not found: pass runtime_dir or set FSCN_RUNTIME_DIR "
        "(need include/fscn_runtime.h and src/fscn_io.c)"
    )


def find_compiler() -> str:
    cc = os.environ.get("CC") or "gcc"
    path = shutil.which(cc)
    if path is None:
        raise ToolchainMissing(f"C compiler {cc!r} not found on PATH")
    return path


@dataclass(frozen=True)
class CorpusEntry:
    entry_id: str
    spec: ModelSpec
    weights: WeightSet
    config: CompilerConfig
    binary_path: str
    text_sha256: str
    file_sha256: str

    def structure_key(self) -> tuple[str, str]:
        return (self.spec.structure_hash(), self.config.config_hash())


def build_entry(
    spec: ModelSpec,
    weights: WeightSet,
    config: CompilerConfig,
    out_dir: str,
    entry_id: str = "entry",
    runtime_dir: str | None = None,
    check_inputs: np.ndarray | None = None,
) -> CorpusEntry:
    """Generate, compile, and baseline-check one executable.

    The compile runs inside the entry directory on constant basenames
    (model.c, weights.c, fscn_io.c) so rebuilds are byte-identical regardless
    of the absolute paths involved. Weights are compiled as their own
    translation unit so the kernel object never embeds weight values in
    code. The baseline check runs the fresh binary on check_inputs and
    demands exact agreement with the in-process reference.
    """
    cc = find_compiler()
    kit = find_runtime_dir(runtime_dir)
    entry_dir = os.path.join(out_dir, entry_id)
    os.makedirs(entry_dir, exist_ok=True)

    with open(os.path.join(entry_dir, "model.c"), "w") as fh:
        fh.write(emit_kernel_source(spec, weights))
    with open(os.path.join(entry_dir, "weights.c"), "w") as fh:
        fh.write(emit_weight_source(spec, weights))
    shutil.copy(os.path.join(kit, "src", "fscn_io.c"), os.path.join(entry_dir, "fscn_io.c"))
    shutil.copy(
        os.path.join(kit, "include", "fscn_runtime.h"),
        os.path.join(entry_dir, "fscn_runtime.h"),
    )

    binary = os.path.join(entry_dir, "model")
    cmd = [cc, *config.flags(), "-I.", "model.c", "weights.c", "fscn_io.c", "-o", "model"]
    proc = subprocess.run(cmd, cwd=entry_dir, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ToolchainMissing(
            f"compile failed ({' '.join(cmd)}):\n{proc.stderr[-2000:]}"
        )

    img = elfimage.load(binary)
    entry = CorpusEntry(
        entry_id=entry_id,
        spec=spec,
        weights=weights,
        config=config,
        binary_path=binary,
        text_sha256=img.text_sha256(),
        file_sha256=img.file_sha256(),
    )

    if check_inputs is not None and len(check_inputs):
        _baseline_check(entry, check_inputs, entry_dir)
    weights.save(os.path.join(entry_dir, "weights.npz"))
    with open(os.path.join(entry_dir, "entry.json"), "w") as fh:
        json.dump(entry_doc(entry), fh, indent=1, sort_keys=True)
    return entry


def _baseline_check(entry: CorpusEntry, inputs: np.ndarray, workdir: str) -> None:
    eval_path = os.path.join(workdir, "baseline-eval.txt")
    write_tensor_file(eval_path, inputs, entry.spec.class_count)
    out = run_once(ExecSpec(binary=entry.binary_path, argv=(eval_path,), timeout_ms=30000))
    if out.status is not RunStatus.COMPLETED:
        raise BaselineMismatch(
            f"{entry.entry_id}: baseline run ended {out.status.value} "
            f"(exit={out.exit_code} signal={out.term_signal})"
        )
    n = len(inputs)
    if entry.spec.head == ARGMAX_HEAD:
        got = parse_class_predictions(out.stdout, n, entry.spec.class_count)
        if got is None:
            raise BaselineMismatch(f"{entry.entry_id}: unparseable baseline stdout")
        want = predict_classes(entry.spec, entry.weights, inputs)
        bad = int(np.sum(got != want))
        if bad:
            raise BaselineMismatch(
                f"{entry.entry_id}: binary and reference disagree on {bad}/{n} inputs"
            )
    else:
        got = parse_vector_predictions(out.stdout, n, entry.spec.class_count)
        if got is None:
            raise BaselineMismatch(f"{entry.entry_id}: unparseable baseline stdout")
        want = predict_reference(entry.spec, entry.weights, inputs)
        if not np.array_equal(got, want.astype(np.float32)):
            raise BaselineMismatch(f"{entry.entry_id}: generative outputs differ")
    os.unlink(eval_path)


def entry_doc(entry: CorpusEntry) -> dict:
    return {
        "entry_id": entry.entry_id,
        "model": entry.spec.to_dict(),
        "structure_hash": entry.spec.structure_hash(),
        "config": {"opt_level": entry.config.opt_level, "vectorize": entry.config.vectorize},
        "config_hash": entry.config.config_hash(),
        "dataset_seed": entry.weights.dataset_seed,
        "train_seed": entry.weights.train_seed,
        "epochs": entry.weights.epochs,
        "lr": entry.weights.lr,
        "fit_accuracy": entry.weights.fit_accuracy,
        "binary": os.path.basename(entry.binary_path),
        "text_sha256": entry.text_sha256,
        "file_sha256": entry.file_sha256,
    }


@dataclass(frozen=True)
class CorpusFamily:
    """n same-structure entries (distinct fake datasets) plus a held-out victim."""

    spec: ModelSpec
    config: CompilerConfig
    entries: tuple[CorpusEntry, ...]
    victim: CorpusEntry
    datasets: tuple[FakeDataset, ...]
    victim_dataset: FakeDataset
    root: str

    def dataset_of(self, entry: CorpusEntry) -> FakeDataset:
        if entry.entry_id == self.victim.entry_id:
            return self.victim_dataset
        for ds, e in zip(self.datasets, self.entries):
            if e.entry_id == entry.entry_id:
                return ds
        raise KeyError(entry.entry_id)


@dataclass(frozen=True)
class FamilyPlan:
    """Everything needed to (re)build a family deterministically."""

    spec: ModelSpec
    config: CompilerConfig = field(default_factory=CompilerConfig)
    n: int = 10
    base_seed: int = 1000
    dataset_size: int = 256
    epochs: int = 200
    lr: float = 0.05

    def to_dict(self) -> dict:
        return {
            "model": self.spec.to_dict(),
            "config": {"opt_level": self.config.opt_level, "vectorize": self.config.vectorize},
            "n": self.n,
            "base_seed": self.base_seed,
            "dataset_size": self.dataset_size,
            "epochs": self.epochs,
            "lr": self.lr,
        }

    @staticmethod
    def from_dict(doc: dict) -> "FamilyPlan":
        return FamilyPlan(
            spec=ModelSpec.from_dict(doc["model"]),
            config=CompilerConfig(
                doc.get("config", {}).get("opt_level", "O3"),
                doc.get("config", {}).get("vectorize", True),
            ),
            n=doc.get("n", 10),
            base_seed=doc.get("base_seed", 1000),
            dataset_size=doc.get("dataset_size", 256),
            epochs=doc.get("epochs", 200),
            lr=doc.get("lr", 0.05),
        )


def build_family(
    plan: FamilyPlan, out_dir: str, runtime_dir: str | None = None
) -> CorpusFamily:
    """Build the n-member family plus victim; assert identical .text bytes.

    Dataset seeds are base_seed + i (victim gets base_seed + n); training
    seeds are offset by a constant so dataset and init noise never collide.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries: list[CorpusEntry] = []
    datasets: list[FakeDataset] = []

    def one(i: int, entry_id: str) -> tuple[CorpusEntry, FakeDataset]:
        ds = make_fake_dataset(
            plan.base_seed + i, plan.dataset_size, plan.spec.input_shape, plan.spec.class_count
        )
        ws = train(plan.spec, ds, epochs=plan.epochs, lr=plan.lr, seed=plan.base_seed + 5000 + i)
        entry = build_entry(
            plan.spec,
            ws,
            plan.config,
            os.path.join(out_dir, "entries"),
            entry_id=entry_id,
            runtime_dir=runtime_dir,
            check_inputs=ds.inputs,
        )
        return entry, ds

    for i in range(plan.n):
        entry, ds = one(i, f"m{i:02d}")
        entries.append(entry)
        datasets.append(ds)
    victim, victim_ds = one(plan.n, "victim")

    texts = {e.text_sha256 for e in entries} | {victim.text_sha256}
    if len(texts) != 1:
        raise StructureMismatch(
            f".text differs across same-structure entries: {sorted(texts)}"
        )

    family = CorpusFamily(
        spec=plan.spec,
        config=plan.config,
        entries=tuple(entries),
        victim=victim,
        datasets=tuple(datasets),
        victim_dataset=victim_ds,
        root=out_dir,
    )
    manifest = {
        "plan": plan.to_dict(),
        "structure_hash": plan.spec.structure_hash(),
        "config_hash": plan.config.config_hash(),
        "text_sha256": victim.text_sha256,
        "entries": [entry_doc(e) for e in entries],
        "victim": entry_doc(victim),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return family


def load_family(root: str) -> CorpusFamily:
    """Reload a built family from its manifest (binaries must still exist)."""
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    plan = FamilyPlan.from_dict(manifest["plan"])

    def entry_from(doc: dict) -> CorpusEntry:
        entry_dir = os.path.join(root, "entries", doc["entry_id"])
        return CorpusEntry(
            entry_id=doc["entry_id"],
            spec=plan.spec,
            weights=WeightSet.load(os.path.join(entry_dir, "weights.npz")),
            config=plan.config,
            binary_path=os.path.join(entry_dir, doc["binary"]),
            text_sha256=doc["text_sha256"],
            file_sha256=doc["file_sha256"],
        )

    entries = tuple(entry_from(doc) for doc in manifest["entries"])
    victim = entry_from(manifest["victim"])
    datasets = tuple(
        make_fake_dataset(
            doc["dataset_seed"], plan.dataset_size, plan.spec.input_shape, plan.spec.class_count
        )
        for doc in manifest["entries"]
    )
    victim_ds = make_fake_dataset(
        manifest["victim"]["dataset_seed"],
        plan.dataset_size,
        plan.spec.input_shape,
        plan.spec.class_count,
    )
    return CorpusFamily(
        spec=plan.spec,
        config=plan.config,
        entries=entries,
        victim=victim,
        datasets=datasets,
        victim_dataset=victim_ds,
        root=root,
    )
