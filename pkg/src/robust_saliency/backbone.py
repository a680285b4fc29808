"""A tiny fully-convolutional saliency network with explicit backpropagation.

Every convolution is stride 1 with "same" padding (reflect-101 by default,
``wrap`` for periodic test fixtures); ReLU sits between layers and the last
layer emits two score channels (non-salient, salient).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .core import MEAN_SUBTRACTED, ConfigError, DataError, ImageTensor, Rng, as_mask

PADDING_MODES = ("reflect", "wrap")


class Backbone(Protocol):
    """What the attack and pipeline code needs from a dense predictor."""

    def scores(self, x: np.ndarray) -> np.ndarray: ...

    def input_gradient(self, x: np.ndarray, weights: np.ndarray) -> np.ndarray: ...


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)

    @property
    def pad(self) -> int:
        return self.weight.shape[2] // 2


@dataclass
class ConvNet:
    layers: list[ConvLayer]
    input_scale: float = 1.0 / 64.0
    padding: str = "reflect"
    _index_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        if self.padding not in PADDING_MODES:
            raise ConfigError(f"padding must be one of {PADDING_MODES}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ConfigError("layer channel counts do not chain")
        for layer in self.layers:
            kh, kw = layer.weight.shape[2:]
            if kh != kw or kh % 2 == 0:
                raise ConfigError("kernels must be square with odd size")
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ConfigError("bias length must equal output channels")
        if self.layers[-1].weight.shape[0] != 2:
            raise ConfigError("final layer must output 2 channels")

    @property
    def in_channels(self) -> int:
        return self.layers[0].weight.shape[1]

    def copy(self) -> "ConvNet":
        return ConvNet(
            [ConvLayer(l.weight.copy(), l.bias.copy()) for l in self.layers],
            self.input_scale,
            self.padding,
        )

    # -- padding via index maps, shared by forward and backward

    def _pad_index(self, n: int, pad: int) -> np.ndarray:
        key = (n, pad)
        idx = self._index_cache.get(key)
        if idx is None:
            k = np.arange(-pad, n + pad)
            if self.padding == "wrap":
                idx = np.mod(k, n)
            elif n == 1:
                idx = np.zeros_like(k)
            else:
                period = 2 * (n - 1)
                k = np.mod(k, period)
                idx = np.where(k < n, k, period - k)
            self._index_cache[key] = idx
        return idx

    def _pad(self, x: np.ndarray, pad: int) -> np.ndarray:
        ri = self._pad_index(x.shape[0], pad)
        ci = self._pad_index(x.shape[1], pad)
        return x[ri][:, ci]

    def _unpad(self, gp: np.ndarray, shape: tuple[int, ...], pad: int) -> np.ndarray:
        ri = self._pad_index(shape[0], pad)
        ci = self._pad_index(shape[1], pad)
        rows = np.zeros((shape[0],) + gp.shape[1:])
        np.add.at(rows, ri, gp)
        out = np.zeros(shape)
        np.add.at(out, (slice(None), ci), rows)
        return out

    # -- forward / backward

    def _forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise DataError(f"input shape {x.shape} does not match {self.in_channels} input channels")
        h = x * self.input_scale
        cache = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            k = layer.weight.shape[2]
            win = sliding_window_view(self._pad(h, layer.pad), (k, k), axis=(0, 1))
            z = np.tensordot(win, layer.weight, axes=([2, 3, 4], [1, 2, 3])) + layer.bias
            cache.append((h, win))
            h = z if i == last else np.maximum(z, 0.0)
        return h, cache

    def _backward(self, grad_scores: np.ndarray, cache: list, want_params: bool = True) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
        g = np.asarray(grad_scores, dtype=np.float64)
        grads: list[tuple[np.ndarray, np.ndarray]] = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            inp, win = cache[i]
            shape = inp.shape
            if want_params:
                dw = np.tensordot(g, win, axes=([0, 1], [0, 1]))
                grads.append((dw, g.sum(axis=(0, 1))))
            dwin = np.tensordot(g, layer.weight, axes=([2], [0]))  # (H, W, Cin, k, k)
            k = layer.weight.shape[2]
            p = layer.pad
            gp = np.zeros((shape[0] + 2 * p, shape[1] + 2 * p, shape[2]))
            for a in range(k):
                for b in range(k):
                    gp[a:a + shape[0], b:b + shape[1]] += dwin[:, :, :, a, b]
            g = self._unpad(gp, shape, p)
            if i > 0:
                # input of layer i is relu(z_{i-1})
                g = g * (inp > 0)
        grads.reverse()
        return g * self.input_scale, grads

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Per-pixel (non-salient, salient) scores for a mean-subtracted H x W x C array."""
        return self._forward(x)[0]

    def input_gradient(self, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Gradient of sum_{i,c} weights[i, c] * scores[i, c] with respect to x."""
        scores, cache = self._forward(x)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != scores.shape:
            raise DataError(f"weights {weights.shape} do not match scores {scores.shape}")
        return self._backward(weights, cache, want_params=False)[0]

    def backward(self, x: np.ndarray, grad_scores: np.ndarray) -> tuple[np.ndarray, list]:
        """Return (d/dx, [(d/dW, d/db) per layer]) for an upstream score gradient."""
        scores, cache = self._forward(x)
        if np.shape(grad_scores) != scores.shape:
            raise DataError("upstream gradient shape does not match scores")
        return self._backward(grad_scores, cache)

    # -- flat parameter views (optimizer, checkpoints, gradient checks)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out


def init_convnet(channels: Sequence[int] = (3, 16, 16, 16, 2), kernel: int = 3, seed: int = 0,
                 input_scale: float = 1.0 / 64.0, padding: str = "reflect") -> ConvNet:
    """He-initialised network; ``channels`` lists in/out widths of each layer."""
    gen = Rng(seed).child(0xB0).generator()
    layers = []
    for cin, cout in zip(channels[:-1], channels[1:]):
        fan_in = cin * kernel * kernel
        w = gen.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kernel, kernel))
        layers.append(ConvLayer(w, np.zeros(cout)))
    return ConvNet(layers, input_scale, padding)


def _input_array(params: ConvNet, image: ImageTensor | np.ndarray) -> np.ndarray:
    if isinstance(image, ImageTensor):
        if image.space != MEAN_SUBTRACTED:
            raise ConfigError(f"backbone expects a mean_subtracted image, got {image.space}")
        return image.data
    return np.asarray(image, dtype=np.float64)


def forward(params: ConvNet, image: ImageTensor | np.ndarray) -> np.ndarray:
    return params.scores(_input_array(params, image))


def saliency_from_scores(scores: np.ndarray) -> np.ndarray:
    """Two-class softmax, salient-class probability."""
    return expit(scores[..., 1] - scores[..., 0])


def saliency(params: ConvNet, image: ImageTensor | np.ndarray) -> np.ndarray:
    return saliency_from_scores(forward(params, image))


def saliency_grad_to_scores(scores: np.ndarray, grad_saliency: np.ndarray) -> np.ndarray:
    s = saliency_from_scores(scores)
    d = grad_saliency * s * (1.0 - s)
    return np.stack([-d, d], axis=-1)


def cross_entropy(scores: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean pixel-wise two-class cross-entropy and its gradient w.r.t. scores."""
    y = as_mask(gt).astype(np.float64)
    if y.shape != scores.shape[:2]:
        raise DataError("ground truth does not match score map")
    margin = scores[..., 1] - scores[..., 0]
    loss = np.where(y > 0, np.logaddexp(0.0, -margin), np.logaddexp(0.0, margin))
    n = y.size
    d = (expit(margin) - y) / n
    return float(loss.sum() / n), np.stack([-d, d], axis=-1)


def input_gradient(params: ConvNet, image: ImageTensor | np.ndarray, weights: np.ndarray) -> ImageTensor:
    return ImageTensor(params.input_gradient(_input_array(params, image), weights), MEAN_SUBTRACTED)


def param_gradient(params: ConvNet, image: ImageTensor | np.ndarray, gt: np.ndarray | None = None,
                   upstream: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Parameter gradient of the mean cross-entropy against ``gt``.

    ``upstream`` is either per-pixel weights on the cross-entropy terms
    (when ``gt`` is given) or dLoss/dSaliency from a downstream stage
    (when ``gt`` is None).
    """
    x = _input_array(params, image)
    scores = params.scores(x)
    if gt is not None:
        _, g = cross_entropy(scores, gt)
        if upstream is not None:
            g = g * np.asarray(upstream, dtype=np.float64)[..., None]
    elif upstream is not None:
        g = saliency_grad_to_scores(scores, np.asarray(upstream, dtype=np.float64))
    else:
        raise ConfigError("param_gradient needs gt or upstream")
    return params.backward(x, g)[1]
