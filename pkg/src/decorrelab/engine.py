"""Minimal deterministic differentiable layer engine on numpy arrays.

Provides exactly the primitives the custom architectures need: 2-D
convolution, max pooling, ReLU, fully connected layers, global average
pooling, binary cross-entropy on logits, and plain SGD. Every layer
implements an explicit forward/backward pair; there is no dynamic graph.

Conventions:
    * Activations are plain ndarrays, batch dimension first.
    * Training runs in float32; tests may feed float64 and the layers
      follow the input dtype (parameters are upcast by numpy promotion).
    * Forward calls are re-entrant: anything the backward pass needs is
      written into an explicit ``cache`` dict supplied by the caller, so
      a second stream (e.g. control-region data) can traverse the same
      layers without clobbering state.
    * All randomness flows through `seeded_rng`; identical keys yield
      identical streams (PCG64 behind numpy's SeedSequence).
"""
from __future__ import annotations

import hashlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


def _as_entropy(key) -> int:
    """Map an int or string key to a stable non-negative integer."""
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"rng keys must be int or str, got {type(key).__name__}")


def seeded_rng(*keys) -> np.random.Generator:
    """Deterministic PCG64 stream derived from integer/string keys.

    Identical keys produce identical streams on every platform, which is
    what makes parallel and serial runs bit-exact.
    """
    if not keys:
        raise ValueError("seeded_rng needs at least one key")
    return np.random.default_rng(np.random.SeedSequence([_as_entropy(k) for k in keys]))


class Parameter:
    """Trainable array plus a lazily allocated gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.asarray(g, dtype=self.value.dtype).copy()
        else:
            self.grad += g

    @property
    def shape(self):
        return self.value.shape


class Layer:
    """Base class: forward with optional cache, backward consumes it."""

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, cache: dict) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return []


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Layer):
    """2-D cross-correlation with bias, valid padding by default.

    Weights are shaped [out_channels, in_channels, kH, kW]; the forward
    pass gathers sliding windows and contracts them with the kernel in a
    single tensordot so the work lands in BLAS.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: str = "valid",
                 rng: np.random.Generator | None = None):
        if padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else seeded_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(_uniform_init(rng, (out_channels,), fan_in))

    def _pad_amount(self, extent: int) -> tuple[int, int]:
        if self.padding == "valid":
            return 0, 0
        out = -(-extent // self.stride)  # ceil
        total = max((out - 1) * self.stride + self.kernel_size - extent, 0)
        return total // 2, total - total // 2

    def forward(self, x, cache=None):
        if x.ndim != 4:
            raise ValueError(f"conv2d expects [B,C,H,W], got shape {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"conv2d channel mismatch: input has {x.shape[1]}, weights expect {self.in_channels}")
        k, s = self.kernel_size, self.stride
        ph, pw = self._pad_amount(x.shape[2]), self._pad_amount(x.shape[3])
        if ph != (0, 0) or pw != (0, 0):
            xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
        else:
            xp = x
        if xp.shape[2] < k or xp.shape[3] < k:
            raise ValueError(f"kernel {k}x{k} does not fit input of shape {x.shape}")
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        b_, c_, ho, wo = windows.shape[:4]
        # im2col once: [B*Ho*Wo, Cin*k*k], then a single GEMM
        cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b_ * ho * wo, -1)
        w2d = self.weight.value.reshape(self.out_channels, -1)
        y = cols @ w2d.T + self.bias.value
        y = np.ascontiguousarray(y.reshape(b_, ho, wo, self.out_channels).transpose(0, 3, 1, 2))
        if cache is not None:
            cache["cols"] = cols
            cache["x_shape"] = x.shape
            cache["pad"] = (ph, pw)
            cache["out_hw"] = (ho, wo)
        return y

    def backward(self, grad_out, cache, need_input_grad: bool = True):
        cols = cache["cols"]
        b_, c_, h_, w_ = cache["x_shape"]
        (pt, pb), (pl, pr) = cache["pad"]
        ho, wo = cache["out_hw"]
        k, s = self.kernel_size, self.stride
        gy2d = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(b_ * ho * wo, -1)
        self.weight.add_grad((gy2d.T @ cols).reshape(self.weight.value.shape))
        self.bias.add_grad(gy2d.sum(axis=0))
        if not need_input_grad:
            return None
        w2d = self.weight.value.reshape(self.out_channels, -1)
        gcols = (gy2d @ w2d).reshape(b_, ho, wo, c_, k, k)
        gxp = np.zeros((b_, c_, h_ + pt + pb, w_ + pl + pr), dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + ho * s:s, j:j + wo * s:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if pt or pb or pl or pr:
            return gxp[:, :, pt:pt + h_, pl:pl + w_]
        return gxp

    def parameters(self):
        return [self.weight, self.bias]


class MaxPool2d(Layer):
    """Per-window maximum; backward routes gradient to the first argmax.

    Trailing rows/columns that do not fill a window are truncated.
    """

    def __init__(self, window: int = 2, stride: int = 2):
        self.window = window
        self.stride = stride

    def forward(self, x, cache=None):
        w, s = self.window, self.stride
        b_, c_, h_, wd = x.shape
        ho = (h_ - w) // s + 1
        wo = (wd - w) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"pooling window {w} does not fit input of shape {x.shape}")
        if w == s:
            xr = x[:, :, :ho * s, :wo * s].reshape(b_, c_, ho, w, wo, w)
            if cache is None:
                return xr.max(axis=(3, 5))
            flat = np.ascontiguousarray(xr.transpose(0, 1, 2, 4, 3, 5)).reshape(b_, c_, ho, wo, w * w)
        else:
            win = sliding_window_view(x, (w, w), axis=(2, 3))[:, :, ::s, ::s]
            if cache is None:
                return win.max(axis=(4, 5))
            flat = win.reshape(b_, c_, ho, wo, w * w)
        idx = flat.argmax(axis=-1)  # first occurrence in row-major window order
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if cache is not None:
            cache["idx"] = idx
            cache["x_shape"] = x.shape
        return y

    def backward(self, grad_out, cache):
        idx = cache["idx"]
        b_, c_, h_, wd = cache["x_shape"]
        w, s = self.window, self.stride
        ho, wo = idx.shape[2], idx.shape[3]
        gx = np.zeros((b_, c_, h_, wd), dtype=grad_out.dtype)
        if w == s:
            scatter = np.zeros((b_, c_, ho, wo, w * w), dtype=grad_out.dtype)
            np.put_along_axis(scatter, idx[..., None], grad_out[..., None], axis=-1)
            scatter = scatter.reshape(b_, c_, ho, wo, w, w).transpose(0, 1, 2, 4, 3, 5)
            gx[:, :, :ho * s, :wo * s] = scatter.reshape(b_, c_, ho * s, wo * s)
        else:
            rows = (np.arange(ho) * s)[None, None, :, None] + idx // w
            cols = (np.arange(wo) * s)[None, None, None, :] + idx % w
            bi = np.arange(b_)[:, None, None, None]
            ci = np.arange(c_)[None, :, None, None]
            np.add.at(gx, (bi, ci, rows, cols), grad_out)
        return gx


class ReLU(Layer):
    def forward(self, x, cache=None):
        y = np.maximum(x, 0)
        if cache is not None:
            cache["mask"] = x > 0  # gradient at exactly 0 is defined as 0
        return y

    def backward(self, grad_out, cache):
        return grad_out * cache["mask"]


class Flatten(Layer):
    def forward(self, x, cache=None):
        if cache is not None:
            cache["x_shape"] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out, cache):
        return grad_out.reshape(cache["x_shape"])


class Linear(Layer):
    """Affine map x @ W.T + b with weights [out_features, in_features]."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else seeded_rng(0)
        self.weight = Parameter(_uniform_init(rng, (out_features, in_features), in_features))
        self.bias = Parameter(_uniform_init(rng, (out_features,), in_features))

    def forward(self, x, cache=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(
                f"linear expects [B,{self.in_features}], got shape {x.shape}")
        if cache is not None:
            cache["x"] = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad_out, cache):
        x = cache["x"]
        self.weight.add_grad(grad_out.T @ x)
        self.bias.add_grad(grad_out.sum(axis=0))
        return grad_out @ self.weight.value

    def parameters(self):
        return [self.weight, self.bias]


class GlobalAvgPool(Layer):
    """Mean over spatial positions per (sample, channel): [B,C,H,W] -> [B,C]."""

    def forward(self, x, cache=None):
        if x.ndim != 4:
            raise ValueError(f"global_avg_pool expects [B,C,H,W], got shape {x.shape}")
        if cache is not None:
            cache["x_shape"] = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad_out, cache):
        b_, c_, h_, w_ = cache["x_shape"]
        return np.broadcast_to(grad_out[:, :, None, None], (b_, c_, h_, w_)) / (h_ * w_)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean, the virtual feature vector of a map."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [B,C,H,W], got shape {x.shape}")
    return x.mean(axis=(2, 3))


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on logits, numerically stable.

    Returns (loss, grad) where grad is d(loss)/d(logits) = (sigmoid(z) - y) / B.
    """
    z = np.asarray(logits)
    y = np.asarray(labels)
    if z.shape != y.shape:
        raise ValueError(f"logits shape {z.shape} != labels shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    loss = float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    ez = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    grad = (sig - y) / z.shape[0]
    return loss, grad.astype(z.dtype, copy=False)


def sgd_step(params, lr: float) -> None:
    """Plain SGD: w <- w - lr * grad for every parameter, then clear grads.

    Raises if any parameter has no gradient (backward was not run).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step called with a missing gradient")
    for p in params:
        p.value -= (lr * p.grad).astype(p.value.dtype, copy=False)
        p.grad = None


def grad_check(layer: Layer, x: np.ndarray, eps: float = 1e-3,
               include_params: bool = True, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Scalarizes the layer output against a fixed random cotangent R, so the
    analytic gradient is backward(R) and the numeric one is the central
    difference of sum(forward(.) * R). Runs in float64; callers should pick
    smooth points (away from ReLU kinks and pooling ties).
    """
    rng = rng if rng is not None else seeded_rng(1234)
    x = np.asarray(x, dtype=np.float64)
    saved = [p.value for p in layer.parameters()]
    for p in layer.parameters():
        p.value = p.value.astype(np.float64)
        p.grad = None
    try:
        cotangent = rng.standard_normal(layer.forward(x).shape)

        def objective():
            return float(np.sum(layer.forward(x) * cotangent))

        cache: dict = {}
        layer.forward(x, cache)
        gx = layer.backward(cotangent, cache)
        targets = [(x, gx)]
        if include_params:
            targets += [(p.value, p.grad) for p in layer.parameters()]

        worst = 0.0
        for arr, analytic in targets:
            numeric = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = objective()
                flat[i] = orig - eps
                lo = objective()
                flat[i] = orig
                numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
            denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
        return worst
    finally:
        for p, v in zip(layer.parameters(), saved):
            p.value = v
            p.grad = None
