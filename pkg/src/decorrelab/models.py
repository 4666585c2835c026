"""Small and medium CNN classifiers with optional decorrelation layers.

Architectures are conv/relu/maxpool blocks followed by a fully connected
stack ending in a single logit. Decorrelation layers can be inserted before
any convolutional or fully connected layer except the first convolution;
they add zero trainable parameters, so weights trained with them load
unchanged into the plain architecture.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .decorrelation import CorrelationRecord, DecorreConfig, DecorreLayer
from .engine import Conv2d, Flatten, Layer, Linear, MaxPool2d, Parameter, ReLU

CHECKPOINT_MAGIC = b"DLCK"
CHECKPOINT_VERSION = 1


@dataclass
class ArchitectureSpec:
    """Structural description of one classifier.

    conv_blocks lists (out_channels, kernel_size) per conv/relu/maxpool
    block; fc_widths ends in 1 (the logit). insertion_points names the
    layers that receive a decorrelation layer immediately in front of them
    (None means the default policy: every conv and fc except the first
    conv); an empty list builds the plain classifier.
    """

    name: str
    conv_blocks: list[tuple[int, int]]
    fc_widths: list[int]
    input_shape: tuple[int, int, int] = (1, 32, 32)
    insertion_points: list[str] | None = None
    decorre_cfg: DecorreConfig | None = None

    def layer_names(self) -> list[str]:
        convs = [f"conv{i + 1}" for i in range(len(self.conv_blocks))]
        fcs = [f"fc{i + 1}" for i in range(len(self.fc_widths))]
        return convs + fcs

    def resolved_insertion_points(self) -> list[str]:
        if self.decorre_cfg is None:
            return []
        points = self.insertion_points
        if points is None:
            points = default_insertion_points(self)
        names = self.layer_names()
        for p in points:
            if p not in names:
                raise ValueError(f"unknown insertion point {p!r}; layers are {names}")
        if names[0] in points:
            raise ValueError(f"insertion before the first convolution ({names[0]}) is not allowed")
        return list(points)


def default_insertion_points(spec: ArchitectureSpec) -> list[str]:
    """Every convolutional and fully connected layer except the first conv."""
    return spec.layer_names()[1:]


def small_custom(decorre_cfg: DecorreConfig | None = None,
                 insertion_points: list[str] | None = None) -> ArchitectureSpec:
    """Two conv blocks (6, 16 channels, 5x5) and three fully connected layers."""
    return ArchitectureSpec(
        name="small",
        conv_blocks=[(6, 5), (16, 5)],
        fc_widths=[120, 84, 1],
        insertion_points=insertion_points,
        decorre_cfg=decorre_cfg,
    )


def medium_custom(decorre_cfg: DecorreConfig | None = None,
                  insertion_points: list[str] | None = None) -> ArchitectureSpec:
    """Three wider conv blocks (32, 64, 128 channels, 3x3) and four fc layers."""
    return ArchitectureSpec(
        name="medium",
        conv_blocks=[(32, 3), (64, 3), (128, 3)],
        fc_widths=[256, 128, 64, 1],
        insertion_points=insertion_points,
        decorre_cfg=decorre_cfg,
    )


ARCHITECTURES = {"small": small_custom, "medium": medium_custom}


@dataclass
class DualBatch:
    """Paired ROI and control-region image batches with binary labels."""

    roi: np.ndarray
    cr: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.roi.shape != self.cr.shape:
            raise ValueError(f"roi shape {self.roi.shape} != cr shape {self.cr.shape}")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary (0/1)")


class Model:
    """Fixed layer stack shared by the ROI and CR streams.

    The control-region stream reuses the exact same parameters (single
    parameter store) and is computed without gradient tracking; only the
    ROI stream caches activations for the backward pass.
    """

    def __init__(self, spec: ArchitectureSpec, layers: list[tuple[str, Layer]]):
        self.spec = spec
        self.layers = layers
        self._caches: list[dict | None] | None = None

    # -- introspection -----------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for name, layer in self.layers:
            if isinstance(layer, (Conv2d, Linear)):
                out.append((f"{name}.weight", layer.weight))
                out.append((f"{name}.bias", layer.bias))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def decorre_layers(self) -> list[DecorreLayer]:
        return [layer for _, layer in self.layers if isinstance(layer, DecorreLayer)]

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Single-stream pass; decorrelation layers are the identity here."""
        caches: list[dict | None] | None = [] if training else None
        for _, layer in self.layers:
            cache = {} if training else None
            x = layer.forward(x, cache)
            if caches is not None:
                caches.append(cache)
        if training:
            self._caches = caches
        return x[:, 0]

    def forward_dual(self, roi: np.ndarray, cr: np.ndarray | None, *,
                     training: bool = True, rng: np.random.Generator | None = None,
                     epoch: int = 0, filter_enabled: bool = True,
                     ) -> tuple[np.ndarray, list[CorrelationRecord]]:
        """Run both streams through shared layers, filtering the ROI stream.

        At inference (training=False) this is the plain forward on the ROI
        data; no CR stream is needed. In training the CR batch must be
        present whenever the model carries decorrelation layers.
        """
        if not training:
            return self.forward(roi, training=False), []
        if cr is None:
            if self.decorre_layers():
                raise ValueError("training forward needs a control-region batch")
            return self.forward(roi, training=True), []
        if roi.shape != cr.shape:
            raise ValueError(f"roi shape {roi.shape} != cr shape {cr.shape}")
        caches: list[dict | None] = []
        records: list[CorrelationRecord] = []
        r, c = roi, cr
        for _, layer in self.layers:
            if isinstance(layer, DecorreLayer):
                r, c, rec = layer.filter(r, c, rng, epoch, filter_enabled)
                records.append(rec)
                caches.append(None)
            else:
                cache: dict = {}
                r = layer.forward(r, cache)
                c = layer.forward(c, None)
                caches.append(cache)
        self._caches = caches
        return r[:, 0], records

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Backpropagate through the ROI path of the last training forward.

        Decorrelation layers pass the gradient through unchanged (identity
        Jacobian); the CR stream receives no gradient by construction.
        """
        if self._caches is None:
            raise RuntimeError("backward called before a training-mode forward")
        g = np.asarray(grad_logits)[:, None]
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i][1]
            if i == 0 and isinstance(layer, Conv2d):
                # no layer sits before the first conv; its input gradient is never used
                layer.backward(g, self._caches[i], need_input_grad=False)
                g = None
            else:
                g = layer.backward(g, self._caches[i])
        self._caches = None
        return g

    # -- weights -------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ValueError(f"parameter name mismatch: missing={missing}, unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.value.dtype)
            if arr.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.value.shape}")
            p.value = arr.copy()
            p.grad = None


def build_model(spec: ArchitectureSpec, rng: np.random.Generator) -> Model:
    """Materialize an architecture spec into a model with seeded weights."""
    channels, h, w = spec.input_shape
    plain: list[tuple[str, Layer]] = []
    c_in = channels
    for i, (c_out, k) in enumerate(spec.conv_blocks):
        if h < k or w < k:
            raise ValueError(
                f"{spec.name}: conv{i + 1} kernel {k}x{k} does not fit {h}x{w} feature map")
        plain.append((f"conv{i + 1}", Conv2d(c_in, c_out, k, rng=rng)))
        plain.append((f"act_conv{i + 1}", ReLU()))
        h, w = h - k + 1, w - k + 1
        if h < 2 or w < 2:
            raise ValueError(f"{spec.name}: pooling after conv{i + 1} has nothing to pool ({h}x{w})")
        plain.append((f"pool{i + 1}", MaxPool2d(2, 2)))
        h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        c_in = c_out
    plain.append(("flatten", Flatten()))
    f_in = c_in * h * w
    if spec.fc_widths[-1] != 1:
        raise ValueError(f"{spec.name}: final fc width must be 1 (single logit)")
    for i, width in enumerate(spec.fc_widths):
        plain.append((f"fc{i + 1}", Linear(f_in, width, rng=rng)))
        if i < len(spec.fc_widths) - 1:
            plain.append((f"act_fc{i + 1}", ReLU()))
        f_in = width

    points = set(spec.resolved_insertion_points())
    layers: list[tuple[str, Layer]] = []
    for name, layer in plain:
        if name in points:
            layers.append((f"pre_{name}", DecorreLayer(spec.decorre_cfg, f"pre_{name}")))
        layers.append((name, layer))
    return Model(spec, layers)


def plain_spec(spec: ArchitectureSpec) -> ArchitectureSpec:
    """The same architecture with every decorrelation layer removed."""
    return replace(spec, insertion_points=[], decorre_cfg=None)


# -- checkpoint container ----------------------------------------------------
#
# Layout (little-endian): magic "DLCK", u32 version, u32 param count, then per
# parameter: u16 name length, utf-8 name, u8 ndim, u32 dims, float32 payload.


def save_state(state: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name, val in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", val.ndim))
            fh.write(struct.pack(f"<{val.ndim}I", *val.shape))
            fh.write(np.ascontiguousarray(val, dtype="<f4").tobytes())


def save_checkpoint(model: Model, path) -> None:
    save_state(dict(model.state_dict()), path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            state[name] = arr.astype(np.float32)
        return state


def load_checkpoint(model: Model, path) -> None:
    model.load_state_dict(read_checkpoint(path))
