"""Convolution building blocks: full 3D, depthwise baselines and the
factorised CPD / LWv1 / LWv2 / Queue modules.

Every block maps ``S`` channels to ``T`` channels at unchanged spatial size
and ends with a single ReLU (skippable by the caller for stages that must
stay linear). Blocks carry no biases.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as ad

KINDS = ("Standard", "Xception3D", "MobileNetV2_3D", "CPD", "LWv1", "LWv2", "Queue")
_ALIASES = {k.lower(): k for k in KINDS}
_ALIASES.update({"xception": "Xception3D", "mobilenetv2": "MobileNetV2_3D", "mobilenet": "MobileNetV2_3D"})

# kinds whose bottleneck shrinks channels (R <= max(S, T))
SHRINKING = ("CPD", "LWv1", "LWv2", "Queue")

LAYER_OPS = ("full", "pointwise", "axis", "axis_dw", "dw3d")


def canonical_kind(kind):
    try:
        return _ALIASES[str(kind).lower()]
    except KeyError:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {KINDS}") from None


@dataclass(frozen=True)
class BlockSpec:
    """Declarative description of one block.

    ``bottleneck`` is the inner width of the shrinking kinds (default half
    the output width) and the expansion width of MobileNetV2_3D (default
    twice the input width). Standard and Xception3D ignore it.
    """

    kind: str
    in_channels: int
    out_channels: int
    bottleneck: int | None = None
    taps: tuple = (3, 3, 3)

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        S, T = self.in_channels, self.out_channels
        if S < 1 or T < 1:
            raise ValueError(f"channel counts must be positive, got {S} -> {T}")
        if len(self.taps) != 3 or any(t < 1 or t % 2 == 0 for t in self.taps):
            raise ValueError(f"taps must be three odd positive integers, got {self.taps}")
        if self.bottleneck is None:
            if self.kind == "MobileNetV2_3D":
                default = 2 * S
            elif self.kind in SHRINKING:
                default = max(1, T // 2)
            else:
                default = None
            object.__setattr__(self, "bottleneck", default)
        R = self.bottleneck
        if R is not None and R < 1:
            raise ValueError(f"bottleneck must be positive, got {R}")
        if self.kind in SHRINKING and R > max(S, T):
            raise ValueError(f"bottleneck {R} exceeds the wider channel count {max(S, T)}")

    def to_dict(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "bottleneck": self.bottleneck, "taps": list(self.taps)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d["in_channels"]), int(d["out_channels"]), d.get("bottleneck"),
                   tuple(d.get("taps", (3, 3, 3))))


@dataclass
class Layer:
    op: str
    weight: np.ndarray
    axis: int | None = None

    @property
    def size(self):
        return int(self.weight.size)


@dataclass
class BlockWeights:
    layers: list = field(default_factory=list)

    @property
    def size(self):
        return sum(layer.size for layer in self.layers)

    def arrays(self):
        return [layer.weight for layer in self.layers]

    def shapes(self):
        return [tuple(layer.weight.shape) for layer in self.layers]

    def copy(self):
        return BlockWeights([Layer(l.op, l.weight.copy(), l.axis) for l in self.layers])


def layer_plan(spec):
    """The (op, weight shape, axis) sequence a block of this spec stores."""
    S, T, R = spec.in_channels, spec.out_channels, spec.bottleneck
    X, Y, Z = spec.taps
    kind = spec.kind
    if kind == "Standard":
        return [("full", (T, S, X, Y, Z), None)]
    if kind == "CPD":
        return [("pointwise", (R, S), None), ("axis_dw", (R, X), 0),
                ("axis_dw", (R, Y), 1), ("axis_dw", (R, Z), 2), ("pointwise", (T, R), None)]
    if kind == "LWv1":
        return [("axis", (R, S, X), 0), ("axis_dw", (R, Y), 1), ("axis", (T, R, Z), 2)]
    if kind == "LWv2":
        return [("axis", (R, S, X), 0), ("axis", (R, R, Y), 1), ("axis", (T, R, Z), 2)]
    if kind == "Queue":
        return [("pointwise", (R, S), None), ("axis", (R, R, X), 0), ("axis", (R, R, Y), 1),
                ("axis", (R, R, Z), 2), ("pointwise", (T, R), None)]
    if kind == "Xception3D":
        return [("dw3d", (S, X, Y, Z), None), ("pointwise", (T, S), None)]
    if kind == "MobileNetV2_3D":
        return [("pointwise", (R, S), None), ("dw3d", (R, X, Y, Z), None), ("pointwise", (T, R), None)]
    raise ValueError(kind)


def _fan_in(op, shape):
    if op in ("full", "axis"):
        return int(np.prod(shape[1:]))
    if op == "pointwise":
        return shape[1]
    return int(np.prod(shape[1:]))  # axis_dw, dw3d: taps only


def build_block(spec, rng=None, dtype=np.float32):
    """Draw uniform fan-in scaled weights.

    The block's last layer gets the He bound ``sqrt(6 / fan_in)``; inner
    layers, which have no activation between them, get the unit-gain bound
    ``sqrt(3 / fan_in)`` so a factorised block has the same output scale as
    a He-initialised full convolution.
    """
    rng = np.random.default_rng(rng)
    layers = []
    plan = layer_plan(spec)
    for i, (op, shape, axis) in enumerate(plan):
        gain = 6.0 if i == len(plan) - 1 else 3.0
        bound = np.sqrt(gain / _fan_in(op, shape))
        layers.append(Layer(op, rng.uniform(-bound, bound, size=shape).astype(dtype), axis))
    return BlockWeights(layers)


def zeros_block(spec, dtype=np.float32):
    return BlockWeights([Layer(op, np.zeros(shape, dtype=dtype), axis)
                         for op, shape, axis in layer_plan(spec)])


def check_weights(spec, weights):
    plan = layer_plan(spec)
    if len(plan) != len(weights.layers):
        raise ValueError(f"{spec.kind} expects {len(plan)} layers, got {len(weights.layers)}")
    for (op, shape, axis), layer in zip(plan, weights.layers):
        if layer.op != op or tuple(layer.weight.shape) != shape or layer.axis != axis:
            raise ValueError(
                f"layer mismatch for {spec.kind}: expected {op}{shape}@{axis}, "
                f"got {layer.op}{tuple(layer.weight.shape)}@{layer.axis}")


def apply_layer(layer, x, w=None):
    """Apply one stored layer on the tape; ``w`` overrides the stored weight."""
    w = layer.weight if w is None else w
    if layer.op == "full":
        return ad.conv3d_full(x, w)
    if layer.op == "pointwise":
        return ad.pointwise(x, w)
    if layer.op == "axis":
        return ad.conv_axis(x, w, layer.axis)
    if layer.op == "axis_dw":
        return ad.conv_axis(x, w, layer.axis, depthwise=True)
    if layer.op == "dw3d":
        return ad.conv3d_depthwise(x, w)
    raise ValueError(f"unknown layer op {layer.op!r}")


def trace_block(spec, weights, x, params=None, activation=True):
    """Block forward on the tape. ``params`` are optional Vars replacing the weights."""
    params = params if params is not None else [None] * len(weights.layers)
    h = x
    for layer, p in zip(weights.layers, params):
        h = apply_layer(layer, h, p)
    if spec.kind == "MobileNetV2_3D" and spec.in_channels == spec.out_channels:
        h = ad.add(h, x)
    return ad.relu(h) if activation else h


def forward_block(spec, weights, x, activation=True):
    """Run a block on a ``(S,X,Y,Z)`` or batched volume.

    With ``activation=False`` the pre-activation output is returned.
    """
    x = np.asarray(x)
    if x.ndim < 4 or x.shape[-4] != spec.in_channels:
        raise ValueError(f"block expects {spec.in_channels} input channels, got shape {x.shape}")
    return trace_block(spec, weights, ad.Var(x), activation=activation).value


def compose_rank1_kernel(x_taps, y_taps, z_taps, channel_mix):
    """Per output channel t, the outer product of its three axis filters and its input-channel weights.

    Shapes: ``(T, kx)``, ``(T, ky)``, ``(T, kz)`` and ``(T, S)``; result ``(T, S, kx, ky, kz)``.
    """
    x_taps, y_taps, z_taps, channel_mix = (np.atleast_2d(np.asarray(v))
                                           for v in (x_taps, y_taps, z_taps, channel_mix))
    t = x_taps.shape[0]
    if not (y_taps.shape[0] == z_taps.shape[0] == channel_mix.shape[0] == t):
        raise ValueError("rank-1 factors disagree on the number of output channels")
    return np.einsum("tx,ty,tz,ts->tsxyz", x_taps, y_taps, z_taps, channel_mix)


def cpd_from_rank1(x_taps, y_taps, z_taps, channel_mix):
    """CPD block whose inner width equals its output width, realising :func:`compose_rank1_kernel`.

    Row t of the shrinking map is ``channel_mix[t]``, inner channel t is
    filtered by the three axis filters of row t, and the expanding map is
    the identity.
    """
    x_taps, y_taps, z_taps, channel_mix = (np.atleast_2d(np.asarray(v))
                                           for v in (x_taps, y_taps, z_taps, channel_mix))
    T, S = channel_mix.shape
    spec = BlockSpec("CPD", S, T, T, (x_taps.shape[1], y_taps.shape[1], z_taps.shape[1]))
    dt = np.result_type(x_taps, y_taps, z_taps, channel_mix)
    weights = BlockWeights([
        Layer("pointwise", channel_mix.copy(), None),
        Layer("axis_dw", x_taps.copy(), 0),
        Layer("axis_dw", y_taps.copy(), 1),
        Layer("axis_dw", z_taps.copy(), 2),
        Layer("pointwise", np.eye(T, dtype=dt), None),
    ])
    return spec, weights


def param_count(spec):
    """Closed-form number of weights of a block (no biases)."""
    S, T, R = spec.in_channels, spec.out_channels, spec.bottleneck
    X, Y, Z = spec.taps
    formulas = {
        "Standard": lambda: X * Y * Z * S * T,
        "CPD": lambda: S * R + (X + Y + Z) * R + R * T,
        "LWv1": lambda: X * S * R + Y * R + Z * R * T,
        "LWv2": lambda: X * S * R + Y * R * R + Z * R * T,
        "Queue": lambda: S * R + (X + Y + Z) * R * R + R * T,
        "Xception3D": lambda: X * Y * Z * S + S * T,
        "MobileNetV2_3D": lambda: S * R + X * Y * Z * R + R * T,
    }
    return formulas[spec.kind]()


def compression_ratio(full, light):
    """``param_count(full) / param_count(light)`` as an exact fraction."""
    if (full.in_channels, full.out_channels, full.taps) != (light.in_channels, light.out_channels, light.taps):
        raise ValueError("compression ratio needs blocks with equal S, T and taps")
    return Fraction(param_count(full), param_count(light))


# --- serialisation -------------------------------------------------------------

def block_header(spec, weights):
    return {
        **spec.to_dict(),
        "layers": [{"op": l.op, "shape": list(l.weight.shape), "axis": l.axis} for l in weights.layers],
    }


def pack_weights(weights):
    return b"".join(np.ascontiguousarray(l.weight, dtype="<f4").tobytes() for l in weights.layers)


def unpack_weights(header, buf, offset=0):
    layers = []
    for entry in header["layers"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape)
        offset += 4 * n
        layers.append(Layer(entry["op"], arr, entry["axis"]))
    return BlockWeights(layers), offset


def frame(header, payload):
    """``u32 little-endian header length | JSON header | payload``."""
    raw = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw + payload


def unframe(buf):
    if len(buf) < 4:
        raise ValueError("weight stream is truncated")
    (n,) = struct.unpack_from("<I", buf, 0)
    if 4 + n > len(buf):
        raise ValueError("weight stream header is truncated")
    return json.loads(buf[4:4 + n].decode()), 4 + n


def serialize_block(spec, weights):
    check_weights(spec, weights)
    return frame(block_header(spec, weights), pack_weights(weights))


def deserialize_block(buf):
    header, offset = unframe(buf)
    spec = BlockSpec.from_dict(header)
    weights, end = unpack_weights(header, buf, offset)
    if end != len(buf):
        raise ValueError(f"weight stream has {len(buf) - end} trailing bytes")
    check_weights(spec, weights)
    return spec, weights
