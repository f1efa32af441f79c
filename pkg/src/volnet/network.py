"""ParallelNet / VolumeNet assembly, inference and parameter accounting.

Topology for ``depth`` mainline layers of ``channels`` width, one input
channel and upscale factor ``scale``:

* ``extract`` maps the input to ``scale**3`` shallow feature channels, with
  no activation.
* Branch 1 (the mainline) is ``depth`` convolutions with ReLU, the first
  widening to ``channels``.
* Branch i >= 2 starts with an aggregation head over the concatenated
  outputs of layer i-1 of branch 1, layer i-2 of branch 2 and so on (all of
  the same receptive field), then runs ``depth - i + 1`` mapping layers.
* ``fusion`` takes the concatenated last output of every branch back to
  ``scale**3`` channels, with no activation. The shallow features are added
  and the voxel shuffle produces the upscaled volume.

Stage names: ``extract``, ``b{i}.h`` (aggregation heads, i >= 2),
``b{i}.l{j}`` (mapping layers) and ``fusion``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .blocks import (BlockSpec, block_header, build_block, canonical_kind, check_weights,
                     frame, pack_weights, trace_block, unframe, unpack_weights, zeros_block)


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters.

    ``head_taps`` is the cubic kernel extent of the aggregation heads; 1
    gives pointwise heads, which are never replaced by factorised blocks.
    ``edge_pad`` is how many LR voxels :func:`forward` replicates outwards
    at each face before running the network (0 leaves the zero padding of
    the convolutions as the only boundary treatment).
    """

    depth: int
    channels: int = 32
    first_channels: int = 8
    scale: int = 2
    kind: str = "Standard"
    ratio: float = 0.5
    taps: tuple = (3, 3, 3)
    head_taps: int = 3
    edge_pad: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.scale < 1 or self.scale ** 3 != self.first_channels:
            raise ValueError(
                f"first-layer channels ({self.first_channels}) must equal scale^3 ({self.scale ** 3})")
        if not 0 < self.ratio <= 1:
            raise ValueError(f"bottleneck ratio must lie in (0, 1], got {self.ratio}")
        if self.head_taps < 1 or self.head_taps % 2 == 0:
            raise ValueError(f"head_taps must be odd and positive, got {self.head_taps}")
        if self.edge_pad < 0:
            raise ValueError(f"edge_pad must be >= 0, got {self.edge_pad}")

    def to_dict(self):
        d = asdict(self)
        d["taps"] = list(self.taps)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "taps" in d:
            d["taps"] = tuple(d["taps"])
        return cls(**d)


@dataclass
class Stage:
    name: str
    spec: BlockSpec
    weights: object
    activation: bool


@dataclass
class Network:
    config: NetConfig
    stages: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.stages[name]

    def parameters(self):
        """Every weight array, in stage then layer order."""
        return [layer.weight for st in self.stages.values() for layer in st.weights.layers]

    def copy(self):
        return Network(self.config, {n: Stage(s.name, s.spec, s.weights.copy(), s.activation)
                                     for n, s in self.stages.items()})

    def receptive_radius(self):
        """Largest input offset (LR voxels) that can influence an output voxel."""
        D = self.config.depth

        def reach(name):
            return max(self.stages[name].spec.taps) // 2

        f = {(1, 0): reach("extract")}
        for j in range(1, D + 1):
            f[(1, j)] = f[(1, j - 1)] + reach(f"b1.l{j}")
        for i in range(2, D + 1):
            f[(i, 0)] = max(f[(k, i - k)] for k in range(1, i)) + reach(f"b{i}.h")
            for j in range(1, D - i + 2):
                f[(i, j)] = f[(i, j - 1)] + reach(f"b{i}.l{j}")
        return max(f[(i, D - i + 1)] for i in range(1, D + 1)) + reach("fusion")


def _bottleneck(cfg, kind, S, T):
    if kind in ("Standard", "Xception3D", "MobileNetV2_3D"):
        return None  # MobileNetV2_3D keeps its 2*S expansion default
    return max(1, min(int(round(cfg.ratio * T)), max(S, T)))


def _plan(cfg, factorised):
    """(name, S, T, taps, activation, replaceable) for every stage, in order."""
    D, K, F = cfg.depth, cfg.channels, cfg.first_channels
    t3 = cfg.taps
    h = (cfg.head_taps,) * 3
    plan = [("extract", 1, F, t3, False, False), ("b1.l1", F, K, t3, True, False)]
    for j in range(2, D + 1):
        plan.append((f"b1.l{j}", K, K, t3, True, True))
    for i in range(2, D + 1):
        plan.append((f"b{i}.h", (i - 1) * K, K, h, True, cfg.head_taps > 1))
        for j in range(1, D - i + 2):
            plan.append((f"b{i}.l{j}", K, K, t3, True, True))
    plan.append(("fusion", D * K, F, t3, False, True))
    out = []
    for name, S, T, taps, act, replaceable in plan:
        out.append((name, S, T, taps, act, factorised and replaceable and S > 1 and T > 1))
    return out


INITS = ("interp", "uniform", "zeros")


def subpixel_kernel(scale, taps, dtype=np.float32):
    """Extraction weights that make ``voxel_shuffle(extract(x))`` linear interpolation.

    Output channel ``dx*r^2 + dy*r + dz`` holds the separable linear-interpolation
    filter for sub-voxel phase ``(dx, dy, dz)`` under centre-aligned sampling.
    Returned in flipped (convolution) orientation, shape ``(r^3, 1, *taps)``.
    """
    r = int(scale)
    per_axis = []
    for k in taps:
        half = k // 2
        rows = np.zeros((r, k))
        for d in range(r):
            pos = (d + 0.5) / r - 0.5  # LR offset of this phase
            lo = int(np.floor(pos))
            frac = pos - lo
            for off, wt in ((lo, 1.0 - frac), (lo + 1, frac)):
                if -half <= off <= half:
                    rows[d, half + off] += wt
        per_axis.append(rows[:, ::-1])  # correlation -> convolution taps
    ax, ay, az = per_axis
    w = np.einsum("ai,bj,ck->abcijk", ax, ay, az).reshape(r ** 3, 1, *taps)
    return w.astype(dtype)


def _build(cfg, rng, factorised, init):
    if init not in INITS:
        raise ValueError(f"unknown init {init!r}; expected one of {INITS}")
    rng = np.random.default_rng(rng)
    net = Network(cfg)
    for name, S, T, taps, act, replace in _plan(cfg, factorised):
        kind = cfg.kind if replace else "Standard"
        spec = BlockSpec(kind, S, T, _bottleneck(cfg, kind, S, T), taps)
        weights = zeros_block(spec) if init == "zeros" else build_block(spec, rng)
        if init == "interp" and name == "extract":
            weights.layers[0].weight = subpixel_kernel(cfg.scale, taps)
        elif init == "interp" and name == "fusion":
            weights.layers[-1].weight[...] = 0
        net.stages[name] = Stage(name, spec, weights, act)
    return net


def build_parallelnet(cfg, rng=None, init="interp"):
    """Standard-convolution network. ``cfg.kind`` must be Standard."""
    if cfg.kind != "Standard":
        raise ValueError("ParallelNet uses standard convolutions; use build_volumenet for other kinds")
    return _build(cfg, rng, False, init)


def build_volumenet(cfg, rng=None, init="interp"):
    """Network whose interior convolutions (both channel counts > 1) use ``cfg.kind``.

    The extraction conv, the first mainline layer and pointwise heads stay
    standard.
    """
    return _build(cfg, rng, True, init)


def build_network(cfg, rng=None, init="interp"):
    return build_volumenet(cfg, rng, init) if cfg.kind != "Standard" else build_parallelnet(cfg, rng, init)


def trace(net, x, params=None, residual=True):
    """Forward on the tape. ``params`` maps stage name to a list of weight Vars."""
    cfg = net.config
    D = cfg.depth
    params = params or {}

    def run(name, h):
        st = net.stages[name]
        return trace_block(st.spec, st.weights, h, params.get(name), st.activation)

    F = {}
    f0 = run("extract", x)
    F[(1, 0)] = f0
    for j in range(1, D + 1):
        F[(1, j)] = run(f"b1.l{j}", F[(1, j - 1)])
    for i in range(2, D + 1):
        agg = ad.concat_channels([F[(k, i - k)] for k in range(1, i)])
        F[(i, 0)] = run(f"b{i}.h", agg)
        for j in range(1, D - i + 2):
            F[(i, j)] = run(f"b{i}.l{j}", F[(i, j - 1)])
    fused = run("fusion", ad.concat_channels([F[(i, D - i + 1)] for i in range(1, D + 1)]))
    grn = ad.add(f0, fused) if residual else fused
    return ad.voxel_shuffle(grn, cfg.scale)


def _edge_pad(x, m):
    return np.pad(x, [(0, 0)] * (x.ndim - 3) + [(m, m)] * 3, mode="edge")


def _crop(y, m):
    if not m:
        return y
    return y[..., m:y.shape[-3] - m, m:y.shape[-2] - m, m:y.shape[-1] - m]


def forward(net, x, residual=True, pad=None):
    """Super-resolve a ``(1,X,Y,Z)`` volume (or a batch of them) in one pass.

    ``pad`` overrides ``net.config.edge_pad``.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim not in (4, 5) or x.shape[-4] != 1:
        raise ValueError(f"network expects single-channel input, got shape {x.shape}")
    m = net.config.edge_pad if pad is None else pad
    y = trace(net, ad.Var(_edge_pad(x, m) if m else x), residual=residual).value
    return np.ascontiguousarray(_crop(y, m * net.config.scale))


def _tiles(n, tile):
    return [(s, min(s + tile, n)) for s in range(0, n, tile)]


def forward_tiled(net, x, tile=32, margin=None, workers=None):
    """Patch-wise inference with overlap ``margin`` and centre-crop stitching.

    Tiles are clipped to the (edge-padded) volume so boundary voxels see
    the same padding as an untiled pass. ``margin`` defaults to
    ``max(4, receptive_radius)``, which makes the result match
    :func:`forward` up to float rounding.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"tiled inference expects a (1,X,Y,Z) volume, got {x.shape}")
    if tile < 1:
        raise ValueError(f"tile must be positive, got {tile}")
    r = net.config.scale
    pad = net.config.edge_pad
    if pad:
        x = _edge_pad(x, pad)
    if margin is None:
        margin = max(4, net.receptive_radius())
    dims = x.shape[1:]
    out = np.zeros((1,) + tuple(d * r for d in dims), dtype=np.result_type(x, np.float32))
    jobs = [(bx, by, bz) for bx in _tiles(dims[0], tile)
            for by in _tiles(dims[1], tile) for bz in _tiles(dims[2], tile)]

    def run(job):
        lo = [max(0, a - margin) for a, _ in job]
        hi = [min(d, b + margin) for (_, b), d in zip(job, dims)]
        sub = x[:, lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        y = forward(net, sub, pad=0)
        crop = tuple(slice(r * (a - l), r * (b - l)) for (a, b), l in zip(job, lo))
        dest = tuple(slice(r * a, r * b) for a, b in job)
        return dest, y[(slice(None),) + crop]

    if workers is None:
        workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for dest, y in results:
        out[(slice(None),) + dest] = y
    return np.ascontiguousarray(_crop(out, pad * r))


def worker_count():
    """Worker cap from ``VOLNET_THREADS``; 0 or unset means single-worker mode."""
    try:
        n = int(os.environ.get("VOLNET_THREADS", "0"))
    except ValueError:
        n = 0
    return max(1, n)


def param_count_network(net):
    """Total stored weights and a per-stage breakdown.

    Breakdown keys: ``extraction``, ``branch{i}`` (heads included) and ``fusion``.
    """
    breakdown = {}
    for name, st in net.stages.items():
        if name == "extract":
            key = "extraction"
        elif name == "fusion":
            key = "fusion"
        else:
            key = "branch" + name[1:name.index(".")]
        breakdown[key] = breakdown.get(key, 0) + st.weights.size
    return sum(breakdown.values()), breakdown


# --- serialisation -------------------------------------------------------------

def serialize_network(net):
    header = {"format": "volnet-network/1", "config": net.config.to_dict(), "stages": []}
    payload = []
    for name, st in net.stages.items():
        check_weights(st.spec, st.weights)
        header["stages"].append({"name": name, "activation": st.activation,
                                 **block_header(st.spec, st.weights)})
        payload.append(pack_weights(st.weights))
    return frame(header, b"".join(payload))


def deserialize_network(buf):
    header, offset = unframe(buf)
    if header.get("format") != "volnet-network/1":
        raise ValueError("not a volnet network stream")
    net = Network(NetConfig.from_dict(header["config"]))
    for entry in header["stages"]:
        spec = BlockSpec.from_dict(entry)
        weights, offset = unpack_weights(entry, buf, offset)
        check_weights(spec, weights)
        net.stages[entry["name"]] = Stage(entry["name"], spec, weights, bool(entry["activation"]))
    if offset != len(buf):
        raise ValueError(f"network stream has {len(buf) - offset} trailing bytes")
    return net


def save_network(net, path):
    with open(path, "wb") as fh:
        fh.write(serialize_network(net))


def load_network(path):
    with open(path, "rb") as fh:
        return deserialize_network(fh.read())
