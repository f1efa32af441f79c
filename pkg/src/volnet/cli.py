"""Command-line entry point: ``volnet {degrade,params,train,infer,metrics,sweep,phantom}``.

Exit codes: 0 ok, 2 invalid input or configuration, 3 I/O or file-format
failure, 4 numeric failure during training or inference.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .blocks import KINDS, canonical_kind
from .io import (PreprocessSpec, VolumeFormatError, degrade, make_phantom, preprocess, read_volume,
                 tricubic_resample, write_volume)
from .metrics import evaluate, psnr
from .network import (INITS, NetConfig, build_network, build_parallelnet, build_volumenet, forward,
                      forward_tiled, load_network, param_count_network, save_network)
from .training import TrainConfig, load_state, save_state, train, write_history

log = logging.getLogger("volnet")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid run configuration; the message carries ``file:line``."""


class DataError(OSError):
    """Unreadable input or checkpoint."""


# --- run configuration ---------------------------------------------------------

_NUM = (int, float)
_OPT_INT = (int, type(None))
_OPT_NUM = (int, float, type(None))

SCHEMA = {
    "network": {
        "depth": int, "channels": int, "first_channels": int, "scale": int, "kind": str,
        "ratio": _NUM, "taps": (int, list), "head_taps": int, "edge_pad": int, "init": str,
    },
    "training": {
        "lr": _NUM, "batch_size": int, "patch_size": int, "patience": int, "epoch_batches": int,
        "seed": int, "beta1": _NUM, "beta2": _NUM, "eps": _NUM, "max_epochs": _OPT_INT,
        "time_budget": _OPT_NUM, "extract_lr_scale": _NUM,
    },
    "data": {"train": list, "val": list, "phantoms": dict, "preprocess": dict},
    "data.phantoms": {"count": int, "val": int, "dims": (int, list), "n_blobs": int, "seed": int},
    "data.preprocess": {"hu_clamp": (list, type(None)), "normalize": bool},
    "": {"network": dict, "training": dict, "data": dict, "output": str},
}


@dataclass
class PhantomSet:
    count: int = 10
    val: int = 1
    dims: tuple = (64, 64, 64)
    n_blobs: int = 800
    seed: int = 0


@dataclass
class RunConfig:
    network: NetConfig
    training: TrainConfig
    init: str = "interp"
    train_paths: list = field(default_factory=list)
    val_paths: list = field(default_factory=list)
    phantoms: PhantomSet | None = None
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    output: Path = Path("run")


def _line_index(node, path=(), out=None):
    """Map key paths to 1-based source lines using the YAML node tree."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _line_index(v, key, out)
    return out


def _type_name(t):
    ts = t if isinstance(t, tuple) else (t,)
    names = {int: "integer", float: "number", str: "string", list: "list", dict: "mapping",
             bool: "boolean", type(None): "null"}
    return " or ".join(dict.fromkeys(names[x] for x in ts))


def _check_types(doc, lines, where, section=()):
    schema = SCHEMA[".".join(section)]
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}:{lines.get(section, 1)}: "
                          f"'{'.'.join(section) or 'document'}' must be a mapping")
    for key, value in doc.items():
        path = section + (key,)
        loc = f"{where}:{lines.get(path, lines.get(section, 1))}"
        if key not in schema:
            allowed = ", ".join(sorted(schema))
            raise ConfigError(f"{loc}: unknown key '{'.'.join(path)}' (allowed: {allowed})")
        want = schema[key]
        # bool is an int subclass; only accept it where booleans are expected
        bad_bool = isinstance(value, bool) and bool not in (want if isinstance(want, tuple) else (want,))
        if bad_bool or not isinstance(value, want):
            raise ConfigError(f"{loc}: '{'.'.join(path)}' must be {_type_name(want)}, "
                              f"got {type(value).__name__}")
        if isinstance(value, dict):
            _check_types(value, lines, where, path)


def load_run_config(path):
    """Parse and validate a YAML run config. Relative paths resolve against its folder."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        node = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{path}:{line}: malformed YAML ({getattr(exc, 'problem', exc)})") from None
    if node is None:
        raise ConfigError(f"{path}:1: config is empty")
    lines = _line_index(node)
    _check_types(doc, lines, path)
    for required in ("network", "data"):
        if required not in doc:
            raise ConfigError(f"{path}:1: missing required section '{required}'")

    def at(*keys):
        return f"{path}:{lines.get(keys, lines.get(keys[:1], 1))}"

    net_doc = dict(doc["network"])
    init = net_doc.pop("init", "interp")
    if init not in INITS:
        raise ConfigError(f"{at('network', 'init')}: network.init must be one of {INITS}, got {init!r}")
    if isinstance(net_doc.get("taps"), int):
        net_doc["taps"] = [net_doc["taps"]] * 3
    try:
        net = NetConfig.from_dict(net_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{at('network')}: network: {exc}") from None
    try:
        tcfg = TrainConfig(**doc.get("training", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{at('training')}: training: {exc}") from None

    data = doc["data"]
    base = path.parent
    rc = RunConfig(net, tcfg, init, output=base / doc.get("output", "run"))
    if "phantoms" in data and ("train" in data or "val" in data):
        raise ConfigError(f"{at('data')}: give either data.phantoms or data.train/data.val, not both")
    if "phantoms" in data:
        ph = dict(data["phantoms"])
        if isinstance(ph.get("dims"), int):
            ph["dims"] = [ph["dims"]] * 3
        ph = PhantomSet(**{**ph, "dims": tuple(ph.get("dims", (64, 64, 64)))})
        if len(ph.dims) != 3 or min(ph.dims) < 32:
            raise ConfigError(f"{at('data', 'phantoms', 'dims')}: phantom dims must be three values >= 32")
        if not 1 <= ph.val < ph.count:
            raise ConfigError(f"{at('data', 'phantoms', 'val')}: need 1 <= val < count")
        rc.phantoms = ph
    else:
        for key in ("train", "val"):
            items = data.get(key)
            if not items:
                raise ConfigError(f"{at('data')}: data.{key} must list at least one volume")
            resolved = []
            for item in items:
                p = base / str(item)
                if not p.exists() and not Path(str(p) + ".json").exists():
                    raise ConfigError(f"{at('data', key)}: data.{key}: file not found: {p}")
                resolved.append(p)
            setattr(rc, f"{key}_paths", resolved)
    if "preprocess" in data:
        pp = dict(data["preprocess"])
        try:
            if pp.get("hu_clamp") is not None:
                lo, hi = pp["hu_clamp"]
                pp["hu_clamp"] = (float(lo), float(hi))
            rc.preprocess = PreprocessSpec(**pp)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{at('data', 'preprocess')}: data.preprocess: {exc}") from None
    return rc


def _pair_from_hr(hr, scale):
    # crop so every extent is a multiple of the scale, then degrade
    dims = [d - d % scale for d in hr.shape[-3:]]
    hr = np.ascontiguousarray(hr[..., :dims[0], :dims[1], :dims[2]])
    return degrade(hr, scale).astype(np.float32), hr


def load_pairs(rc):
    """(train_pairs, val_pairs) of (LR, HR) volumes for a run config."""
    r = rc.network.scale
    if rc.phantoms is not None:
        ph = rc.phantoms
        vols = [make_phantom(ph.dims, ph.n_blobs, seed=ph.seed + i) for i in range(ph.count)]
        pairs = [_pair_from_hr(v, r) for v in vols]
        return pairs[:-ph.val], pairs[-ph.val:]

    def load(paths):
        return [_pair_from_hr(preprocess(_read(p), rc.preprocess), r) for p in paths]

    return load(rc.train_paths), load(rc.val_paths)


# --- helpers --------------------------------------------------------------------

def _read(path):
    try:
        return read_volume(path)
    except FileNotFoundError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def _load_checkpoint(path):
    try:
        return load_network(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a valid network checkpoint ({exc})") from None


def _csv_list(kind):
    def parse(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        try:
            return [kind(t) for t in items]
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse {text!r} as a comma-separated list") from None
    return parse


def _write_text(path, text):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


# --- commands -------------------------------------------------------------------

def cmd_degrade(args):
    vol = _read(args.input)
    if args.scale not in (1, 2):
        raise ValueError(f"unsupported scale {args.scale}; only 1 and 2 are implemented")
    lr, _ = _pair_from_hr(vol, args.scale)
    out = write_volume(lr, args.output)
    print(f"{args.input} {tuple(vol.shape[1:])} -> {out.path} {out.dims}")
    return EXIT_OK


def _params_rows(net):
    rows = []
    for name, st in net.stages.items():
        rows.append((name, st.spec.kind, st.spec.in_channels, st.spec.out_channels, st.spec.bottleneck, st.weights.size))
    return rows


def network_for(arch, depth, channels, block, ratio, head_taps=3, scale=2):
    arch = arch.lower()
    if arch not in ("parallelnet", "volumenet"):
        raise ValueError(f"unknown architecture {arch!r}; expected parallelnet or volumenet")
    kind = canonical_kind(block or ("Standard" if arch == "parallelnet" else "Queue"))
    if arch == "parallelnet" and kind != "Standard":
        raise ValueError(f"parallelnet uses standard convolutions; --block {block} needs --arch volumenet")
    cfg = NetConfig(depth, channels, scale ** 3, scale, kind, ratio, head_taps=head_taps)
    build = build_parallelnet if arch == "parallelnet" else build_volumenet
    return build(cfg, init="zeros")


def params_summary(net):
    """Totals, breakdown and ratio against the standard network of the same shape."""
    total, breakdown = param_count_network(net)
    cfg = net.config
    ref = build_parallelnet(NetConfig(cfg.depth, cfg.channels, cfg.first_channels, cfg.scale,
                                      "Standard", cfg.ratio, cfg.taps, cfg.head_taps), init="zeros")
    ref_total, _ = param_count_network(ref)
    return {"total": total, "breakdown": breakdown, "standard_total": ref_total,
            "compression_ratio": ref_total / total}


def cmd_params(args):
    net = network_for(args.arch, args.depth, args.channels, args.block, args.ratio, args.head_taps)
    summary = params_summary(net)
    if args.json:
        keys = ("name", "kind", "in_channels", "out_channels", "bottleneck", "params")
        doc = dict(summary, stages=[dict(zip(keys, r)) for r in _params_rows(net)])
        doc["compression_ratio"] = round(doc["compression_ratio"], 4)
        print(json.dumps(doc, sort_keys=True, indent=2))
        return EXIT_OK
    print(f"{'stage':<10} {'kind':<15} {'in':>5} {'out':>5} {'inner':>5} {'params':>10}")
    for name, kind, c_in, c_out, inner, n in _params_rows(net):
        print(f"{name:<10} {kind:<15} {c_in:>5} {c_out:>5} {'-' if inner is None else inner:>5} {n:>10}")
    print()
    for key, n in summary["breakdown"].items():
        print(f"{key:<27} {n:>15}")
    print(f"{'total':<27} {summary['total']:>15}")
    print(f"{'standard total':<27} {summary['standard_total']:>15}")
    print(f"{'compression ratio':<27} {summary['compression_ratio']:>15.4f}")
    return EXIT_OK


def _read_history(path, upto):
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= upto]
    from .training import EpochRecord
    return [EpochRecord(int(r["epoch"]), float(r["train_l1"]), float(r["val_l1"]),
                        float(r["best_val_l1"]), float(r["seconds"])) for r in rows]


def cmd_train(args):
    rc = load_run_config(args.config)
    out = Path(args.output) if args.output else rc.output
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    train_pairs, val_pairs = load_pairs(rc)
    state = None
    history = []
    if args.resume:
        net = _load_checkpoint(out / "last.vnet")
        if net.config != rc.network:
            raise ConfigError(f"{args.config}: network section differs from the checkpoint in {out}")
        try:
            state = load_state(out / "last.state.npz")
        except OSError as exc:
            raise DataError(f"cannot read optimiser state in {out}: {exc}") from None
        history = _read_history(out / "history.csv", state.epoch)
        log.info("resuming %s at epoch %d", out, state.epoch)
    else:
        net = build_network(rc.network, rng=rc.training.seed, init=rc.init)

    def on_epoch(rec, current, st):
        history.append(rec)
        save_network(current, out / "last.vnet")
        save_state(st, out / "last.state.npz")
        if st.since_improvement == 0:
            save_network(current, out / "best.vnet")
        write_history(history, out / "history.csv")
        if not args.quiet:
            print(f"epoch {rec.epoch:4d}  train {rec.train_l1:.4f}  val {rec.val_l1:.4f}  "
                  f"best {rec.best_val_l1:.4f}  ({rec.seconds:.1f}s)", flush=True)

    result = train(net, train_pairs, val_pairs, rc.training, state=state, on_epoch=on_epoch)
    print(f"stopped after epoch {result.state.epoch} ({result.stop_reason}); "
          f"best val L1 {result.state.best_val:.4f}; checkpoints in {out}")
    return EXIT_OK


def cmd_infer(args):
    net = _load_checkpoint(args.checkpoint)
    vol = _read(args.input)
    t0 = time.perf_counter()
    if args.tile:
        sr = forward_tiled(net, vol, tile=args.tile, margin=args.tile_margin)
    else:
        sr = forward(net, vol)
    seconds = time.perf_counter() - t0
    if not np.all(np.isfinite(sr)):
        raise FloatingPointError("network produced non-finite values")
    out = write_volume(sr, args.output)
    print(f"{tuple(vol.shape[1:])} -> {out.dims} in {seconds:.2f}s: {out.path}")
    return EXIT_OK


def cmd_metrics(args):
    sr, gnd = _read(args.sr), _read(args.gnd)
    if sr.shape != gnd.shape:
        raise ValueError(f"dimension mismatch: {sr.shape[1:]} vs {gnd.shape[1:]}")
    params = None
    if args.checkpoint:
        params, _ = param_count_network(_load_checkpoint(args.checkpoint))
    report = evaluate(sr, gnd, peak=args.peak, params=params)
    prefix = args.out or (str(args.sr).removesuffix(".json").removesuffix(".f32raw")
                          .removesuffix(".nii") + ".metrics")
    _write_text(prefix + ".csv", report.to_csv())
    _write_text(prefix + ".json", report.to_json() + "\n")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


SWEEP_FIELDS = ("depth", "channels", "block", "ratio", "params", "compression_ratio",
                "psnr", "tricubic_psnr", "seconds")


def sweep_rows(depths, channels, blocks, ratios, rc=None, probe=16):
    """One dict per grid cell. ``seconds`` is the only timing field."""
    if not (depths and channels and blocks and ratios):
        raise ValueError("sweep grid is empty")
    pairs = load_pairs(rc) if rc is not None else None
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 255, size=(1, probe, probe, probe)).astype(np.float32)
    rows = []
    for d in depths:
        for c in channels:
            for b in blocks:
                for ratio in ratios:
                    kind = canonical_kind(b)
                    arch = "parallelnet" if kind == "Standard" else "volumenet"
                    net = network_for(arch, d, c, kind, ratio)
                    summary = params_summary(net)
                    row = {"depth": d, "channels": c, "block": kind, "ratio": ratio,
                           "params": summary["total"],
                           "compression_ratio": f"{summary['compression_ratio']:.4f}",
                           "psnr": "", "tricubic_psnr": ""}
                    if pairs is not None:
                        cfg = replace(rc.network, depth=d, channels=c, kind=kind, ratio=ratio)
                        res = train(build_network(cfg, rc.training.seed, rc.init), pairs[0], pairs[1],
                                    rc.training)
                        val = pairs[1]
                        row["psnr"] = f"{np.mean([psnr(forward(res.net, lr), hr) for lr, hr in val]):.2f}"
                        row["tricubic_psnr"] = (
                            f"{np.mean([psnr(tricubic_resample(lr, cfg.scale), hr) for lr, hr in val]):.2f}")
                        net = res.net
                    t0 = time.perf_counter()
                    forward(net, x)
                    row["seconds"] = f"{time.perf_counter() - t0:.4f}"
                    rows.append(row)
    return rows


def cmd_sweep(args):
    rc = load_run_config(args.config) if args.config else None
    rows = sweep_rows(args.depths, args.channels, args.blocks, args.ratios, rc)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        _write_text(args.out, buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_phantom(args):
    dims = tuple(args.dims) if len(args.dims) == 3 else (args.dims[0],) * 3
    vol = make_phantom(dims, args.blobs, seed=args.seed)
    out = write_volume(vol, args.output)
    print(f"phantom seed {args.seed} {out.dims}: {out.path}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="volnet", description="Volumetric super-resolution toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("degrade", help="write the tricubic low-resolution counterpart of a volume")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--scale", type=int, default=2)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("params", help="per-stage parameter counts and compression ratio")
    s.add_argument("--arch", default="volumenet", help="parallelnet or volumenet")
    s.add_argument("--depth", type=int, default=9)
    s.add_argument("--channels", type=int, default=32)
    s.add_argument("--block", default=None, help=f"one of {', '.join(KINDS)} (case-insensitive)")
    s.add_argument("--ratio", type=float, default=0.5)
    s.add_argument("--head-taps", type=int, default=3)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("train", help="train from a YAML run config")
    s.add_argument("config")
    s.add_argument("--output", help="override the config's output directory")
    s.add_argument("--resume", action="store_true", help="continue from last.vnet / last.state.npz")
    s.add_argument("-q", "--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="super-resolve a volume with a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--tile", type=int, default=0, help="tile edge in LR voxels; 0 runs untiled")
    s.add_argument("--tile-margin", type=int, default=None,
                   help="overlap in LR voxels (default: the receptive radius, at least 4)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("metrics", help="RMSE / PSNR / SSIM of a result against ground truth")
    s.add_argument("sr")
    s.add_argument("gnd")
    s.add_argument("--peak", type=float, default=255.0)
    s.add_argument("--out", help="report prefix; writes PREFIX.csv and PREFIX.json")
    s.add_argument("--checkpoint", help="also report this checkpoint's parameter count")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("sweep", help="parameter / timing grid, optionally trained")
    s.add_argument("--depths", type=_csv_list(int), default=[3])
    s.add_argument("--channels", type=_csv_list(int), default=[16])
    s.add_argument("--blocks", type=_csv_list(str), default=["standard", "queue"])
    s.add_argument("--ratios", type=_csv_list(float), default=[0.5])
    s.add_argument("--config", help="run config; when given every cell is trained and scored")
    s.add_argument("--out", help="CSV path (also printed)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("phantom", help="write a synthetic phantom volume")
    s.add_argument("output")
    s.add_argument("--dims", type=int, nargs="+", default=[64])
    s.add_argument("--blobs", type=int, default=800)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_phantom)
    return p


def thread_cap():
    """BLAS thread cap from ``VOLNET_THREADS`` (0 means one thread); None when unset."""
    raw = os.environ.get("VOLNET_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VOLNET_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"VOLNET_THREADS must be >= 0, got {n}")
    return max(1, n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cap = thread_cap()
        if cap is None:
            return args.func(args)
        with threadpool_limits(limits=cap):
            return args.func(args)
    except (DataError, VolumeFormatError, OSError) as exc:
        print(f"volnet: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"volnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"volnet: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
