"""From a NIfTI file to a super-resolved volume and a metrics report, all in memory.

Run: python demos/nifti_pipeline.py

No real scan ships with the package, so the script writes a small CT-like
int16 NIfTI-1 file (348-byte header, slope and intercept set) and walks it
through clamping, degradation, inference and scoring.
"""

import struct
import tempfile
from pathlib import Path

import numpy as np

from volnet.io import PreprocessSpec, VolumeFormatError, degrade, make_phantom, preprocess, read_volume
from volnet.metrics import evaluate
from volnet.network import NetConfig, build_volumenet, forward, forward_tiled


def write_nifti(path, data, slope, inter, spacing=(0.8, 0.8, 1.5)):
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 4, 16)  # int16
    struct.pack_into("<4f", hdr, 76, 1.0, *spacing)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, slope, inter)
    hdr[344:348] = b"n+1\x00"
    body = np.ascontiguousarray(data.transpose(2, 1, 0)).astype("<i2").tobytes()
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + body)


workdir = Path(tempfile.mkdtemp())
# Fake Hounsfield units: phantom intensities stretched to roughly [-1000, 1500].
hu = make_phantom((48, 48, 48), seed=3)[0] * 10 - 1000
stored = np.round((hu + 1024) / 2).astype(np.int16)
write_nifti(workdir / "ct.nii", stored, slope=2.0, inter=-1024.0)

vol = read_volume(workdir / "ct.nii")
print(f"read {vol.shape[1:]} volume, HU range {vol.min():.0f} .. {vol.max():.0f}")
hr = preprocess(vol, PreprocessSpec(hu_clamp=(-1000, 1000)))
lr = degrade(hr)
print(f"clamped to [-1000, 1000] HU and mapped to [0, 255]; LR input {lr.shape[1:]}")

# An untrained network reproduces linear interpolation, which is enough to
# show the plumbing; see phantom_superres.py for training.
net = build_volumenet(NetConfig(3, 16, kind="Queue", edge_pad=3), rng=0)
sr = forward(net, lr)
tiled = forward_tiled(net, lr, tile=12)
print(f"SR output {sr.shape[1:]}; tiled and whole-volume inference differ by {np.abs(sr - tiled).max():.2e}")
print(evaluate(sr, hr).to_csv(), end="")

# A damaged header is refused with a specific message.
raw = bytearray((workdir / "ct.nii").read_bytes())
struct.pack_into("<2h", raw, 70, 4, 32)  # bitpix no longer matches int16
(workdir / "bad.nii").write_bytes(bytes(raw))
try:
    read_volume(workdir / "bad.nii")
except VolumeFormatError as err:
    print(f"rejected: {err}")
