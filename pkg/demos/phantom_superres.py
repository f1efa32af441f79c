"""Train a small queue network on synthetic phantoms and compare it with tricubic upsampling.

Run: python demos/phantom_superres.py [minutes]

The default budget is 5 minutes on one core. Expect the network to start at
the linear-interpolation score (it is initialised that way) and to climb
past tricubic after several minutes. The acceptance suite runs the same
recipe for close to half an hour.
"""

import sys
import time

import numpy as np

from volnet.io import degrade, make_phantom, tricubic_resample
from volnet.metrics import psnr, ssim
from volnet.network import NetConfig, build_volumenet, forward
from volnet.training import TrainConfig, train

minutes = float(sys.argv[1]) if len(sys.argv) > 1 else 5.0

vols = [make_phantom((64, 64, 64), seed=s) for s in range(10)]
pairs = [(degrade(h), h) for h in vols]
train_pairs, val_pairs, test_pairs = pairs[:6], pairs[6:7], pairs[7:]


def score(upsample):
    return np.mean([psnr(upsample(lr), hr) for lr, hr in test_pairs])


print(f"tricubic on held-out phantoms: {score(lambda lr: tricubic_resample(lr, 2)):.2f} dB")

# edge_pad=3 replicates border voxels before the convolutions so the
# zero padding never leaks into the prediction.
net = build_volumenet(NetConfig(3, 16, kind="Queue", edge_pad=3), rng=0)
print(f"network at initialisation:     {score(lambda lr: forward(net, lr)):.2f} dB")

# The extraction layer feeds the output directly through the residual path,
# so it takes much smaller steps than the deep layers.
cfg = TrainConfig(lr=1e-3, extract_lr_scale=0.01, epoch_batches=50, patience=1000,
                  time_budget=60 * minutes)
t0 = time.perf_counter()


def progress(rec, current, state):
    print(f"  epoch {rec.epoch:3d}  train L1 {rec.train_l1:.3f}  val L1 {rec.val_l1:.3f}"
          f"  ({time.perf_counter() - t0:.0f}s)", flush=True)


res = train(net, train_pairs, val_pairs, cfg, on_epoch=progress)
print(f"trained network:               {score(lambda lr: forward(res.net, lr)):.2f} dB")

lr, hr = test_pairs[0]
print(f"SSIM on one phantom: tricubic {ssim(tricubic_resample(lr, 2), hr):.4f}, "
      f"network {ssim(forward(res.net, lr), hr):.4f}")
