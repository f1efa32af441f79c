"""How many weights does each block kind cost, and what does that buy a whole network?

Run: python demos/parameter_budget.py
"""

from volnet.blocks import KINDS, BlockSpec, compression_ratio, param_count
from volnet.network import NetConfig, build_parallelnet, build_volumenet, param_count_network

# A single 32 -> 32 block, every factorisation at half-width inner rank.
print("one 32->32 block with 3x3x3 taps")
full = BlockSpec("Standard", 32, 32)
for kind in KINDS:
    spec = BlockSpec(kind, 32, 32)
    ratio = compression_ratio(full, spec)
    print(f"  {kind:15s} {param_count(spec):6d} weights   ratio {float(ratio):6.2f}")

# The saving compounds across the densely connected network, but the
# 8-channel extraction layer and the first mainline layer stay full 3D convs.
print("\nwhole network, 32 channels")
print("  depth   standard      queue   ratio")
for depth in (3, 5, 7, 9):
    std = param_count_network(build_parallelnet(NetConfig(depth, 32), init="zeros"))[0]
    light = param_count_network(build_volumenet(NetConfig(depth, 32, kind="Queue"), init="zeros"))[0]
    print(f"  {depth:5d} {std:10d} {light:10d} {std / light:7.2f}")

# Pointwise aggregation heads are cheap already; they are left as they are.
net = build_volumenet(NetConfig(9, 32, kind="Queue", head_taps=1), init="zeros")
total, parts = param_count_network(net)
print(f"\nwith pointwise heads the depth-9 queue network has {total} weights:")
for stage, n in parts.items():
    print(f"  {stage:12s} {n:8d}")
