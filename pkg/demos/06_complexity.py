"""
Operation and parameter counts
==============================

Counts come from running the real forward pass with a counter attached,
so they always agree with what the network actually computes.
"""
from asanet.complexity import ConvLayerConfig, bench, count_flops_params
from asanet.network import MODES, NetConfig

print("3x3 conv, 1->1 channel, 8x8, bias:", count_flops_params(ConvLayerConfig(1, 1, 3, 8, 8)))

for mode in MODES:
    flops, params = count_flops_params(NetConfig(mode=mode))
    print(f"{mode:<9} {flops / 1e9:6.2f} GFLOPs {params / 1e6:6.2f} M params")

small = NetConfig(widths=(8, 16, 32, 64), blocks=1, decoder_width=16)
for row in bench(small, batch=4, repeats=1):
    print(row)
