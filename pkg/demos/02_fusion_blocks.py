"""
The two fusion blocks
=====================

SFM re-weights each branch with gates computed from the *difference*
between the optical and radar features; CFM then fuses the pair, first
per channel and then per pixel.
"""
import numpy as np

from asanet.fusion import (
    CfmParams,
    FeaturePair,
    SfmParams,
    cfm_forward,
    differential_features,
    sfm_forward,
    sfm_gates,
    spatial_weights,
)
from asanet.tensor import Tensor

rng = np.random.default_rng(1)
C = 32
pair = FeaturePair(
    Tensor(rng.standard_normal((1, C, 16, 16)).astype(np.float32)),
    Tensor(rng.standard_normal((1, C, 16, 16)).astype(np.float32)),
)

# the differential features are exact negatives of each other
d_rgb, d_sar = differential_features(pair)
print("antisymmetric:", np.array_equal(d_rgb.data, -d_sar.data))

# %% freshly initialised blocks
sfm = SfmParams.init(rng, C)
g_rgb, g_sar = sfm_gates(pair, sfm)
print("gate shape", g_rgb.shape, "mean gate", float(g_rgb.data.mean()))

cfm = CfmParams.init(rng, C)
w_rgb, w_sar = spatial_weights(pair, cfm)
print("per-pixel weights sum to one:", np.allclose(w_rgb.data + w_sar.data, 1.0, atol=1e-6))

fused = cfm_forward(sfm_forward(pair, sfm), cfm)
print("fused map", fused.shape)

# %% all-zero parameters reduce both blocks to fixed averages
zero_sfm = SfmParams.init(rng, C, scheme="zeros")
zero_cfm = CfmParams.init(rng, C, scheme="zeros")
out = sfm_forward(pair, zero_sfm)
print("zero SFM halves its inputs:", np.allclose(out.rgb.data, 0.5 * pair.rgb.data, atol=1e-6))
print(
    "zero CFM gives a quarter of the sum:",
    np.allclose(cfm_forward(pair, zero_cfm).data, 0.25 * (pair.rgb.data + pair.sar.data), atol=1e-6),
)

# %% the alternative reading normalises the scores over the image plane instead
spatial = CfmParams.init(rng, C, mode="spatial")
w_rgb, _ = spatial_weights(pair, spatial)
print("spatial mode: weights over H*W sum to", float(w_rgb.data.sum()))
