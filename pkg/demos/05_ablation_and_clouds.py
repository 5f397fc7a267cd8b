"""
Fusion ablation and cloud robustness
====================================

The same harness that runs the desk benchmark, shrunk to seconds: six
fusion variants trained under one seed, then evaluated as the optical
input is fogged more and more heavily.
"""
import tempfile

from asanet.ablation import ablate_modules, ablate_stages, cloud_benchmark_from_manifest, format_cloud_table
from asanet.data import SceneSpec, make_dataset
from asanet.network import NetConfig
from asanet.train import TrainConfig

names = ["other", "water", "forest", "farmland"]

with tempfile.TemporaryDirectory() as d:
    make_dataset(SceneSpec(size=32, cloud_coverage=0.4), 32, d)
    base = TrainConfig(
        iterations=30,
        eval_interval=15,
        lr=1e-3,
        data=d,
        net=NetConfig(widths=(8, 8, 16, 16), blocks=1, decoder_width=8, height=32, width=32),
    )

    modules = ablate_modules(base, seeds=(0,))
    print(modules.format(names, "fusion variants (30 iterations, one seed)"))

    stages = ablate_stages(base, seeds=(0,))
    print(stages.format(names, "SFM+CFM at selected stages, PWA elsewhere"))

    cks = {m: [r.checkpoint for r in modules.runs[m]] for m in ("rgb-only", "sar-only", "sfm+cfm")}
    covs = [0.0, 0.3, 0.6, 0.9]
    print(format_cloud_table(cloud_benchmark_from_manifest(cks, d, covs), covs))
