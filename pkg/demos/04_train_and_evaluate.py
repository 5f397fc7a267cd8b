"""
Training and evaluating one model
=================================

A deliberately small network and budget so the script finishes in well
under a minute on one core.
"""
import logging
import tempfile
from pathlib import Path

from asanet import checkpoint
from asanet.data import SceneSpec, load_split, make_dataset
from asanet.metrics import format_report
from asanet.network import NetConfig
from asanet.train import TrainConfig, evaluate, train, write_log

logging.basicConfig(level=logging.INFO, format="%(message)s")

with tempfile.TemporaryDirectory() as d:
    d = Path(d)
    make_dataset(SceneSpec(size=32, cloud_coverage=0.4), 64, d / "data")

    cfg = TrainConfig(
        iterations=60,
        eval_interval=20,
        lr=1e-3,
        data=str(d / "data"),
        net=NetConfig(widths=(8, 8, 16, 16), blocks=1, decoder_width=8, height=32, width=32, mode="sfm+cfm"),
    )
    result = train(cfg)
    write_log(result.log, d / "log.csv")
    print((d / "log.csv").read_text())

    ck = result.checkpoint
    print(f"kept iteration {ck.iteration} with val mIoU {ck.best_miou:.4f}")
    checkpoint.save(ck, d / "model.ckpt")

    val = load_split(d / "data", "val")
    report = evaluate(checkpoint.load(d / "model.ckpt"), val, png_dir=d / "maps")
    print(format_report(report, ["other", "water", "forest", "farmland"]))
    print("prediction maps:", len(list((d / "maps").glob("*.png"))))
