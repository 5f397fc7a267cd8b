import math
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from asanet import checkpoint as ckpt_io
from asanet import train as train_mod
from asanet.checkpoint import Checkpoint
from asanet.data import SceneSpec, Split, load_split, make_dataset
from asanet.errors import ConfigError, DataError, NumericalInstabilityError, RegistryError
from asanet.network import NetConfig, init_params
from asanet.optim import AdamWHyper, AdamWState, adamw_step
from asanet.tensor import Tensor
from asanet.train import TrainConfig, evaluate, evaluate_split, predict, train, write_log

TINY_NET = NetConfig(widths=(4, 4, 6, 6), blocks=1, height=16, width=16, decoder_width=4)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    make_dataset(SceneSpec(size=16), 16, root)
    return root


def tiny_cfg(data, **kw):
    base = dict(iterations=6, eval_interval=3, batch_size=4, data=str(data), net=TINY_NET)
    base.update(kw)
    return TrainConfig(**base)


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        p["w"].grad = np.zeros(2)
        adamw_step(p, AdamWState(), AdamWHyper(lr=1e-3, weight_decay=0.0))
        assert p["w"].data.tolist() == [1.0, -2.0]

    def test_first_step_hand_value(self):
        p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
        p["w"].grad = np.array([1.0])
        state = adamw_step(p, AdamWState(), AdamWHyper())
        assert state.t == 1
        assert p["w"].data[0] == pytest.approx(1 - 1e-4 * (1 / (1 + 1e-8) + 0.05), abs=1e-15)
        assert p["w"].data[0] == pytest.approx(0.999895, abs=1e-9)

    def test_pure_decay(self):
        p = {"w": Tensor(np.array([3.0]), requires_grad=True)}
        p["w"].grad = np.array([0.0])
        adamw_step(p, AdamWState(), AdamWHyper(lr=0.01, weight_decay=0.1))
        assert p["w"].data[0] == pytest.approx(3.0 * (1 - 0.01 * 0.1), abs=1e-15)

    def test_matches_textbook_adam_without_decay(self):
        rng = np.random.default_rng(0)
        theta = rng.standard_normal((3, 4))
        p = {"w": Tensor(theta.copy(), requires_grad=True)}
        hp = AdamWHyper(lr=0.01, betas=(0.8, 0.95), weight_decay=0.0)
        state = AdamWState()
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        for t in range(1, 11):
            g = rng.standard_normal(theta.shape)
            p["w"].grad = g.copy()
            adamw_step(p, state, hp)
            m = 0.8 * m + 0.2 * g
            v = 0.95 * v + 0.05 * g**2
            theta = theta - 0.01 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-8)
            np.testing.assert_allclose(p["w"].data, theta, rtol=0, atol=1e-10)

    def test_missing_gradient_named(self):
        p = {"a": Tensor(np.ones(1), requires_grad=True), "b": Tensor(np.ones(1), requires_grad=True)}
        p["a"].grad = np.ones(1)
        with pytest.raises(RegistryError, match="'b'"):
            adamw_step(p, AdamWState(), AdamWHyper())

    def test_invalid_hyper(self):
        with pytest.raises(ConfigError):
            AdamWHyper(betas=(1.0, 0.9))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.betas, cfg.weight_decay, cfg.batch_size) == (1e-4, (0.9, 0.999), 0.05, 8)
        assert (cfg.iterations, cfg.eval_interval) == (2000, 500)

    @pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(betas=(0.9, 1.0)), dict(iterations=10, eval_interval=20), dict(precision="float16"), dict(crop=32)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_file_round_trip(self, tmp_path):
        import json

        cfg = TrainConfig(lr=3e-4, net=TINY_NET, data="x")
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.from_file(path) == cfg
        path.write_text(json.dumps({**cfg.to_dict(), "schedule": "cosine"}))
        with pytest.raises(ConfigError):
            TrainConfig.from_file(path)


class TestTrain:
    def test_deterministic_loss_log(self, tiny_data):
        a = train(tiny_cfg(tiny_data))
        b = train(tiny_cfg(tiny_data))
        assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
        assert all(math.isfinite(r["loss"]) for r in a.log)

    def test_zero_lr_zero_decay_keeps_init(self, tiny_data):
        res = train(tiny_cfg(tiny_data, lr=0.0, weight_decay=0.0))
        init = init_params(TINY_NET, 0)
        for k, t in init.items():
            assert np.array_equal(res.checkpoint.params[k].data, t.data), k

    def test_zero_lr_with_decay_is_decay_free(self, tiny_data):
        # decoupled decay is scaled by lr, so lr = 0 leaves parameters untouched too
        res = train(tiny_cfg(tiny_data, lr=0.0))
        init = init_params(TINY_NET, 0)
        assert all(np.array_equal(res.checkpoint.params[k].data, t.data) for k, t in init.items())

    def test_best_checkpoint_bookkeeping(self, tiny_data):
        res = train(tiny_cfg(tiny_data, lr=1e-3))
        evals = [(r["iter"], r["val_miou"]) for r in res.log if r["val_miou"] is not None]
        assert [i for i, _ in evals] == [3, 6]
        best_iter, best = max(evals, key=lambda e: e[1])
        assert res.checkpoint.best_miou == best and res.checkpoint.iteration == best_iter
        val = load_split(tiny_data, "val")
        s, _ = evaluate_split(res.checkpoint.params, TINY_NET, val)
        assert s["miou"] == best

    def test_nan_loss_aborts(self, tiny_data, monkeypatch):
        real = train_mod.F.cross_entropy
        calls = {"n": 0}

        def flaky(logits, labels, ignore_index=255):
            calls["n"] += 1
            out = real(logits, labels, ignore_index)
            if calls["n"] == 4:
                out.data = np.asarray(np.nan, dtype=out.dtype)
            return out

        monkeypatch.setattr(train_mod.F, "cross_entropy", flaky)
        with pytest.raises(NumericalInstabilityError, match="iteration 4"):
            train(tiny_cfg(tiny_data))

    def test_class_count_mismatch(self, tiny_data):
        with pytest.raises(ConfigError):
            train(tiny_cfg(tiny_data, net=replace(TINY_NET, num_classes=5)))

    def test_crop_and_flip_augmentation(self):
        rng = np.random.default_rng(0)
        rgb = np.arange(2 * 3 * 8 * 8, dtype=np.uint8).reshape(2, 3, 8, 8)
        sar = rgb[:, :1].copy()
        lab = rgb[:, 0].copy()
        r, s, l = train_mod.augment(rng, rgb, sar, lab, flip=True, crop=4)
        assert r.shape == (2, 3, 4, 4) and l.shape == (2, 4, 4)
        assert np.array_equal(r[:, 0], l) and np.array_equal(s[:, 0], l)

    def test_log_csv(self, tmp_path):
        write_log([{"iter": 1, "loss": 0.5, "val_miou": None}, {"iter": 2, "loss": 0.25, "val_miou": 0.75}], tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text() == "iter,loss,val_miou\n1,0.5,\n2,0.25,0.75\n"


class TestEvaluate:
    def test_self_consistency(self, tiny_data):
        val = load_split(tiny_data, "val")
        params = init_params(TINY_NET, 1)
        pred = predict(params, TINY_NET, val.rgb, val.sar)
        own = Split(val.rgb, val.sar, pred, val.names, val.num_classes)
        s, _ = evaluate_split(params, TINY_NET, own)
        assert s["miou"] == 1.0

    def test_round_trip_metric_identical(self, tiny_data, tmp_path):
        res = train(tiny_cfg(tiny_data))
        val = load_split(tiny_data, "val")
        before = evaluate(res.checkpoint, val)
        ckpt_io.save(res.checkpoint, tmp_path / "m.ckpt")
        loaded = ckpt_io.load(tmp_path / "m.ckpt")
        assert evaluate(loaded, val) == before
        assert evaluate(loaded, val) == evaluate(loaded, val)

    def test_png_maps(self, tiny_data, tmp_path):
        params = init_params(TINY_NET, 0)
        ck = Checkpoint(params, 0, 0.0, {"net": TINY_NET.to_dict()})
        val = load_split(tiny_data, "val")
        evaluate(ck, val, tmp_path / "png")
        files = sorted((tmp_path / "png").glob("*.png"))
        assert len(files) == len(val)
        img = Image.open(files[0])
        assert img.mode == "P" and img.size == (16, 16)
        assert img.getpalette()[:6] == [128, 128, 128, 0, 64, 255]
        pred = predict(params, TINY_NET, val.rgb[:1], val.sar[:1])[0]
        assert np.array_equal(np.asarray(img), pred)


class TestCheckpoint:
    def test_byte_round_trip(self, tmp_path):
        params = init_params(TINY_NET, 2)
        ck = Checkpoint(params, 1500, 0.8125, {"net": TINY_NET.to_dict()})
        blob = ckpt_io.encode(ck)
        back = ckpt_io.decode(blob)
        assert ckpt_io.encode(back) == blob
        assert back.iteration == 1500 and back.best_miou == 0.8125
        for k in params:
            assert np.array_equal(back.params[k].data, params[k].data)
        ckpt_io.save(ck, tmp_path / "a.ckpt")
        ckpt_io.save(ckpt_io.load(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert ckpt_io.load(tmp_path / "b.ckpt").config == ck.config

    def test_header_layout(self):
        ck = Checkpoint(init_params(TINY_NET, 0), 7, 0.5)
        blob = ckpt_io.encode(ck)
        assert blob[:4] == b"ASAN"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:16], "little") == 7

    def test_rejects_bad_files(self):
        blob = ckpt_io.encode(Checkpoint(init_params(TINY_NET, 0), 0, 0.0))
        with pytest.raises(DataError, match="version"):
            ckpt_io.decode(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
        with pytest.raises(DataError):
            ckpt_io.decode(b"NOPE" + blob[4:])
        with pytest.raises(DataError):
            ckpt_io.decode(blob + b"\0")
        with pytest.raises(DataError):
            ckpt_io.decode(blob[:10])
        with pytest.raises(DataError):
            ckpt_io.decode(blob[:40])
