import json
import math
from pathlib import Path

import numpy as np
import pytest

from crackdet.autodiff import bce_with_logits, grad_check, load_checkpoint
from crackdet.errors import CheckpointMismatch, ConfigInvalid, DatasetEmpty, NonFiniteLoss, ShapeMismatch
from crackdet.hcnnfp import (
    HCNNFP, Dataset, NetworkConfig, TrainConfig, infer, load_dataset, total_loss, train, training_objective,
)
from crackdet.hcnnfp.ablation import ablate_fpb
from crackdet.synth import SyntheticSpec, generate, make_sample, write_dataset

FIXTURES = Path(__file__).parent / "fixtures"
TINY = NetworkConfig(base_channels=2, input_size=32, seed=1)


def layer_count(c_in, c_out, k, bn):
    return c_in * c_out * k * k + c_out + (2 * c_out if bn else 0)


def closed_form_count(base, counts=(2, 2, 3, 3, 3), fpb=True):
    ch = [base, 2 * base, 4 * base, 8 * base, 8 * base]
    total, c_in = 0, 1
    for k, n in enumerate(counts):
        for _ in range(n):
            total += layer_count(c_in, ch[k], 3, True)
            c_in = ch[k]
        if fpb and k < 4:
            total += layer_count(ch[k], ch[k] // 2, 1, False) + layer_count(ch[k], ch[k] // 2, 3, True)
    for k, n in enumerate(counts):
        out = ch[k - 1] if k else ch[0]
        total += (n - 1) * layer_count(ch[k], ch[k], 3, True) + layer_count(ch[k], out, 3, True)
        total += layer_count(out, 1, 1, False)
    return total + layer_count(5, 1, 1, False)


def zero_heads(net):
    for name, p in net.params.items():
        if name.startswith(("side", "fuse")):
            p.data[...] = 0.0


def seeded_stats(net, seed=0):
    rng = np.random.default_rng(seed)
    for s in net.bn.values():
        s.running_mean = rng.normal(0, 0.1, s.running_mean.shape)
        s.running_var = rng.uniform(0.5, 2.0, s.running_var.shape)


def tiny_data(n=4, seed=5):
    return Dataset.from_pairs(generate(SyntheticSpec(count=n, size=32, seed=seed)))


class TestConfig:
    def test_channels(self):
        assert NetworkConfig().channels == [8, 16, 32, 64, 64]

    @pytest.mark.parametrize("kw", [dict(block_conv_counts=(2, 2, 3, 3)), dict(block_conv_counts=(2, 2, 3, 3, 4)),
                                    dict(input_size=48), dict(base_channels=3)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigInvalid):
            NetworkConfig(**kw)

    def test_vector_round_trip(self):
        cfg = NetworkConfig(base_channels=4, input_size=96, fpb_enabled=False, seed=17, block_conv_counts=(3, 2, 3, 3, 2))
        assert NetworkConfig.from_vector(cfg.to_vector()) == cfg


class TestStructure:
    def test_parameter_count(self):
        # frozen from closed_form_count(8)
        assert closed_form_count(8) == 490_875
        assert HCNNFP(NetworkConfig()).n_parameters() == 490_875
        assert HCNNFP(NetworkConfig(base_channels=4)).n_parameters() == closed_form_count(4)

    def test_branch_removal(self):
        on, off = HCNNFP(NetworkConfig(fpb_enabled=True)), HCNNFP(NetworkConfig(fpb_enabled=False))
        fpb = {k for k in on.params if k.startswith("fpb")}
        assert set(off.params) == set(on.params) - fpb
        assert off.n_parameters() == closed_form_count(8, fpb=False)
        for k in off.params:
            assert np.array_equal(off.params[k].data, on.params[k].data)

    def test_minimum_input(self):
        outs = HCNNFP(TINY).forward(np.zeros((1, 1, 32, 32)))
        assert all(m.shape == (1, 1, 32, 32) for m in outs.maps)

    def test_output_shapes(self):
        outs = HCNNFP(TINY).forward(np.random.default_rng(0).random((2, 1, 64, 96)))
        assert len(outs.side_maps) == 5
        assert all(m.shape == (2, 1, 64, 96) for m in outs.maps)

    @pytest.mark.parametrize("shape", [(1, 1, 48, 32), (1, 2, 32, 32), (1, 1, 16, 16)])
    def test_bad_input(self, shape):
        with pytest.raises(ShapeMismatch):
            HCNNFP(TINY).forward(np.zeros(shape))

    def test_branch_provenance(self):
        outs = HCNNFP(NetworkConfig()).forward(np.zeros((1, 1, 64, 64)))
        assert [p["block_input"] for p in outs.provenance] == [2, 3, 4, 5]
        for p, ch in zip(outs.provenance, [8, 16, 32, 64]):
            assert p["channels"] == ch and p["preserved"] * 2 == ch

    def test_zero_heads_give_half(self):
        net = HCNNFP(TINY)
        zero_heads(net)
        outs = net.forward(np.random.default_rng(1).random((1, 1, 32, 32)))
        assert all(np.all(m.data == 0) for m in outs.maps)
        assert np.all(outs.probability() == 0.5)

    def test_golden_forward(self):
        img, _ = make_sample(SyntheticSpec(), 0)
        fused = HCNNFP(NetworkConfig(seed=0)).forward(img.data[None, None]).fused_map.data
        assert np.array_equal(fused, np.load(FIXTURES / "golden_fused_logits.npy"))

    def test_golden_checkpoint_map(self):
        net = HCNNFP.from_arrays(load_checkpoint(FIXTURES / "small.hckp"))
        assert np.array_equal(net.predict(tiny_data().images[:1])[0], np.load(FIXTURES / "small_golden_map.npy"))


class TestLoss:
    def brute_force(self, outs, y):
        total = 0.0
        n, _, h, w = y.shape
        for m in outs.maps:
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        p = 1.0 / (1.0 + math.exp(-m.data[b, 0, i, j]))
                        t = y[b, 0, i, j]
                        total += -t * math.log(p) - (1 - t) * math.log(1 - p)
        return total

    def test_zero_logits(self):
        net = HCNNFP(TINY)
        zero_heads(net)
        y = np.random.default_rng(2).integers(0, 2, (1, 1, 32, 32))
        outs = net.forward(np.random.default_rng(3).random((1, 1, 32, 32)))
        assert total_loss(outs, y).item() == pytest.approx(6 * 32 * 32 * math.log(2), abs=1e-10)
        assert training_objective(outs, y).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_saturated(self):
        net = HCNNFP(TINY)
        zero_heads(net)
        net.params["side1.b"].data[:] = -40.0
        net.params["fuse.b"].data[:] = -78.0
        for k in range(2, 6):
            net.params[f"side{k}.b"].data[:] = -40.0
        outs = net.forward(np.zeros((1, 1, 32, 32)))
        assert total_loss(outs, np.zeros((1, 1, 32, 32))).item() < 1e-10

    def test_against_per_pixel_loop(self):
        rng = np.random.default_rng(4)
        outs = HCNNFP(TINY).forward(rng.random((1, 1, 32, 32)), training=True)
        y = rng.integers(0, 2, (1, 1, 32, 32)).astype(float)
        assert total_loss(outs, y).item() == pytest.approx(self.brute_force(outs, y), abs=1e-10)

    def test_objective_is_scaled_total(self):
        rng = np.random.default_rng(5)
        outs = HCNNFP(TINY).forward(rng.random((2, 1, 32, 32)))
        y = rng.integers(0, 2, (2, 1, 32, 32))
        assert training_objective(outs, y).item() == pytest.approx(total_loss(outs, y).item() / (6 * 2 * 32 * 32),
                                                                   rel=1e-12)

    def test_mask_mismatch(self):
        outs = HCNNFP(TINY).forward(np.zeros((1, 1, 32, 32)))
        with pytest.raises(ShapeMismatch):
            total_loss(outs, np.zeros((1, 1, 32, 64)))


class TestEndToEndGradient:
    def test_eval_mode(self):
        rng = np.random.default_rng(6)
        net = HCNNFP(TINY)
        seeded_stats(net)
        for p in net.params.values():
            p.data = p.data + rng.normal(0, 0.05, p.shape)
        x = rng.random((1, 1, 32, 32))
        y = rng.integers(0, 2, (1, 1, 32, 32))
        params = list(net.params.values())
        err = grad_check(lambda: training_objective(net.forward(x, training=False), y), params,
                         max_coords=256, rng=rng)
        assert err <= 1e-4


class TestTraining:
    def test_zero_lr_keeps_parameters(self):
        net = HCNNFP(TINY)
        before = {k: p.data.copy() for k, p in net.params.items()}
        train(net, tiny_data(), TrainConfig(lr=0.0, max_epochs=2))
        assert all(np.array_equal(before[k], p.data) for k, p in net.params.items())

    def test_overfit_single_sample(self):
        # the fused map memorizes; coarse side maps keep the six-map mean above a positive floor
        data = Dataset.from_pairs(generate(SyntheticSpec(count=1, size=64, seed=11)))
        net = HCNNFP(NetworkConfig(seed=0))
        fused0 = bce_with_logits(net.forward(data.images, training=True).fused_map, data.masks).item()
        res = train(net, data, TrainConfig(lr=1e-2, batch_size=1, max_epochs=200, max_steps=200))
        assert res.steps == 200
        outs = net.forward(data.images, training=True)
        assert bce_with_logits(outs.fused_map, data.masks).item() < 0.01 * fused0
        assert res.step_losses[-1] < 0.05 * res.step_losses[0]

    def test_deterministic(self, tmp_path):
        arrays = []
        for run in range(2):
            net = HCNNFP(TINY)
            train(net, tiny_data(), TrainConfig(lr=1e-3, max_steps=3, seed=9), checkpoint_path=tmp_path / f"{run}.hckp")
            arrays.append((tmp_path / f"{run}.hckp").read_bytes())
        assert arrays[0] == arrays[1]

    def test_log_and_checkpoint(self, tmp_path):
        net = HCNNFP(TINY)
        res = train(net, tiny_data(), TrainConfig(lr=1e-3, max_epochs=2, early_stop_delta=1e-9),
                    log_path=tmp_path / "log.jsonl", checkpoint_path=tmp_path / "c.hckp")
        lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [1, 2] == [r["epoch"] for r in res.log]
        assert set(lines[0]) == {"epoch", "loss", "wall_ms"}
        restored = HCNNFP.from_arrays(load_checkpoint(tmp_path / "c.hckp"))
        img = tiny_data().images[:1]
        assert np.array_equal(restored.predict(img), net.predict(img))

    def test_infer_range(self):
        net = HCNNFP(TINY)
        img, _ = make_sample(SyntheticSpec(size=32), 2)
        pm = infer(net, img)
        assert pm.shape == (32, 32)
        assert np.all((pm.data > 0) & (pm.data < 1))

    def test_early_stop(self):
        res = train(HCNNFP(TINY), tiny_data(), TrainConfig(lr=1e-4, max_epochs=10, early_stop_delta=0.5))
        assert res.stop_reason == "early_stop" and len(res.log) == 2

    def test_non_finite_loss(self):
        data = tiny_data()
        data.images[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLoss):
            train(HCNNFP(TINY), data, TrainConfig(max_steps=1, batch_size=4))

    def test_empty(self):
        with pytest.raises(DatasetEmpty):
            Dataset.from_pairs([])

    def test_checkpoint_topology_mismatch(self):
        arrays = HCNNFP(TINY).state_arrays()
        with pytest.raises(CheckpointMismatch):
            HCNNFP.from_arrays(arrays, NetworkConfig(base_channels=4, input_size=32))
        del arrays["fuse.b"]
        with pytest.raises(CheckpointMismatch):
            HCNNFP.from_arrays(arrays)

    def test_load_dataset(self, tmp_path):
        write_dataset(SyntheticSpec(count=3, size=32, seed=2), tmp_path)
        ds = load_dataset(tmp_path)
        assert ds.ids == ["syn_0000", "syn_0001", "syn_0002"]
        assert ds.images.shape == (3, 1, 32, 32)
        ref = Dataset.from_pairs(generate(SyntheticSpec(count=3, size=32, seed=2)))
        np.testing.assert_array_equal(ds.masks, ref.masks)
        np.testing.assert_allclose(ds.images, ref.images, atol=0.5 / 255)


class TestAblation:
    def test_schema(self):
        data = tiny_data(6)
        rep = ablate_fpb(data.subset(range(4)), data.subset(range(4, 6)), seeds=(0, 1), net_cfg=TINY,
                         train_cfg=TrainConfig(lr=1e-3, max_steps=1))
        assert rep["methods"] == ["fpb_on", "fpb_off"]
        assert len(rep["images"]) == 2 * 2 * 2
        assert {r["variant"] for r in rep["images"]} == {"fpb_on", "fpb_off"}
        assert {(r["variant"], r["seed"]) for r in rep["per_seed"]} == {(v, s) for v in ("fpb_on", "fpb_off")
                                                                        for s in (0, 1)}
        assert set(rep["aggregate"]) == {"fpb_on", "fpb_off"}
