import math

import numpy as np
import pytest
import torch

from slicescan.checkpoint import decode_checkpoint, encode_checkpoint
from slicescan.data import SegmentationData
from slicescan.errors import ConfigError, DivergenceError
from slicescan.network import ModelConfig, build_model
from slicescan.training import (
    TrainConfig,
    cosine_lr,
    evaluate,
    fit,
    grad_check,
    grad_check_fn,
    history_csv,
    make_optimizer,
)

# two-block model, cheap enough for repeated training in tests
MICRO = ModelConfig(base_width=4, state_dim=2, encoder_depths=(1, 0, 0, 0), decoder_depths=(0, 0, 0, 1),
                    input_resolution=(32, 32))


def toy_data(n=4, res=(32, 32), seed=0):
    rng = np.random.default_rng(seed)
    masks = np.zeros((n, *res), np.int64)
    for i in range(n):
        r, c = rng.integers(4, res[0] - 12, size=2)
        masks[i, r : r + 8, c : c + 8] = 1
    images = np.repeat(masks[:, None].astype(np.float32), 3, axis=1) * 0.8 + 0.1
    images += rng.normal(0, 0.02, images.shape).astype(np.float32)
    return SegmentationData(images.astype(np.float32), masks, [f"s{i}" for i in range(n)], 2)


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 1e-3, 1e-5, 50) == pytest.approx(1e-3, abs=1e-12)
        assert cosine_lr(50, 1e-3, 1e-5, 50) == pytest.approx(1e-5, abs=1e-12)

    def test_closed_form(self):
        for e in range(0, 301, 7):
            want = 1e-5 + 0.5 * (1e-3 - 1e-5) * (1 + math.cos(math.pi * e / 50))
            assert abs(cosine_lr(e, 1e-3, 1e-5, 50) - want) <= 1e-12

    def test_history_follows_schedule(self):
        tc = TrainConfig(epochs=3, t_max=2, batch_size=4, augment=False)
        _, hist = fit(MICRO, tc, toy_data())
        assert [h["lr"] for h in hist] == [cosine_lr(e, tc.initial_lr, tc.min_lr, 2) for e in range(3)]


class TestOptimizer:
    def test_zero_grad_step_is_pure_weight_decay(self):
        p = torch.nn.Parameter(torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64))
        model = torch.nn.Module()
        model.register_parameter("w", p)
        tc = TrainConfig(initial_lr=1e-2, weight_decay=0.1)
        opt = make_optimizer(model, tc)
        before = p.detach().clone()
        p.grad = torch.zeros_like(p)
        opt.step()
        assert torch.equal(p.detach(), before * (1 - 1e-2 * 0.1))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(initial_lr=1e-6, min_lr=1e-5)
        with pytest.raises(ConfigError):
            TrainConfig(loss="hinge")
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 2, "warmup": 3})


class TestFit:
    def test_deterministic_twice(self):
        tc = TrainConfig(epochs=2, batch_size=2, seed=7)
        m1, h1 = fit(MICRO, tc, toy_data())
        m2, h2 = fit(MICRO, tc, toy_data())
        assert history_csv(h1) == history_csv(h2)
        assert encode_checkpoint(MICRO, m1.state_dict()) == encode_checkpoint(MICRO, m2.state_dict())

    def test_seed_changes_result(self):
        a, _ = fit(MICRO, TrainConfig(epochs=1, seed=0), toy_data())
        b, _ = fit(MICRO, TrainConfig(epochs=1, seed=1), toy_data())
        assert encode_checkpoint(MICRO, a.state_dict()) != encode_checkpoint(MICRO, b.state_dict())

    def test_loss_decreases(self):
        _, hist = fit(MICRO, TrainConfig(epochs=30, batch_size=2, initial_lr=3e-3, t_max=30, augment=False), toy_data())
        assert hist[-1]["loss"] < hist[0]["loss"]

    def test_divergence_reports_epoch_and_step(self):
        data = toy_data()
        data.images[1, 0, 0, 0] = np.nan
        with pytest.raises(DivergenceError, match=r"epoch 0, step \d+"):
            fit(MICRO, TrainConfig(epochs=1, batch_size=1, augment=False), data)

    def test_empty_and_mismatched(self):
        with pytest.raises(ConfigError):
            fit(MICRO, TrainConfig(epochs=1), toy_data().subset([]))
        with pytest.raises(ConfigError):
            fit(MICRO, TrainConfig(epochs=1), toy_data(res=(64, 64)))

    def test_history_csv_header(self):
        _, hist = fit(MICRO, TrainConfig(epochs=1), toy_data())
        lines = history_csv(hist).splitlines()
        assert lines[0] == "epoch,lr,loss,dsc,miou"
        assert len(lines) == 2

    def test_evaluate(self):
        model = build_model(MICRO, seed=0)
        r = evaluate(model, toy_data())
        assert 0 <= r.dsc <= 1


class TestGradCheck:
    def test_linear_toy(self):
        g = torch.Generator().manual_seed(0)
        lin = torch.nn.Linear(6, 3).double()
        x = torch.randn(5, 6, generator=g, dtype=torch.float64)
        w = torch.randn(5, 3, generator=g, dtype=torch.float64)
        err, _ = grad_check_fn(lambda: (lin(x) * w).sum(), lin.parameters(), n_samples=21)
        assert err <= 1e-6

    def test_micro_network(self):
        # truncation error is O(eps^2); a smaller step separates it from any real mismatch
        assert grad_check(MICRO, eps=1e-4, n_samples=60) <= 1e-4

    def test_error_shrinks_with_eps(self):
        cfg = MICRO
        coarse = grad_check(cfg, eps=4e-2, n_samples=40, seed=1)
        fine = grad_check(cfg, eps=2e-2, n_samples=40, seed=1)
        assert fine < coarse

    def test_multiclass_loss(self):
        cfg = ModelConfig(**{**MICRO.to_dict(), "num_classes": 3})
        assert grad_check(cfg, n_samples=30) <= 1e-3


class TestCheckpointFormat:
    def test_layout(self):
        state = {"a": torch.tensor([[1.0, 2.0]]), "bc": torch.tensor(3.0)}
        raw = encode_checkpoint(MICRO, state, {"k": 1})
        assert raw[:4] == b"SLMB"
        assert int.from_bytes(raw[4:8], "little") == 1
        n = int.from_bytes(raw[8:12], "little")
        pos = 12 + n
        assert int.from_bytes(raw[pos : pos + 4], "little") == 2
        pos += 4
        assert int.from_bytes(raw[pos : pos + 2], "little") == 1 and raw[pos + 2 : pos + 3] == b"a"
        pos += 3
        assert raw[pos] == 2
        assert np.frombuffer(raw[pos + 1 : pos + 9], "<u4").tolist() == [1, 2]
        assert np.frombuffer(raw[pos + 9 : pos + 17], "<f4").tolist() == [1.0, 2.0]
        # scalar tensor: rank 0, no dims
        tail = raw[pos + 17 :]
        assert tail[:2] == (2).to_bytes(2, "little") and tail[2:4] == b"bc" and tail[4] == 0
        assert np.frombuffer(tail[5:], "<f4").tolist() == [3.0]

    def test_roundtrip(self):
        model = build_model(MICRO, seed=3)
        raw = encode_checkpoint(MICRO, model.state_dict(), {"note": "x"})
        cfg, state, meta = decode_checkpoint(raw)
        assert cfg == MICRO and meta == {"note": "x"}
        for k, v in model.state_dict().items():
            assert torch.equal(state[k], v)
