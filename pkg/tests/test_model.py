import numpy as np
import pytest
import torch

from twindetect.model import (DTModel, LossBreakdown, ModelConfig, TrainConfig,
                              load_checkpoint, loss_forecast, loss_recon,
                              loss_total, save_checkpoint, train)
from twindetect.timeseries import Normalizer, WindowPair

TINY = ModelConfig(d_features=2, w=4, h=2, d_model=8, n_heads=2, d_ff=16,
                   dropout=0.1, n_encoder_layers=1, n_decoder_layers=1)


def tiny_model(seed=0, **overrides):
    cfg = TINY if not overrides else ModelConfig(**{**TINY.to_dict(), **overrides})
    return DTModel(cfg, init_seed=seed)


def make_pairs(n, w, h, d, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        pairs.append(WindowPair(
            input=rng.normal(0, 1, size=(w, d)),
            target=rng.normal(0, 1, size=(h, d)),
            start_step=i, end_step=i + w + h - 1))
    return pairs


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(d_features=2, d_model=10, n_heads=4)

    def test_dropout_range(self):
        with pytest.raises(ValueError):
            ModelConfig(d_features=2, dropout=1.0)


class TestForward:
    def test_eval_deterministic(self):
        m = tiny_model()
        x = torch.randn(4, 2, generator=torch.Generator().manual_seed(0))
        a = m(x, mode="eval")
        b = m(x, mode="eval")
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_mc_streams_differ(self):
        m = tiny_model()
        x = torch.randn(4, 2, generator=torch.Generator().manual_seed(0))
        a, _ = m(x, mode="mc", generator=torch.Generator().manual_seed(1))
        b, _ = m(x, mode="mc", generator=torch.Generator().manual_seed(2))
        assert not torch.equal(a, b)

    def test_same_stream_identical(self):
        m = tiny_model()
        x = torch.randn(4, 2, generator=torch.Generator().manual_seed(0))
        a, _ = m(x, mode="mc", generator=torch.Generator().manual_seed(5))
        b, _ = m(x, mode="mc", generator=torch.Generator().manual_seed(5))
        assert torch.equal(a, b)

    @pytest.mark.parametrize("w,h,d", [(4, 2, 2), (6, 3, 5), (8, 8, 1)])
    def test_output_shapes(self, w, h, d):
        m = DTModel(ModelConfig(d_features=d, w=w, h=h, d_model=8, n_heads=2,
                                d_ff=16, dropout=0.0))
        pred, rec = m(torch.zeros(w, d), mode="eval")
        assert pred.shape == (h, d) and rec.shape == (h, d)

    def test_shape_mismatch_rejected(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            m(torch.zeros(5, 2), mode="eval")

    def test_parameter_count_function_of_config(self):
        assert tiny_model(seed=0).parameter_count() == \
            tiny_model(seed=1).parameter_count()


class TestLosses:
    def test_zero_when_equal(self):
        y = torch.randn(3, 2, generator=torch.Generator().manual_seed(0))
        assert float(loss_forecast(y, y)) == 0.0
        assert float(loss_recon(y, y)) == 0.0

    def test_squared_norm_single_step(self):
        pred = torch.tensor([[3.0, 4.0]])
        target = torch.zeros(1, 2)
        assert float(loss_forecast(pred, target)) == pytest.approx(25.0)

    def test_scalar_residual(self):
        assert float(loss_recon(torch.tensor([[2.0]]),
                                torch.tensor([[0.0]]))) == pytest.approx(4.0)

    def test_mean_over_horizon(self):
        # per-step squared norms {4, 16} -> 10
        pred = torch.tensor([[2.0], [4.0]])
        target = torch.zeros(2, 1)
        assert float(loss_forecast(pred, target)) == pytest.approx(10.0)

    def test_recon_mean_over_horizon(self):
        # per-step squared norms {1, 1, 4} -> 2
        rec = torch.tensor([[1.0], [1.0], [2.0]])
        pred = torch.zeros(3, 1)
        assert float(loss_recon(rec, pred)) == pytest.approx(2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_forecast(torch.zeros(2, 2), torch.zeros(3, 2))

    def test_total_is_exact_sum(self):
        lb = loss_total(0.3, 0.2)
        assert lb.total == lb.forecast + lb.recon == pytest.approx(0.5)
        assert loss_total(0.0, 0.0).total == 0.0

    def test_nonnegative_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = torch.as_tensor(rng.normal(size=(3, 2)))
            b = torch.as_tensor(rng.normal(size=(3, 2)))
            assert float(loss_forecast(a, b)) >= 0.0

    def test_recon_detaches_forecast(self):
        pred = torch.randn(2, 2, requires_grad=True)
        rec = torch.randn(2, 2, requires_grad=True)
        loss_recon(rec, pred).backward()
        assert pred.grad is None or torch.all(pred.grad == 0)
        assert rec.grad is not None


class TestGradients:
    def test_total_loss_matches_finite_differences(self):
        torch.manual_seed(0)
        m = tiny_model().double()
        x = torch.randn(4, 2, dtype=torch.float64)
        y = torch.randn(2, 2, dtype=torch.float64)

        # the recon target is a stop-gradient copy of the forecast, so the
        # finite-difference oracle must hold it fixed at the base point
        with torch.no_grad():
            base_pred, _ = m(x, mode="eval")
        base_pred = base_pred.clone()

        def total_loss():
            pred, rec = m(x, mode="eval")
            return float((loss_forecast(pred, y) + loss_recon(rec, base_pred)).detach())

        pred, rec = m(x, mode="eval")
        loss = loss_forecast(pred, y) + loss_recon(rec, pred)
        m.zero_grad()
        loss.backward()
        eps = 1e-6
        checked = 0
        for name, p in m.named_parameters():
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            flat = p.data.view(-1)
            idxs = range(0, flat.numel(), max(1, flat.numel() // 5))
            for i in idxs:
                orig = float(flat[i])
                flat[i] = orig + eps
                up = total_loss()
                flat[i] = orig - eps
                down = total_loss()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                an = float(grad.view(-1)[i])
                # absolute floor absorbs FD roundoff on near-zero gradients
                if abs(fd - an) < 1e-7:
                    checked += 1
                    continue
                denom = max(abs(fd), abs(an))
                assert abs(fd - an) / denom < 1e-4, (name, i, fd, an)
                checked += 1
        assert checked > 50

    def test_total_gradient_additive(self):
        # grad(total) = grad(forecast) + grad(recon), checked parameter-wise
        m = tiny_model().double()
        x = torch.randn(4, 2, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(1))
        y = torch.randn(2, 2, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(2))

        def grads(which):
            m.zero_grad()
            pred, rec = m(x, mode="eval")
            if which == "forecast":
                loss = loss_forecast(pred, y)
            elif which == "recon":
                loss = loss_recon(rec, pred)
            else:
                loss = loss_forecast(pred, y) + loss_recon(rec, pred)
            loss.backward()
            return [p.grad.clone() if p.grad is not None else torch.zeros_like(p)
                    for p in m.parameters()]

        gf, gr, gt = grads("forecast"), grads("recon"), grads("total")
        for a, b, c in zip(gf, gr, gt):
            assert torch.allclose(a + b, c, rtol=1e-10, atol=1e-12)


class TestPermutationSanity:
    def test_feature_permutation_preserves_losses(self):
        d = 3
        cfg = ModelConfig(d_features=d, w=4, h=2, d_model=8, n_heads=2,
                          d_ff=16, dropout=0.0, n_encoder_layers=1,
                          n_decoder_layers=1)
        m1 = DTModel(cfg, init_seed=0)
        perm = [2, 0, 1]
        m2 = DTModel(cfg, init_seed=0)
        m2.load_state_dict(m1.state_dict())
        with torch.no_grad():
            m2.input_proj.weight.copy_(m1.input_proj.weight[:, perm])
            m2.forecast_head.weight.copy_(m1.forecast_head.weight[perm, :])
            m2.forecast_head.bias.copy_(m1.forecast_head.bias[perm])
            m2.recon_head[2].weight.copy_(m1.recon_head[2].weight[perm, :])
            m2.recon_head[2].bias.copy_(m1.recon_head[2].bias[perm])
        x = torch.randn(4, d, generator=torch.Generator().manual_seed(3))
        y = torch.randn(2, d, generator=torch.Generator().manual_seed(4))
        with torch.no_grad():
            p1, r1 = m1(x, mode="eval")
            p2, r2 = m2(x[:, perm], mode="eval")
        assert float(loss_forecast(p1, y)) == pytest.approx(
            float(loss_forecast(p2, y[:, perm])), rel=1e-5)
        assert float(loss_recon(r1, p1)) == pytest.approx(
            float(loss_recon(r2, p2)), rel=1e-5)


class TestTrain:
    def test_history_length(self):
        m = tiny_model()
        pairs = make_pairs(4, 4, 2, 2)
        _, hist = train(m, pairs[:2], pairs[2:],
                        TrainConfig(batch_size=2, learning_rate=1e-3, epochs=1,
                                    seed=0))
        assert len(hist) == 1
        assert isinstance(hist[0]["train"], LossBreakdown)

    def test_deterministic_given_seed(self):
        pairs = make_pairs(8, 4, 2, 2)
        cfg = TrainConfig(batch_size=4, learning_rate=1e-3, epochs=3, seed=5)
        m1, _ = train(tiny_model(seed=1), pairs[:6], pairs[6:], cfg)
        m2, _ = train(tiny_model(seed=1), pairs[:6], pairs[6:], cfg)
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(a, b)

    def test_converges_on_constant_windows(self):
        cfg = ModelConfig(d_features=2, w=4, h=2, d_model=8, n_heads=2,
                          d_ff=16, dropout=0.0, n_encoder_layers=1,
                          n_decoder_layers=1)
        m = DTModel(cfg, init_seed=0)
        const = [WindowPair(input=np.full((4, 2), 0.5),
                            target=np.full((2, 2), 0.5),
                            start_step=i, end_step=i + 5) for i in range(8)]
        _, hist = train(m, const, const,
                        TrainConfig(batch_size=4, learning_rate=2e-2, epochs=50,
                                    seed=0))
        assert hist[-1]["val"].forecast < 1e-3

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            train(tiny_model(), [], make_pairs(2, 4, 2, 2),
                  TrainConfig(epochs=1))


class TestCheckpoint:
    def _normalizer(self):
        return Normalizer(mean=np.array([0.0, 1.0]), std=np.array([1.0, 2.0]))

    def test_roundtrip_forward_identical(self, tmp_path):
        m = tiny_model(seed=3)
        path = save_checkpoint(m, TINY, self._normalizer(), tmp_path / "m.ckpt")
        m2, cfg2, norm2 = load_checkpoint(path)
        x = torch.randn(4, 2, generator=torch.Generator().manual_seed(0))
        a, b = m(x, mode="eval"), m2(x, mode="eval")
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert cfg2 == TINY
        assert np.array_equal(norm2.std, self._normalizer().std)

    def test_truncated_file_rejected(self, tmp_path):
        m = tiny_model()
        path = save_checkpoint(m, TINY, self._normalizer(), tmp_path / "m.ckpt")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 64])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_version_mismatch_reported(self, tmp_path):
        import json
        import struct
        from twindetect.model import CHECKPOINT_MAGIC
        header = json.dumps({"format_version": 99}).encode()
        p = tmp_path / "v99.ckpt"
        p.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header)
        with pytest.raises(ValueError, match="expected 1, found 99"):
            load_checkpoint(p)

    def test_dropout_recorded_per_profile(self, tmp_path):
        vessel_cfg = ModelConfig(d_features=5, w=4, h=2, d_model=8, n_heads=2,
                                 d_ff=16, dropout=0.1)
        m = DTModel(vessel_cfg)
        norm = Normalizer(mean=np.zeros(5), std=np.ones(5))
        path = save_checkpoint(m, vessel_cfg, norm, tmp_path / "v.ckpt")
        _, cfg, _ = load_checkpoint(path)
        assert cfg.dropout == 0.1
