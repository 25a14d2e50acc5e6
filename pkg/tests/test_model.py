"""Architecture construction, forward/backward, aleatoric loss, checkpoints."""

import numpy as np
import pytest
from scipy.integrate import quad

from uncertseg.engine import functional as F
from uncertseg.engine.gradcheck import assert_gradients_close, finite_difference_gradient
from uncertseg.engine.optim import adam_step
from uncertseg.model import (
    ArchitectureSpec,
    BatchNorm2dLayer,
    Conv2dLayer,
    aleatoric_loss,
    build_network,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from uncertseg.rng import RngState


def tiny_spec(variant="u2net", base=2):
    return ArchitectureSpec(variant, base_channels=base)


class TestArchitectureSpec:
    def test_reference_channel_plan(self):
        spec = ArchitectureSpec("u2net")
        assert spec.encoder_channels == [64, 128, 256, 512, 1024]
        assert spec.decoder_channels == [512, 256, 128, 64]
        assert spec.input_channels == 1

    def test_u2net_dropout_plan(self):
        """Dropout after every block except the first encoder and last decoder
        block: encoder blocks 2-4 and decoder blocks 1-3 at 0.1, bottleneck
        (encoder block 5) at 0.5 - seven sites in total."""
        plan = ArchitectureSpec("u2net").dropout_plan
        assert plan == {
            "enc2": 0.1,
            "enc3": 0.1,
            "enc4": 0.1,
            "enc5": 0.5,
            "dec1": 0.1,
            "dec2": 0.1,
            "dec3": 0.1,
        }
        assert sum(1 for r in plan.values() if r == 0.1) == 6
        assert sum(1 for r in plan.values() if r == 0.5) == 1

    def test_unet_dropout_plan_is_bottleneck_only(self):
        assert ArchitectureSpec("unet").dropout_plan == {"enc5": 0.5}

    def test_bunet_shares_u2net_plan(self):
        assert ArchitectureSpec("bunet").dropout_plan == ArchitectureSpec("u2net").dropout_plan

    def test_bunet_has_extra_output_channel(self):
        assert ArchitectureSpec("bunet").output_channels == 3
        assert ArchitectureSpec("u2net").output_channels == 2

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            ArchitectureSpec("resnet")


class TestParameterCounts:
    def test_single_conv_block_with_bn(self):
        """Closed form: 64*(1*9+1) conv + 2*64 batchnorm = 768."""
        conv = Conv2dLayer(1, 64, 3, 1, RngState(0), "c")
        bn = BatchNorm2dLayer(64, "b")
        total = sum(p.value.size for p in conv.parameters() + bn.parameters())
        assert total == 768

    def test_u2net_and_unet_counts_match(self):
        a = count_parameters(build_network(tiny_spec("u2net"), RngState(1)))
        b = count_parameters(build_network(tiny_spec("unet"), RngState(1)))
        assert a == b

    def test_bunet_extra_channel_parameters(self):
        """The third output channel adds base_channels weights plus one bias."""
        base = 2
        a = count_parameters(build_network(tiny_spec("bunet", base), RngState(1)))
        b = count_parameters(build_network(tiny_spec("u2net", base), RngState(1)))
        assert a - b == base + 1


class TestNetworkForward:
    def test_eval_forward_deterministic(self):
        net = build_network(tiny_spec(), RngState(3))
        x = np.random.default_rng(0).random((1, 1, 32, 32)).astype(np.float32)
        a = net.forward(x)
        b = net.forward(x)
        assert np.array_equal(a, b)

    def test_mc_sample_streams_differ(self):
        net = build_network(tiny_spec(), RngState(3))
        net.set_mode(F.MC_SAMPLE)
        x = np.random.default_rng(0).random((1, 1, 32, 32)).astype(np.float32)
        a = net.forward(x, RngState(10))
        b = net.forward(x, RngState(11))
        assert not np.array_equal(a, b)

    def test_output_shape_matches_input(self):
        net = build_network(tiny_spec(), RngState(3))
        x = np.zeros((2, 1, 64, 64), dtype=np.float32)
        assert net.forward(x).shape == (2, 2, 64, 64)

    def test_indivisible_dims_report_required_padding(self):
        net = build_network(tiny_spec(), RngState(3))
        with pytest.raises(ValueError, match="pad rows by 12"):
            net.forward(np.zeros((1, 1, 100, 64), dtype=np.float32))

    def test_build_is_bit_reproducible(self):
        a = build_network(tiny_spec(), RngState(42))
        b = build_network(tiny_spec(), RngState(42))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.value, pb.value)

    def test_mode_transitions_keep_parameters(self):
        net = build_network(tiny_spec(), RngState(5))
        before = [p.value.copy() for p in net.parameters()]
        for mode in (F.TRAIN, F.MC_SAMPLE, F.EVAL):
            net.set_mode(mode)
        for p, b in zip(net.parameters(), before):
            assert np.array_equal(p.value, b)


class TestTrainingDynamics:
    def test_one_step_decreases_loss_on_same_batch(self):
        """A fresh u2net improves on a 2-scan batch after one Adam step in
        at least 4 of 5 seeds."""
        wins = 0
        for seed in range(5):
            net = build_network(tiny_spec(base=4), RngState(seed))
            rng = np.random.default_rng(seed)
            x = rng.random((2, 1, 32, 32)).astype(np.float32)
            y = (rng.random((2, 32, 32)) > 0.7).astype(np.int64)
            net.set_mode(F.TRAIN)
            drop_rng = RngState(1000 + seed)
            logits = net.forward(x, drop_rng)
            loss0, cache = F.softmax_cross_entropy(logits, y)
            net.backward(F.softmax_cross_entropy_backward(cache))
            adam_step(net.parameters(), lr=1e-3, t=1)
            logits = net.forward(x, drop_rng)
            loss1, _ = F.softmax_cross_entropy(logits, y)
            wins += loss1 < loss0
        assert wins >= 4

    def test_gradient_reaches_every_parameter(self):
        net = build_network(tiny_spec(base=2), RngState(9))
        rng = np.random.default_rng(1)
        x = rng.random((2, 1, 32, 32)).astype(np.float32)
        y = (rng.random((2, 32, 32)) > 0.7).astype(np.int64)
        net.set_mode(F.TRAIN)
        logits = net.forward(x, RngState(77))
        _, cache = F.softmax_cross_entropy(logits, y)
        net.backward(F.softmax_cross_entropy_backward(cache))
        dead = [p.name for p in net.parameters() if not np.any(p.grad)]
        assert dead == []


class TestAleatoricLoss:
    @staticmethod
    def _single_pixel_output(l0, l1, log_var):
        out = np.zeros((1, 3, 1, 1), dtype=np.float64)
        out[0, 0, 0, 0] = l0
        out[0, 1, 0, 0] = l1
        out[0, 2, 0, 0] = log_var
        return out

    def test_zero_noise_limit_matches_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((1, 2, 4, 4))
        target = (rng.random((1, 4, 4)) > 0.5).astype(np.int64)
        out = np.concatenate([logits, np.full((1, 1, 4, 4), -20.0)], axis=1)
        plain, _ = F.softmax_cross_entropy(logits, target)
        noisy, _ = aleatoric_loss(out, target, noise_samples=5, rng=RngState(1))
        assert abs(noisy - plain) < 1e-4

    def test_fixed_seed_reproducible(self):
        rng = np.random.default_rng(1)
        out = rng.standard_normal((1, 3, 4, 4))
        target = (rng.random((1, 4, 4)) > 0.5).astype(np.int64)
        a, _ = aleatoric_loss(out, target, noise_samples=1, rng=RngState(5))
        b, _ = aleatoric_loss(out, target, noise_samples=1, rng=RngState(5))
        assert a == b

    def test_monte_carlo_matches_quadrature_oracle(self):
        """Single pixel, hand-picked logits/variance: the expected loss is a
        1-D Gaussian integral. For 2 classes the cross entropy depends only
        on the perturbed logit difference; the noise difference is
        N(0, 2 sigma^2), so the oracle integrates softplus over that density.
        The MC estimate with 1e5 draws must land within 3 standard errors
        (SE from the oracle's second moment)."""
        l0, l1, log_var, target = 0.3, -0.5, 0.4, 1
        sigma = np.exp(0.5 * log_var)
        delta_l = l1 - l0

        def softplus(z):
            return np.logaddexp(0.0, z)

        def loss_at(d):
            return softplus(-(delta_l + sigma * d))

        def gauss2(d):
            return np.exp(-d * d / 4.0) / np.sqrt(4.0 * np.pi)  # N(0, 2) density

        expected, _ = quad(lambda d: loss_at(d) * gauss2(d), -12, 12)
        second, _ = quad(lambda d: loss_at(d) ** 2 * gauss2(d), -12, 12)
        n = 100_000
        se = np.sqrt(max(second - expected**2, 0.0) / n)

        out = self._single_pixel_output(l0, l1, log_var)
        tgt = np.full((1, 1, 1), target, dtype=np.int64)
        mc, _ = aleatoric_loss(out, tgt, noise_samples=n, rng=RngState(21))
        assert abs(mc - expected) < 3 * se

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        """Common random numbers make the sampled loss a deterministic
        function of the output tensor, so central differences apply."""
        rng = np.random.default_rng(seed)
        out = rng.standard_normal((1, 3, 2, 2))
        target = (rng.random((1, 2, 2)) > 0.5).astype(np.int64)

        def f(v):
            loss, _ = aleatoric_loss(v, target, noise_samples=20, rng=RngState(50 + seed))
            return loss

        _, grad = aleatoric_loss(out, target, noise_samples=20, rng=RngState(50 + seed))
        assert_gradients_close(grad, finite_difference_gradient(f, out), label="aleatoric grad")

    def test_sample_count_validated(self):
        out = np.zeros((1, 3, 1, 1))
        with pytest.raises(ValueError):
            aleatoric_loss(out, np.zeros((1, 1, 1), dtype=np.int64), 0, RngState(0))


class TestCheckpoints:
    def test_round_trip_bit_identical(self, tmp_path):
        net = build_network(tiny_spec("u2net", base=2), RngState(13))
        # make running stats non-trivial before saving
        net.set_mode(F.TRAIN)
        x = np.random.default_rng(0).random((2, 1, 32, 32)).astype(np.float32)
        net.forward(x, RngState(1))
        first = tmp_path / "a"
        second = tmp_path / "b"
        save_checkpoint(net, first)
        loaded = load_checkpoint(first)
        save_checkpoint(loaded, second)
        for name, _ in net.state_entries():
            fa = (first / f"{name}.tnsr").read_bytes()
            fb = (second / f"{name}.tnsr").read_bytes()
            assert fa == fb, name
        assert (first / "manifest.txt").read_bytes() == (second / "manifest.txt").read_bytes()

    def test_manifest_records_dropout_sites(self, tmp_path):
        net = build_network(tiny_spec("u2net", base=2), RngState(13))
        save_checkpoint(net, tmp_path / "ck")
        text = (tmp_path / "ck" / "manifest.txt").read_text()
        assert "dropout_sites: 7" in text
        net = build_network(tiny_spec("unet", base=2), RngState(13))
        save_checkpoint(net, tmp_path / "ck2")
        assert "dropout_sites: 1" in (tmp_path / "ck2" / "manifest.txt").read_text()

    def test_loaded_network_predicts_identically(self, tmp_path):
        net = build_network(tiny_spec("u2net", base=2), RngState(4))
        save_checkpoint(net, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        x = np.random.default_rng(2).random((1, 1, 32, 32)).astype(np.float32)
        assert np.array_equal(net.forward(x), loaded.forward(x))
