import math

import numpy as np
import pytest
import torch
from torch import nn

from semcodec.config import REAL_DTYPE, Config
from semcodec.errors import ParameterError, ShapeError, StateError
from semcodec.diffusion import (
    Denoiser,
    build_denoiser,
    build_noise_schedule,
    connector_sample,
    connector_train_step,
    q_sample,
    reverse_sigma,
)
from semcodec.training import connector_targets, new_connector_state, train_connector

DT = REAL_DTYPE


def tiny_connector_cfg(**overrides) -> Config:
    base = dict(
        embed_dim=16,
        hidden_dim=16,
        phoneme_embed_dim=8,
        prompt_dim=16,
        prompt_channels=8,
        attention_heads=2,
        ffn_dim=32,
        speech_encoder_layers=1,
        phoneme_encoder_layers=1,
        speech_decoder_layers=1,
        phoneme_decoder_layers=1,
        speech_decoder_convs=1,
        codebook_size=16,
        diffusion_steps=10,
        connector_channels=16,
        connector_layers=2,
        connector_dilation_cycle=2,
        connector_cond_layers=1,
        connector_step_dim=16,
    )
    base.update(overrides)
    return Config(**base)


class ZeroDenoiser(nn.Module):
    def forward(self, noisy, t, phonemes, mask):
        return torch.zeros_like(noisy)


class ConstantDenoiser(nn.Module):
    def __init__(self, value: float):
        super().__init__()
        self.value = value

    def forward(self, noisy, t, phonemes, mask):
        return torch.full_like(noisy, self.value)


class OracleDenoiser(nn.Module):
    """Closed-form optimal noise predictor for one known clean sequence."""

    def __init__(self, s0, schedule):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros((), dtype=DT))
        self.s0 = s0
        self.bars = torch.from_numpy(schedule.alpha_bars)

    def forward(self, noisy, t, phonemes, mask):
        ab = self.bars[t].reshape(-1, *([1] * (noisy.ndim - 1)))
        # the train step may tile the batch over several noise draws
        s0 = self.s0.repeat(noisy.shape[0] // self.s0.shape[0], 1, 1)
        oracle = (noisy - torch.sqrt(ab) * s0) / torch.sqrt(1.0 - ab)
        return oracle + 0.0 * self.dummy


class TestNoiseSchedule:
    def test_alpha_bars_match_direct_products(self):
        ns = build_noise_schedule(50, 1e-4, 0.02)
        assert ns.alpha_bar(0) == 1.0
        prod = 1.0
        for t in range(1, 51):
            prod *= float(ns.alphas[t - 1])
            assert abs(ns.alpha_bar(t) - prod) < 1e-12

    def test_alpha_bars_strictly_decrease(self):
        ns = build_noise_schedule(50, 1e-4, 0.02)
        assert np.all(np.diff(ns.alpha_bars) < 0)

    def test_out_of_range_lookup_rejected(self):
        ns = build_noise_schedule(10, 1e-4, 0.02)
        with pytest.raises(IndexError):
            ns.alpha_bar(11)
        with pytest.raises(IndexError):
            ns.alpha_bar(-1)

    def test_bad_parameters_rejected(self):
        with pytest.raises(ParameterError):
            build_noise_schedule(0, 1e-4, 0.02)
        with pytest.raises(ParameterError):
            build_noise_schedule(10, 0.0, 0.02)
        with pytest.raises(ParameterError):
            build_noise_schedule(10, 0.03, 0.02)
        with pytest.raises(ParameterError):
            build_noise_schedule(10, 1e-4, 1.0)


class TestQSample:
    def test_zero_noise_is_pure_scaling(self):
        ns = build_noise_schedule(20, 1e-4, 0.05)
        s0 = torch.tensor(np.random.default_rng(0).normal(size=(2, 5, 3)), dtype=DT)
        for t in (1, 7, 20):
            out = q_sample(s0, t, torch.zeros_like(s0), ns)
            assert torch.allclose(out, math.sqrt(ns.alpha_bar(t)) * s0, atol=1e-15)

    def test_negligible_beta_limit_returns_s0(self):
        ns = build_noise_schedule(1, 1e-12, 1e-12)
        s0 = torch.tensor(np.random.default_rng(1).normal(size=(3, 4)), dtype=DT)
        eps = torch.tensor(np.random.default_rng(2).normal(size=(3, 4)), dtype=DT)
        out = q_sample(s0, 1, eps, ns)
        assert torch.allclose(out, s0, atol=1e-5)

    def test_out_of_range_step_rejected(self):
        ns = build_noise_schedule(10, 1e-4, 0.02)
        s0 = torch.zeros(2, 3, dtype=DT)
        with pytest.raises(IndexError):
            q_sample(s0, 0, torch.zeros_like(s0), ns)
        with pytest.raises(IndexError):
            q_sample(s0, 11, torch.zeros_like(s0), ns)
        with pytest.raises(IndexError):
            q_sample(s0, torch.tensor([1, 11]), torch.zeros_like(s0), ns)

    def test_shape_mismatch_rejected(self):
        ns = build_noise_schedule(10, 1e-4, 0.02)
        with pytest.raises(ShapeError):
            q_sample(torch.zeros(2, 3, dtype=DT), 1, torch.zeros(2, 4, dtype=DT), ns)

    def test_monte_carlo_moments(self):
        # sample mean -> sqrt(ab)*s0 and variance -> 1 - ab, within three
        # standard errors over 1e4 draws
        ns = build_noise_schedule(50, 1e-4, 0.02)
        n = 10_000
        v = torch.tensor([0.8, -1.3, 2.1, 0.0], dtype=DT)
        s0 = v.expand(n, 4).clone()
        gen = torch.Generator().manual_seed(42)
        for t in (1, 25, 50):
            eps = torch.randn(n, 4, generator=gen, dtype=DT)
            draws = q_sample(s0, t, eps, ns)
            ab = ns.alpha_bar(t)
            want_mean = math.sqrt(ab) * v
            want_var = 1.0 - ab
            se_mean = 3.0 * math.sqrt(want_var / n)
            got_mean = draws.mean(dim=0)
            assert torch.all((got_mean - want_mean).abs() < se_mean + 1e-12)
            got_var = draws.var(dim=0, unbiased=True)
            se_var = 3.0 * want_var * math.sqrt(2.0 / (n - 1))
            assert torch.all((got_var - want_var).abs() < se_var + 1e-12)

    def test_per_element_steps_match_scalar_calls(self):
        ns = build_noise_schedule(30, 1e-4, 0.02)
        rng = np.random.default_rng(3)
        s0 = torch.tensor(rng.normal(size=(3, 4, 2)), dtype=DT)
        eps = torch.tensor(rng.normal(size=(3, 4, 2)), dtype=DT)
        batched = q_sample(s0, torch.tensor([2, 17, 30]), eps, ns)
        for i, t in enumerate((2, 17, 30)):
            single = q_sample(s0[i : i + 1], t, eps[i : i + 1], ns)
            assert torch.allclose(batched[i], single[0], atol=1e-15)


class TestReverseSigma:
    def test_matches_printed_formula_exactly(self):
        ns = build_noise_schedule(50, 1e-4, 0.02)
        for t in range(2, 51):
            want = math.sqrt(
                (1.0 - ns.alpha_bar(t - 1)) * (1.0 - float(ns.alphas[t - 1])) / (1.0 - ns.alpha_bar(t))
            )
            assert reverse_sigma(ns, t) == want

    def test_final_step_is_deterministic(self):
        ns = build_noise_schedule(50, 1e-4, 0.02)
        assert reverse_sigma(ns, 1) == 0.0

    def test_out_of_range_rejected(self):
        ns = build_noise_schedule(10, 1e-4, 0.02)
        with pytest.raises(IndexError):
            reverse_sigma(ns, 0)
        with pytest.raises(IndexError):
            reverse_sigma(ns, 11)


class TestConnectorSample:
    def test_zero_denoiser_zero_start_propagates_zero(self):
        ns = build_noise_schedule(10, 1e-4, 0.02)
        cond = torch.tensor(np.random.default_rng(0).normal(size=(2, 6, 4)), dtype=DT)
        mask = torch.ones(2, 6, dtype=torch.bool)
        zeros = torch.zeros_like(cond)
        injections = torch.zeros(9, 2, 6, 4, dtype=DT)
        out = connector_sample(ZeroDenoiser(), cond, mask, ns, initial=zeros, noise=injections)
        assert torch.all(out == 0.0)

    def test_single_step_returns_the_posterior_mean_exactly(self):
        ns = build_noise_schedule(1, 0.01, 0.01)
        cond = torch.zeros(1, 4, 3, dtype=DT)
        mask = torch.ones(1, 4, dtype=torch.bool)
        start = torch.tensor(np.random.default_rng(4).normal(size=(1, 4, 3)), dtype=DT)
        c = 0.7
        out = connector_sample(ConstantDenoiser(c), cond, mask, ns, initial=start)
        a = float(ns.alphas[0])
        ab = ns.alpha_bar(1)
        want = (start - (1.0 - a) / math.sqrt(1.0 - ab) * c) / math.sqrt(a)
        assert torch.allclose(out, want, atol=1e-15)

    def test_oracle_denoiser_recovers_s0(self):
        ns = build_noise_schedule(50, 1e-4, 0.02)
        rng = np.random.default_rng(5)
        s0 = torch.tensor(rng.normal(size=(1, 8, 6)), dtype=DT)
        cond = torch.zeros_like(s0)
        mask = torch.ones(1, 8, dtype=torch.bool)
        out = connector_sample(OracleDenoiser(s0, ns), cond, mask, ns, seed=11)
        assert float(torch.linalg.norm(out - s0)) < 1e-3

    def test_oracle_recovery_is_noise_independent(self):
        # the final reverse step has a zero coefficient on the residual
        # deviation, so any start and any injected noise land on s0
        ns = build_noise_schedule(20, 1e-3, 0.05)
        s0 = torch.tensor(np.random.default_rng(6).normal(size=(2, 5, 4)), dtype=DT)
        cond = torch.zeros_like(s0)
        mask = torch.ones(2, 5, dtype=torch.bool)
        for seed in (0, 1, 2):
            out = connector_sample(OracleDenoiser(s0, ns), cond, mask, ns, seed=seed)
            assert float(torch.linalg.norm(out - s0)) < 1e-8

    def test_fixed_seed_is_bit_identical(self):
        cfg = tiny_connector_cfg()
        den = build_denoiser(cfg, seed=2)
        ns = build_noise_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
        cond = torch.tensor(np.random.default_rng(7).normal(size=(1, 8, cfg.embed_dim)), dtype=DT)
        mask = torch.ones(1, 8, dtype=torch.bool)
        a = connector_sample(den, cond, mask, ns, seed=9)
        b = connector_sample(den, cond, mask, ns, seed=9)
        c = connector_sample(den, cond, mask, ns, seed=10)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_output_matches_conditioning_shape(self):
        cfg = tiny_connector_cfg()
        den = build_denoiser(cfg, seed=2)
        ns = build_noise_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
        cond = torch.zeros(3, 12, cfg.embed_dim, dtype=DT)
        mask = torch.ones(3, 12, dtype=torch.bool)
        out = connector_sample(den, cond, mask, ns, seed=0)
        assert out.shape == cond.shape

    def test_missing_denoiser_rejected(self):
        ns = build_noise_schedule(10, 1e-4, 0.02)
        with pytest.raises(StateError):
            connector_sample(None, torch.zeros(1, 4, 2, dtype=DT), torch.ones(1, 4, dtype=torch.bool), ns)

    def test_bad_shapes_rejected(self):
        ns = build_noise_schedule(10, 1e-4, 0.02)
        den = ZeroDenoiser()
        with pytest.raises(ShapeError):
            connector_sample(den, torch.zeros(4, 2, dtype=DT), torch.ones(1, 4, dtype=torch.bool), ns)
        with pytest.raises(ShapeError):
            connector_sample(
                den,
                torch.zeros(1, 4, 2, dtype=DT),
                torch.ones(1, 4, dtype=torch.bool),
                ns,
                initial=torch.zeros(1, 5, 2, dtype=DT),
            )

    def test_sampler_restores_training_mode(self):
        cfg = tiny_connector_cfg()
        den = build_denoiser(cfg, seed=2)
        ns = build_noise_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
        cond = torch.zeros(1, 4, cfg.embed_dim, dtype=DT)
        mask = torch.ones(1, 4, dtype=torch.bool)
        den.train()
        connector_sample(den, cond, mask, ns, seed=0)
        assert den.training


class TestDenoiser:
    def test_mismatched_conditioning_rejected(self):
        cfg = tiny_connector_cfg()
        den = build_denoiser(cfg, seed=0)
        with pytest.raises(ShapeError):
            den(
                torch.zeros(1, 8, cfg.embed_dim, dtype=DT),
                torch.tensor([3]),
                torch.zeros(1, 6, cfg.embed_dim, dtype=DT),
                torch.ones(1, 6, dtype=torch.bool),
            )

    def test_conditioning_changes_the_prediction(self):
        cfg = tiny_connector_cfg()
        den = build_denoiser(cfg, seed=0).eval()
        noisy = torch.tensor(np.random.default_rng(8).normal(size=(1, 8, cfg.embed_dim)), dtype=DT)
        mask = torch.ones(1, 8, dtype=torch.bool)
        t = torch.tensor([4])
        with torch.no_grad():
            a = den(noisy, t, torch.zeros_like(noisy), mask)
            b = den(noisy, t, torch.ones_like(noisy), mask)
        assert not torch.equal(a, b)

    def test_step_index_changes_the_prediction(self):
        cfg = tiny_connector_cfg()
        den = build_denoiser(cfg, seed=0).eval()
        noisy = torch.tensor(np.random.default_rng(9).normal(size=(1, 8, cfg.embed_dim)), dtype=DT)
        cond = torch.zeros_like(noisy)
        mask = torch.ones(1, 8, dtype=torch.bool)
        with torch.no_grad():
            a = den(noisy, torch.tensor([1]), cond, mask)
            b = den(noisy, torch.tensor([9]), cond, mask)
        assert not torch.equal(a, b)


class TestConnectorTrainStep:
    def test_perfect_denoiser_has_zero_loss(self):
        ns = build_noise_schedule(25, 1e-4, 0.02)
        s0 = torch.tensor(np.random.default_rng(10).normal(size=(3, 6, 4)), dtype=DT)
        cond = torch.zeros_like(s0)
        mask = torch.ones(3, 6, dtype=torch.bool)
        oracle = OracleDenoiser(s0, ns)
        opt = torch.optim.Adam(oracle.parameters(), lr=1e-3)
        for _ in range(3):
            loss = connector_train_step(
                oracle, opt, s0, cond, mask, ns, torch.Generator().manual_seed(0)
            )
            assert loss < 1e-20

    def test_gradients_match_finite_differences(self):
        # one residual layer at full desk width, frozen corruption draw
        cfg = Config(connector_layers=1)
        den = build_denoiser(cfg, seed=3).eval()
        # knock the head off its zero init so every gradient is generically
        # nonzero instead of trivially matching at 0
        g = torch.Generator().manual_seed(4)
        with torch.no_grad():
            for p in den.parameters():
                p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
        ns = build_noise_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
        rng = np.random.default_rng(11)
        s0 = torch.tensor(rng.normal(size=(1, 8, cfg.embed_dim)), dtype=DT)
        cond = torch.tensor(rng.normal(size=(1, 8, cfg.embed_dim)), dtype=DT)
        mask = torch.ones(1, 8, dtype=torch.bool)
        t = torch.tensor([7])
        eps = torch.tensor(rng.normal(size=s0.shape), dtype=DT)
        noisy = q_sample(s0, 7, eps, ns)

        def loss_value():
            pred = den(noisy, t, cond, mask)
            return ((pred - eps) ** 2).mean()

        loss = loss_value()
        den.zero_grad()
        loss.backward()

        h = 1e-6
        got, want = [], []
        for name, param in den.named_parameters():
            # the last residual branch feeds nothing downstream, so its
            # gradient is absent; finite differences must agree it is zero
            grad = param.grad if param.grad is not None else torch.zeros_like(param)
            flat = param.data.view(-1)
            coords = rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False)
            for idx in coords:
                idx = int(idx)
                orig = float(flat[idx])
                with torch.no_grad():
                    flat[idx] = orig + h
                    up = float(loss_value())
                    flat[idx] = orig - h
                    down = float(loss_value())
                    flat[idx] = orig
                got.append(float(grad.view(-1)[idx]))
                want.append((up - down) / (2.0 * h))
        got_v, want_v = np.asarray(got), np.asarray(want)
        rel = np.linalg.norm(got_v - want_v) / max(np.linalg.norm(want_v), 1e-12)
        assert rel < 1e-3, f"relative gradient error {rel:.2e}"

    def test_overfits_four_utterances(self, trained, corpus8):
        # Fitting is judged on a trained transcoder's embeddings, the
        # regime the connector actually runs in.  The per-step loss cannot
        # approach zero here: at low step indices the corruption is tiny,
        # so recovering the noise means amplifying the (x - s0) residual by
        # 1/sqrt(1-abar) (100x at t=1), and under uniform step sampling
        # those steps stay near their unconditional floor no matter how
        # well the conditioned part fits.  The zero-init head already
        # realizes the best unconditional predictor, so a dead conditioning
        # pathway holds the ratio near 1.0; the bound asserts conditioning
        # pulls the loss well below that floor.
        cfg = trained["config"]
        model = trained["trainer"].state.model
        targets = connector_targets(model, corpus8.utterances[:4])
        cstate = new_connector_state(cfg, seed=2)
        losses = train_connector(cstate, targets, 3000)
        initial = losses[0]
        tail = float(np.mean(losses[-50:]))
        assert tail < 0.7 * initial, f"connector loss {tail:.4f} vs initial {initial:.4f}"

        # at the top step the two degenerate strategies, reading only the
        # noisy input (loss abar per element) or only the conditioning
        # (loss abar^2), are both beaten only when the denoiser combines
        # them; assert it clears the tighter of the two floors
        s0, cond, mask = targets
        den = cstate.denoiser.eval()
        ns = cstate.schedule
        g = torch.Generator().manual_seed(11)
        m = mask.to(s0.dtype)[:, :, None]
        t_hi = ns.steps
        acc = 0.0
        with torch.no_grad():
            for _ in range(8):
                tt = torch.full((s0.shape[0],), t_hi, dtype=torch.long)
                eps = torch.randn(s0.shape, generator=g, dtype=s0.dtype)
                noisy = q_sample(s0, tt, eps, ns)
                pred = den(noisy, tt, cond, mask)
                acc += float(((pred - eps) ** 2 * m).sum() / (m.sum() * s0.shape[-1]))
        hi_loss = acc / 8
        floor = ns.alpha_bar(t_hi) ** 2
        assert hi_loss < 0.85 * floor, f"t={t_hi} loss {hi_loss:.4f} vs blind floor {floor:.4f}"
