import numpy as np
import pytest

from peftkit import rng as prng
from peftkit import tensor as T
from peftkit.errors import ConfigError, ContractError
from peftkit.nn import (ArchSpec, Linear, arch_preset, build_head, build_model,
                        forward_logits, freeze_backbone, head_param_count, toy_head)
from peftkit.peft import (DoraAdapter, DoraLinear, LoraAdapter, LoraLinear,
                          PeftConfig, RANK_ALPHA_PRESETS, attach_adapters,
                          count_trainable, dora_forward, lora_forward, merge,
                          merge_all, merged_weight, peft_accounting)
from peftkit.quantize import quantize_linear
from peftkit.tensor import GradTape, Tensor
from peftkit.train import ArrayDataset, TrainConfig, Trainer

from oracles import analytic_gradient, fd_gradient, relative_errors


def make_linear(rng, d_in, d_out, dtype=np.float64):
    w = Tensor(rng.standard_normal((d_out, d_in)).astype(dtype), requires_grad=False)
    b = Tensor(rng.standard_normal(d_out).astype(dtype), requires_grad=False)
    return Linear(w, b)


def make_init(seed=0, dtype=np.float64):
    from peftkit.nn import Initializer
    return Initializer(prng.substream("init", 2, seed=seed), dtype)


def fresh_models(seed=5, dtype=np.float64):
    arch = arch_preset("vit_toy")
    model = build_model(arch, prng.substream("init", 0, seed=seed), dtype=dtype)
    head = build_head(toy_head(arch.feature_dim, 9),
                      prng.substream("init", 1, seed=seed), dtype=dtype)
    return arch, model, head


class TestConfig:
    def test_table_presets_alpha_is_two_r(self):
        for r, alpha in RANK_ALPHA_PRESETS:
            cfg = PeftConfig("lora", "q_proj_only", r, alpha)
            assert cfg.alpha == 2 * cfg.rank
            assert cfg.bias_mode == "none"

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            PeftConfig("ia3", "q_proj_only", 8, 16.0)
        with pytest.raises(ConfigError):
            PeftConfig("lora", "value_only", 8, 16.0)
        with pytest.raises(ConfigError):
            PeftConfig("lora", "q_proj_only", 0, 16.0)
        with pytest.raises(ConfigError):
            PeftConfig("lora", "q_proj_only", 8, 16.0, bias_mode="all")


class TestAttach:
    def test_qproj_only_attaches_per_block(self):
        _, model, _ = fresh_models()
        attach_adapters(model, PeftConfig("lora", "q_proj_only", 4, 8.0),
                        prng.substream("init", 2, seed=5), dtype=np.float64)
        adapted = [l for b in model.blocks for l in b.linears.values()
                   if isinstance(l, LoraLinear)]
        assert len(adapted) == len(model.blocks)

    def test_all_linear_attaches_six_per_block(self):
        _, model, _ = fresh_models()
        attach_adapters(model, PeftConfig("lora", "all_linear", 4, 8.0),
                        prng.substream("init", 2, seed=5), dtype=np.float64)
        adapted = [l for b in model.blocks for l in b.linears.values()
                   if isinstance(l, LoraLinear)]
        assert len(adapted) == 6 * len(model.blocks)

    @pytest.mark.parametrize("method", ["lora", "dora"])
    def test_zero_init_identity_bitwise(self, method):
        _, base_model, head = fresh_models()
        x = Tensor(np.random.default_rng(0).random((2, 3, 32, 32)))
        base_logits = forward_logits(base_model, head, x).data

        _, model, head2 = fresh_models()
        attach_adapters(model, PeftConfig(method, "all_linear", 4, 8.0),
                        prng.substream("init", 2, seed=5), dtype=np.float64)
        logits = forward_logits(model, head2, x).data
        assert np.array_equal(logits, base_logits)

    def test_double_attach_rejected(self):
        _, model, _ = fresh_models()
        cfg = PeftConfig("lora", "q_proj_only", 4, 8.0)
        attach_adapters(model, cfg, prng.substream("init", 2, seed=5), dtype=np.float64)
        with pytest.raises(ContractError):
            attach_adapters(model, cfg, prng.substream("init", 2, seed=5),
                            dtype=np.float64)

    def test_base_becomes_non_trainable(self):
        _, model, _ = fresh_models()
        attach_adapters(model, PeftConfig("lora", "all_linear", 4, 8.0),
                        prng.substream("init", 2, seed=5), dtype=np.float64)
        for name, p in model.parameters().items():
            trainable = p.requires_grad
            assert trainable == ("lora_" in name or "magnitude" in name), name


class TestLoraForward:
    def test_b_zero_equals_base(self):
        rng = np.random.default_rng(1)
        base = make_linear(rng, 8, 8)
        ad = LoraAdapter(8, 8, PeftConfig("lora", "q_proj_only", 4, 8.0), make_init())
        x = Tensor(rng.standard_normal((3, 8)))
        np.testing.assert_array_equal(lora_forward(x, base, ad).data,
                                      base.forward(x).data)

    def test_alpha_r_ratio_invariance(self):
        rng = np.random.default_rng(2)
        base = make_linear(rng, 8, 8)
        ad1 = LoraAdapter(8, 8, PeftConfig("lora", "q_proj_only", 4, 8.0), make_init())
        ad2 = LoraAdapter(8, 8, PeftConfig("lora", "q_proj_only", 8, 16.0), make_init())
        # same factors, doubled (r, alpha): identical scaling alpha/r
        ad2.A = Tensor(ad1.A.data.copy(), requires_grad=True)
        ad2.B = Tensor(rng.standard_normal((8, 4)), requires_grad=True)
        ad1.B = Tensor(ad2.B.data.copy(), requires_grad=True)
        ad2.rank, ad2.alpha = 8, 16.0
        x = Tensor(rng.standard_normal((3, 8)))
        np.testing.assert_allclose(lora_forward(x, base, ad1).data,
                                   lora_forward(x, base, ad2).data, atol=1e-14)

    def test_vs_dense_reconstruction_oracle(self):
        rng = np.random.default_rng(3)
        base = make_linear(rng, 8, 8)
        ad = LoraAdapter(8, 8, PeftConfig("lora", "q_proj_only", 4, 8.0), make_init())
        ad.B = Tensor(rng.standard_normal((8, 4)) * 0.3, requires_grad=True)
        x = Tensor(rng.standard_normal((5, 8)))
        got = lora_forward(x, base, ad).data
        w_eff = base.weight.data + ad.scaling * (ad.B.data @ ad.A.data)
        want = x.data @ w_eff.T + base.bias.data
        assert np.abs(got - want).max() <= 1e-10

    def test_gradients_reach_adapters_only(self):
        rng = np.random.default_rng(4)
        base = make_linear(rng, 8, 8)
        ad = LoraAdapter(8, 8, PeftConfig("lora", "q_proj_only", 4, 8.0), make_init())
        x = Tensor(rng.standard_normal((3, 8)))
        with GradTape() as tape:
            tape.backward(T.tsum(lora_forward(x, base, ad)))
        assert ad.A.grad is not None and ad.B.grad is not None
        assert base.weight.grad is None and base.bias.grad is None


class TestDoraForward:
    def _setup(self, rng, d_in=5, d_out=6):
        base = make_linear(rng, d_in, d_out)
        ad = DoraAdapter(d_in, d_out, PeftConfig("dora", "q_proj_only", 3, 6.0),
                         make_init(), base.weight.data)
        return base, ad

    def test_init_decomposition_identity(self):
        rng = np.random.default_rng(5)
        base, ad = self._setup(rng)
        layer = DoraLinear(base, ad)
        w_eff = merged_weight(layer)
        assert np.abs(w_eff - base.weight.data).max() <= 1e-12
        x = Tensor(rng.standard_normal((4, 5)))
        np.testing.assert_array_equal(layer.forward(x).data, base.forward(x).data)

    def test_magnitude_scales_output_linearly(self):
        rng = np.random.default_rng(6)
        base, ad = self._setup(rng)
        x = Tensor(rng.standard_normal((4, 5)))
        y1 = dora_forward(x, base, ad).data - base.bias.data
        ad.magnitude = Tensor(ad.magnitude.data * 2.0, requires_grad=True)
        y2 = dora_forward(x, base, ad).data - base.bias.data
        np.testing.assert_allclose(y2, 2.0 * y1, rtol=1e-12)

    def test_vs_column_norm_oracle(self):
        rng = np.random.default_rng(7)
        base, ad = self._setup(rng)
        ad.B = Tensor(rng.standard_normal((6, 3)) * 0.4, requires_grad=True)
        ad.magnitude = Tensor(rng.uniform(0.5, 2.0, 6), requires_grad=True)
        x = Tensor(rng.standard_normal((4, 5)))
        got = dora_forward(x, base, ad).data
        v = base.weight.data + ad.scaling * (ad.B.data @ ad.A.data)
        unit = v / np.linalg.norm(v, axis=1, keepdims=True)
        w_eff = ad.magnitude.data[:, None] * unit
        want = x.data @ w_eff.T + base.bias.data
        assert np.abs(got - want).max() <= 1e-10

    def test_effective_columns_have_magnitude_norm(self):
        rng = np.random.default_rng(8)
        base, ad = self._setup(rng)
        ad.B = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        ad.magnitude = Tensor(rng.uniform(0.5, 2.0, 6), requires_grad=True)
        w_eff = merged_weight(DoraLinear(base, ad))
        norms = np.linalg.norm(w_eff, axis=1)
        assert np.abs(norms - ad.magnitude.data).max() <= 1e-9

    def test_gradients_flow_through_norm_exactly(self):
        rng = np.random.default_rng(9)
        base, ad = self._setup(rng)
        ad.B = Tensor(rng.standard_normal((6, 3)) * 0.3, requires_grad=True)
        x = Tensor(rng.standard_normal((4, 5)))
        probe = Tensor(rng.standard_normal((4, 6)))
        params = [ad.A, ad.B, ad.magnitude]

        def graph():
            return T.tsum(T.mul(dora_forward(x, base, ad), probe))

        _, grads = analytic_gradient(graph, params)
        numeric = fd_gradient(lambda: graph().item(), params, h=1e-6)
        worst = max(relative_errors(a, n).max() for a, n in zip(grads, numeric))
        assert worst <= 1e-4

    def test_quantized_base_column_norms_cached_dense(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((6, 5))
        q = quantize_linear(w, bias=Tensor(np.zeros(6)))
        ad = DoraAdapter(5, 6, PeftConfig("dora", "q_proj_only", 3, 6.0),
                         make_init(), q.dense_weight())
        layer = DoraLinear(q, ad)
        x = Tensor(rng.standard_normal((2, 5)))
        got = layer.forward(x).data
        want = x.data @ q.dense_weight().T  # init identity on the dequantized base
        assert np.abs(got - want).max() <= 1e-9


class TestMerge:
    def test_merge_at_init_is_base(self):
        rng = np.random.default_rng(11)
        base = make_linear(rng, 8, 8)
        lora = LoraLinear(base, LoraAdapter(8, 8, PeftConfig("lora", "q_proj_only", 4, 8.0),
                                            make_init()))
        merged = merge(lora)
        np.testing.assert_array_equal(merged.weight.data, base.weight.data)
        dora = DoraLinear(base, DoraAdapter(8, 8, PeftConfig("dora", "q_proj_only", 4, 8.0),
                                            make_init(), base.weight.data))
        np.testing.assert_allclose(merge(dora).weight.data, base.weight.data,
                                   atol=1e-12)

    def test_merge_twice_rejected(self):
        rng = np.random.default_rng(12)
        base = make_linear(rng, 8, 8)
        lora = LoraLinear(base, LoraAdapter(8, 8, PeftConfig("lora", "q_proj_only", 4, 8.0),
                                            make_init()))
        merged = merge(lora)
        with pytest.raises(ContractError):
            merge(merged)

    @pytest.mark.parametrize("method", ["lora", "dora"])
    def test_merge_equivalence_after_training(self, method):
        arch, model, head = fresh_models(seed=21)
        freeze_backbone(model)
        attach_adapters(model, PeftConfig(method, "all_linear", 4, 8.0),
                        prng.substream("init", 2, seed=21), dtype=np.float64)
        rng = np.random.default_rng(13)
        train = ArrayDataset(rng.random((32, 3, 32, 32)),
                             rng.integers(0, 9, 32))
        val = ArrayDataset(rng.random((8, 3, 32, 32)), rng.integers(0, 9, 8))
        # 50 optimizer steps: 8 micro-batches of 4, accum 1, over ~13 epochs
        cfg = TrainConfig(epochs=7, micro_batch=4, grad_accum_steps=1,
                          peak_lr=1e-3, patience=100, seed=21)
        trainer = Trainer(model, head, train, val, cfg)
        trainer.run()
        assert trainer.step >= 50
        x = Tensor(rng.random((4, 3, 32, 32)))
        adapted = forward_logits(model, head, x).data
        merge_all(model)
        merged = forward_logits(model, head, x).data
        denom = np.maximum(np.abs(adapted), 1e-12)
        assert (np.abs(merged - adapted) / denom).max() <= 1e-10


class TestCounting:
    def test_single_layer_closed_form(self):
        rng = np.random.default_rng(14)
        base = make_linear(rng, 3, 5)
        ad = LoraAdapter(3, 5, PeftConfig("lora", "q_proj_only", 2, 4.0), make_init())
        n = sum(p.size for p in ad.parameters().values())
        assert n == 2 * (3 + 5) == 16

    def test_gradient_partition_after_backward(self):
        arch, model, head = fresh_models(seed=22)
        freeze_backbone(model)
        attach_adapters(model, PeftConfig("dora", "all_linear", 4, 8.0),
                        prng.substream("init", 2, seed=22), dtype=np.float64)
        x = Tensor(np.random.default_rng(15).random((2, 3, 32, 32)))
        with GradTape() as tape:
            loss = T.tmean(forward_logits(model, head, x))
            tape.backward(loss)
        for name, p in {**{f"m.{k}": v for k, v in model.parameters().items()},
                        **{f"h.{k}": v for k, v in head.parameters().items()}}.items():
            is_adapter = "lora_" in name or "magnitude" in name or name.startswith("h.")
            if is_adapter:
                assert p.grad is not None, f"{name} should receive gradient"
            else:
                assert p.grad is None, f"{name} should stay frozen"

    def test_dinov3_like_accounting_vs_published_counts(self):
        arch = arch_preset("dinov3_like")
        for rank, alpha, want in ((8, 16.0, 2_621_440), (16, 32.0, 5_242_880)):
            acc = peft_accounting(arch, PeftConfig("lora", "q_proj_only", rank, alpha))
            assert acc.adapter_params == want == arch.depth * rank * (4096 + 4096)
            dora = peft_accounting(arch, PeftConfig("dora", "q_proj_only", rank, alpha))
            assert dora.magnitude_params == 40 * 4096 == 163_840
            assert dora.adapter_params + dora.magnitude_params == want + 163_840

    def test_count_trainable_live_model(self):
        arch, model, head = fresh_models(seed=23)
        freeze_backbone(model)
        attach_adapters(model, PeftConfig("lora", "q_proj_only", 4, 8.0),
                        prng.substream("init", 2, seed=23), dtype=np.float64)
        n, frac = count_trainable(model, head)
        expected = len(model.blocks) * 4 * (32 + 32) + head_param_count(head.spec)
        assert n == expected
        assert 0 < frac < 1
