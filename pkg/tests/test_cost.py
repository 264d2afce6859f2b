import numpy as np
import pytest

from bitnas.engine import Tensor, Tape
from bitnas.engine.ops import softmax_cross_entropy
from bitnas.supernet import (
    Architecture, BlockSpec, PrecisionCandidate, SuperNet, SuperNetSpec,
    resnet20_cifar_spec, cifar_weight_menu, sample_soft_masks,
)
from bitnas.cost import (
    CostConfig, CostReport, param_count, flop_count, block_cost_vectors,
    expected_cost, architecture_cost, cost_report, cost_weighting,
    calibrate_beta, total_loss, fixed_cost, baseline_cost,
)

from gradcheck import check_grads


def two_bit_menu():
    return (PrecisionCandidate.quantized(4, 32),
            PrecisionCandidate.quantized(8, 32),
            PrecisionCandidate.full())


def small_spec():
    return SuperNetSpec((1, 8, 8), 2, 4,
                        (BlockSpec("b0", 4, 4, 1, two_bit_menu()),
                         BlockSpec("b1", 4, 8, 2, two_bit_menu())))


class TestCounts:
    def test_conv_param_counts(self):
        assert param_count(16, 16, 3) == 2304
        assert param_count(16, 3, 3) == 432

    def test_flop_count_tiny(self):
        assert flop_count(1, 1, 3, 3, 2, 2) == 36

    def test_stride_two_quarters_flops(self):
        full = flop_count(8, 4, 3, 3, 16, 16)
        strided = flop_count(8, 4, 3, 3, 8, 8)
        assert full == 4 * strided

    def test_resnet20_conv_fc_parameter_total(self):
        # layer-by-layer hand count: 432 stem + 13824/50688/202752 in the
        # three groups + 640 fc = 268,336
        spec = resnet20_cifar_spec(cifar_weight_menu())
        assert baseline_cost(spec, "model-size") // 32 == 268_336


class TestExpectedCost:
    def test_one_hot_equals_integer_cost(self):
        spec = small_spec()
        cfg = CostConfig()
        for choices in [(0, 1), (2, 0), (1, 2)]:
            arch = Architecture(choices)
            masks = []
            for b, idx in zip(spec.blocks, choices):
                m = np.zeros(len(b.candidates))
                m[idx] = 1.0
                masks.append(Tensor(m))
            soft = float(expected_cost(spec, masks, cfg).data)
            assert soft == float(architecture_cost(spec, arch, cfg))

    def test_linear_in_masks(self):
        spec = small_spec()
        cfg = CostConfig()
        half = [Tensor(np.array([0.5, 0.5, 0.0])), Tensor(np.array([1.0, 0.0, 0.0]))]
        got = float(expected_cost(spec, half, cfg).data)
        a = architecture_cost(spec, Architecture((0, 0)), cfg)
        b = architecture_cost(spec, Architecture((1, 0)), cfg)
        assert got == 0.5 * a + 0.5 * b

    def test_monotone_in_bits(self):
        spec = small_spec()
        cfg = CostConfig()
        c4 = architecture_cost(spec, Architecture((0, 0)), cfg)
        c8 = architecture_cost(spec, Architecture((1, 0)), cfg)
        c32 = architecture_cost(spec, Architecture((2, 0)), cfg)
        assert c4 < c8 < c32

    def test_compute_objective_weights_both_bit_widths(self):
        spec = SuperNetSpec((1, 8, 8), 2, 4,
                            (BlockSpec("b0", 4, 4, 1,
                                       (PrecisionCandidate.quantized(2, 4),
                                        PrecisionCandidate.quantized(4, 2),
                                        PrecisionCandidate.full())),))
        vec = block_cost_vectors(spec, "compute")[0]
        assert vec[0] == vec[1]  # 2*4 == 4*2
        macs = (flop_count(4, 4, 3, 3, 8, 8) + flop_count(4, 4, 3, 3, 8, 8))
        assert vec[0] == macs * 8

    def test_skip_contributes_zero(self):
        menu = (PrecisionCandidate.quantized(4, 32), PrecisionCandidate.full(),
                PrecisionCandidate.skip())
        spec = SuperNetSpec((1, 8, 8), 2, 4,
                            (BlockSpec("b0", 4, 4, 1, menu),))
        for objective in ("model-size", "compute"):
            vec = block_cost_vectors(spec, objective)[0]
            assert vec[2] == 0.0
            rep = cost_report(spec, Architecture((2,)), CostConfig(objective))
            assert rep.per_block["b0"] == 0.0


class TestCompression:
    def test_all_full_precision_compresses_to_one(self):
        spec = small_spec()
        rep = cost_report(spec, Architecture((2, 2)), CostConfig())
        assert rep.compression == 1.0
        assert rep.total == rep.baseline

    def test_report_total_is_fixed_plus_blocks(self):
        spec = small_spec()
        rep = cost_report(spec, Architecture((0, 1)), CostConfig())
        assert rep.total == rep.fixed + sum(rep.per_block.values())

    def test_report_json_round_trip(self):
        spec = small_spec()
        rep = cost_report(spec, Architecture((0, 1)), CostConfig())
        assert CostReport.from_json(rep.to_json()) == rep

    def test_resnet20_most_accurate_assignment(self):
        # per-block weight bits from the highest-accuracy searched model;
        # independent accounting puts its size compression near 11.1
        spec = resnet20_cifar_spec(cifar_weight_menu())
        bit_to_idx = {1: 0, 2: 1, 3: 2, 4: 3, 8: 4}
        bits = (4, 4, 3, 3, 3, 4, 4, 3, 1)
        arch = Architecture(tuple(bit_to_idx[b] for b in bits))
        rep = cost_report(spec, arch, CostConfig("model-size"))
        assert 10.0 <= rep.compression <= 13.0
        assert abs(rep.compression - 11.1287) < 1e-3


class TestCostWeighting:
    def test_log_identity_case(self):
        c = Tensor(np.asarray(float(np.exp(3.0))))
        out = cost_weighting(c, beta=1.0, gamma=1.0)
        assert abs(float(out.data) - 3.0) < 1e-12

    def test_pinned_default_parameters(self):
        c = Tensor(np.asarray(float(np.exp(10.0))))
        out = cost_weighting(c, beta=0.1, gamma=0.9)
        assert abs(float(out.data) - 0.7943282347242816) < 1e-6

    def test_increasing_in_beta_and_gamma(self):
        c = Tensor(np.asarray(float(np.exp(4.0))))  # ln cost = 4 > 1
        base = float(cost_weighting(c, 0.1, 0.9).data)
        assert float(cost_weighting(c, 0.2, 0.9).data) > base
        assert float(cost_weighting(c, 0.1, 1.1).data) > base

    def test_cost_at_most_one_rejected(self):
        with pytest.raises(ValueError, match="exceed 1"):
            cost_weighting(Tensor(np.asarray(1.0)), 0.1, 0.9)

    def test_calibration_hits_target(self):
        beta = calibrate_beta(2.5e5, 0.9)
        out = cost_weighting(Tensor(np.asarray(2.5e5)), beta, 0.9)
        assert abs(float(out.data) - 1.0) < 1e-12

    def test_gradient_matches_fd(self):
        c = Tensor(np.asarray(3.0e4), requires_grad=True)
        check_grads(lambda t: cost_weighting(t, 0.1, 0.9), [c], h=1e-2)


class TestTotalLoss:
    def test_calibrated_weighting_recovers_ce(self):
        ce = Tensor(np.asarray(1.7))
        cost = Tensor(np.asarray(5.0e5))
        cfg = CostConfig(beta=calibrate_beta(5.0e5, 0.9))
        out = total_loss(ce, cost, cfg)
        assert abs(float(out.data) - 1.7) < 1e-12

    def test_doubling_beta_doubles_loss(self):
        ce = Tensor(np.asarray(2.0))
        cost = Tensor(np.asarray(1.0e4))
        one = float(total_loss(ce, cost, CostConfig(beta=0.1)).data)
        two = float(total_loss(ce, cost, CostConfig(beta=0.2)).data)
        assert abs(two - 2.0 * one) < 1e-12

    def test_theta_gradient_through_full_objective(self):
        # fixed Gumbel draws; quantized weights but full-precision
        # activations so the loss stays continuous in theta
        spec = small_spec()
        rng = np.random.default_rng(70)
        net = SuperNet(spec, np.random.Generator(np.random.Philox(71)),
                       dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 1, 8, 8)))
        labels = np.array([0, 1])
        cfg = CostConfig(beta=0.05, gamma=0.9)

        def build(t0, t1):
            net.choice_blocks[0].theta = t0
            net.choice_blocks[1].theta = t1
            masks = [
                sample_soft_masks(t0, 1.5, np.random.Generator(np.random.Philox(80))),
                sample_soft_masks(t1, 1.5, np.random.Generator(np.random.Philox(81))),
            ]
            logits = net(x, masks)
            ce = softmax_cross_entropy(logits, labels)
            return total_loss(ce, expected_cost(spec, masks, cfg), cfg)

        t0 = Tensor(rng.standard_normal(3) * 0.3, requires_grad=True)
        t1 = Tensor(rng.standard_normal(3) * 0.3, requires_grad=True)
        check_grads(build, [t0, t1])
