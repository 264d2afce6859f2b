import math

import numpy as np
import pytest

from bitnas.engine import Tensor, Tape
from bitnas.supernet import (
    PrecisionCandidate, BlockSpec, SuperNetSpec, SuperNet, ChildNet,
    TemperatureSchedule, Architecture,
    edge_probabilities, sample_soft_masks, temperature_at, sample_architecture,
    arch_to_json, arch_from_json, build_child, validate_architecture,
    resnet20_cifar_spec, default_weight_act_menu, cifar_weight_menu, _Skip,
)

from gradcheck import check_grads


def tiny_menu(skip_ok=False):
    menu = [PrecisionCandidate.quantized(2, 32),
            PrecisionCandidate.quantized(4, 32),
            PrecisionCandidate.full()]
    if skip_ok:
        menu.append(PrecisionCandidate.skip())
    return tuple(menu)


def tiny_spec(skip_ok=False):
    return SuperNetSpec(
        input_shape=(1, 6, 6), num_classes=3, stem_channels=4,
        blocks=(
            BlockSpec("b0", 4, 4, 1, tiny_menu(skip_ok)),
            BlockSpec("b1", 4, 8, 2, tiny_menu()),
        ))


def rng_for(seed):
    return np.random.Generator(np.random.Philox(seed))


class TestCandidates:
    def test_invalid_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            PrecisionCandidate("binary")

    def test_invalid_bits_rejected(self):
        with pytest.raises(ValueError, match="bits"):
            PrecisionCandidate.quantized(5, 4)

    def test_skip_carries_no_bits(self):
        with pytest.raises(ValueError):
            PrecisionCandidate("skip", w_bits=4)

    def test_json_round_trip(self):
        for c in default_weight_act_menu(skip_ok=True):
            assert PrecisionCandidate.from_json(c.to_json()) == c

    def test_effective_bits(self):
        assert PrecisionCandidate.quantized(3, 3).effective_bits() == (3, 3)
        assert PrecisionCandidate.full().effective_bits() == (32, 32)
        assert PrecisionCandidate.skip().effective_bits() == (0, 0)


class TestSpecs:
    def test_skip_illegal_when_shapes_differ(self):
        with pytest.raises(ValueError, match="skip"):
            BlockSpec("bad", 4, 8, 2, tiny_menu(skip_ok=True))

    def test_channel_chain_validated(self):
        with pytest.raises(ValueError, match="channels"):
            SuperNetSpec((1, 6, 6), 2, 4,
                         (BlockSpec("b0", 8, 8, 1, tiny_menu()),))

    def test_resnet20_shape(self):
        spec = resnet20_cifar_spec(cifar_weight_menu())
        assert len(spec.blocks) == 9
        assert [b.stride for b in spec.blocks] == [1, 1, 1, 2, 1, 1, 2, 1, 1]
        assert [b.out_channels for b in spec.blocks] == [16, 16, 16, 32, 32, 32, 64, 64, 64]
        sizes = spec.block_input_sizes()
        assert sizes[0] == (32, 32) and sizes[3] == (32, 32)
        assert sizes[4] == (16, 16) and sizes[7] == (8, 8)


class TestEdgeProbabilities:
    def test_uniform(self):
        p = edge_probabilities(np.zeros(7))
        np.testing.assert_allclose(p, np.full(7, 1.0 / 7.0))

    def test_shift_invariance(self):
        rng = np.random.default_rng(60)
        th = rng.standard_normal(5)
        np.testing.assert_allclose(edge_probabilities(th),
                                   edge_probabilities(th + 123.456), atol=1e-12)

    def test_two_way_logistic(self):
        p = edge_probabilities(np.array([1.0, 0.0]))
        np.testing.assert_allclose(p, [0.7310585786300049, 0.2689414213699951],
                                   atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            edge_probabilities(np.array([0.0, np.inf]))


class TestTemperature:
    def test_cifar_default_start(self):
        sched = TemperatureSchedule(5.0, 0.025)
        assert temperature_at(sched, 0) == 5.0

    def test_zero_eta_constant(self):
        sched = TemperatureSchedule(2.0, 0.0)
        assert temperature_at(sched, 500) == 2.0

    def test_pinned_value_epoch_90(self):
        sched = TemperatureSchedule(5.0, 0.025)
        assert abs(temperature_at(sched, 90) - 0.5269961228093217) < 1e-9

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ValueError):
            TemperatureSchedule(0.0, 0.025)


class TestSampleSoftMasks:
    def test_masks_normalized(self):
        th = Tensor(np.array([0.5, -1.0, 2.0]))
        for seed in range(20):
            m = sample_soft_masks(th, 1.0, rng_for(seed))
            assert abs(float(m.data.sum()) - 1.0) < 1e-6
            assert (m.data > 0).all() and (m.data < 1).all()

    def test_low_temperature_is_one_hot(self):
        th = np.array([0.3, 0.1, -0.2])
        g = rng_for(99).random(3)
        g = -np.log(-np.log(g))
        m = sample_soft_masks(Tensor(th), 1e-4, rng_for(99)).data
        hot = np.argmax(th + g)
        want = np.zeros(3)
        want[hot] = 1.0
        assert np.abs(m - want).max() < 1e-3

    def test_high_temperature_is_uniform(self):
        m = sample_soft_masks(Tensor(np.array([3.0, -1.0, 0.5])), 1e6, rng_for(5)).data
        assert np.abs(m - 1.0 / 3.0).max() < 1e-3

    def test_per_example_shape(self):
        m = sample_soft_masks(Tensor(np.zeros(4)), 1.0, rng_for(1), n=6)
        assert m.shape == (6, 4)
        np.testing.assert_allclose(m.data.sum(axis=1), 1.0, atol=1e-6)

    def test_argmax_frequencies_match_uniform_categorical(self):
        masks = sample_soft_masks(Tensor(np.zeros(3)), 0.01, rng_for(123),
                                  n=100_000).data
        freq = np.bincount(masks.argmax(axis=1), minlength=3) / 100_000.0
        assert (freq >= 0.323).all() and (freq <= 0.343).all()

    def test_theta_gradient_matches_fd(self):
        rng = np.random.default_rng(61)
        th = Tensor(rng.standard_normal(4), requires_grad=True)
        r = Tensor(rng.standard_normal(4))

        def build(t):
            # fresh generator per call so the draw is fixed across FD evals
            return (sample_soft_masks(t, 0.7, rng_for(77)) * r).sum()

        check_grads(build, [th])


class TestSampleArchitecture:
    def test_degenerate_theta(self):
        spec = tiny_spec()
        thetas = [np.array([1e6, 0.0, 0.0]), np.array([0.0, 0.0, 1e6])]
        rng = rng_for(3)
        for _ in range(1000):
            arch = sample_architecture(spec, thetas, rng)
            assert arch.choices == (0, 2)

    def test_uniform_two_way_frequency(self):
        spec = SuperNetSpec((1, 6, 6), 2, 4,
                            (BlockSpec("b0", 4, 4, 1,
                                       (PrecisionCandidate.quantized(2, 32),
                                        PrecisionCandidate.full())),))
        rng = rng_for(17)
        thetas = [np.zeros(2)]
        counts = np.zeros(2)
        for _ in range(100_000):
            counts[sample_architecture(spec, thetas, rng).choices[0]] += 1
        freq = counts / 100_000.0
        assert (freq >= 0.494).all() and (freq <= 0.506).all()

    def test_fixed_seed_reproducible(self):
        spec = tiny_spec()
        thetas = [np.array([0.1, 0.2, 0.3]), np.array([-0.5, 0.0, 0.5])]
        a1 = sample_architecture(spec, thetas, rng_for(8))
        a2 = sample_architecture(spec, thetas, rng_for(8))
        assert a1.choices == a2.choices


class TestArchitectureJson:
    def test_round_trip(self):
        spec = tiny_spec(skip_ok=True)
        rng = rng_for(2)
        for _ in range(10):
            arch = sample_architecture(spec, [np.zeros(4), np.zeros(3)], rng,
                                       meta={"epoch": 3, "seed": 42})
            obj = arch_to_json(spec, arch)
            back = arch_from_json(spec, obj)
            assert back.choices == arch.choices
            assert back.meta == {"epoch": 3, "seed": 42}

    def test_unknown_candidate_rejected(self):
        spec = tiny_spec()
        obj = arch_to_json(spec, Architecture((0, 0)))
        obj["blocks"][0]["choice"] = {"kind": "quantized", "w_bits": 8, "a_bits": 8}
        with pytest.raises(ValueError, match="menu"):
            arch_from_json(spec, obj)

    def test_block_id_mismatch_rejected(self):
        spec = tiny_spec()
        obj = arch_to_json(spec, Architecture((0, 0)))
        obj["blocks"][0]["id"] = "zzz"
        with pytest.raises(ValueError, match="mismatch"):
            arch_from_json(spec, obj)

    def test_wrong_choice_count_rejected(self):
        with pytest.raises(ValueError, match="choices"):
            validate_architecture(tiny_spec(), Architecture((0,)))


class TestModuleSystem:
    def test_named_parameters_nested(self):
        net = SuperNet(tiny_spec(), rng_for(4))
        names = dict(net.named_parameters())
        assert "stem_conv.weight" in names
        assert "choice_blocks.0.theta" in names
        assert "choice_blocks.1.candidates.0.conv1.weight" in names
        assert "fc.bias" in names

    def test_theta_excluded_from_weight_parameters(self):
        net = SuperNet(tiny_spec(), rng_for(4))
        weights = {id(p) for p in net.weight_parameters()}
        for t in net.thetas():
            assert id(t) not in weights

    def test_alpha_registered_when_quantized_activations(self):
        spec = SuperNetSpec((1, 6, 6), 2, 4,
                            (BlockSpec("b0", 4, 4, 1,
                                       (PrecisionCandidate.quantized(2, 4),
                                        PrecisionCandidate.full())),))
        net = SuperNet(spec, rng_for(4))
        names = dict(net.named_parameters())
        assert "choice_blocks.0.candidates.0.act1.alpha" in names
        assert "choice_blocks.0.candidates.1.act1.alpha" not in names

    def test_state_dict_round_trip(self):
        net = SuperNet(tiny_spec(), rng_for(5))
        state = {k: v.copy() for k, v in net.state_dict().items()}
        other = SuperNet(tiny_spec(), rng_for(6))
        other.load_state_dict(state)
        for k, v in other.state_dict().items():
            np.testing.assert_array_equal(v, state[k])

    def test_load_rejects_unknown_and_missing(self):
        net = SuperNet(tiny_spec(), rng_for(5))
        state = net.state_dict()
        with pytest.raises(KeyError, match="unexpected"):
            net.load_state_dict({**state, "bogus": np.zeros(1)})
        state.pop("fc.bias")
        with pytest.raises(KeyError, match="missing"):
            net.load_state_dict(state)

    def test_eval_mode_propagates(self):
        net = SuperNet(tiny_spec(), rng_for(5)).eval()
        assert not net.choice_blocks[0].candidates[0].bn1.training
        net.train()
        assert net.choice_blocks[1].candidates[2].bn2.training


class TestChildEquivalence:
    def test_hard_mask_forward_matches_child(self):
        spec = tiny_spec(skip_ok=True)
        rng = rng_for(7)
        net = SuperNet(spec, rng).eval()
        x = Tensor(rng.standard_normal((2, 1, 6, 6)).astype(np.float32))
        for seed in range(5):
            arch = sample_architecture(spec, [np.zeros(4), np.zeros(3)], rng_for(seed))
            child = build_child(spec, arch, rng_for(100 + seed), copy_from=net).eval()
            got_super = net(x, net.one_hot_masks(arch)).data
            got_child = child(x).data
            assert np.abs(got_super - got_child).max() <= 1e-6

    def test_skip_block_is_identity(self):
        spec = tiny_spec(skip_ok=True)
        skip_idx = spec.blocks[0].candidates.index(PrecisionCandidate.skip())
        arch = Architecture((skip_idx, 0))
        child = ChildNet(spec, arch, rng_for(9))
        assert isinstance(child.blocks[0], _Skip)
        x = Tensor(np.ones((1, 4, 6, 6)))
        assert child.blocks[0](x) is x

    def test_full_precision_child_has_no_quantizers(self):
        spec = tiny_spec()
        full_idx = spec.blocks[0].candidates.index(PrecisionCandidate.full())
        arch = Architecture((full_idx, 2))
        child = ChildNet(spec, arch, rng_for(10))
        names = dict(child.named_parameters())
        assert not any("alpha" in n for n in names)
        assert all(b.conv1.w_bits == 32 for b in child.blocks)

    def test_out_of_range_choice_rejected(self):
        spec = tiny_spec(skip_ok=True)
        bad = Architecture((0, 3))
        with pytest.raises(ValueError, match="out of range"):
            build_child(spec, bad, rng_for(11))
