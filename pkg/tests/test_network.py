import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_mac_count, brute_force_param_count, random_genome
from zicobc.network import (
    Genome,
    GenomeError,
    IncompatibleParentsError,
    MutationConfig,
    StageGene,
    compile_genome,
    count_macs,
    count_params,
    crossover,
    genome_from_json,
    genome_to_json,
    mutate,
    validate_genome,
)
from zicobc.tensor import Tape, seeded_fill, tensor_digest


def single_stage_genome(family="resnet_like", repeats=1, channels=32, kernel=3,
                        conv_mode="regular", stride=1, resolution=8, **kw) -> Genome:
    return Genome(
        family=family,
        stages=(StageGene(repeats, channels, kernel, conv_mode, stride),),
        stem_channels=kw.get("stem_channels", 8),
        num_classes=kw.get("num_classes", 4),
        input_resolution=(resolution, resolution),
        expansion=kw.get("expansion", 4),
    )


class TestValidation:
    def test_valid_genome_passes(self):
        validate_genome(single_stage_genome())

    def test_group_mode_requires_divisible_channels(self):
        g = single_stage_genome(channels=24, conv_mode="group")
        with pytest.raises(GenomeError, match="group"):
            validate_genome(g)

    def test_resolution_stride_divisibility(self):
        g = Genome(
            family="resnet_like",
            stages=(StageGene(1, 16, 3, "regular", 2),
                    StageGene(1, 16, 3, "regular", 2)),
            stem_channels=8, num_classes=4, input_resolution=(6, 6))
        with pytest.raises(GenomeError, match="divisible"):
            validate_genome(g)

    def test_depthwise_only_for_effnet(self):
        g = single_stage_genome(conv_mode="depthwise")
        with pytest.raises(GenomeError, match="depthwise"):
            validate_genome(g)
        validate_genome(single_stage_genome(family="effnet_like", conv_mode="depthwise"))

    def test_field_errors_name_field(self):
        with pytest.raises(GenomeError, match="repeats"):
            validate_genome(single_stage_genome(repeats=0))
        with pytest.raises(GenomeError, match="kernel"):
            validate_genome(single_stage_genome(kernel=7))
        with pytest.raises(GenomeError, match="channels"):
            validate_genome(single_stage_genome(channels=12))


class TestCompile:
    def test_stride1_preserves_spatial_dims(self):
        graph = compile_genome(single_stage_genome(), seed=0)
        block_layers = [l for l in graph.layers if l.kind == "conv" and l.index > 1]
        assert block_layers
        for layer in block_layers:
            assert layer.out_shape == (32, 8, 8)

    def test_stride2_halves_spatial_dims(self):
        g = Genome(
            family="resnet_like",
            stages=(StageGene(1, 16, 3, "regular", 1),
                    StageGene(2, 16, 3, "regular", 2)),
            stem_channels=8, num_classes=4, input_resolution=(8, 8))
        graph = compile_genome(g, seed=0)
        # stem + stage1 block at 8x8; stage2 first conv output must be 4x4
        stage2_first = next(l for l in graph.layers
                            if l.kind == "conv" and l.stride == 2)
        assert stage2_first.out_shape[1:] == (4, 4)

    def test_compile_is_deterministic(self):
        g = random_genome(np.random.default_rng(0))
        d1 = tensor_digest(compile_genome(g, seed=7).parameter_tensors())
        d2 = tensor_digest(compile_genome(g, seed=7).parameter_tensors())
        assert d1 == d2
        d3 = tensor_digest(compile_genome(g, seed=8).parameter_tensors())
        assert d1 != d3

    def test_shape_inference_agrees_with_forward(self):
        rng = np.random.default_rng(21)
        for _ in range(8):
            genome = random_genome(rng)
            graph = compile_genome(genome, seed=3)
            x = seeded_fill((2, 3, *genome.input_resolution), "gaussian", 1)
            trace: dict[int, tuple[int, ...]] = {}
            out = graph.forward(Tape(), x, shape_trace=trace)
            assert out.shape == (2, genome.num_classes)
            assert len(trace) == len(graph.layers)
            for i, layer in enumerate(graph.layers):
                c, h, w = layer.out_shape
                expected = (2, c, h, w) if layer.kind == "conv" else (2, c)
                assert trace[i] == expected, f"layer {i + 1} ({layer.kind})"

    def test_depth_monotonic_in_repeats(self):
        for family, per_block in [("resnet_like", 2), ("effnet_like", 3)]:
            for repeats in (1, 2, 3):
                g1 = single_stage_genome(family=family, repeats=repeats)
                g2 = single_stage_genome(family=family, repeats=repeats + 1)
                d1 = compile_genome(g1, 0).depth
                d2 = compile_genome(g2, 0).depth
                assert d2 - d1 == per_block

    def test_effnet_expansion_changes_width(self):
        g1 = single_stage_genome(family="effnet_like", expansion=1)
        g4 = single_stage_genome(family="effnet_like", expansion=4)
        p1 = count_params(compile_genome(g1, 0))
        p4 = count_params(compile_genome(g4, 0))
        assert p4 > p1


class TestCounting:
    def test_param_count_matches_element_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            graph = compile_genome(random_genome(rng), seed=1)
            assert count_params(graph) == brute_force_param_count(graph)

    def test_mac_formula_instantiation(self):
        # 3x3 conv, 16 -> 16 channels, groups 1, 8x8 output: 8*8*16*16*9
        g = single_stage_genome(channels=16, stem_channels=16)
        graph = compile_genome(g, 0)
        block = [l for l in graph.layers if l.kind == "conv" and l.index > 1]
        for layer in block:
            assert layer.out_shape == (16, 8, 8)
        per_layer = 8 * 8 * 16 * 16 * 9
        stem = 8 * 8 * 16 * 3 * 9
        dense = 16 * 4
        assert count_macs(graph) == stem + 2 * per_layer + dense

    def test_mac_count_matches_tap_enumeration(self):
        rng = np.random.default_rng(32)
        for _ in range(6):
            genome = random_genome(rng, resolution=4, channel_choices=(8, 16))
            graph = compile_genome(genome, seed=1)
            assert count_macs(graph) == brute_force_mac_count(graph)

    def test_params_strictly_increase_with_channels(self):
        for family in ("resnet_like", "effnet_like"):
            counts = [
                count_params(compile_genome(
                    single_stage_genome(family=family, channels=c), 0))
                for c in (16, 24, 32, 40)
            ]
            assert all(a < b for a, b in zip(counts, counts[1:]))


class TestSerialization:
    def test_round_trip_is_byte_stable(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            g = random_genome(rng)
            text = genome_to_json(g)
            again = genome_to_json(genome_from_json(text))
            assert text == again
            assert genome_from_json(text) == g

    def test_malformed_json_raises(self):
        with pytest.raises(GenomeError, match="JSON"):
            genome_from_json("{nope")
        with pytest.raises(GenomeError, match="field"):
            genome_from_json(json.dumps({"family": "resnet_like"}))


class TestVariation:
    def test_zero_rates_is_identity(self):
        g = random_genome(np.random.default_rng(51))
        cfg = MutationConfig(repeats_rate=0, channels_rate=0, kernel_rate=0,
                             conv_mode_rate=0, expansion_rate=0)
        assert mutate(g, cfg, seed=1) == g

    def test_self_crossover_is_identity(self):
        rng = np.random.default_rng(52)
        for seed in range(10):
            g = random_genome(rng)
            assert crossover(g, g, seed=seed) == g

    def test_incompatible_parents(self):
        a = single_stage_genome()
        b = single_stage_genome(family="effnet_like")
        with pytest.raises(IncompatibleParentsError):
            crossover(a, b, 0)
        c = Genome(family="resnet_like",
                   stages=a.stages + a.stages,
                   stem_channels=8, num_classes=4, input_resolution=(8, 8))
        with pytest.raises(IncompatibleParentsError):
            crossover(a, c, 0)

    def test_mutation_children_always_valid(self):
        rng = np.random.default_rng(53)
        cfg = MutationConfig(repeats_rate=0.5, channels_rate=0.5, kernel_rate=0.5,
                             conv_mode_rate=0.5, expansion_rate=0.3,
                             channels_min=8, channels_max=128)
        g = random_genome(rng)
        for seed in range(2000):
            g2 = mutate(g, cfg, seed=seed)
            validate_genome(g2)  # raises on violation
            if seed % 97 == 0:
                g = g2  # walk the space a little

    @given(st.integers(min_value=0, max_value=10**9), st.integers(0, 3))
    @settings(max_examples=60, deadline=None)
    def test_mutation_validity_property(self, seed, genome_pick):
        g = random_genome(np.random.default_rng(genome_pick))
        cfg = MutationConfig(repeats_rate=0.6, channels_rate=0.6, kernel_rate=0.6,
                             conv_mode_rate=0.6, expansion_rate=0.4,
                             allow_depthwise=True)
        child = mutate(g, cfg, seed=seed)
        validate_genome(child)
        assert child.family == g.family
        assert len(child.stages) == len(g.stages)
        assert tuple(s.stride for s in child.stages) == \
            tuple(s.stride for s in g.stages)

    def test_mutation_is_deterministic(self):
        g = random_genome(np.random.default_rng(55))
        cfg = MutationConfig()
        assert mutate(g, cfg, seed=9) == mutate(g, cfg, seed=9)
