"""Shared test utilities: random genome generation and brute-force oracles."""

from __future__ import annotations

import numpy as np

from zicobc.network import Genome, LayerGraph, StageGene


def random_genome(rng: np.random.Generator, family: str | None = None,
                  max_stages: int = 2, max_repeats: int = 2,
                  channel_choices=(8, 16, 32), resolution: int = 8,
                  num_classes: int = 4) -> Genome:
    """Small random genome suitable for fast compile + score cycles."""
    family = family or str(rng.choice(["effnet_like", "resnet_like"]))
    n_stages = int(rng.integers(1, max_stages + 1))
    stages = []
    strides_left = 1 if resolution % 2 else 2  # at most one stride-2 stage
    for i in range(n_stages):
        channels = int(rng.choice(channel_choices))
        conv_mode = "regular"
        if channels % 32 == 0 and rng.random() < 0.3:
            conv_mode = "group"
        stride = 1
        if i > 0 and strides_left > 1 and rng.random() < 0.5:
            stride = 2
            strides_left = 1
        stages.append(StageGene(
            repeats=int(rng.integers(1, max_repeats + 1)),
            channels=channels,
            kernel=int(rng.choice([3, 5])),
            conv_mode=conv_mode,
            stride=stride,
        ))
    return Genome(
        family=family,
        stages=tuple(stages),
        stem_channels=int(rng.choice([8, 16])),
        num_classes=num_classes,
        input_resolution=(resolution, resolution),
        expansion=int(rng.choice([1, 2])) if family == "effnet_like" else 4,
    )


def brute_force_param_count(graph: LayerGraph) -> int:
    total = 0
    for t in graph.parameter_tensors():
        n = 1
        for extent in t.shape:
            n *= extent
        total += n
    return total


def brute_force_mac_count(graph: LayerGraph) -> int:
    """Count multiplies one output element and one kernel tap at a time."""
    total = 0
    for layer in graph.layers:
        c_out, h_out, w_out = layer.out_shape
        if layer.kind == "conv":
            taps_per_element = 0
            for _ci in range(layer.in_channels // layer.groups):
                for _kh in range(layer.kernel):
                    for _kw in range(layer.kernel):
                        taps_per_element += 1
            for _co in range(c_out):
                for _ho in range(h_out):
                    for _wo in range(w_out):
                        total += taps_per_element
        else:
            for _fo in range(c_out):
                for _fi in range(layer.in_channels):
                    total += 1
    return total
