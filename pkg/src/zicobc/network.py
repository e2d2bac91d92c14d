"""Architecture genomes and their compilation to runnable layer graphs.

Two block families are supported. ``resnet_like`` stages stack residual
blocks of two same-kernel convolutions with an identity (or 1x1
projection) skip. ``effnet_like`` stages stack inverted-bottleneck blocks
(1x1 expand, k x k spatial conv that may be grouped, 1x1 project) with a
skip whenever the block keeps stride 1 and channel count. Compilation
performs full shape bookkeeping so downstream scoring can read each
layer's output feature map without running the network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tape, Tensor, seeded_fill, zeros

FAMILIES = ("effnet_like", "resnet_like")
CONV_MODES = ("regular", "group", "depthwise")
KERNEL_CHOICES = (3, 5)
EXPANSION_CHOICES = (1, 2, 4, 6)
RESNET_GROUP_SIZES = (128, 64, 32)  # largest one dividing the channels wins
EFFNET_GROUP_SIZE = 32
INPUT_CHANNELS = 3
MAX_STAGES = 8
MAX_REPEATS = 12
CHANNEL_STEP = 8


class GenomeError(ValueError):
    """Genome violates a schema invariant; message names the field."""


class IncompatibleParentsError(ValueError):
    """Crossover parents differ in family or stage count."""


@dataclass(frozen=True)
class StageGene:
    repeats: int
    channels: int
    kernel: int
    conv_mode: str
    stride: int


@dataclass(frozen=True)
class Genome:
    family: str
    stages: tuple[StageGene, ...]
    stem_channels: int
    num_classes: int
    input_resolution: tuple[int, int]
    expansion: int = 4  # effnet_like bottleneck expansion; ignored by resnet_like


@dataclass(frozen=True)
class ParamLayer:
    """One parameterized layer of a compiled graph (1-based index)."""

    index: int
    kind: str  # "conv" | "dense"
    weight: Tensor
    bias: Tensor | None
    out_shape: tuple[int, int, int]  # (C, H, W); dense layers use (K, 1, 1)
    in_channels: int
    groups: int
    stride: int
    kernel: int


@dataclass
class LayerGraph:
    """Ordered parameterized layers plus the instruction list to run them."""

    layers: list[ParamLayer]
    program: list[tuple]
    input_shape: tuple[int, int, int]
    num_classes: int
    genome: Genome | None = None

    @property
    def depth(self) -> int:
        return len(self.layers)

    def forward(self, tape: Tape, x: Tensor,
                shape_trace: dict[int, tuple[int, ...]] | None = None) -> Tensor:
        """Run the compiled network on a batch, recording ops on the tape.

        When `shape_trace` is given it receives, per parameterized layer
        index, the actual activation shape that layer produced.
        """
        cur = x
        stack: list[Tensor] = []
        for ins in self.program:
            op = ins[0]
            if op == "conv":
                layer = self.layers[ins[1]]
                cur = tape.conv2d(cur, layer.weight, stride=layer.stride,
                                  padding=layer.kernel // 2, groups=layer.groups)
                if shape_trace is not None:
                    shape_trace[ins[1]] = cur.shape
            elif op == "relu":
                cur = tape.relu(cur)
            elif op == "push":
                stack.append(cur)
            elif op == "pop_add":
                cur = tape.residual_add(cur, stack.pop())
            elif op == "pop_proj_add":
                layer = self.layers[ins[1]]
                skip = tape.conv2d(stack.pop(), layer.weight,
                                   stride=layer.stride, padding=0, groups=1)
                if shape_trace is not None:
                    shape_trace[ins[1]] = skip.shape
                cur = tape.residual_add(cur, skip)
            elif op == "gap":
                cur = tape.global_avg_pool(cur)
            elif op == "dense":
                layer = self.layers[ins[1]]
                cur = tape.dense(cur, layer.weight, layer.bias)
                if shape_trace is not None:
                    shape_trace[ins[1]] = cur.shape
            else:  # pragma: no cover - compile emits only the ops above
                raise RuntimeError(f"unknown instruction {op!r}")
        return cur

    def parameter_tensors(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            if layer.bias is not None:
                out.append(layer.bias)
        return out


def resolve_group_size(family: str, channels: int, conv_mode: str, expansion: int) -> int:
    """Groups used by a stage's spatial convolution.

    resnet_like group mode picks the largest of 128/64/32 dividing the stage
    channels; effnet_like group mode always uses 32 on the expanded channels.
    Depthwise sets groups equal to the convolved channel count and is only
    defined for effnet_like.
    """
    if conv_mode == "regular":
        return 1
    if conv_mode == "depthwise":
        if family != "effnet_like":
            raise GenomeError("conv_mode: depthwise is only supported for effnet_like")
        return channels * expansion
    if family == "resnet_like":
        for g in RESNET_GROUP_SIZES:
            if channels % g == 0:
                return g
        raise GenomeError(
            f"conv_mode: group requires channels divisible by 32, got {channels}")
    if channels % EFFNET_GROUP_SIZE != 0:
        raise GenomeError(
            f"conv_mode: group requires channels divisible by 32, got {channels}")
    return EFFNET_GROUP_SIZE


def validate_genome(genome: Genome) -> None:
    if genome.family not in FAMILIES:
        raise GenomeError(f"family: unknown family {genome.family!r}")
    if not 1 <= len(genome.stages) <= MAX_STAGES:
        raise GenomeError(f"stages: need 1..{MAX_STAGES} stages, got {len(genome.stages)}")
    if genome.stem_channels < 1 or genome.stem_channels % CHANNEL_STEP != 0:
        raise GenomeError(
            f"stem_channels: must be a positive multiple of {CHANNEL_STEP}, "
            f"got {genome.stem_channels}")
    if genome.num_classes < 2:
        raise GenomeError(f"num_classes: need at least 2, got {genome.num_classes}")
    if genome.expansion not in EXPANSION_CHOICES:
        raise GenomeError(f"expansion: must be one of {EXPANSION_CHOICES}, "
                          f"got {genome.expansion}")
    h, w = genome.input_resolution
    if h < 1 or w < 1:
        raise GenomeError(f"input_resolution: extents must be positive, got {h}x{w}")
    stride_product = 1
    for i, gene in enumerate(genome.stages):
        _validate_gene(genome, i, gene)
        stride_product *= gene.stride
    if h % stride_product or w % stride_product:
        raise GenomeError(
            f"input_resolution: {h}x{w} not divisible by total stride {stride_product}")


def _validate_gene(genome: Genome, i: int, gene: StageGene) -> None:
    where = f"stages[{i}]"
    if not 1 <= gene.repeats <= MAX_REPEATS:
        raise GenomeError(f"{where}.repeats: need 1..{MAX_REPEATS}, got {gene.repeats}")
    if gene.channels < 1 or gene.channels % CHANNEL_STEP != 0:
        raise GenomeError(
            f"{where}.channels: must be a positive multiple of {CHANNEL_STEP}, "
            f"got {gene.channels}")
    if gene.kernel not in KERNEL_CHOICES:
        raise GenomeError(f"{where}.kernel: must be 3 or 5, got {gene.kernel}")
    if gene.stride not in (1, 2):
        raise GenomeError(f"{where}.stride: must be 1 or 2, got {gene.stride}")
    if gene.conv_mode not in CONV_MODES:
        raise GenomeError(f"{where}.conv_mode: unknown mode {gene.conv_mode!r}")
    try:
        resolve_group_size(genome.family, gene.channels, gene.conv_mode, genome.expansion)
    except GenomeError as exc:
        raise GenomeError(f"{where}.{exc}") from None


# -- serialization -----------------------------------------------------------

def genome_to_dict(genome: Genome) -> dict:
    return {
        "family": genome.family,
        "stages": [
            {
                "repeats": s.repeats,
                "channels": s.channels,
                "kernel": s.kernel,
                "conv_mode": s.conv_mode,
                "stride": s.stride,
            }
            for s in genome.stages
        ],
        "stem_channels": genome.stem_channels,
        "num_classes": genome.num_classes,
        "input_resolution": list(genome.input_resolution),
        "expansion": genome.expansion,
    }


def genome_to_json(genome: Genome) -> str:
    """Canonical JSON form: sorted keys, compact separators, byte-stable."""
    return json.dumps(genome_to_dict(genome), sort_keys=True, separators=(",", ":"))


def genome_from_dict(data: dict) -> Genome:
    try:
        stages = tuple(
            StageGene(
                repeats=int(s["repeats"]),
                channels=int(s["channels"]),
                kernel=int(s["kernel"]),
                conv_mode=str(s["conv_mode"]),
                stride=int(s["stride"]),
            )
            for s in data["stages"]
        )
        genome = Genome(
            family=str(data["family"]),
            stages=stages,
            stem_channels=int(data["stem_channels"]),
            num_classes=int(data["num_classes"]),
            input_resolution=(int(data["input_resolution"][0]),
                              int(data["input_resolution"][1])),
            expansion=int(data.get("expansion", 4)),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise GenomeError(f"malformed genome object: missing or bad field {exc}") from None
    validate_genome(genome)
    return genome


def genome_from_json(text: str) -> Genome:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenomeError(f"invalid genome JSON: {exc}") from None
    if not isinstance(data, dict):
        raise GenomeError("genome JSON must be an object")
    return genome_from_dict(data)


# -- compilation ---------------------------------------------------------------

def _mix(seed: int, *salts: int) -> int:
    """Derive an independent 64-bit stream seed; splitmix64-style."""
    z = seed & 0xFFFFFFFFFFFFFFFF
    for salt in salts:
        z = (z + 0x9E3779B97F4A7C15 + salt) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        z = z ^ (z >> 31)
    return z


class _GraphBuilder:
    def __init__(self, seed: int, input_shape: tuple[int, int, int], num_classes: int):
        self.seed = seed
        self.layers: list[ParamLayer] = []
        self.program: list[tuple] = []
        self.input_shape = input_shape
        self.num_classes = num_classes

    def add_conv(self, c_in: int, c_out: int, kernel: int, stride: int, groups: int,
                 h_in: int, w_in: int, emit: bool = True) -> tuple[int, int, int]:
        pad = kernel // 2
        h_out = (h_in + 2 * pad - kernel) // stride + 1
        w_out = (w_in + 2 * pad - kernel) // stride + 1
        if h_out < 1 or w_out < 1:
            raise GenomeError(
                f"input_resolution: spatial extent underflows at layer {len(self.layers) + 1}")
        fan_in = (c_in // groups) * kernel * kernel
        weight = seeded_fill((c_out, c_in // groups, kernel, kernel),
                             "kaiming_normal", _mix(self.seed, len(self.layers) + 1),
                             fan_in=fan_in)
        idx = len(self.layers)
        self.layers.append(ParamLayer(
            index=idx + 1, kind="conv", weight=weight, bias=None,
            out_shape=(c_out, h_out, w_out), in_channels=c_in,
            groups=groups, stride=stride, kernel=kernel))
        if emit:
            self.program.append(("conv", idx))
        return idx, h_out, w_out

    def add_dense(self, f_in: int, f_out: int) -> None:
        weight = seeded_fill((f_out, f_in), "kaiming_normal",
                             _mix(self.seed, len(self.layers) + 1), fan_in=f_in)
        idx = len(self.layers)
        self.layers.append(ParamLayer(
            index=idx + 1, kind="dense", weight=weight, bias=zeros((f_out,)),
            out_shape=(f_out, 1, 1), in_channels=f_in, groups=1, stride=1, kernel=1))
        self.program.append(("dense", idx))


def compile_genome(genome: Genome, seed: int) -> LayerGraph:
    """Compile a genome into a layer graph with weights and shape records.

    Deterministic: identical (genome, seed) give bit-identical weights.
    Conv weights are Kaiming-normal over fan-in; the dense head carries a
    zero bias. Padding is always kernel // 2 so spatial extents are set by
    strides alone.
    """
    validate_genome(genome)
    h, w = genome.input_resolution
    b = _GraphBuilder(seed, (INPUT_CHANNELS, h, w), genome.num_classes)

    _, h, w = b.add_conv(INPUT_CHANNELS, genome.stem_channels, 3, 1, 1, h, w)
    b.program.append(("relu",))
    c_in = genome.stem_channels

    for gene in genome.stages:
        groups = resolve_group_size(genome.family, gene.channels,
                                    gene.conv_mode, genome.expansion)
        for block in range(gene.repeats):
            stride = gene.stride if block == 0 else 1
            if genome.family == "resnet_like":
                h, w = _emit_resnet_block(b, c_in, gene, stride, groups, h, w)
            else:
                h, w = _emit_effnet_block(b, c_in, gene, stride, groups,
                                          genome.expansion, h, w)
            c_in = gene.channels

    b.program.append(("gap",))
    b.add_dense(c_in, genome.num_classes)
    return LayerGraph(layers=b.layers, program=b.program,
                      input_shape=b.input_shape, num_classes=genome.num_classes,
                      genome=genome)


def _emit_resnet_block(b: _GraphBuilder, c_in: int, gene: StageGene, stride: int,
                       groups: int, h_in: int, w_in: int) -> tuple[int, int]:
    c = gene.channels
    first_groups = groups if c_in % groups == 0 else 1
    b.program.append(("push",))
    _, h, w = b.add_conv(c_in, c, gene.kernel, stride, first_groups, h_in, w_in)
    b.program.append(("relu",))
    b.add_conv(c, c, gene.kernel, 1, groups, h, w)
    if stride == 1 and c_in == c:
        b.program.append(("pop_add",))
    else:
        proj_idx, _, _ = b.add_conv(c_in, c, 1, stride, 1, h_in, w_in, emit=False)
        b.program.append(("pop_proj_add", proj_idx))
    b.program.append(("relu",))
    return h, w


def _emit_effnet_block(b: _GraphBuilder, c_in: int, gene: StageGene, stride: int,
                       groups: int, expansion: int, h: int, w: int) -> tuple[int, int]:
    c = gene.channels
    expanded = c * expansion
    skip = stride == 1 and c_in == c
    if skip:
        b.program.append(("push",))
    _, h0, w0 = b.add_conv(c_in, expanded, 1, 1, 1, h, w)
    b.program.append(("relu",))
    _, h, w = b.add_conv(expanded, expanded, gene.kernel, stride, groups, h0, w0)
    b.program.append(("relu",))
    b.add_conv(expanded, c, 1, 1, 1, h, w)
    if skip:
        b.program.append(("pop_add",))
    return h, w


# -- accounting ----------------------------------------------------------------

def count_params(graph: LayerGraph) -> int:
    """Total element count over every parameter tensor (weights and biases)."""
    total = 0
    for layer in graph.layers:
        total += layer.weight.size
        if layer.bias is not None:
            total += layer.bias.size
    return total


def count_macs(graph: LayerGraph) -> int:
    """Multiply-accumulates for one sample: conv taps plus dense products."""
    total = 0
    for layer in graph.layers:
        c, h, w = layer.out_shape
        if layer.kind == "conv":
            total += h * w * c * (layer.in_channels // layer.groups) * layer.kernel ** 2
        else:
            total += layer.in_channels * c
    return total


# -- variation -------------------------------------------------------------------

@dataclass(frozen=True)
class MutationConfig:
    """Per-knob mutation rates and the legal ranges used for repair."""

    repeats_rate: float = 0.3
    channels_rate: float = 0.3
    kernel_rate: float = 0.2
    conv_mode_rate: float = 0.2
    expansion_rate: float = 0.0
    repeats_min: int = 1
    repeats_max: int = MAX_REPEATS
    channels_min: int = 8
    channels_max: int = 512
    channel_step: int = CHANNEL_STEP  # mutation granularity, multiple of 8
    kernel_choices: tuple[int, ...] = KERNEL_CHOICES
    conv_modes: tuple[str, ...] = ("regular", "group")
    expansion_choices: tuple[int, ...] = EXPANSION_CHOICES
    allow_depthwise: bool = False

    def modes(self) -> tuple[str, ...]:
        if self.allow_depthwise and "depthwise" not in self.conv_modes:
            return self.conv_modes + ("depthwise",)
        if not self.allow_depthwise:
            return tuple(m for m in self.conv_modes if m != "depthwise")
        return self.conv_modes


def _snap_channels(value: int, step: int, lo: int, hi: int) -> int:
    snapped = max(step, int(round(value / step)) * step)
    lo = max(step, (lo // step) * step or step)
    hi = max(lo, (hi // step) * step)
    return min(max(snapped, lo), hi)


def _repair_gene(family: str, gene: StageGene, config: MutationConfig) -> StageGene:
    step = max(config.channel_step, CHANNEL_STEP)
    if gene.conv_mode in ("group",):
        # both families need at least 32 | channels in group mode
        step = max(step, EFFNET_GROUP_SIZE)
    channels = _snap_channels(gene.channels, step, config.channels_min,
                              config.channels_max)
    mode = gene.conv_mode
    if mode == "depthwise" and family != "effnet_like":
        mode = "group"
    if mode == "group" and channels % EFFNET_GROUP_SIZE != 0:
        mode = "regular"
    repeats = min(max(gene.repeats, config.repeats_min), config.repeats_max)
    kernel = gene.kernel if gene.kernel in KERNEL_CHOICES else 3
    return StageGene(repeats=repeats, channels=channels, kernel=kernel,
                     conv_mode=mode, stride=gene.stride)


def mutate(genome: Genome, rates: MutationConfig, seed: int) -> Genome:
    """Seeded point mutation over the searched knobs of each stage.

    Strides are part of the space topology and never mutated. Children are
    repaired (channel snapping, legal group sizes) so they always satisfy
    the genome invariants.
    """
    rng = np.random.default_rng(_mix(seed, 0x6D75))
    stages = []
    expansion = genome.expansion
    if rates.expansion_rate > 0 and genome.family == "effnet_like" \
            and rng.random() < rates.expansion_rate:
        options = [e for e in rates.expansion_choices if e != expansion]
        if options:
            expansion = int(options[rng.integers(0, len(options))])
    for gene in genome.stages:
        repeats = gene.repeats
        channels = gene.channels
        kernel = gene.kernel
        mode = gene.conv_mode
        if rates.repeats_rate > 0 and rng.random() < rates.repeats_rate:
            repeats += int(rng.choice([-1, 1]))
        if rates.channels_rate > 0 and rng.random() < rates.channels_rate:
            channels += rates.channel_step * int(rng.choice([-2, -1, 1, 2]))
        if rates.kernel_rate > 0 and rng.random() < rates.kernel_rate:
            options = [k for k in rates.kernel_choices if k != kernel]
            if options:
                kernel = int(options[rng.integers(0, len(options))])
        if rates.conv_mode_rate > 0 and rng.random() < rates.conv_mode_rate:
            options = [m for m in rates.modes() if m != mode]
            if options:
                mode = str(options[rng.integers(0, len(options))])
        stages.append(_repair_gene(
            genome.family,
            StageGene(repeats, channels, kernel, mode, gene.stride),
            rates))
    child = replace(genome, stages=tuple(stages), expansion=expansion)
    validate_genome(child)
    return child


def crossover(a: Genome, b: Genome, seed: int) -> Genome:
    """Uniform per-stage crossover of the searched knobs.

    Stage strides (the space topology) always come from parent `a` so the
    child keeps a consistent stride pattern; scalar fields are inherited
    per-field from a random parent.
    """
    if a.family != b.family or len(a.stages) != len(b.stages):
        raise IncompatibleParentsError(
            f"parents differ in family or stage count: "
            f"{a.family}/{len(a.stages)} vs {b.family}/{len(b.stages)}")
    rng = np.random.default_rng(_mix(seed, 0x786F))
    stages = []
    for ga, gb in zip(a.stages, b.stages):
        pick = gb if rng.random() < 0.5 else ga
        stages.append(StageGene(repeats=pick.repeats, channels=pick.channels,
                                kernel=pick.kernel, conv_mode=pick.conv_mode,
                                stride=ga.stride))
    child = Genome(
        family=a.family,
        stages=tuple(stages),
        stem_channels=(b if rng.random() < 0.5 else a).stem_channels,
        num_classes=a.num_classes,
        input_resolution=a.input_resolution,
        expansion=(b if rng.random() < 0.5 else a).expansion,
    )
    # per-stage genes are inherited whole from one valid parent, so no
    # repair is needed; validation guards against exotic parent mixes
    validate_genome(child)
    return child
