"""Model assembly: stage specifications, stock variants, ablations, and
the four-stage forward pass."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import dtm as dtm_mod
from .blocks import (MlpBlockParams, PatchEmbedParams, TransformerBlockParams,
                     mlp_block, patch_embed, transformer_block)
from .checkpoint import load_tensors, save_tensors
from .dtm import DtmParams, UniformMergeParams, dtm_forward, uniform_merge_forward
from .errors import ConfigError, StateError
from .init import ones, weight, zeros
from .tensor import Tensor, add, layer_norm, matmul, mean_axis, reshape

BLOCK_MLP = "mlp"
BLOCK_TRANSFORMER = "transformer"
MERGE_LINEAR = "linear_embed"
MERGE_DTM = "dtm"
MERGE_UNIFORM = "uniform_conv"
POS_KINDS = ("absolute", "relative", "none")
FINAL_LN_EPS = 1e-5

# Stages whose input receives the learnable absolute position table.
ABSOLUTE_POS_STAGES = (3, 4)


@dataclass(frozen=True)
class StageSpec:
    """Per-stage hyperparameters."""

    patch_size: int
    channels: int
    depth: int
    heads: int
    expansion: int
    block_kind: str
    merge_kind: str

    _FIELDS = ("patch_size", "channels", "depth", "heads", "expansion",
               "block_kind", "merge_kind")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self._FIELDS}

    @classmethod
    def from_dict(cls, data: Mapping) -> "StageSpec":
        unknown = set(data) - set(cls._FIELDS)
        if unknown:
            raise ConfigError(f"unknown stage keys: {sorted(unknown)}")
        missing = set(cls._FIELDS) - set(data)
        if missing:
            raise ConfigError(f"missing stage keys: {sorted(missing)}")
        return cls(**{k: data[k] for k in cls._FIELDS})


@dataclass(frozen=True)
class ModelConfig:
    """Whole-model assembly: four stages plus global settings."""

    stages: tuple[StageSpec, ...]
    positional_encoding: str
    num_classes: int
    resolution: int

    _FIELDS = ("stages", "positional_encoding", "num_classes", "resolution")

    def validate(self) -> list[str]:
        """Collect every invariant violation (empty list when valid)."""
        problems: list[str] = []
        if len(self.stages) != 4:
            problems.append(f"expected 4 stages, got {len(self.stages)}")
            return problems
        if self.positional_encoding not in POS_KINDS:
            problems.append(f"positional_encoding must be one of {POS_KINDS}, "
                            f"got {self.positional_encoding!r}")
        if self.num_classes < 1:
            problems.append(f"num_classes must be positive, got {self.num_classes}")
        total_patch = 1
        for spec in self.stages:
            total_patch *= spec.patch_size
        if self.resolution < total_patch or self.resolution % total_patch:
            problems.append(f"resolution {self.resolution} is not divisible by "
                            f"the total downsampling factor {total_patch}")
        for idx, spec in enumerate(self.stages, start=1):
            tag = f"stage {idx}"
            if spec.depth < 1:
                problems.append(f"{tag}: depth must be >= 1, got {spec.depth}")
            if spec.expansion < 1:
                problems.append(f"{tag}: expansion must be >= 1, got {spec.expansion}")
            if spec.block_kind not in (BLOCK_MLP, BLOCK_TRANSFORMER):
                problems.append(f"{tag}: unknown block_kind {spec.block_kind!r}")
            elif (spec.block_kind == BLOCK_MLP) != (spec.heads == 0):
                problems.append(f"{tag}: block_kind {spec.block_kind!r} is inconsistent "
                                f"with heads={spec.heads} (mlp blocks have 0 heads)")
            if spec.block_kind == BLOCK_TRANSFORMER and spec.heads > 0 \
                    and spec.channels % spec.heads:
                problems.append(f"{tag}: channels {spec.channels} not divisible "
                                f"by heads {spec.heads}")
            if idx == 1:
                if spec.patch_size != 4:
                    problems.append(f"{tag}: patch size must be 4, got {spec.patch_size}")
                if spec.merge_kind != MERGE_LINEAR:
                    problems.append(f"{tag}: merge_kind must be {MERGE_LINEAR!r}, "
                                    f"got {spec.merge_kind!r}")
            else:
                if spec.patch_size != 2:
                    problems.append(f"{tag}: patch size must be 2, got {spec.patch_size}")
                if spec.merge_kind not in (MERGE_DTM, MERGE_UNIFORM):
                    problems.append(f"{tag}: merge_kind must be {MERGE_DTM!r} or "
                                    f"{MERGE_UNIFORM!r}, got {spec.merge_kind!r}")
        return problems

    def grids(self, resolution: int | None = None) -> list[tuple[int, int]]:
        """Token grid (h, w) at the output of each stage."""
        res = self.resolution if resolution is None else resolution
        out = []
        h = w = res
        for spec in self.stages:
            h //= spec.patch_size
            w //= spec.patch_size
            out.append((h, w))
        return out

    def to_dict(self) -> dict:
        return {
            "stages": [s.to_dict() for s in self.stages],
            "positional_encoding": self.positional_encoding,
            "num_classes": self.num_classes,
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        unknown = set(data) - set(cls._FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = set(cls._FIELDS) - set(data)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        stages = data["stages"]
        if not isinstance(stages, (list, tuple)):
            raise ConfigError("'stages' must be a list of stage objects")
        return cls(
            stages=tuple(StageSpec.from_dict(s) for s in stages),
            positional_encoding=data["positional_encoding"],
            num_classes=int(data["num_classes"]),
            resolution=int(data["resolution"]),
        )

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "ModelConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


def _stages(channels, depths, heads, expansions, kinds) -> tuple[StageSpec, ...]:
    merges = [MERGE_LINEAR, MERGE_DTM, MERGE_DTM, MERGE_DTM]
    patch = [4, 2, 2, 2]
    return tuple(
        StageSpec(patch_size=patch[i], channels=channels[i], depth=depths[i],
                  heads=heads[i], expansion=expansions[i], block_kind=kinds[i],
                  merge_kind=merges[i])
        for i in range(4)
    )


_MLP2 = (BLOCK_MLP, BLOCK_MLP, BLOCK_TRANSFORMER, BLOCK_TRANSFORMER)

_PRESETS = {
    "lit-ti": ModelConfig(
        stages=_stages([64, 128, 320, 512], [3, 4, 6, 3], [0, 0, 5, 8], [8, 8, 4, 4], _MLP2),
        positional_encoding="absolute", num_classes=1000, resolution=224),
    "lit-s": ModelConfig(
        stages=_stages([96, 192, 384, 768], [2, 2, 6, 2], [0, 0, 12, 24], [4, 4, 4, 4], _MLP2),
        positional_encoding="relative", num_classes=1000, resolution=224),
    "lit-m": ModelConfig(
        stages=_stages([96, 192, 384, 768], [2, 2, 18, 2], [0, 0, 12, 24], [4, 4, 4, 4], _MLP2),
        positional_encoding="relative", num_classes=1000, resolution=224),
    "lit-b": ModelConfig(
        stages=_stages([128, 256, 512, 1024], [2, 2, 18, 2], [0, 0, 16, 32], [4, 4, 4, 4], _MLP2),
        positional_encoding="relative", num_classes=1000, resolution=224),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> ModelConfig:
    """The stock variants at 224x224 and 1000 classes."""
    try:
        return _PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None


def toy_config(num_classes: int = 10, resolution: int = 64,
               merge_kind: str = MERGE_DTM) -> ModelConfig:
    """Width-reduced stock layout for synthetic-data experiments."""
    merges = [MERGE_LINEAR, merge_kind, merge_kind, merge_kind]
    stages = tuple(
        StageSpec(patch_size=p, channels=c, depth=d, heads=n, expansion=4,
                  block_kind=k, merge_kind=m)
        for p, c, d, n, k, m in zip(
            [4, 2, 2, 2], [16, 32, 48, 64], [1, 1, 2, 1], [0, 0, 3, 4], _MLP2, merges)
    )
    return ModelConfig(stages=stages, positional_encoding="relative",
                       num_classes=num_classes, resolution=resolution)


def ablate(config: ModelConfig, remove_msa_stages: Iterable[int]) -> ModelConfig:
    """Switch the listed stages to MLP blocks (attention removed, depth kept)."""
    remove = set(remove_msa_stages)
    invalid = remove - {1, 2, 3, 4}
    if invalid:
        raise ConfigError(f"stages to ablate must be a subset of {{1, 2, 3, 4}}, got {sorted(invalid)}")
    stages = tuple(
        replace(spec, block_kind=BLOCK_MLP, heads=0) if idx in remove else spec
        for idx, spec in enumerate(config.stages, start=1)
    )
    return replace(config, stages=stages)


@dataclass
class ForwardRecord:
    """Inspection data captured during one forward pass."""

    attention: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    offsets: dict[int, np.ndarray] = field(default_factory=dict)
    stage_shapes: list[tuple[int, ...]] = field(default_factory=list)


class LitModel:
    """Four-stage hierarchical model built from a validated config.

    Parameters are named hierarchically and immutable during forward;
    the per-stage offset fields stashed for inspection
    (``last_offsets``) are the one piece of mutable inspection state and
    are not covered by the concurrent-inference guarantee.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        problems = config.validate()
        if problems:
            raise ConfigError("invalid model config:\n  " + "\n  ".join(problems))
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.last_offsets: dict[int, np.ndarray] | None = None

        rng = np.random.Generator(np.random.PCG64(seed))
        grids = config.grids()
        self.embed = PatchEmbedParams.create(rng, config.stages[0].channels, self.dtype)

        self.pos_tables: dict[int, Tensor] = {}
        if config.positional_encoding == "absolute":
            for stage in ABSOLUTE_POS_STAGES:
                h, w = grids[stage - 1]
                c = config.stages[stage - 1].channels
                self.pos_tables[stage] = weight(rng, (h * w, c), self.dtype)

        relative = config.positional_encoding == "relative"
        self.merges: dict[int, DtmParams | UniformMergeParams] = {}
        self.stages: list[list] = []
        for idx, spec in enumerate(config.stages, start=1):
            if idx > 1:
                cin = config.stages[idx - 2].channels
                if spec.merge_kind == MERGE_DTM:
                    self.merges[idx] = DtmParams.create(rng, cin, spec.channels, self.dtype)
                else:
                    self.merges[idx] = UniformMergeParams.create(rng, cin, spec.channels, self.dtype)
            blocks = []
            for _ in range(spec.depth):
                if spec.block_kind == BLOCK_MLP:
                    blocks.append(MlpBlockParams.create(rng, spec.channels, spec.expansion, self.dtype))
                else:
                    blocks.append(TransformerBlockParams.create(
                        rng, spec.channels, spec.heads, spec.expansion,
                        grid=grids[idx - 1], relative=relative, dtype=self.dtype))
            self.stages.append(blocks)

        c4 = config.stages[3].channels
        self.final_ln_g = ones(c4, self.dtype)
        self.final_ln_b = zeros(c4, self.dtype)
        self.head_w = weight(rng, (c4, config.num_classes), self.dtype)
        self.head_b = zeros(config.num_classes, self.dtype)

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = self.embed.named("patch_embed")
        for stage, table in self.pos_tables.items():
            out[f"pos.stage{stage}"] = table
        for stage in range(1, 5):
            if stage in self.merges:
                out.update(self.merges[stage].named(f"stage{stage}.merge"))
            for i, block in enumerate(self.stages[stage - 1]):
                out.update(block.named(f"stage{stage}.block{i}"))
        out["final_norm.g"] = self.final_ln_g
        out["final_norm.b"] = self.final_ln_b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def named_state(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics."""
        out = {name: t.data for name, t in self.named_params().items()}
        for stage, merge in self.merges.items():
            out.update(merge.named_state(f"stage{stage}.merge"))
        return out

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        """Load parameters (and running stats when present) by name."""
        params = self.named_params()
        missing = [n for n in params if n not in state]
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {missing[:5]}"
                              + ("..." if len(missing) > 5 else ""))
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {arr.shape} "
                                  f"does not match model shape {t.data.shape}")
            t.data = arr.copy()
        for stage, merge in self.merges.items():
            mean_key = f"stage{stage}.merge.bn.running_mean"
            if mean_key in state:
                merge.bn_state.mean = np.asarray(state[mean_key], dtype=self.dtype).copy()
                merge.bn_state.var = np.asarray(
                    state[f"stage{stage}.merge.bn.running_var"], dtype=self.dtype).copy()

    def save(self, path) -> None:
        save_tensors(path, self.named_state())

    def load(self, path) -> None:
        self.load_state(load_tensors(path))

    def seed_norm_stats(self) -> None:
        """Seed every batch-norm state with identity statistics."""
        for stage, merge in self.merges.items():
            c = self.config.stages[stage - 1].channels
            merge.bn_state.seed_identity(c, self.dtype)

    # -- forward ---------------------------------------------------------------

    def forward(self, images, mode: str = "train",
                record: ForwardRecord | None = None) -> Tensor:
        """Full four-stage pass from [N, R, R, 3] images to logits."""
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        if images.ndim != 4 or images.shape[3] != 3:
            raise ConfigError(f"expected [N, H, W, 3] images, got shape {images.shape}")
        res = self.config.resolution
        if images.shape[1] != res or images.shape[2] != res:
            raise ConfigError(f"model was built for {res}x{res} input, "
                              f"got {images.shape[1]}x{images.shape[2]}")
        n = images.shape[0]
        grids = self.config.grids()
        offsets: dict[int, np.ndarray] = {}

        tokens = patch_embed(images, self.embed)
        for stage in range(1, 5):
            spec = self.config.stages[stage - 1]
            h, w = grids[stage - 1]
            if stage > 1:
                ph, pw = grids[stage - 2]
                cprev = self.config.stages[stage - 2].channels
                spatial = reshape(tokens, (n, ph, pw, cprev))
                merge = self.merges[stage]
                if isinstance(merge, DtmParams):
                    spatial, off = dtm_forward(spatial, merge, mode)
                    offsets[stage] = off
                else:
                    spatial = uniform_merge_forward(spatial, merge, mode)
                tokens = reshape(spatial, (n, h * w, spec.channels))
            if stage in self.pos_tables:
                tokens = add(tokens, self.pos_tables[stage])
            for i, block in enumerate(self.stages[stage - 1]):
                if spec.block_kind == BLOCK_MLP:
                    tokens = mlp_block(tokens, block)
                else:
                    tokens, attn = transformer_block(tokens, block)
                    if record is not None:
                        record.attention[(stage, i)] = attn.data.copy()
            if record is not None:
                record.stage_shapes.append((n, h, w, spec.channels))

        self.last_offsets = offsets
        if record is not None:
            record.offsets = dict(offsets)

        tokens = layer_norm(tokens, self.final_ln_g, self.final_ln_b, FINAL_LN_EPS)
        pooled = mean_axis(tokens, 1)
        return add(matmul(pooled, self.head_w), self.head_b)

    def trace_offsets(self, token: tuple[int, int], batch_index: int = 0) -> np.ndarray:
        """Image-plane sampling locations of one final-stage token (see dtm)."""
        if self.last_offsets is None:
            raise StateError("trace_offsets requires a prior forward pass")
        h4, w4 = self.config.grids()[3]
        ty, tx = token
        if not (0 <= ty < h4 and 0 <= tx < w4):
            raise ConfigError(f"token {token} outside the {h4}x{w4} final-stage grid")
        return dtm_mod.trace_offsets(self.last_offsets, token, batch_index)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> LitModel:
    """Build a model with deterministic seed-keyed initialization."""
    return LitModel(config, seed=seed, dtype=dtype)
