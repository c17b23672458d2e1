"""Run configuration: one YAML document validated against a strict schema.

Unknown keys are rejected and every error names the line it came from.
"""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Optional

import yaml
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator

from ..data import KINDS
from ..nets import BlockWidths, ChannelAddress, GeneratorConfig, HeadSpec, RecognitionConfig
from ..trainer import TRANSFER_SCHEDULE


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _address(v: str) -> str:
    ChannelAddress.parse(v)
    return v


Address = Annotated[str, AfterValidator(_address)]


class DatasetSection(_Strict):
    kind: str
    count: Optional[int] = Field(None, gt=0)
    seed: Optional[int] = None  # defaults to the run seed
    extent: int = Field(64, ge=8)

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in KINDS:
            raise ValueError(f"unknown dataset kind {v!r}; expected one of {', '.join(KINDS)}")
        return v


class DataSection(_Strict):
    source: DatasetSection = DatasetSection(kind="source-shapes")
    target: DatasetSection = DatasetSection(kind="target-faces")
    compare: Optional[DatasetSection] = DatasetSection(kind="small-A")


class ModelSection(_Strict):
    stem: Optional[tuple[int, int, int]] = None
    blocks: Optional[tuple[tuple[int, int, int, int, int, int], ...]] = None

    def recognition(self, extent: int, classes: int) -> RecognitionConfig:
        d = RecognitionConfig(input_extent=extent)
        stem = self.stem or d.stem
        blocks = tuple(BlockWidths(*b) for b in self.blocks) if self.blocks else d.blocks
        return RecognitionConfig(extent, stem, blocks, HeadSpec(classes=classes))


class PretrainSection(_Strict):
    lr: float = Field(1e-3, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs: Optional[int] = Field(3, ge=1)
    iterations: Optional[int] = Field(None, ge=1)
    checkpoint: Optional[str] = None  # reuse an existing pretrained checkpoint

    @field_validator("checkpoint")
    @classmethod
    def _exists(cls, v, info: ValidationInfo):
        if v is None:
            return v
        base = Path((info.context or {}).get("base", "."))
        p = Path(v) if Path(v).is_absolute() else base / v
        if not p.exists():
            raise ValueError(f"checkpoint file {p} does not exist")
        return str(p.resolve())


class TransferSection(_Strict):
    lr: float = Field(1e-3, ge=0)
    batch_size: int = Field(10, ge=1)
    iterations: int = Field(3000, ge=0)
    schedule: tuple[int, ...] = TRANSFER_SCHEDULE
    compare_iterations: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _schedule(self):
        s = self.schedule
        if not s or any(b <= a for a, b in zip(s, s[1:])) or s[0] < 0:
            raise ValueError(f"schedule must be strictly increasing and non-negative, got {list(s)}")
        if s[-1] > self.iterations:
            raise ValueError(f"schedule reaches iteration {s[-1]} beyond the {self.iterations}-iteration budget")
        return self


DEFAULT_GRID = (
    "conv2/c3x3:0",
    "conv2/c3x3:1",
    "mixed4/branch1/b3x3:0",
    "mixed4/branch1/b3x3:1",
    "mixed5/branch1/b3x3:0",
    "mixed5/branch1/b3x3:1",
)
DEFAULT_PREPOST = (
    "conv1/a3x3",
    "conv2/c3x3",
    "mixed3/branch1/b3x3",
    "mixed3/branch2/c3x3",
    "mixed4/branch1/b3x3",
    "mixed4/branch2/c3x3",
    "mixed5/branch1/b3x3",
    "mixed5/branch2/c3x3",
)


class VisualizeSection(_Strict):
    steps: int = Field(256, ge=1)
    lr: float = Field(0.05, gt=0)
    jitter: int = Field(4, ge=0)
    scales: tuple[float, ...] = (0.95, 1.0, 1.05)
    transforms: bool = True
    alpha: float = 1.0
    init_std: float = Field(0.01, ge=0)
    grid: tuple[Address, ...] = DEFAULT_GRID
    prepost_layers: tuple[str, ...] = DEFAULT_PREPOST
    prepost_channels: int = Field(4, ge=1)
    redundancy_layer: str = "mixed4/branch1/b3x3"
    redundancy_channels: int = Field(8, ge=2)


class AutoencoderSection(_Strict):
    steps: int = Field(1000, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    latent_dim: int = Field(32, ge=1)
    base_extent: int = Field(4, ge=1)
    widths: tuple[int, ...] = (48, 32, 16, 8)
    encoder_widths: tuple[int, ...] = (16, 32, 48, 64)
    noise_gain: float = Field(0.1, ge=0)

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(self.latent_dim, self.base_extent, self.widths, self.encoder_widths, self.noise_gain)


class PriorSection(_Strict):
    autoencoder: AutoencoderSection = AutoencoderSection()
    addresses: tuple[Address, ...] = ("mixed5/branch0/a1x1:3", "mixed4/branch1/b3x3:5")
    lam: float = Field(0.1, ge=0)
    steps: int = Field(300, ge=1)
    lr: float = Field(0.05, gt=0)
    lambdas: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    sweep_seeds: int = Field(5, ge=1)
    repeated_seeds: tuple[int, ...] = (0, 1, 2, 3)

    @field_validator("lambdas")
    @classmethod
    def _lambdas(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("lambdas must be non-negative")
        return v

    @field_validator("repeated_seeds")
    @classmethod
    def _seeds(cls, v):
        if len(v) < 2:
            raise ValueError("repeated runs need at least two seeds")
        return v


class AblateSection(_Strict):
    address: Address = "mixed5/branch0/a1x1:3"
    k: str = "0..39"

    @field_validator("k")
    @classmethod
    def _k(cls, v):
        parse_range(v)
        return v


class AnalyzeSection(_Strict):
    min_prominence: float = Field(4.0, ge=0)
    redundancy_threshold: float = Field(0.9, ge=-1, le=1)
    max_shift: int = Field(8, ge=0)
    early_until: int = Field(150, ge=0)


class MontageSection(_Strict):
    gutter: int = Field(12, ge=0)
    ablation_columns: int = Field(8, ge=1)


class RunConfig(_Strict):
    seed: int = 0
    output: str = "vistra-run"
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    pretrain: PretrainSection = PretrainSection()
    transfer: TransferSection = TransferSection()
    visualize: VisualizeSection = VisualizeSection()
    prior: PriorSection = PriorSection()
    ablate: AblateSection = AblateSection()
    analyze: AnalyzeSection = AnalyzeSection()
    montage: MontageSection = MontageSection()

    @model_validator(mode="after")
    def _extents(self):
        if self.data.source.extent != self.data.target.extent:
            raise ValueError("source and target datasets must share one extent")
        if self.data.compare is not None and self.data.compare.extent != self.data.target.extent:
            raise ValueError("compare dataset must share the target extent")
        return self


def parse_range(text: str) -> list[int]:
    """'0..39' -> [0..39]; '3' -> [3]; '0..3,7' -> [0,1,2,3,7]."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        lo, sep, hi = part.partition("..")
        try:
            a = int(lo)
            b = int(hi) if sep else a
        except ValueError:
            raise ValueError(f"expected an integer or 'a..b' range, got {part!r}") from None
        if a < 0 or b < a:
            raise ValueError(f"bad range {part!r}")
        out.extend(range(a, b + 1))
    return out


def _line_of(node, loc) -> int | None:
    """Walk the composed YAML tree along a pydantic error location."""
    line = node.start_mark.line + 1 if node is not None else None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == str(part):
                    # unknown keys point at the key itself
                    line, node = k.start_mark.line + 1, v
                    break
            else:
                return line
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            return line
    if node is not None and not isinstance(node, (yaml.MappingNode, yaml.SequenceNode)):
        line = node.start_mark.line + 1
    return line


def parse_config(text: str, name: str = "<config>", base: Path | None = None) -> RunConfig:
    try:
        data = yaml.safe_load(text)
        tree = yaml.compose(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        line = mark.line + 1 if mark else "?"
        raise ConfigError(f"{name}:{line}: YAML syntax error: {e.problem or e.context}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}:1: top level must be a mapping")
    try:
        return RunConfig.model_validate(data, context={"base": str(base or Path("."))})
    except ValidationError as e:
        msgs = []
        for err in e.errors():
            loc = tuple(p for p in err["loc"])
            line = _line_of(tree, loc)
            where = ".".join(str(p) for p in loc) or "(top level)"
            msg = err["msg"].removeprefix("Value error, ")
            msgs.append(f"{name}:{line}: {where}: {msg}")
        raise ConfigError("\n".join(msgs)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path), path.parent)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
