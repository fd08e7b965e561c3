"""
Experiment configuration
One JSON file (schema_version 1, unknown keys rejected) aggregating every module
config, plus the hashes stamped into artifacts.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .consistency import ConsistencyLossSpec, ConsistencySchedule
from .dit import DiTConfig
from .edm import EDMParams
from .embedding_service import GapSpaceConfig
from .gap_bridge import BridgeConfig
from .numerics import TrainSchedule
from .synth_data import SynthConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DIT_DIFFUSION = "dit-diffusion"
C_DIT = "c-dit"
BRIDGE = "bridge"
VARIANTS = (DIT_DIFFUSION, C_DIT, BRIDGE)
CONDITIONINGS = ("style+ctx", "text-style+ctx", "ctx", "style", "text-style", "uncond")

ModelVariant = Literal["dit-diffusion", "c-dit", "bridge"]
Conditioning = Literal["style+ctx", "text-style+ctx", "ctx", "style", "text-style", "uncond"]


class TrainSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    diffusion_batch_size: int = Field(32, gt=0)
    consistency_batch_size: int = Field(16, gt=0)
    bridge_batch_size: int = Field(256, gt=0)
    grad_accumulation: int = Field(1, gt=0)
    clip_grad_norm: Optional[float] = Field(None, gt=0)
    checkpoint_every: int = Field(500, gt=0)
    log_every: int = Field(100, gt=0)


class ConsistencySettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schedule: ConsistencySchedule = Field(default_factory=ConsistencySchedule)
    loss: ConsistencyLossSpec = Field(default_factory=ConsistencyLossSpec)


class SamplingSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    diffusion_steps: int = Field(50, gt=0)
    consistency_steps: int = Field(5, gt=0)
    guidance_weight: float = Field(1.25, ge=0)
    bridge_steps: int = Field(50, gt=0)
    bridge_guidance_weight: float = Field(1.0, ge=0)


class EvaluationSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    reference_size: int = Field(1000, gt=1)
    batches: int = Field(5, gt=0)
    batch_size: int = Field(200, gt=1)
    nearest_k: int = Field(5, gt=0)


class ExperimentConfig(BaseModel):
    """Everything that determines an experiment's artifacts"""

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    model_variant: ModelVariant = DIT_DIFFUSION
    conditioning: List[Conditioning] = Field(default_factory=lambda: list(CONDITIONINGS))
    synth: SynthConfig = Field(default_factory=SynthConfig)
    gap: GapSpaceConfig = Field(default_factory=GapSpaceConfig)
    dit: DiTConfig = Field(default_factory=DiTConfig)
    edm: EDMParams = Field(default_factory=EDMParams)
    consistency: ConsistencySettings = Field(default_factory=ConsistencySettings)
    bridge: BridgeConfig = Field(default_factory=BridgeConfig)
    train: TrainSettings = Field(default_factory=TrainSettings)
    sampling: SamplingSettings = Field(default_factory=SamplingSettings)
    evaluation: EvaluationSettings = Field(default_factory=EvaluationSettings)
    seeds: List[int] = Field(default_factory=lambda: [0])
    output_dir: str = "runs/desk"

    @model_validator(mode="after")
    def _check_consistency(self) -> 'ExperimentConfig':
        if self.dit.latent_channels != self.synth.latent_channels:
            raise ValueError("dit.latent_channels must equal synth.latent_channels")
        if self.dit.context_channels not in (0, self.synth.latent_channels):
            raise ValueError("dit.context_channels must be 0 or synth.latent_channels")
        if self.dit.style_embed_dim not in (0, self.gap.embed_dim):
            raise ValueError("dit.style_embed_dim must be 0 or gap.embed_dim")
        if self.bridge.embed_dim != self.gap.embed_dim:
            raise ValueError("bridge.embed_dim must equal gap.embed_dim")
        if self.dit.max_length < self.synth.window:
            raise ValueError("dit.max_length must cover synth.window")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self

    def canonical_json(self, include_output_dir: bool = False) -> str:
        data = self.model_dump(mode="json")
        if not include_output_dir:
            data.pop("output_dir", None)
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()

    @property
    def data_hash(self) -> str:
        data = {"synth": self.synth.model_dump(mode="json"), "gap": self.gap.model_dump(mode="json")}
        return hashlib.sha256(json.dumps(data, sort_keys=True, separators=(",", ":")).encode('utf-8')).hexdigest()

    def with_steps(self, steps: int) -> 'ExperimentConfig':
        """Copy with training length (and the dependent schedules) changed"""
        warmup = min(self.train.schedule.warmup_steps, max(1, steps // 5))
        if warmup >= steps:
            warmup = max(1, steps - 1)
        schedule = self.train.schedule.model_copy(update={"total_steps": steps, "warmup_steps": warmup})
        gaps = self.consistency.schedule.model_copy(update={"total_steps": steps})
        data = self.model_dump()
        data["train"]["schedule"] = schedule.model_dump()
        data["consistency"]["schedule"] = gaps.model_dump()
        return ExperimentConfig.model_validate(data)

    def artifact_meta(self, **extra: Any) -> Dict[str, Any]:
        """Metadata block written next to every artifact"""
        meta = {
            "config_hash": self.config_hash,
            "data_hash": self.data_hash,
            "schema_version": self.schema_version,
        }
        meta.update(extra)
        return meta

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ExperimentConfig':
        return cls.model_validate_json(Path(path).read_text(encoding='utf-8'))

    def save(self, path: Union[str, Path]) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True), encoding='utf-8')
        return out

    @classmethod
    def full_scale(cls) -> 'ExperimentConfig':
        """Full-scale sizes (not runnable on a laptop; documented side by side)"""
        return cls(
            synth=SynthConfig(latent_channels=64, track_length=512, window=256, num_track_sets=20000),
            gap=GapSpaceConfig(embed_dim=512),
            dit=DiTConfig.full_scale(),
            bridge=BridgeConfig.full_scale(),
            consistency=ConsistencySettings(schedule=ConsistencySchedule(total_steps=1_000_000)),
            train=TrainSettings(
                schedule=TrainSchedule(total_steps=1_000_000, warmup_steps=1000),
                diffusion_batch_size=128,
                consistency_batch_size=16,
            ),
            evaluation=EvaluationSettings(reference_size=5000, batches=5, batch_size=1000),
        )
