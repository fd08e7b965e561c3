"""
Training loops
Diffusion (EDM) and consistency training of the DiT, and diffusion training of the
gap bridge, with loss logs, LCL1 checkpoints, resume and divergence handling.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from .checkpoint_store import load_checkpoint, load_into_module, module_tensors, save_checkpoint
from .config import BRIDGE, C_DIT, DIT_DIFFUSION, ExperimentConfig
from .consistency import ConsistencyModel, TeacherState, consistency_loss
from .dit import DiffusionTransformer
from .edm import EDMDenoiser, diffusion_loss
from .embedding_service import GapSpace, get_gap_space, paired_embeddings
from .exceptions import CorruptionError, NumericalInstabilityError, TrainingDivergenceError
from .gap_bridge import BridgeNet
from .models import ConditioningBundle
from .numerics import ScheduledAdamW
from .settings import get_settings
from .synth_data import TRAIN, PairSampler, TrackDataset, gaussian_latents, mixture_latents

logger = logging.getLogger(__name__)

# (batch_size, seed) -> (clean batch, conditioning or None)
BatchSource = Callable[[int, int], Tuple[torch.Tensor, Optional[ConditioningBundle]]]

TOY_TASKS = ("gaussian", "mixture")


def build_model(config: ExperimentConfig, variant: str) -> nn.Module:
    """Fresh preconditioned model for a variant"""
    if variant == DIT_DIFFUSION:
        return EDMDenoiser(DiffusionTransformer(config.dit), config.edm)
    if variant == C_DIT:
        return ConsistencyModel(DiffusionTransformer(config.dit), config.edm)
    if variant == BRIDGE:
        return EDMDenoiser(BridgeNet(config.bridge), config.edm)
    raise ValueError(f"unknown model variant {variant!r}")


def checkpoint_path(out_dir: Union[str, Path], variant: str, seed: int) -> Path:
    return Path(out_dir) / f"{variant}_seed{seed}.lcl"


def state_path(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".state.lcl")


def loss_log_path(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".loss.csv")


def step_seed(seed: int, step: int, micro: int = 0) -> int:
    return int(np.random.SeedSequence([seed, step, micro]).generate_state(1)[0])


def track_pair_source(config: ExperimentConfig, space: GapSpace) -> BatchSource:
    """Target windows with context mixes and style embeddings from the training split"""
    dataset = TrackDataset(config.synth)

    def source(batch_size: int, seed: int) -> Tuple[torch.Tensor, Optional[ConditioningBundle]]:
        batch = PairSampler(dataset, TRAIN, seed, space).sample(batch_size)
        cond = ConditioningBundle(
            context=batch.context if config.dit.context_channels > 0 else None,
            style_embedding=batch.style if config.dit.style_embed_dim > 0 else None,
        )
        return batch.target, cond

    return source


def gap_pair_source(config: ExperimentConfig, space: GapSpace) -> BatchSource:
    """(audio-side target, text-side condition) pairs from the training split"""
    dataset = TrackDataset(config.synth)
    indices = dataset.split_indices(TRAIN)

    def source(batch_size: int, seed: int) -> Tuple[torch.Tensor, Optional[ConditioningBundle]]:
        rng = np.random.default_rng(seed)
        chosen = [indices[int(i)] for i in rng.integers(len(indices), size=batch_size)]
        pairs = paired_embeddings(dataset, space, chosen, rng)
        audio = torch.from_numpy(np.stack([p.audio_side for p in pairs]).astype(np.float32))
        text = torch.from_numpy(np.stack([p.text_side for p in pairs]).astype(np.float32))
        return audio, ConditioningBundle(style_embedding=text)

    return source


def toy_source(kind: str, length: int, channels: int, scale: float = 1.0) -> BatchSource:
    """Unconditional batches from an analytic latent population ("gaussian" or "mixture")"""
    if kind not in TOY_TASKS:
        raise ValueError(f"unknown toy task {kind!r}, expected one of {TOY_TASKS}")

    def source(batch_size: int, seed: int) -> Tuple[torch.Tensor, Optional[ConditioningBundle]]:
        generator = torch.Generator().manual_seed(seed)
        if kind == "gaussian":
            return gaussian_latents(generator, batch_size, length, channels, scale), None
        return mixture_latents(generator, batch_size, length, channels), None

    return source


def default_source(config: ExperimentConfig, variant: str) -> BatchSource:
    space = get_gap_space(config.gap, config.synth)
    if variant == BRIDGE:
        return gap_pair_source(config, space)
    return track_pair_source(config, space)


@dataclass
class TrainResult:
    checkpoint: Path
    losses: List[float] = field(default_factory=list)
    steps: int = 0
    resumed_from: int = 0


class Trainer:
    """Single-writer training loop for one (variant, seed)"""

    def __init__(
        self,
        config: ExperimentConfig,
        variant: str,
        seed: int,
        out_dir: Union[str, Path],
        source: Optional[BatchSource] = None,
    ):
        self.config = config
        self.variant = variant
        self.seed = seed
        self.out_dir = Path(out_dir)
        self.source = source or default_source(config, variant)
        self.checkpoint = checkpoint_path(self.out_dir, variant, seed)

        torch.manual_seed(seed)
        self.model = build_model(config, variant)
        self.optimizer = ScheduledAdamW(self.model.parameters(), config.train.schedule)
        self.teacher = TeacherState.snapshot(self.model) if variant == C_DIT else None
        self.step = 0
        self.last_saved: Optional[Path] = None

    @property
    def batch_size(self) -> int:
        train = self.config.train
        if self.variant == C_DIT:
            return train.consistency_batch_size
        if self.variant == BRIDGE:
            return train.bridge_batch_size
        return train.diffusion_batch_size

    @property
    def cond_dropout(self) -> float:
        return self.config.bridge.cond_dropout if self.variant == BRIDGE else self.config.dit.cond_dropout

    def _meta(self) -> dict:
        return self.config.artifact_meta(
            variant=self.variant,
            seed=self.seed,
            step=self.step,
            config=self.config.model_dump(mode="json"),
        )

    def save(self) -> Path:
        meta = self._meta()
        save_checkpoint(self.checkpoint, module_tensors(self.model), meta)
        save_checkpoint(state_path(self.checkpoint), self.optimizer.named_moments(self.model), meta)
        self.last_saved = self.checkpoint
        return self.checkpoint

    def resume(self) -> int:
        """Load weights, moments and step count from this trainer's checkpoint"""
        saved = load_checkpoint(self.checkpoint)
        load_into_module(self.model, saved.tensors)
        step = int(saved.meta.get("step", 0))
        moments = state_path(self.checkpoint)
        if moments.exists():
            self.optimizer.load_named_moments(self.model, load_checkpoint(moments).tensors, step)
        else:
            self.optimizer.step_count = step
        if self.teacher is not None:
            self.teacher.refresh(self.model)
        self.step = step
        self.last_saved = self.checkpoint
        logger.info(f"Resumed {self.variant} (seed {self.seed}) at step {step}")
        return step

    def _loss(self, clean: torch.Tensor, cond: Optional[ConditioningBundle], generator: torch.Generator) -> torch.Tensor:
        if cond is not None:
            cond = cond.with_dropout(self.cond_dropout, generator)
        if self.variant == C_DIT:
            return consistency_loss(
                self.model, self.teacher, clean, cond, self.step,
                self.config.consistency.schedule, generator, self.config.consistency.loss,
            )
        return diffusion_loss(self.model, clean, cond, generator)

    def train_step(self) -> float:
        """One optimizer update (with gradient accumulation); returns the mean loss"""
        accumulation = self.config.train.grad_accumulation
        self.optimizer.zero_grad(set_to_none=True)
        if self.teacher is not None:
            self.teacher.refresh(self.model)
        total = 0.0
        for micro in range(accumulation):
            seed = step_seed(self.seed, self.step, micro)
            clean, cond = self.source(self.batch_size, seed)
            generator = torch.Generator().manual_seed(seed)
            loss = self._loss(clean, cond, generator)
            (loss / accumulation).backward()
            total += float(loss.detach()) / accumulation
        if self.config.train.clip_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.train.clip_grad_norm)
        self.optimizer.step()
        self.step += 1
        return total

    def train(self, steps: Optional[int] = None, resume: bool = False) -> TrainResult:
        """
        Run until `steps` (default: the schedule's total_steps)

        Raises:
            TrainingDivergenceError: non-finite loss, gradient or activation; carries
                the step index and the last checkpoint written
        """
        total_steps = steps if steps is not None else self.config.train.schedule.total_steps
        start = self.resume() if resume and self.checkpoint.exists() else 0
        log_path = loss_log_path(self.checkpoint)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        losses: List[float] = []

        mode = 'a' if start > 0 and log_path.exists() else 'w'
        with open(log_path, mode, newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle, lineterminator="\n")
            if mode == 'w':
                handle.write(f"# config_hash: {self.config.config_hash}\n")
                writer.writerow(["step", "loss", "lr"])
            progress = tqdm(
                range(start, total_steps),
                desc=f"{self.variant} seed {self.seed}",
                disable=not get_settings().progress_bars,
            )
            for _ in progress:
                try:
                    loss = self.train_step()
                except NumericalInstabilityError as e:
                    last = str(self.last_saved) if self.last_saved else None
                    raise TrainingDivergenceError(
                        f"training diverged at step {self.step}: {e}", step=self.step, last_checkpoint=last
                    ) from e
                losses.append(loss)
                writer.writerow([self.step, f"{loss:.8g}", f"{self.optimizer.current_lr:.8g}"])
                if self.step % self.config.train.log_every == 0:
                    logger.info(f"{self.variant} step {self.step}/{total_steps} loss {loss:.5f}")
                if self.step % self.config.train.checkpoint_every == 0:
                    self.save()
        self.save()
        return TrainResult(checkpoint=self.checkpoint, losses=losses, steps=self.step, resumed_from=start)


def load_model(path: Union[str, Path]) -> Tuple[nn.Module, ExperimentConfig, dict]:
    """Rebuild a trained model from its checkpoint and metadata sidecar"""
    saved = load_checkpoint(path)
    if "config" not in saved.meta or "variant" not in saved.meta:
        raise CorruptionError(f"checkpoint {path} has no experiment metadata sidecar")
    config = ExperimentConfig.model_validate(saved.meta["config"])
    model = build_model(config, saved.meta["variant"])
    load_into_module(model, saved.tensors)
    model.eval()
    return model, config, saved.meta
