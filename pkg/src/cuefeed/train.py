"""Training loop: toy denoiser, conditioning encoder, phased runs.

Every training step draws a per-sample timestep from the piecewise
sampler, noises the clean image, predicts the noise once for the whole
batch, and evaluates feedback losses on the decoded reconstruction for
exactly the terms whose gate is open and whose weight is nonzero. With
all feedback weights at zero the step touches the same RNG streams and
builds the same autograd graph as a plain denoising step, so the two
runs stay bitwise identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig, PhaseConfig, config_hash
from .core import NoiseSchedule, add_noise, build_schedule, decode, reconstruct_x0_latent
from .data import (
    PreprocessSpec,
    TrainingSample,
    load_manifest,
    preprocess,
    training_sample_from_scene,
)
from .detectors import (
    HoiVocabulary,
    ToyFaceEmbedder,
    ToyGazeDetector,
    ToyHoiDetector,
    ToyPoseDetector,
    ToyTextEmbedder,
)
from .errors import ConfigError
from .geometry import crop_bounds
from .losses import (
    LossBreakdown,
    boundary_loss,
    combined_loss,
    gaze_loss,
    id_loss,
    interaction_loss,
    pose_loss,
    reg_loss,
    unit_normalize,
)
from .policy import FeedbackPolicy, SamplerSpec, sample_timestep
from .scenes import scene_bank

CHECKPOINT_VERSION = 1
_DATASET_SALT = 9107  # keeps manifest-preprocess RNG independent of step RNG


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional features of the integer timestep."""
    if dim < 2 or dim % 2:
        raise ValueError("embedding dim must be even and >= 2")
    half = dim // 2
    scale = -math.log(10000.0) / max(half - 1, 1)
    freqs = torch.exp(torch.arange(half, dtype=torch.float32) * scale)
    angles = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ToyDenoiser(nn.Module):
    """Small conv net predicting the noise residual.

    One downsample keeps it fast on CPU; the timestep enters as a
    channel bias after the downsample, the conditioning vector both as a
    spatial map (so feedback can steer layout) and as a channel bias.
    The output conv starts at zero, making the initial prediction the
    zero residual.
    """

    def __init__(self, hidden: int = 20, cond_dim: int = 32, time_dim: int = 32):
        super().__init__()
        h = hidden
        self.time_dim = time_dim
        self.cond_grid = 8
        self.stem = nn.Conv2d(3, h, 3, padding=1)
        self.down = nn.Conv2d(h, 2 * h, 4, stride=2, padding=1)
        self.mid1 = nn.Conv2d(2 * h, 2 * h, 3, padding=1)
        self.mid2 = nn.Conv2d(2 * h, 2 * h, 3, padding=1)
        self.up = nn.ConvTranspose2d(2 * h, h, 4, stride=2, padding=1)
        self.out = nn.Conv2d(h, 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.t_mlp = nn.Sequential(nn.Linear(time_dim, 2 * h), nn.SiLU(), nn.Linear(2 * h, 2 * h))
        self.cond_mlp = nn.Sequential(nn.Linear(cond_dim, 2 * h), nn.SiLU(), nn.Linear(2 * h, 2 * h))
        self.cond_spatial = nn.Linear(cond_dim, 2 * h * self.cond_grid * self.cond_grid)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if z_t.ndim != 4:
            raise ValueError(f"expected (B, 3, H, W), got {tuple(z_t.shape)}")
        if z_t.shape[-1] % 2 or z_t.shape[-2] % 2:
            raise ValueError("spatial size must be even")
        b = z_t.shape[0]
        emb = sinusoidal_time_embedding(t, self.time_dim)
        h1 = F.silu(self.stem(z_t))
        h2 = F.silu(self.down(h1))
        h2 = h2 + self.t_mlp(emb)[:, :, None, None]
        sp = self.cond_spatial(cond).reshape(b, -1, self.cond_grid, self.cond_grid)
        sp = F.interpolate(sp, size=h2.shape[-2:], mode="bilinear", align_corners=False)
        h2 = F.silu(self.mid1(h2 + sp))
        h2 = h2 + self.cond_mlp(cond)[:, :, None, None]
        h2 = F.silu(self.mid2(h2))
        h3 = F.silu(self.up(h2))
        return self.out(h3)


class ConditioningEncoder(nn.Module):
    """Folds the query text and per-subject appearance into one vector.

    The text embedder is frozen; only the two-layer aligner that maps
    (name embedding, pooled crop features) to the conditioning space
    trains, and it trains at its own much lower learning rate. Returns
    the query embedding c_q and the unit-normalized mean c_bar of the
    per-subject aligned vectors; the regularizer pulls c_bar toward c_q.
    """

    def __init__(self, cond_dim: int = 32, feature_grid: int = 4, text_seed: int = 0):
        super().__init__()
        self.text = ToyTextEmbedder(dim=cond_dim, seed=text_seed)
        self.feature_grid = feature_grid
        feat_dim = 3 * feature_grid * feature_grid
        self.aligner = nn.Sequential(
            nn.Linear(cond_dim + feat_dim, 64),
            nn.SiLU(),
            nn.Linear(64, cond_dim),
        )

    def _crop_features(self, image: torch.Tensor, box) -> torch.Tensor:
        h, w = image.shape[-2:]
        y0, y1, x0, x1 = crop_bounds(box, h, w)
        crop = image[:, y0:y1, x0:x1]
        return F.adaptive_avg_pool2d(crop.unsqueeze(0), self.feature_grid).reshape(-1)

    def encode(self, sample: TrainingSample) -> tuple[torch.Tensor, torch.Tensor]:
        c_q = self.text.embed_text(sample.query)
        if sample.subjects:
            pairs = [(s.name, s.box) for s in sample.subjects]
        else:
            pairs = [(sample.query, (0.0, 0.0, 1.0, 1.0))]
        aligned = []
        for name, box in pairs:
            t_emb = self.text.embed_text(name)
            feats = self._crop_features(sample.image, box)
            aligned.append(unit_normalize(self.aligner(torch.cat([t_emb, feats]))))
        c_bar = unit_normalize(torch.stack(aligned).mean(dim=0))
        return c_q, c_bar


@dataclass
class DetectorBundle:
    face_embedder: ToyFaceEmbedder
    gaze: ToyGazeDetector
    pose: ToyPoseDetector
    hoi: ToyHoiDetector


def default_detector_bundle(config: RunConfig, vocab: HoiVocabulary) -> DetectorBundle:
    d = config.detectors
    return DetectorBundle(
        face_embedder=ToyFaceEmbedder(),
        gaze=ToyGazeDetector(temperature=d.gaze_temperature),
        pose=ToyPoseDetector(temperature=d.pose_temperature),
        hoi=ToyHoiDetector(
            vocab, seed=d.hoi_seed, variance_gate=d.hoi_variance_gate, top_k=d.hoi_top_k
        ),
    )


def build_phase_dataset(
    phase: PhaseConfig, config: RunConfig, vocab: HoiVocabulary
) -> list[TrainingSample]:
    src = phase.source
    if src.kind == "synthetic":
        scenes = scene_bank(src.count, seed=src.seed, size=src.size)
        return [training_sample_from_scene(img, ann, vocab) for img, ann in scenes]
    if src.kind == "manifest":
        if not src.path:
            raise ConfigError(f"phase {phase.name!r}: manifest source needs a path")
        records = load_manifest(src.path)
        if src.count:
            records = records[: src.count]
        spec = PreprocessSpec(target_side=config.preprocess.target_side, crop=src.crop)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _DATASET_SALT, src.seed]))
        root = Path(src.path).parent
        samples = []
        for record in records:
            sample, _, _ = preprocess(record, spec, rng, root=root, vocab=vocab)
            samples.append(sample)
        return samples
    raise ConfigError(f"phase {phase.name!r}: unknown source kind {src.kind!r}")


@dataclass
class StepResult:
    step: int
    phase: str
    timesteps: list
    total: float
    terms: dict
    skips: dict

    def to_record(self) -> dict:
        rec = {"step": self.step, "phase": self.phase, "t": self.timesteps, "total": self.total}
        rec.update(self.terms)
        rec["skips"] = self.skips
        return rec


class Trainer:
    """Owns the model, detectors, RNG streams, and the phase schedule.

    Four independent RNG streams hang off the run seed: model init,
    noise draws, timestep sampling, and batch order. Checkpoints capture
    every stream, so a restored trainer continues bitwise identically to
    one that never stopped.
    """

    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        self.config_hash = config_hash(config)
        self.vocab = HoiVocabulary(tuple((v, o) for v, o in config.hoi_classes))
        self.schedule: NoiseSchedule = build_schedule(
            config.schedule.num_steps, config.schedule.beta_start, config.schedule.beta_end
        )
        self.policy: FeedbackPolicy = config.feedback_policy()
        self.sampler: SamplerSpec = config.sampler_spec()
        self.detectors = default_detector_bundle(config, self.vocab)

        seeds = np.random.SeedSequence(config.seed).spawn(4)
        torch.manual_seed(int(seeds[0].generate_state(1)[0]))
        m = config.model
        self.denoiser = ToyDenoiser(hidden=m.hidden, cond_dim=m.cond_dim, time_dim=m.time_dim)
        self.cond_encoder = ConditioningEncoder(cond_dim=m.cond_dim, feature_grid=m.feature_grid)
        self.noise_gen = torch.Generator()
        self.noise_gen.manual_seed(int(seeds[1].generate_state(1)[0]))
        self.t_rng = np.random.default_rng(seeds[2])
        self.data_rng = np.random.default_rng(seeds[3])

        self.optimizer = torch.optim.Adam(
            [
                {"params": self.denoiser.parameters(), "lr": config.optim.lr_body},
                {"params": self.cond_encoder.parameters(), "lr": config.optim.lr_aligner},
            ]
        )
        self._params = list(self.denoiser.parameters()) + list(self.cond_encoder.parameters())
        self.global_step = 0
        self.phases_done = 0

    # -- single step ------------------------------------------------------

    def _needs(self, name: str, t: int) -> bool:
        return self.policy.active(name, t) and self.policy.effective_weight(name, t) > 0.0

    def _feedback_parts(
        self, sample: TrainingSample, z_t: torch.Tensor, eps_pred: torch.Tensor, t: int
    ) -> tuple[dict, dict]:
        parts: dict[str, torch.Tensor] = {}
        skips: dict[str, int] = {}
        wants = {
            "boundary": bool(sample.subjects),
            "id": bool(sample.face_boxes()),
            "gaze": bool(sample.gaze),
            "pose": bool(sample.subjects),
            "interaction": True,
        }
        active = [n for n, has in wants.items() if has and self._needs(n, t)]
        if not active:
            return parts, skips
        x0_hat = decode(reconstruct_x0_latent(z_t, eps_pred, t, self.schedule))
        x0 = sample.image
        if "boundary" in active:
            parts["boundary"] = boundary_loss(x0, x0_hat, sample.boundary_map())
        if "id" in active:
            out = id_loss(x0, x0_hat, sample.face_boxes(), self.detectors.face_embedder)
            if out.used:
                parts["id"] = out.value
            skips["id"] = out.skipped
        if "gaze" in active:
            out = gaze_loss(sample.gaze, x0_hat, self.detectors.gaze)
            if out.used:
                parts["gaze"] = out.value
            skips["gaze"] = out.skipped
        if "pose" in active:
            out = pose_loss(x0, x0_hat, sample.subject_boxes(), self.detectors.pose)
            if out.used:
                parts["pose"] = out.value
            skips["pose"] = out.skipped
        if "interaction" in active:
            out = interaction_loss(
                sample.interactions,
                x0_hat,
                self.detectors.hoi,
                gamma=self.config.focal.gamma,
                alpha=self.config.focal.alpha,
            )
            if out.used:
                parts["interaction"] = out.value
            skips["interaction"] = out.skipped
        return parts, skips

    def step(self, batch: Sequence[TrainingSample], force_t: int | None = None) -> StepResult:
        if not batch:
            raise ValueError("empty batch")
        if force_t is None:
            force_t = self.config.force_timestep
        ts = []
        for _ in batch:
            if force_t is not None:
                ts.append(int(force_t))
            else:
                ts.append(sample_timestep(self.sampler, self.t_rng))

        encoded = [self.cond_encoder.encode(s) for s in batch]
        cond = torch.stack([c_bar for _, c_bar in encoded])
        z0 = torch.stack([s.image for s in batch])
        eps = torch.stack([torch.randn(s.image.shape, generator=self.noise_gen) for s in batch])
        z_t = torch.stack([add_noise(z0[i], eps[i], ts[i], self.schedule) for i in range(len(batch))])
        eps_pred = self.denoiser(z_t, torch.tensor(ts, dtype=torch.long), cond)

        breakdowns: list[LossBreakdown] = []
        skip_totals: dict[str, int] = {}
        for i, sample in enumerate(batch):
            t = ts[i]
            parts: dict[str, torch.Tensor] = {"denoise": torch.mean((eps[i] - eps_pred[i]) ** 2)}
            if self._needs("reg", t):
                c_q, c_bar = encoded[i]
                parts["reg"] = reg_loss(c_q, c_bar)
            fb_parts, fb_skips = self._feedback_parts(sample, z_t[i], eps_pred[i], t)
            parts.update(fb_parts)
            breakdowns.append(combined_loss(parts, t, self.policy))
            for name, n in fb_skips.items():
                skip_totals[name] = skip_totals.get(name, 0) + n

        batch_total = torch.stack([bd.total for bd in breakdowns]).mean()
        self.optimizer.zero_grad(set_to_none=True)
        batch_total.backward()
        nn.utils.clip_grad_norm_(self._params, max_norm=self.config.optim.grad_clip)
        self.optimizer.step()
        self.global_step += 1

        n = len(batch)
        terms = {
            name: sum(bd.terms[name] for bd in breakdowns) / n for name in breakdowns[0].terms
        }
        for bd in breakdowns:
            for name, count in bd.skip_counts.items():
                skip_totals[name] = skip_totals.get(name, 0) + count
        return StepResult(
            step=self.global_step,
            phase="",
            timesteps=ts,
            total=float(batch_total.detach()),
            terms=terms,
            skips=skip_totals,
        )

    # -- phases -----------------------------------------------------------

    def _draw_batch(self, dataset: Sequence[TrainingSample]) -> list[TrainingSample]:
        idx = self.data_rng.integers(0, len(dataset), size=self.config.batch_size)
        return [dataset[int(i)] for i in idx]

    def run_phase(self, phase: PhaseConfig, log: Callable[[dict], None] | None = None) -> list[StepResult]:
        dataset = build_phase_dataset(phase, self.config, self.vocab)
        if not dataset:
            raise ConfigError(f"phase {phase.name!r}: empty dataset")
        results = []
        for _ in range(phase.steps):
            result = self.step(self._draw_batch(dataset))
            result.phase = phase.name
            if log is not None:
                log(result.to_record())
            results.append(result)
        self.phases_done += 1
        return results

    def run_phases(self, out_dir: str | Path, only_phase: str | None = None) -> dict:
        """Run the configured phases, checkpointing before the first and
        after every phase (phases + 1 checkpoint files)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        phases = self.config.phases
        if only_phase is not None:
            phases = [p for p in phases if p.name == only_phase]
            if not phases:
                known = [p.name for p in self.config.phases]
                raise ConfigError(f"no phase named {only_phase!r} (have {known})")
        checkpoints = []
        init_path = out / "checkpoint_init.pt"
        self.save_checkpoint(init_path)
        checkpoints.append(init_path)
        log_path = out / "train_log.jsonl"
        with open(log_path, "w") as fh:

            def log(record: dict) -> None:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

            for phase in phases:
                self.run_phase(phase, log=log)
                ck = out / f"checkpoint_{phase.name}.pt"
                self.save_checkpoint(ck)
                checkpoints.append(ck)
        return {
            "checkpoints": [str(p) for p in checkpoints],
            "log": str(log_path),
            "steps": self.global_step,
            "config_hash": self.config_hash,
        }

    # -- persistence ------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        torch.save(
            {
                "format_version": CHECKPOINT_VERSION,
                "config_hash": self.config_hash,
                "step": self.global_step,
                "phases_done": self.phases_done,
                "model": self.denoiser.state_dict(),
                "conditioning": self.cond_encoder.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "noise_generator": self.noise_gen.get_state(),
                "timestep_rng": self.t_rng.bit_generator.state,
                "data_rng": self.data_rng.bit_generator.state,
            },
            path,
        )

    def load_checkpoint(self, path: str | Path, strict_config: bool = True) -> None:
        """Restore a checkpoint. ``strict_config=False`` allows warm-starting
        from a run with a different config hash (e.g. ablation arms that
        differ only in loss weights); state shapes must still match."""
        state = torch.load(path, weights_only=False)
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version in {path}")
        if strict_config and state["config_hash"] != self.config_hash:
            raise ConfigError(
                f"checkpoint {path} was written under config {state['config_hash']}, "
                f"current config is {self.config_hash}"
            )
        self.denoiser.load_state_dict(state["model"])
        self.cond_encoder.load_state_dict(state["conditioning"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.noise_gen.set_state(state["noise_generator"])
        self.t_rng.bit_generator.state = state["timestep_rng"]
        self.data_rng.bit_generator.state = state["data_rng"]
        self.global_step = state["step"]
        self.phases_done = state["phases_done"]

    # -- sampling ---------------------------------------------------------

    def regenerate(
        self,
        samples: Sequence[TrainingSample],
        t_start: int,
        steps: int,
        generator: torch.Generator,
    ) -> torch.Tensor:
        """Partially re-noise clean images and denoise them back."""
        with torch.no_grad():
            cond = torch.stack([self.cond_encoder.encode(s)[1] for s in samples])
        z0 = torch.stack([s.image for s in samples])
        eps = torch.randn(z0.shape, generator=generator)
        z_t = add_noise(z0, eps, t_start, self.schedule)
        return toy_sample(
            self.denoiser,
            cond,
            self.schedule,
            generator,
            z0.shape,
            steps=steps,
            t_start=t_start,
            init=z_t,
        )


@torch.no_grad()
def toy_sample(
    denoiser: nn.Module,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    shape: tuple,
    steps: int = 50,
    t_start: int | None = None,
    init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Stochastic sampler over a thinned timestep ladder.

    ``init`` is the starting latent at ``t_start`` (already noised);
    without it, sampling starts from pure noise at the top of the
    schedule. Reconstructions are clamped to [0, 1] at every rung.
    Returns the final clean estimate.
    """
    T = schedule.num_steps
    t_start = T - 1 if t_start is None else int(t_start)
    if not 0 <= t_start < T:
        raise ValueError(f"t_start {t_start} outside [0, {T})")
    z = init.clone() if init is not None else torch.randn(shape, generator=generator)
    if z.ndim != 4:
        raise ValueError(f"expected batched latents (B, C, H, W), got {tuple(z.shape)}")
    b = z.shape[0]
    ladder = np.unique(np.linspace(0, t_start, num=min(steps, t_start + 1)).round().astype(int))[::-1]
    x0_hat = z
    for i, t in enumerate(ladder):
        t = int(t)
        eps = denoiser(z, torch.full((b,), t, dtype=torch.long), cond)
        x0_hat = reconstruct_x0_latent(z, eps, t, schedule).clamp(0.0, 1.0)
        if i + 1 == len(ladder):
            break
        s = int(ladder[i + 1])
        ab_t = schedule.alpha_bar_at(t)
        ab_s = schedule.alpha_bar_at(s)
        sigma = math.sqrt((1.0 - ab_s) / (1.0 - ab_t)) * math.sqrt(max(1.0 - ab_t / ab_s, 0.0))
        dir_coef = math.sqrt(max(1.0 - ab_s - sigma**2, 0.0))
        noise = torch.randn(z.shape, generator=generator)
        z = math.sqrt(ab_s) * x0_hat + dir_coef * eps + sigma * noise
    return x0_hat


def make_profile_denoiser(
    denoiser: nn.Module, cond_encoder: ConditioningEncoder
) -> Callable[[torch.Tensor, int, TrainingSample], torch.Tensor]:
    """Adapt a trained model to the (z_t, t, sample) -> eps profiling interface."""

    def predict_noise(z_t: torch.Tensor, t: int, sample: TrainingSample) -> torch.Tensor:
        with torch.no_grad():
            _, c_bar = cond_encoder.encode(sample)
            out = denoiser(
                z_t.unsqueeze(0), torch.tensor([int(t)], dtype=torch.long), c_bar.unsqueeze(0)
            )
        return out.squeeze(0)

    return predict_noise
