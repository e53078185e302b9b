"""Stochastic optimization of the negative ELBO with deterministic resume.

Adam at the fixed step size 1e-4 over batches drawn by the corpus sampler.
Checkpoints carry model and optimizer state plus both RNG states (batch
sampler and reparameterization noise), so resuming a run in single-worker
mode reproduces the exact loss sequence of an uninterrupted run. Metrics are
appended as JSON lines ``{"step", "elbo", "recon", "kl"}``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import GlyphMatrix, SplitManifest, sample_batch
from .model import GlyphModel, ModelConfig, batch_to_tensors

log = logging.getLogger(__name__)

ADAM_LR = 1e-4  # fixed training step size
ADAM_BETAS = (0.9, 0.999)
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Run configuration; serialized flat in train.json (see docs/cli.md)."""

    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    steps: int = 20000
    fonts_per_batch: int = 10
    chars_per_font: int = 20
    checkpoint_dir: str = "checkpoints"
    checkpoint_every: int = 1000
    eval_every: int = 0  # dev-SSIM cadence for the best snapshot; 0 disables
    eval_n_obs: int = 8

    def to_dict(self) -> dict:
        out = self.model.to_dict()
        out.update(
            seed=self.seed,
            steps=self.steps,
            fonts_per_batch=self.fonts_per_batch,
            chars_per_font=self.chars_per_font,
            checkpoint_dir=self.checkpoint_dir,
            checkpoint_every=self.checkpoint_every,
            eval_every=self.eval_every,
            eval_n_obs=self.eval_n_obs,
        )
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        model_keys = ModelConfig().to_dict().keys()
        model = ModelConfig(**{k: payload.pop(k) for k in list(model_keys) if k in payload})
        known = {k for k in cls.__dataclass_fields__ if k != "model"}
        extra = set(payload) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(model=model, **payload)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_params(config: ModelConfig, seed: int) -> GlyphModel:
    """Fresh model: fan-in-scaled network init, zero loss latents.

    The zero latent grids put every coefficient at alpha = 1, sigma = 1+eps.
    Same seed, same parameters.
    """
    torch.manual_seed(seed)
    return GlyphModel(config)


def _intern_strings(obj):
    # Loaded checkpoints carry non-interned strings; interning everything
    # restores the pickle sharing topology so save -> load -> save is
    # byte-identical.
    import sys

    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_intern_strings(k): _intern_strings(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_intern_strings(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_intern_strings(v) for v in obj)
    return obj


def save_checkpoint(
    path: str | Path,
    model: GlyphModel,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    step: int,
    sampler_rng: np.random.Generator,
    noise_generator: torch.Generator,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "step": step,
        "model_state": _intern_strings(model.state_dict()),
        "optimizer_state": _intern_strings(optimizer.state_dict()),
        "sampler_state": _intern_strings(sampler_rng.bit_generator.state),
        "noise_state": noise_generator.get_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
    return payload


def restore_model(payload: dict) -> tuple[GlyphModel, TrainConfig]:
    """Model (weights loaded) plus the run config from a checkpoint payload."""
    config = TrainConfig.from_dict(payload["config"])
    model = GlyphModel(config.model)
    model.load_state_dict(payload["model_state"])
    return model, config


def load_model(path: str | Path) -> tuple[GlyphModel, TrainConfig]:
    return restore_model(load_checkpoint(path))


def _dump_diagnostics(ck_dir: Path, step: int, batch, diag: dict, loss: float) -> Path:
    path = ck_dir / f"diagnostic_step{step}.json"
    payload = {
        "step": step,
        "loss": loss,
        "diagnostics": diag,
        "font_ids": batch.font_ids,
        "char_ids": [[f"{c:04x}" for c in chars] for chars in batch.char_ids],
    }
    path.write_text(json.dumps(payload, indent=2))
    return path


def train(
    config: TrainConfig,
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    resume_from: str | Path | None = None,
) -> Path:
    """Optimize the model for ``config.steps`` steps; returns the final
    checkpoint path.

    Masked character types never enter batches. Aborts on a non-finite loss
    with a diagnostic dump of the offending batch.
    """
    ck_dir = Path(config.checkpoint_dir)
    ck_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = ck_dir / "metrics.jsonl"

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model, _ = restore_model(payload)
        optimizer = torch.optim.Adam(model.parameters(), lr=ADAM_LR, betas=ADAM_BETAS)
        optimizer.load_state_dict(payload["optimizer_state"])
        sampler_rng = np.random.default_rng()
        sampler_rng.bit_generator.state = payload["sampler_state"]
        noise_gen = torch.Generator()
        noise_gen.set_state(payload["noise_state"])
        start_step = payload["step"]
        metrics = open(metrics_path, "a")
    else:
        model = init_params(config.model, config.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=ADAM_LR, betas=ADAM_BETAS)
        sampler_rng = np.random.default_rng(config.seed)
        noise_gen = torch.Generator()
        noise_gen.manual_seed(config.seed + 1)
        start_step = 0
        metrics = open(metrics_path, "w")

    best_dev = -math.inf
    model.train()
    t0 = time.time()
    try:
        for step in range(start_step, config.steps):
            batch = sample_batch(
                matrix, manifest, sampler_rng,
                config.fonts_per_batch, config.chars_per_font,
            )
            bt = batch_to_tensors(batch)
            elbo, diag = model.elbo(bt, noise_gen)
            loss = -elbo
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                dump = _dump_diagnostics(ck_dir, step + 1, batch, diag, loss_val)
                raise RuntimeError(
                    f"non-finite loss at step {step + 1}; batch dumped to {dump}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            record = {
                "step": step + 1,
                "elbo": float(elbo.detach()),
                "recon": diag["recon"],
                "kl": diag["kl"],
            }
            metrics.write(json.dumps(record) + "\n")
            metrics.flush()
            done = step + 1
            if config.checkpoint_every and done % config.checkpoint_every == 0:
                save_checkpoint(
                    ck_dir / f"step{done:07d}.pt",
                    model, optimizer, config, done, sampler_rng, noise_gen,
                )
            if config.eval_every and done % config.eval_every == 0:
                from .evalkit import quick_dev_ssim

                score = quick_dev_ssim(
                    model, matrix, manifest, n_obs=config.eval_n_obs
                )
                if score is not None and score > best_dev:
                    best_dev = score
                    save_checkpoint(
                        ck_dir / "best.pt",
                        model, optimizer, config, done, sampler_rng, noise_gen,
                    )
                model.train()
            if done % 100 == 0:
                log.info(
                    "step %d/%d elbo %.1f (%.2f s/step)",
                    done, config.steps, record["elbo"], (time.time() - t0) / (done - start_step),
                )
    finally:
        metrics.close()

    final = ck_dir / "final.pt"
    save_checkpoint(final, model, optimizer, config, config.steps, sampler_rng, noise_gen)
    return final
