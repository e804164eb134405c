"""Run configuration for the command-line tools.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from vgnn.model import ModelConfig
from vgnn.training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0

# Named hyperparameter sets; values override the RunConfig defaults.
PRESETS: Dict[str, Dict[str, Any]] = {
    "plate": {
        "latent_dim": 25,
        "message_passes": 5,
        "decoder_width": 75,
        "batch_size": 2,
        "n_epochs": 4500,
        "decay_every": 700,
        "grid": 25,
        "n_sims": 215,
        "n_train": 115,
    },
    "beam": {
        "latent_dim": 12,
        "message_passes": 4,
        "decoder_width": 40,
        "output_dim": 2,
        "batch_size": 2,
        "n_epochs": 5000,
        "decay_every": 1000,
    },
    "smoke": {
        "latent_dim": 25,
        "message_passes": 5,
        "decoder_width": 75,
        "batch_size": 2,
        "n_epochs": 300,
        "decay_every": 700,
        "grid": 12,
        "n_sims": 100,
        "n_train": 80,
    },
    "plate-desk": {
        "latent_dim": 25,
        "message_passes": 5,
        "decoder_width": 75,
        "batch_size": 2,
        "n_epochs": 1500,
        "decay_every": 700,
        "grid": 12,
        "n_sims": 100,
        "n_train": 80,
    },
    "beam-desk": {
        "latent_dim": 12,
        "message_passes": 4,
        "decoder_width": 40,
        "output_dim": 2,
        "batch_size": 4,
        "n_epochs": 1000,
        "decay_every": 1000,
    },
}

MODEL_KEYS = (
    "latent_dim",
    "message_passes",
    "decoder_layers",
    "decoder_width",
    "output_dim",
    "prior_mode",
    "prior_sigma1",
    "prior_sigma2",
    "prior_pi",
    "learn_prior",
    "noise_model",
    "noise_init",
)

TRAIN_KEYS = (
    "n_epochs",
    "batch_size",
    "learning_rate",
    "lr_decay",
    "decay_every",
    "grad_clip",
    "seed",
    "log_every",
)


class RunConfig:
    """Flat configuration shared by all subcommands."""

    def __init__(
        self,
        seed: Optional[int] = None,
        out: str = "runs",
        log_level: str = "INFO",
        preset: Optional[str] = None,
        dataset: Optional[str] = None,
        checkpoint: Optional[str] = None,
        grid: int = 12,
        n_sims: int = 100,
        n_train: Optional[int] = None,
        traction: float = 1.5,
        nu: float = 0.3,
        latent_dim: int = 25,
        message_passes: int = 5,
        decoder_layers: int = 2,
        decoder_width: Optional[int] = None,
        output_dim: int = 1,
        prior_mode: str = "mixture",
        prior_sigma1: float = 0.36787944117144233,
        prior_sigma2: float = 0.1353352832366127,
        prior_pi: float = 0.5,
        learn_prior: bool = True,
        noise_model: str = "combined",
        noise_init: float = 0.1,
        n_epochs: int = 4500,
        batch_size: int = 2,
        learning_rate: float = 1e-3,
        lr_decay: float = 0.98,
        decay_every: int = 700,
        grad_clip: float = 10.0,
        log_every: int = 50,
        n_samples: int = 200,
        z: float = 2.0,
        subset: str = "test",
    ):
        """Initialize configuration.

        Args:
            seed: Seed for data generation, training and sampling; unset runs
                fall back to DEFAULT_SEED with a warning
            out: Output file (generate) or directory (train, infer)
            log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
            preset: Name of the preset the values came from
            dataset: Dataset JSON file read by train and infer
            checkpoint: Checkpoint file read by infer
            grid: Plate nodes per side
            n_sims: Plate simulations to generate
            n_train: Size of the training split; defaults to 80% of the simulations
            traction: Plate traction on the right edge
            nu: Poisson ratio of the plate
            latent_dim: Width of latent embeddings
            message_passes: Processor steps
            decoder_layers: Variational trunk layers
            decoder_width: Trunk width (default 3 * latent_dim)
            output_dim: Target width per node
            prior_mode: ``mixture`` or ``weighted-log``
            prior_sigma1: Initial wide prior scale
            prior_sigma2: Initial narrow prior scale
            prior_pi: Weight of the wide prior component
            learn_prior: Learn the prior scales
            noise_model: ``combined``, ``heteroscedastic`` or ``global``
            noise_init: Initial global noise standard deviation
            n_epochs: Training epochs
            batch_size: Simulations per minibatch
            learning_rate: Initial learning rate
            lr_decay: Learning-rate decay factor
            decay_every: Epochs between decays
            grad_clip: Global gradient-norm clip, 0 to disable
            log_every: Epochs between progress lines
            n_samples: Decoder samples per prediction
            z: Bound width in total standard deviations
            subset: Simulations to infer on (train, test, all)
        """
        self.seed = seed
        self.out = out
        self.log_level = log_level
        self.preset = preset
        self.dataset = dataset
        self.checkpoint = checkpoint
        self.grid = grid
        self.n_sims = n_sims
        self.n_train = n_train
        self.traction = traction
        self.nu = nu
        self.latent_dim = latent_dim
        self.message_passes = message_passes
        self.decoder_layers = decoder_layers
        self.decoder_width = decoder_width
        self.output_dim = output_dim
        self.prior_mode = prior_mode
        self.prior_sigma1 = prior_sigma1
        self.prior_sigma2 = prior_sigma2
        self.prior_pi = prior_pi
        self.learn_prior = learn_prior
        self.noise_model = noise_model
        self.noise_init = noise_init
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.grad_clip = grad_clip
        self.log_every = log_every
        self.n_samples = n_samples
        self.z = z
        self.subset = subset

    @classmethod
    def keys(cls) -> Dict[str, Any]:
        """Every configuration key with its default value."""
        return cls().to_dict()

    def update(self, values: Dict[str, Any], source: str = "overrides") -> "RunConfig":
        """Set ``values`` in place, rejecting unknown keys."""
        known = self.keys()
        for key, value in values.items():
            if key not in known:
                raise ValueError(f"Unknown configuration key in {source}: {key}")
            setattr(self, key, value)
        return self

    def apply_preset(self, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ValueError(f"Unknown preset: {name} (choose from {', '.join(PRESETS)})")
        self.update(PRESETS[name], source=f"preset {name}")
        self.preset = name
        return self

    @classmethod
    def from_file(cls, config_path: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        """Load configuration from a flat YAML mapping.

        Args:
            config_path: Path to configuration file
            base: Configuration to update; a fresh default one when omitted.
                A ``preset`` key in the file is applied before the other keys.

        Returns:
            RunConfig instance
        """
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"Configuration file not found: {config_path}")

        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"Configuration file {config_path} must contain a mapping")

        config = base if base is not None else cls()
        preset = data.pop("preset", None)
        if preset:
            config.apply_preset(preset)
        logger.debug(f"Loaded {len(data)} configuration keys from {config_path}")
        return config.update(data, source=str(config_path))

    @classmethod
    def from_env(cls) -> "RunConfig":
        """Defaults with ``VGNN_SEED``, ``VGNN_OUT`` and ``VGNN_LOG_LEVEL`` applied.

        An unset ``VGNN_SEED`` leaves the seed unset.
        """
        seed = os.getenv("VGNN_SEED")
        return cls(
            seed=int(seed) if seed is not None else None,
            out=os.getenv("VGNN_OUT", "runs"),
            log_level=os.getenv("VGNN_LOG_LEVEL", "INFO"),
        )

    def to_dict(self) -> Dict[str, Any]:
        """Every key and its current value, as written to run_config.yaml."""
        return dict(vars(self))

    def ensure_seed(self) -> int:
        """Return the seed, setting DEFAULT_SEED with a warning if none was given."""
        if self.seed is None:
            logger.warning(
                f"No seed given, using {DEFAULT_SEED}; pass --seed or set VGNN_SEED "
                "to make the run reproducible on purpose"
            )
            self.seed = DEFAULT_SEED
        return self.seed

    def model_config(self, spatial_dim: int = 2) -> ModelConfig:
        return ModelConfig(
            spatial_dim=spatial_dim, **{key: getattr(self, key) for key in MODEL_KEYS}
        )

    def train_config(self) -> TrainConfig:
        self.ensure_seed()
        return TrainConfig(**{key: getattr(self, key) for key in TRAIN_KEYS})

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)
