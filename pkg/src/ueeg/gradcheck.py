"""End-to-end gradient checks of whole architectures at float64."""
from __future__ import annotations

import numpy as np

from .data import minmax_records
from .losses import binary_cross_entropy, categorical_cross_entropy
from .models import ModelConfig, build_model
from .rng import substream
from .tensor import GradCheckReport, Tensor, grad_check, precision


def architecture_grad_check(
    arch: str,
    channels: int = 3,
    timesteps: int = 16,
    num_classes: int = 2,
    seed: int = 0,
    batch: int = 4,
    n_samples: int = 12,
    tol: float = 1e-3,
    eps: float = 3e-6,
    floor: float = 1e-5,
    **options,
) -> GradCheckReport:
    """Check the training loss gradient w.r.t. every parameter tensor and the input.

    Runs in train mode (batch statistics, a fixed dropout mask) and probes
    ``n_samples`` random coordinates per tensor. Coordinates whose probe
    interval straddles a ReLU or max kink are skipped and counted.
    """
    with precision(np.float64):
        model = build_model(ModelConfig(arch, channels, timesteps, num_classes, seed=seed, **options))
        rng = substream(seed, "gradcheck")
        raw = rng.standard_normal((batch, channels, timesteps))
        labels = np.arange(batch) % num_classes
        if arch == "autoencoder":
            x = Tensor(minmax_records(raw).astype(np.float64))
            target = Tensor(x.data.copy())  # fixed, so only the input path is differentiated
        else:
            x = Tensor(raw)

        def loss(*_):
            out = model.forward(x, "train", substream(seed, "gradcheck-dropout"))
            if arch == "autoencoder":
                return binary_cross_entropy(out, target)
            return categorical_cross_entropy(out, labels)

        return grad_check(
            loss, [x] + model.parameters(), n_samples=n_samples, seed=seed, tol=tol, eps=eps,
            floor=floor, skip_kinks=True,
        )
