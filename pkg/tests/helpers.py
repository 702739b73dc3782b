"""Small constructors shared by the test modules."""

from __future__ import annotations

import numpy as np

from abra.checkpoint import ModelCheckpoint
from abra.linalg import apply_sign_convention


def random_orthonormal(rng: np.random.Generator, n: int, k: int | None = None) -> np.ndarray:
    """n x k matrix with orthonormal columns (Haar distributed for k = n)."""
    k = n if k is None else k
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.sign(np.diag(r))


def rotation2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def conform(u: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Return q @ D with D = diag(+-1) so that (u @ q @ D) obeys the SVD sign convention."""
    rotated = u @ q
    fixed, _ = apply_sign_convention(rotated, np.eye(q.shape[1]))
    signs = np.sign(np.sum(fixed * rotated, axis=0))
    return q * signs


def planted_weight(u: np.ndarray, sigma, v: np.ndarray) -> np.ndarray:
    return (u * np.asarray(sigma)) @ v.T


def tiny_network(rng, width=4, depth=2, n_out=3, activation="tanh", name="net") -> ModelCheckpoint:
    tensors = {}
    for i in range(depth):
        tensors[f"layer{i}.weight"] = rng.standard_normal((width, width)) / np.sqrt(width)
        tensors[f"layer{i}.bias"] = 0.1 * rng.standard_normal(width)
    tensors["head.weight"] = rng.standard_normal((n_out, width)) / np.sqrt(width)
    tensors["head.bias"] = 0.1 * rng.standard_normal(n_out)
    return ModelCheckpoint(name, tensors, kind="domain_expert", metadata={"activations": [activation] * depth})


def small_config(**overrides):
    """A seconds-scale version of the benchmark config."""
    from abra.bench.config import ExperimentConfig

    doc = {
        "seeds": [0, 1],
        "model": {"width": 8, "depth": 2},
        "world": {"box_dim": 4},
        "split": {"samples_per_class": 24, "eval_samples_per_class": 16},
        "schedules": {
            "pretrain": {"epochs": 3, "lr": 0.05, "batch_size": 16},
            "domain": {"epochs": 3, "lr": 0.05, "batch_size": 8},
            "class": {"epochs": 3, "lr": 0.01, "batch_size": 4},
            "upper": {"epochs": 3, "lr": 0.02, "batch_size": 8},
            "fewshot": {"epochs": 3, "lr": 0.01, "batch_size": 4},
        },
        "layers": {
            "domain": ["layer0.weight", "layer1.weight"],
            "class": ["layer1.weight"],
            "domain_lr_scale": {"layer1.weight": 0.1, "layer1.bias": 0.1},
        },
        "fewshot": {"shots": [1, 4]},
    }
    return ExperimentConfig.from_dict(doc).with_overrides(**overrides)
