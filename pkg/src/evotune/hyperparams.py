"""The six tuned scalars and the shipped named presets."""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass(frozen=True)
class Hyperparameters:
    """Discount, polyak coefficient, two learning rates, and the two
    exploration knobs. Every field lives in [0, 1]."""

    gamma: float
    tau: float
    alpha_critic: float
    alpha_actor: float
    epsilon: float
    eta: float

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f.name}={v} outside [0, 1]")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Field names in chromosome gene order (polyak coefficient first).
GENE_ORDER = ("tau", "gamma", "alpha_critic", "alpha_actor", "epsilon", "eta")

PRESETS: dict[str, Hyperparameters] = {
    "baseline": Hyperparameters(
        gamma=0.98, tau=0.95, alpha_critic=0.001, alpha_actor=0.001, epsilon=0.3, eta=0.2
    ),
    "ga-all-envs": Hyperparameters(
        gamma=0.928, tau=0.484, alpha_critic=0.001, alpha_actor=0.001, epsilon=0.1, eta=0.597
    ),
    "ga-aubo-fixed": Hyperparameters(
        gamma=0.949, tau=0.924, alpha_critic=0.001, alpha_actor=0.001, epsilon=0.584, eta=0.232
    ),
    "ga-aubo-random": Hyperparameters(
        gamma=0.988, tau=0.924, alpha_critic=0.001, alpha_actor=0.001, epsilon=0.912, eta=0.748
    ),
}
