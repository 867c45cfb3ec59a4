"""Ready-made synthetic source/target setups used by the CLI defaults, demos and tests."""
from dataclasses import dataclass

from .datagen import DomainDataset, DomainShift
from .model import Architecture
from .pretrain import PretrainConfig

# moderate colour-cast shift; clamps occasionally, so not exactly invertible
COLOR_CAST = DomainShift(scale=(0.7, 1.1, 0.9), offset=(0.15, -0.05, 0.1))

# keeps every [0, 1] pixel inside [0, 1]: an exactly invertible per-channel affine map
AFFINE_PAIR = DomainShift(scale=(0.6, 0.8, 0.5), offset=(0.2, 0.1, 0.25))


@dataclass
class Task:
    source: DomainDataset
    target: DomainDataset
    target_eval: DomainDataset
    source_eval: DomainDataset
    architecture: Architecture
    pretrain: PretrainConfig
    model_seed: int


def domain_shift_task(seed=0, shift=COLOR_CAST, color_std=0.08):
    """200 labelled source images, 60 target images to adapt on, 50 held-out of each domain.

    Every dataset gets its own seed derived from ``seed``. The two held-out
    sets share a seed, so their images are exact source/target pairs.
    """
    base = 1000 * seed
    src = DomainDataset(size=200, seed=base + 1, color_std=color_std)
    adapt = DomainDataset(size=60, seed=base + 2, color_std=color_std, shift=shift)
    held_src = DomainDataset(size=50, seed=base + 3, color_std=color_std)
    return Task(
        source=src,
        target=adapt,
        target_eval=held_src.with_shift(shift),
        source_eval=held_src,
        architecture=Architecture(),
        pretrain=PretrainConfig(seed=base),
        model_seed=base,
    )


def affine_pair_task(seed=0):
    """Low-noise variant with an invertible shift; classes are well separated."""
    return domain_shift_task(seed, shift=AFFINE_PAIR, color_std=0.03)
