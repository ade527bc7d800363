"""Noisy-modality corruption and the default geometric augmentation."""
from dataclasses import dataclass
from typing import Optional

import numpy as np


def make_rng(seed, *keys):
    """Independent generator for ``(seed, *keys)``, e.g. (seed, epoch, sample)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class CorruptionPolicy:
    p_corrupt: float = 0.10
    p_pick_rgb: float = 0.50
    p_zero_vs_noise: float = 0.50
    seed: int = 0
    clip_noise: bool = False

    def __post_init__(self):
        for name in ("p_corrupt", "p_pick_rgb", "p_zero_vs_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")

    @classmethod
    def forced(cls, modality, kind, seed=0):
        """Policy that always replaces ``modality`` with ``kind`` ('zero' | 'noise')."""
        if modality not in ("rgb", "thermal") or kind not in ("zero", "noise"):
            raise ValueError(f"bad forced corruption {modality!r}/{kind!r}")
        return cls(1.0, 1.0 if modality == "rgb" else 0.0, 1.0 if kind == "zero" else 0.0, seed)


@dataclass(frozen=True)
class CorruptionRecord:
    modality: Optional[str] = None
    kind: Optional[str] = None

    @property
    def corrupted(self):
        return self.modality is not None

    def to_log(self):
        return {"modality": self.modality, "kind": self.kind} if self.corrupted else None


def maybe_corrupt(pair, policy, rng):
    """With probability ``p_corrupt`` replace one modality by zeros or N(0, 1) noise.

    Operates on raw [0, 1] images, before backbone normalization.
    """
    if rng.random() >= policy.p_corrupt:
        return pair, CorruptionRecord()
    modality = "rgb" if rng.random() < policy.p_pick_rgb else "thermal"
    kind = "zero" if rng.random() < policy.p_zero_vs_noise else "noise"
    shape = pair.rgb.shape
    if kind == "zero":
        repl = np.zeros(shape, dtype=np.float32)
    else:
        repl = rng.standard_normal(shape, dtype=np.float32)
        if policy.clip_noise:
            repl = np.clip(repl, 0.0, 1.0)
    return pair.replace(**{modality: repl}), CorruptionRecord(modality, kind)


def hflip(pair, mask):
    flipped = pair.replace(rgb=pair.rgb[..., ::-1].copy(), thermal=pair.thermal[..., ::-1].copy())
    return flipped, None if mask is None else mask[..., ::-1].copy()


def standard_augment(pair, mask, rng, p_flip=0.5):
    """Horizontal flip applied identically to both modalities and the mask."""
    if rng.random() < p_flip:
        return hflip(pair, mask)
    return pair, mask
