"""Synthetic corpora with planted word <-> region correspondences.

Every concept owns one unit direction shared by both modalities, and a few
"normal background" directions fill the remaining regions and tokens. All
directions are mutually orthonormal, so at zero noise the correct region for
each concept token is unambiguous.
"""

import json
import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction

import numpy as np

from .dataio import Box, Corpus, Grounding, Study
from .posenc import GridShape


@dataclass
class SynthConfig:
    num_studies: int = 200
    d: int = 32
    grid: tuple = (4, 4)
    n_words: int = 8
    vocab_size: int = 16
    concepts_per_study: int = 3
    noise_sigma: float = 0.05
    lateral_fraction: float = 0.5
    seed: int = 7
    # extensions beyond the core fields
    lateral_only_fraction: float = 0.0
    n_background: int = 2
    box_size: tuple = (1, 2)
    feature_scale: float = 8.0
    num_classes: int = 0
    split: str = "train"
    id_prefix: str = "s"
    # latent directions come from this seed (default: seed) so train/val files can share them
    direction_seed: int | None = None

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.box_size = tuple(self.box_size)
        self.validate()

    def validate(self):
        checks = [
            ("num_studies", self.num_studies >= 1),
            ("d", self.d >= 4 and self.d % 4 == 0),
            ("grid", len(self.grid) == 2 and min(self.grid) >= 1),
            ("n_words", self.n_words >= self.concepts_per_study),
            ("vocab_size", self.vocab_size >= 1),
            ("concepts_per_study", 1 <= self.concepts_per_study <= self.vocab_size),
            ("noise_sigma", self.noise_sigma >= 0),
            ("lateral_fraction", 0.0 <= self.lateral_fraction <= 1.0),
            ("lateral_only_fraction", 0.0 <= self.lateral_only_fraction <= 1.0),
            ("n_background", self.n_background >= 1),
            ("box_size", len(self.box_size) == 2 and min(self.box_size) >= 1),
            ("feature_scale", self.feature_scale > 0),
            ("num_classes", self.num_classes >= 0),
            ("seed", 0 <= self.seed < 2**64),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid SynthConfig field '{name}': {getattr(self, name)!r}")
        if self.direction_seed is not None and not 0 <= self.direction_seed < 2**64:
            raise ValueError(f"invalid SynthConfig field 'direction_seed': {self.direction_seed!r}")
        if self.vocab_size + self.n_background > self.d:
            raise ValueError(
                f"invalid SynthConfig field 'vocab_size': {self.vocab_size} concepts + "
                f"{self.n_background} background directions exceed d={self.d}"
            )

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"invalid SynthConfig field '{sorted(unknown)[0]}': unknown field")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_dict(self):
        return asdict(self)


def lateral_assignment(n, fraction):
    """Deterministic spread of ``floor(n * fraction)`` lateral views over n studies."""
    f = Fraction(fraction).limit_denominator(10**6)
    return [math.floor((i + 1) * f) - math.floor(i * f) == 1 for i in range(n)]


def lateral_only_concepts(config):
    """Concept ids that are only ever visible on the lateral view."""
    n = round(config.vocab_size * config.lateral_only_fraction)
    return set(range(config.vocab_size - n, config.vocab_size))


def concept_directions(config):
    """Orthonormal (vocab_size + n_background, d) direction table for ``config``."""
    seed = config.seed if config.direction_seed is None else config.direction_seed
    rng = np.random.default_rng([seed, 0])
    g = rng.standard_normal((config.d, config.vocab_size + config.n_background))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q.T


def _place_boxes(rng, grid, size, count):
    h, w = size
    if h > grid.height or w > grid.width:
        raise ValueError(f"grid {grid.height}x{grid.width} too small for {h}x{w} boxes")
    occupied = np.zeros((grid.height, grid.width), dtype=bool)
    boxes = []
    for _ in range(count):
        free = [(y, x) for y in range(grid.height - h + 1) for x in range(grid.width - w + 1)
                if not occupied[y:y + h, x:x + w].any()]
        if not free:
            raise ValueError(f"grid {grid.height}x{grid.width} too small for {count} boxes of {h}x{w}")
        y, x = free[rng.integers(len(free))]
        occupied[y:y + h, x:x + w] = True
        boxes.append(Box(y, x, y + h, x + w))
    return boxes


def generate(config):
    """Build a Corpus from ``config``; identical configs give bit-identical corpora."""
    config.validate()
    grid = GridShape(*config.grid)
    dirs = concept_directions(config)
    background = dirs[config.vocab_size:]
    lat_only = lateral_only_concepts(config)
    has_lateral = lateral_assignment(config.num_studies, config.lateral_fraction)
    rng = np.random.default_rng([config.seed, 1])
    scale = config.feature_scale
    nb = config.n_background

    def noisy(rows):
        if config.noise_sigma > 0:
            rows = rows + config.noise_sigma * rng.standard_normal(rows.shape)
        return scale * rows

    studies = []
    for i in range(config.num_studies):
        concepts = [int(c) for c in rng.choice(config.vocab_size, config.concepts_per_study, replace=False)]
        lateral_view = has_lateral[i]
        frontal_c = [c for c in concepts if c not in lat_only]
        lateral_c = [c for c in concepts if c in lat_only]

        f_rows = background[np.arange(grid.size) % nb].copy()
        f_boxes = _place_boxes(rng, grid, config.box_size, len(frontal_c))
        for c, box in zip(frontal_c, f_boxes):
            f_rows[box.mask(grid)] = dirs[c]
        lateral = None
        if lateral_view:
            l_rows = background[(np.arange(grid.size) + 1) % nb].copy()
            for c, box in zip(lateral_c, _place_boxes(rng, grid, config.box_size, len(lateral_c))):
                l_rows[box.mask(grid)] = dirs[c]

        slots = rng.permutation(config.n_words)
        t_rows = background[np.arange(config.n_words) % nb].copy()
        token_of = {}
        for c, slot in zip(concepts, slots):
            t_rows[slot] = dirs[c]
            token_of[c] = (int(slot),)

        frontal = noisy(f_rows)
        if lateral_view:
            lateral = noisy(l_rows)
        tokens = noisy(t_rows)
        grounding = [Grounding(box, token_of[c]) for c, box in zip(frontal_c, f_boxes)]
        label = concepts[0] % config.num_classes if config.num_classes else None
        studies.append(Study(
            id=f"{config.id_prefix}{i:05d}",
            frontal=_f32(frontal),
            tokens=_f32(tokens),
            token_mask=np.ones(config.n_words, dtype=bool),
            grid=grid,
            lateral=None if lateral is None else _f32(lateral),
            label=label,
            grounding=grounding,
        ))
    return Corpus(studies, config.d, grid, config.split, f"synth-{config.seed}")


def _f32(a):
    # round through float32 so the on-disk format round-trips exactly
    return np.asarray(a, dtype=np.float32).astype(np.float64)
