"""Reproducible Brownian increments.

Paths are grouped in blocks of :data:`PATH_BLOCK`. Block ``b`` of a run with
seed ``s`` is drawn from ``PCG64(SeedSequence([s, b]))`` and always generates
all of its rows, so the increments of a path depend only on
``(seed, path_id, grid)`` and never on how many paths were requested or how
the blocks were distributed over workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from stfde.errors import DomainError
from stfde.fracops import TimeGrid

PATH_BLOCK = 512


def block_increments(seed: int, block: int, grid: TimeGrid) -> np.ndarray:
    """All ``PATH_BLOCK`` increment rows of block *block*."""
    if seed < 0 or block < 0:
        raise DomainError("seed and block index must be non-negative")
    ss = np.random.SeedSequence([int(seed), int(block)])
    rng = np.random.Generator(np.random.PCG64(ss))
    z = rng.standard_normal((PATH_BLOCK, grid.n_steps))
    return z * np.sqrt(grid.h)


@dataclass(frozen=True)
class BrownianIncrements:
    """Increments ``dB[..., k] = B(t_{k+1}) - B(t_k)`` of one or more paths."""

    grid: TimeGrid
    dB: np.ndarray
    seed: int
    path_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if self.dB.shape[-1] != self.grid.n_steps:
            raise DomainError(
                f"expected {self.grid.n_steps} increments per path, "
                f"got {self.dB.shape[-1]}"
            )

    @classmethod
    def generate(cls, grid: TimeGrid, seed: int, path_ids) -> BrownianIncrements:
        """Increments for the given path ids (an int or an array of ints)."""
        ids = np.atleast_1d(np.asarray(path_ids, dtype=np.int64))
        out = np.empty((ids.size, grid.n_steps))
        blocks = ids // PATH_BLOCK
        for b in np.unique(blocks):
            rows = block_increments(seed, int(b), grid)
            sel = blocks == b
            out[sel] = rows[ids[sel] % PATH_BLOCK]
        if np.ndim(path_ids) == 0:
            out = out[0]
        return cls(grid=grid, dB=out, seed=seed, path_ids=ids)

    @property
    def path(self) -> np.ndarray:
        """Brownian path ``B(t_k)`` including ``B(0) = 0``."""
        zero = np.zeros(self.dB.shape[:-1] + (1,))
        return np.concatenate([zero, np.cumsum(self.dB, axis=-1)], axis=-1)

    def coarsen(self, factor: int) -> BrownianIncrements:
        """Same Brownian path seen on a grid with *factor* times fewer steps."""
        if factor < 1 or self.grid.n_steps % factor:
            raise DomainError(f"cannot coarsen {self.grid.n_steps} steps by {factor}")
        coarse = TimeGrid(self.grid.t_max, self.grid.n_steps // factor)
        shape = self.dB.shape[:-1] + (coarse.n_steps, factor)
        return BrownianIncrements(
            grid=coarse,
            dB=self.dB.reshape(shape).sum(axis=-1),
            seed=self.seed,
            path_ids=self.path_ids,
        )
