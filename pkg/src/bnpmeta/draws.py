"""Container for retained MCMC draws."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODEL_KINDS = ("FE", "RE2L", "RE2L-dep", "RE3L", "BNP")


@dataclass(frozen=True)
class MCMCConfig:
    burn: int = 2000
    keep: int = 200_000
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.burn < 0 or self.keep < 1 or self.thin < 1:
            raise ValueError("need burn >= 0, keep >= 1, thin >= 1")

    @property
    def iterations(self) -> int:
        return self.burn + self.keep * self.thin

    def retained(self, it: int) -> bool:
        """Whether 0-based iteration ``it`` is stored."""
        return it >= self.burn and (it - self.burn + 1) % self.thin == 0


@dataclass(eq=False)
class PosteriorDraws:
    """Retained draws of one model fit.

    ``params`` maps parameter names to arrays whose first axis indexes draws
    (ragged BNP intercepts are stored CSR-style under ``occ_ptr``/``occ_j``/
    ``occ_mu``).  ``columns`` lists which columns of the full design
    ``(1, x_1, ..., x_p)`` enter the linear predictor.
    """

    kind: str
    params: dict
    meta: dict = field(default_factory=dict)
    columns: tuple = (0,)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.columns = tuple(int(c) for c in self.columns)

    @property
    def keep(self) -> int:
        return int(self.params["beta"].shape[0])

    def scalar(self, name: str) -> np.ndarray:
        return np.asarray(self.params[name], dtype=float)

    def intercepts(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Occupied component indices and intercepts of BNP draw ``t``."""
        ptr = self.params["occ_ptr"]
        sl = slice(int(ptr[t]), int(ptr[t + 1]))
        return self.params["occ_j"][sl].astype(int), self.params["occ_mu"][sl]
