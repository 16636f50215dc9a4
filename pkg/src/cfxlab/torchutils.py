"""Small torch helpers shared by the trained components.

Everything in the package runs in float64 on CPU: the acceptance oracles
are finite-difference based and the run artifacts must be byte-stable.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
import torch

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.ascontiguousarray(x), dtype=DTYPE)


def to_numpy(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy()


def shuffled_batches(n: int, batch_size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def onehot(labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels.long(), n_classes).to(DTYPE)
