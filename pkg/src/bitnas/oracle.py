"""Brute-force ground truth on tiny design spaces.

Enumerates every per-block candidate assignment, trains each one under an
identical small budget, and ranks the lot by the same cost-weighted
objective the search optimizes.  Search results can then be placed as a
percentile of the full space.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .cost import CostConfig, architecture_cost, cost_weighting
from .data import Dataset
from .engine import ops
from .engine.tensor import Tensor
from .pipeline import ChildConfig, child_seed, resolve_cost_config, train_child
from .supernet import Architecture, SuperNetSpec

ENUMERATION_LIMIT = 4096


@dataclass(frozen=True)
class DesignSpace:
    spec: SuperNetSpec
    limit: int = ENUMERATION_LIMIT

    @property
    def size(self) -> int:
        return math.prod(len(b.candidates) for b in self.spec.blocks)


def enumerate_space(space: DesignSpace) -> List[Architecture]:
    """All assignments in lexicographic candidate-index order."""
    size = space.size
    if size > space.limit:
        raise ValueError(
            f"design space holds {size} architectures, over the limit of "
            f"{space.limit}")
    ranges = [range(len(b.candidates)) for b in space.spec.blocks]
    return [Architecture(choices, {"enumerated": i})
            for i, choices in enumerate(itertools.product(*ranges))]


def mean_cross_entropy(net, ds: Dataset, batch_size: int = 256) -> float:
    """Mean cross entropy over a dataset, eval mode, no tape."""
    if len(ds.labels) == 0:
        raise ValueError("empty evaluation set")
    net.eval()
    total = 0.0
    for start in range(0, len(ds.labels), batch_size):
        x = Tensor(ds.images[start:start + batch_size])
        y = ds.labels[start:start + batch_size]
        ce = ops.softmax_cross_entropy(net(x), y)
        total += float(ce.data) * len(y)
    return total / len(ds.labels)


@dataclass
class OracleEntry:
    arch: Architecture
    encoding: str
    ce: float
    cost: int
    loss: float
    accuracy: Optional[float]
    rank: int = -1


def oracle_rank(space: DesignSpace, train: Dataset, test: Dataset,
                budget: ChildConfig, cost_cfg: CostConfig,
                seed: int) -> List[OracleEntry]:
    """Train every architecture under one budget and sort by the objective.

    Each child's seed is derived from its encoding, so the outcome cannot
    depend on enumeration order.  Ties break by lower cost, then by
    lexicographic choice order.  Diverged runs keep a place with infinite
    loss.
    """
    spec = space.spec
    cost_cfg = resolve_cost_config(
        spec, [np.zeros(len(b.candidates)) for b in spec.blocks], cost_cfg)
    entries = []
    for arch in enumerate_space(space):
        cost = architecture_cost(spec, arch, cost_cfg)
        res = train_child(spec, arch, train, test, budget,
                          seed=child_seed(spec, arch, seed))
        if res.failed:
            ce, loss, acc = math.inf, math.inf, None
        else:
            ce = mean_cross_entropy(res.net, test)
            weight = float(cost_weighting(Tensor(float(cost), dtype=np.float64),
                                          cost_cfg.beta, cost_cfg.gamma).data)
            loss = ce * weight
            acc = res.accuracy
        entries.append(OracleEntry(arch, arch.encoding(spec), ce, cost, loss,
                                   acc))
    return rank_entries(entries)


def rank_entries(entries: List[OracleEntry]) -> List[OracleEntry]:
    """Sort by (loss, cost, lexicographic choices) and assign ranks."""
    out = sorted(entries, key=lambda e: (e.loss, e.cost, e.arch.choices))
    for i, e in enumerate(out):
        e.rank = i
    return out


def percentile_of(arch: Architecture, ranking: List[OracleEntry]) -> float:
    """Rank position scaled to [0, 1]; 0 is best."""
    for e in ranking:
        if e.arch.choices == tuple(arch.choices):
            if len(ranking) == 1:
                return 0.0
            return e.rank / (len(ranking) - 1)
    raise ValueError("architecture not present in the ranking")


ORACLE_HEADER = ("encoding", "ce", "cost", "loss", "accuracy", "rank")


def write_oracle_csv(path, entries: List[OracleEntry]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ORACLE_HEADER)
        for e in entries:
            acc = "" if e.accuracy is None else repr(float(e.accuracy))
            w.writerow([e.encoding, repr(e.ce), e.cost, repr(e.loss), acc,
                        e.rank])


def load_oracle_csv(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
