"""Search loop, child training, and the run-directory persistence formats.

A search run alternates one weight epoch on X_w with one theta epoch on
X_theta (after warmup), sampling architectures into a queue on a fixed
cadence.  Everything written to the run directory is deterministic for a
fixed (config, seed) pair: CSV content is byte-identical across reruns.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .cost import (
    CostConfig, CostReport, block_cost_vectors, calibrate_beta, cost_report,
    fixed_cost, total_loss,
)
from .data import Dataset, cutout_batch
from .engine import checkpoint, ops, optim
from .engine.tensor import Tape, Tensor
from .supernet import (
    Architecture, ChildNet, SuperNet, SuperNetSpec, TemperatureSchedule,
    arch_to_json, build_child, edge_probabilities, sample_architecture,
    sample_soft_masks, temperature_at,
)

# Philox stream tags: one independent stream per (seed, tag, epoch) role.
_TAG_INIT = 0
_TAG_SPLIT = 1
_TAG_ORDER_W = 2
_TAG_GUMBEL_W = 3
_TAG_ORDER_T = 4
_TAG_GUMBEL_T = 5
_TAG_SAMPLE = 6
_TAG_CHILD = 7


def stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox([int(seed), *map(int, tags)]))


@dataclass
class SearchConfig:
    epochs: int = 90
    warmup: int = 10
    batch_size: int = 512
    t0: float = 5.0
    eta: float = 0.025
    sample_every: int = 10
    samples_per_event: int = 5
    split_ratio: float = 0.8
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    theta_lr: float = 5e-3
    theta_weight_decay: float = 1e-3
    mask_per_example: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup < self.epochs:
            raise ValueError("need 0 <= warmup < epochs")
        if self.sample_every < 1:
            raise ValueError("sample_every must be >= 1")
        if self.samples_per_event < 1:
            raise ValueError("samples_per_event must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.t0, self.eta)

    @staticmethod
    def from_dict(cfg: dict, seed: int = 0) -> "SearchConfig":
        return SearchConfig(seed=seed, **cfg)


@dataclass
class ChildConfig:
    epochs: int = 160
    batch_size: int = 128
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cutout: int = 16

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.cutout < 0:
            raise ValueError("cutout must be >= 0 (0 disables it)")

    @staticmethod
    def from_dict(cfg: dict) -> "ChildConfig":
        return ChildConfig(**cfg)


# --------------------------------------------------------------------------
# queue of sampled architectures
# --------------------------------------------------------------------------

@dataclass
class QueueEntry:
    arch_id: int
    arch: Architecture
    epoch: int
    draw: int
    report: CostReport
    accuracy: Optional[float] = None
    failed: bool = False


class ArchQueue:
    """Append-only list of sampled architectures, unique by (epoch, draw)."""

    def __init__(self):
        self.entries: List[QueueEntry] = []
        self._seen = set()

    def push(self, arch: Architecture, epoch: int, draw: int,
             report: CostReport) -> QueueEntry:
        key = (epoch, draw)
        if key in self._seen:
            raise ValueError(f"duplicate queue entry for epoch {epoch} draw {draw}")
        self._seen.add(key)
        entry = QueueEntry(len(self.entries), arch, epoch, draw, report)
        self.entries.append(entry)
        return entry

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


# --------------------------------------------------------------------------
# data split
# --------------------------------------------------------------------------

def split_search_data(ds: Dataset, ratio: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Class-stratified disjoint split into (weight set, theta set)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    if len(ds.labels) < 2:
        raise ValueError("need at least 2 examples to split")
    rng = stream(seed, _TAG_SPLIT)
    w_idx, t_idx = [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size == 0:
            continue
        if members.size < 2:
            raise ValueError(f"class {c} has fewer than 2 examples")
        members = rng.permutation(members)
        # both sides keep at least one example of every populated class
        n_w = int(round(ratio * members.size))
        n_w = min(max(n_w, 1), members.size - 1)
        w_idx.extend(members[:n_w])
        t_idx.extend(members[n_w:])
    return ds.subset(sorted(w_idx)), ds.subset(sorted(t_idx))


# --------------------------------------------------------------------------
# batching helpers
# --------------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    starts = list(range(0, n, batch_size))
    # batch norm needs >= 2 examples; fold a lone trailing example into the
    # final batch instead of emitting it on its own
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for i, s in enumerate(starts):
        end = n if i == len(starts) - 1 else s + batch_size
        yield order[s:end]


def _masked_expected_cost(spec: SuperNetSpec, masks: Sequence[Tensor],
                          config: CostConfig) -> Tensor:
    """Expected cost for shared [K] or per-example [B, K] masks."""
    vectors = block_cost_vectors(spec, config.objective)
    total: Tensor = None
    for m, v in zip(masks, vectors):
        term = (m * Tensor(v.astype(m.dtype))).sum()
        if m.ndim == 2:
            term = term * (1.0 / m.shape[0])
        total = term if total is None else total + term
    return total + float(fixed_cost(spec, config.objective))


def initial_expected_cost(spec: SuperNetSpec, thetas: Sequence[np.ndarray],
                          config: CostConfig) -> float:
    """Noise-free expected cost under softmax(theta), for beta calibration."""
    masks = [Tensor(edge_probabilities(t).astype(np.float64)) for t in thetas]
    return float(_masked_expected_cost(spec, masks, config).data)


def resolve_cost_config(spec: SuperNetSpec, thetas: Sequence[np.ndarray],
                        config: CostConfig) -> CostConfig:
    """With auto-calibration on, pick beta so the initial weighting is 1."""
    if not config.auto_calibrate_beta:
        return config
    c0 = initial_expected_cost(spec, thetas, config)
    return dataclasses.replace(config, beta=calibrate_beta(c0, config.gamma),
                               auto_calibrate_beta=False)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    # np.float64 passes isinstance(x, float) but reprs as np.float64(...)
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


def _write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _bits_column(spec: SuperNetSpec, arch: Architecture, which: int) -> str:
    # skip contributes 0, full precision 32
    vals = [b.candidates[i].effective_bits()[which]
            for b, i in zip(spec.blocks, arch.choices)]
    return "-".join(str(v) for v in vals)


RESULTS_HEADER = ("arch_id", "epoch_sampled", "w_bits", "a_bits", "cost",
                  "compression", "test_accuracy")


def write_results_csv(path, spec: SuperNetSpec, queue: ArchQueue) -> None:
    rows = []
    for e in queue:
        if e.failed:
            acc = "failed"
        elif e.accuracy is None:
            acc = ""
        else:
            acc = repr(float(e.accuracy))
        rows.append((e.arch_id, e.epoch, _bits_column(spec, e.arch, 0),
                     _bits_column(spec, e.arch, 1), int(e.report.total),
                     float(e.report.compression), acc))
    _write_csv(path, RESULTS_HEADER, rows)


def load_results_csv(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------
# the search loop
# --------------------------------------------------------------------------

@dataclass
class SearchResult:
    net: SuperNet
    queue: ArchQueue
    cost_config: CostConfig
    metrics: List[dict] = field(default_factory=list)


def _epoch_pass(net: SuperNet, spec, data: Dataset, tau: float, cfg: SearchConfig,
                cost_cfg: CostConfig, w_opt, t_opt, epoch: int, phase: str):
    """One pass over one split; exactly one of w_opt / t_opt is stepped."""
    order_tag = _TAG_ORDER_W if phase == "weights" else _TAG_ORDER_T
    noise_tag = _TAG_GUMBEL_W if phase == "weights" else _TAG_GUMBEL_T
    order_rng = stream(cfg.seed, order_tag, epoch)
    noise_rng = stream(cfg.seed, noise_tag, epoch)
    opt = w_opt if phase == "weights" else t_opt

    sums = np.zeros(3)
    batches = 0
    for idx in _batches(len(data.labels), cfg.batch_size, order_rng):
        x = Tensor(data.images[idx])
        y = data.labels[idx]
        n = len(idx) if cfg.mask_per_example else None
        with Tape() as tape:
            masks = [sample_soft_masks(cb.theta, tau, noise_rng, n)
                     for cb in net.choice_blocks]
            logits = net(x, masks)
            ce = ops.softmax_cross_entropy(logits, y)
            cost = _masked_expected_cost(spec, masks, cost_cfg)
            loss = total_loss(ce, cost, cost_cfg)
            lval, ceval, cval = float(loss.data), float(ce.data), float(cost.data)
            if not (np.isfinite(lval) and np.isfinite(cval)):
                raise DivergedError(epoch, phase, batches, lval, ceval, cval,
                                    net.theta_arrays())
            tape.backward(loss)
        opt.step()
        net.zero_grad()
        sums += (lval, ceval, cval)
        batches += 1
    return sums / batches


class DivergedError(RuntimeError):
    """Non-finite loss during search; carries diagnostic state for the dump."""

    def __init__(self, epoch, phase, batch, loss, ce, cost, thetas):
        super().__init__(
            f"non-finite loss {loss} at epoch {epoch} ({phase} phase, "
            f"batch {batch})")
        self.diagnostic = {
            "epoch": epoch, "phase": phase, "batch": batch,
            "loss": loss, "cross_entropy": ce, "cost": cost,
            "theta": [t.tolist() for t in thetas],
        }


def _sample_event(epoch: int, cfg: SearchConfig) -> bool:
    if epoch == 0:
        return True  # baseline draws from the uniform initialization
    return epoch > cfg.warmup and epoch % cfg.sample_every == 0


def run_search(spec: SuperNetSpec, cfg: SearchConfig, cost_cfg: CostConfig,
               train: Dataset, out_dir, resolved_config: Optional[dict] = None,
               ) -> SearchResult:
    """Alternating weight/theta optimization with cadenced sampling.

    Writes config.json, theta_history.csv, metrics.csv, archs/NNN.json,
    results.csv (accuracy column blank until children are trained), and a
    final supernet checkpoint into ``out_dir``.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "archs"), exist_ok=True)

    x_w, x_t = split_search_data(train, cfg.split_ratio, cfg.seed)
    net = SuperNet(spec, stream(cfg.seed, _TAG_INIT))
    cost_cfg = resolve_cost_config(spec, net.theta_arrays(), cost_cfg)

    if resolved_config is None:
        resolved_config = {}
    echo = dict(resolved_config)
    echo["resolved"] = {
        "search": dataclasses.asdict(cfg),
        "cost": dataclasses.asdict(cost_cfg),
        "split_sizes": [len(x_w.labels), len(x_t.labels)],
    }
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(echo, f, indent=2, sort_keys=True)
        f.write("\n")

    w_opt = optim.SGDMomentum(net.weight_parameters(), cfg.lr, cfg.momentum,
                              cfg.weight_decay)
    t_opt = optim.Adam(net.thetas(), cfg.theta_lr,
                       weight_decay=cfg.theta_weight_decay)

    queue = ArchQueue()
    metrics: List[dict] = []
    theta_rows: List[tuple] = []

    def snapshot_theta(epoch: int):
        for b, t in zip(spec.blocks, net.theta_arrays()):
            theta_rows.append((epoch, b.id, *[float(v) for v in t]))

    def record(epoch, phase, means, tau, lr):
        metrics.append({"epoch": epoch, "phase": phase,
                        "loss": means[0], "ce": means[1], "cost": means[2],
                        "tau": tau, "lr": lr})

    def draw_samples(epoch: int):
        rng = stream(cfg.seed, _TAG_SAMPLE, epoch)
        thetas = net.theta_arrays()
        for j in range(cfg.samples_per_event):
            arch = sample_architecture(
                spec, thetas, rng,
                meta={"epoch": epoch, "seed": cfg.seed, "draw": j})
            queue.push(arch, epoch, j, cost_report(spec, arch, cost_cfg))

    snapshot_theta(0)  # row at epoch e = state after e full epochs
    try:
        for epoch in range(cfg.epochs):
            tau = temperature_at(cfg.schedule, epoch)
            if _sample_event(epoch, cfg):
                draw_samples(epoch)
            w_opt.lr = optim.cosine_lr(cfg.lr, epoch, cfg.epochs)
            means = _epoch_pass(net, spec, x_w, tau, cfg, cost_cfg,
                                w_opt, t_opt, epoch, "weights")
            record(epoch, "weights", means, tau, w_opt.lr)
            if epoch > cfg.warmup:
                means = _epoch_pass(net, spec, x_t, tau, cfg, cost_cfg,
                                    w_opt, t_opt, epoch, "theta")
                record(epoch, "theta", means, tau, cfg.theta_lr)
            snapshot_theta(epoch + 1)
    except DivergedError as e:
        with open(os.path.join(out_dir, "diagnostic.json"), "w") as f:
            json.dump(e.diagnostic, f, indent=2)
        _persist(out_dir, spec, net, queue, metrics, theta_rows, cost_cfg)
        raise

    _persist(out_dir, spec, net, queue, metrics, theta_rows, cost_cfg)
    return SearchResult(net, queue, cost_cfg, metrics)


def selected_architecture(spec: SuperNetSpec, thetas) -> Architecture:
    """Deterministic selection: argmax of theta per block, first max on ties."""
    choices = tuple(int(np.argmax(t)) for t in thetas)
    return Architecture(choices, {"selection": "argmax"})


def _persist(out_dir, spec, net, queue, metrics, theta_rows, cost_cfg):
    kmax = max(len(b.candidates) for b in spec.blocks)
    header = ("epoch", "block", *[f"theta{i}" for i in range(kmax)])
    padded = [row + ("",) * (2 + kmax - len(row)) for row in theta_rows]
    _write_csv(os.path.join(out_dir, "theta_history.csv"), header, padded)
    _write_csv(os.path.join(out_dir, "metrics.csv"),
               ("epoch", "phase", "loss", "ce", "cost", "tau", "lr"),
               [(m["epoch"], m["phase"], m["loss"], m["ce"], m["cost"],
                 m["tau"], m["lr"]) for m in metrics])
    for e in queue:
        obj = arch_to_json(spec, e.arch)
        obj["cost_report"] = e.report.to_json()
        with open(os.path.join(out_dir, "archs", f"{e.arch_id:03d}.json"), "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
    write_results_csv(os.path.join(out_dir, "results.csv"), spec, queue)
    checkpoint.save_checkpoint(os.path.join(out_dir, "supernet.ckpt"),
                               net.state_dict())
    thetas = net.theta_arrays()
    snap = {"theta": {b.id: [float(v) for v in t]
                      for b, t in zip(spec.blocks, thetas)}}
    with open(os.path.join(out_dir, "theta_snapshot.json"), "w") as f:
        json.dump(snap, f, indent=2, sort_keys=True)
        f.write("\n")
    sel = selected_architecture(spec, thetas)
    obj = arch_to_json(spec, sel)
    obj["cost_report"] = cost_report(spec, sel, cost_cfg).to_json()
    with open(os.path.join(out_dir, "selected.json"), "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# --------------------------------------------------------------------------
# child training and evaluation
# --------------------------------------------------------------------------

def evaluate(net, ds: Dataset, batch_size: int = 256, masks=None) -> float:
    """Top-1 accuracy in eval mode; no tape, no weight updates.

    ``masks`` routes a fixed per-block selection through a super net;
    children take the input alone.
    """
    if len(ds.labels) == 0:
        raise ValueError("empty evaluation set")
    net.eval()
    correct = 0
    for start in range(0, len(ds.labels), batch_size):
        x = Tensor(ds.images[start:start + batch_size])
        logits = net(x) if masks is None else net(x, masks)
        pred = logits.data.argmax(axis=1)
        correct += int((pred == ds.labels[start:start + batch_size]).sum())
    return correct / len(ds.labels)


@dataclass
class ChildResult:
    net: Optional[ChildNet]
    accuracy: Optional[float]
    history: List[dict]
    failed: bool = False


def train_child(spec: SuperNetSpec, arch: Architecture, train: Dataset,
                test: Dataset, cfg: ChildConfig, seed: int) -> ChildResult:
    """Fresh child trained with SGD momentum + cosine decay (+ cutout)."""
    net = build_child(spec, arch, stream(seed, _TAG_CHILD))
    opt = optim.SGDMomentum(net.parameters(), cfg.lr, cfg.momentum,
                            cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = optim.cosine_lr(cfg.lr, epoch, cfg.epochs)
        order_rng = stream(seed, _TAG_CHILD, 1, epoch)
        aug_rng = stream(seed, _TAG_CHILD, 2, epoch)
        net.train()
        total, batches = 0.0, 0
        for idx in _batches(len(train.labels), cfg.batch_size, order_rng):
            xb = train.images[idx]
            if cfg.cutout:
                xb = cutout_batch(xb, cfg.cutout, aug_rng)
            x = Tensor(xb)
            with Tape() as tape:
                loss = ops.softmax_cross_entropy(net(x), train.labels[idx])
                lval = float(loss.data)
                if not np.isfinite(lval):
                    return ChildResult(None, None, history, failed=True)
                tape.backward(loss)
            opt.step()
            net.zero_grad()
            total += lval
            batches += 1
        history.append({"epoch": epoch, "loss": total / batches, "lr": opt.lr})
    return ChildResult(net, evaluate(net, test), history)


def train_queue(spec: SuperNetSpec, queue: ArchQueue, train: Dataset,
                test: Dataset, cfg: ChildConfig, seed: int,
                out_dir=None) -> ArchQueue:
    """Train every queue entry; rewrite results.csv with accuracies filled."""
    for e in queue:
        res = train_child(spec, e.arch, train, test, cfg,
                          seed=child_seed(spec, e.arch, seed))
        e.accuracy = res.accuracy
        e.failed = res.failed
    if out_dir is not None:
        write_results_csv(os.path.join(os.fspath(out_dir), "results.csv"),
                          spec, queue)
    return queue


def child_seed(spec: SuperNetSpec, arch: Architecture, seed: int) -> int:
    """Architecture-determined seed, invariant to sampling/enumeration order."""
    import zlib
    return (seed * 1_000_003 + zlib.crc32(arch.encoding(spec).encode())) % (2 ** 31)
