"""Training pairs, the pairwise multi-metric loss, and the optimization loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .data import ScoredPool
from .encoder import PairReranker
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

LOSS_FORMS = ("symmetric", "printed")


@dataclass
class PairSample:
    source: str
    cand_a: str
    cand_b: str
    labels: np.ndarray  # z_a per metric; z_b = 1 - z_a
    index_a: int = -1
    index_b: int = -1

    def swapped(self) -> "PairSample":
        return PairSample(self.source, self.cand_b, self.cand_a, 1 - self.labels,
                          self.index_b, self.index_a)


@dataclass
class TrainConfig:
    k_pairs: int = 1
    epochs: int = 5
    batch_size: int = 64
    max_learning_rate: float = 1e-5
    warmup_ratio: float = 0.05
    schedule: str = "linear"
    optimizer: str = "adafactor"
    loss_form: str = "symmetric"
    heldout_fraction: float = 0.05
    seed: int = 0

    def validate(self) -> "TrainConfig":
        problems = []
        if self.k_pairs < 1:
            problems.append("k_pairs must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.max_learning_rate > 0:
            problems.append("max_learning_rate must be positive")
        if not 0 <= self.warmup_ratio < 1:
            problems.append("warmup_ratio must be in [0, 1)")
        if self.schedule != "linear":
            problems.append("only the linear schedule is supported")
        if self.optimizer not in ("adafactor", "adamw"):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        if self.loss_form not in LOSS_FORMS:
            problems.append(f"loss_form must be one of {LOSS_FORMS}")
        if not 0 <= self.heldout_fraction < 1:
            problems.append("heldout_fraction must be in [0, 1)")
        if problems:
            raise ConfigError("invalid training config: " + "; ".join(problems))
        return self


def aggregate_ranks(scores: np.ndarray) -> np.ndarray:
    """Mean over metrics of each candidate's fractional rank (1 = best, ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    ranks = np.column_stack([rankdata(-scores[:, j], method="average")
                             for j in range(scores.shape[1])])
    return ranks.mean(axis=1)


def pair_labels(scores_a: np.ndarray, scores_b: np.ndarray) -> np.ndarray:
    return (np.asarray(scores_a) >= np.asarray(scores_b)).astype(np.int64)


def select_training_pairs(pool: ScoredPool, k: int, rng: np.random.Generator,
                          metrics: Sequence[str]) -> list[PairSample]:
    """Couple the r-th best with the r-th worst candidate, r < k, in random slot order."""
    m = len(pool)
    if k < 1:
        raise ValueError("k must be >= 1")
    if m < 2 * k:
        raise DataError(f"pool {pool.example_id!r} has {m} candidates, needs {2 * k} for k={k}")
    scores = pool.score_matrix(metrics)
    order = np.argsort(aggregate_ranks(scores), kind="stable")
    pairs = []
    for r in range(k):
        a, b = int(order[r]), int(order[m - 1 - r])
        if rng.random() < 0.5:
            a, b = b, a
        pairs.append(PairSample(pool.source, pool.candidates[a].text, pool.candidates[b].text,
                                pair_labels(scores[a], scores[b]), a, b))
    return pairs


def pair_loss(s_a, s_b, labels, form: str = "symmetric") -> torch.Tensor:
    """Per-metric binary cross-entropy on both slots, averaged over metrics (and batch).

    ``form="printed"`` uses ``-z log sigmoid(s_a) - (1 - z_b) log sigmoid(s_b)`` with
    ``z_b = 1 - z``, kept for comparison only.
    """
    s_a = torch.as_tensor(s_a, dtype=torch.float64) if not torch.is_tensor(s_a) else s_a
    s_b = torch.as_tensor(s_b, dtype=torch.float64) if not torch.is_tensor(s_b) else s_b
    if s_a.shape != s_b.shape:
        raise ValueError(f"score shapes differ: {tuple(s_a.shape)} vs {tuple(s_b.shape)}")
    if not (torch.isfinite(s_a).all() and torch.isfinite(s_b).all()):
        raise ValueError("non-finite scores in pair_loss")
    z = torch.as_tensor(labels, dtype=s_a.dtype, device=s_a.device).expand_as(s_a)
    if form == "symmetric":
        per_metric = (-(z * F.logsigmoid(s_a) + (1 - z) * F.logsigmoid(-s_a))
                      - ((1 - z) * F.logsigmoid(s_b) + z * F.logsigmoid(-s_b)))
    elif form == "printed":
        z_b = 1 - z
        per_metric = -z * F.logsigmoid(s_a) - (1 - z_b) * F.logsigmoid(s_b)
    else:
        raise ValueError(f"unknown loss form {form!r}")
    return per_metric.mean()


def linear_warmup_decay(total_steps: int, warmup_ratio: float) -> Callable[[int], float]:
    warmup = math.ceil(warmup_ratio * total_steps)

    def factor(step: int) -> float:
        if step < warmup:
            return step / max(1, warmup)
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))
    return factor


def _optimizer(name, params, lr):
    if name == "adafactor":
        return torch.optim.Adafactor(params, lr=lr)
    return torch.optim.AdamW(params, lr=lr)


def heldout_pair_accuracy(model: PairReranker, samples: Sequence[PairSample]) -> float:
    """Share of (pair, orientation, metric) cells where the score sign matches the label."""
    if not samples:
        return float("nan")
    both = list(samples) + [s.swapped() for s in samples]
    s_a, s_b = model.score_pairs([(s.source, s.cand_a, s.cand_b) for s in both])
    z = np.stack([s.labels for s in both])
    return float(np.mean((s_a - s_b > 0) == (z == 1)))


@dataclass
class TrainResult:
    model: PairReranker
    log: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    heldout_acc: list[float] = field(default_factory=list)
    best_heldout_acc: float | None = None
    best_path: Path | None = None
    best_state: dict | None = field(default=None, repr=False)


def split_heldout(pools: Sequence[ScoredPool], fraction: float, seed: int):
    n = len(pools)
    n_held = 0 if n < 2 or fraction == 0 else min(n - 1, max(1, round(fraction * n)))
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    held = sorted(perm[:n_held].tolist())
    held_set = set(held)
    return [pools[i] for i in range(n) if i not in held_set], [pools[i] for i in held]


def train(model: PairReranker, pools: Sequence[ScoredPool], cfg: TrainConfig,
          out_dir=None, resume: bool = False) -> TrainResult:
    """Minimize the pair loss with warmup + linear decay; keep the best held-out checkpoint.

    With ``out_dir`` set, writes ``best.pt``, ``last.pt`` and ``train_log.jsonl`` there.
    """
    cfg.validate()
    if not pools:
        raise DataError("no training pools")
    metrics = model.metrics
    for p in pools:
        if not p.is_scored(metrics):
            raise ConfigError(f"pool {p.example_id!r} is not scored for the model's metrics {metrics}")
    train_pools, held_pools = split_heldout(pools, cfg.heldout_fraction, cfg.seed)
    held_samples = [s for p in held_pools
                    for s in select_training_pairs(p, cfg.k_pairs, np.random.default_rng([cfg.seed, 1]),
                                                   metrics)]
    steps_per_epoch = math.ceil(len(train_pools) * cfg.k_pairs / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    params = list(model.model.parameters())
    opt = _optimizer(cfg.optimizer, params, cfg.max_learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, linear_warmup_decay(total_steps, cfg.warmup_ratio))
    result = TrainResult(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = out_dir / "train_log.jsonl" if out_dir else None
    start_epoch, step = 0, 0
    best = None
    if resume and out_dir and (out_dir / "last.pt").exists():
        state = torch.load(out_dir / "last.pt", map_location="cpu", weights_only=False)
        model.model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        start_epoch, step, best = state["epoch"], state["step"], state["best"]
        result.epoch_losses = list(state["epoch_losses"])
        result.heldout_acc = list(state["heldout_acc"])
        if (out_dir / "best.pt").exists():
            result.best_state = torch.load(out_dir / "best.pt", map_location="cpu",
                                           weights_only=True)["state_dict"]
        if log_path.exists():
            # Drop records from a partial epoch after the last checkpoint.
            records = [json.loads(line) for line in log_path.read_text().splitlines() if line]
            result.log = [r for r in records if r["step"] <= step]
            log_path.write_text("".join(json.dumps(r) + "\n" for r in result.log))
        log.info("resuming at epoch %d, step %d", start_epoch, step)
    elif log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    with torch.random.fork_rng(devices=[]):
        for epoch in range(start_epoch, cfg.epochs):
            torch.manual_seed(cfg.seed * 100_003 + epoch)
            rng = np.random.default_rng([cfg.seed, 2, epoch])
            samples = [s for p in train_pools for s in select_training_pairs(p, cfg.k_pairs, rng, metrics)]
            order = rng.permutation(len(samples))
            model.model.train()
            losses = []
            for start in range(0, len(samples), cfg.batch_size):
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                inputs = [model.assemble(s.source, s.cand_a, s.cand_b) for s in batch]
                s_a, s_b = model.forward(inputs)
                labels = torch.tensor(np.stack([s.labels for s in batch]), dtype=s_a.dtype)
                loss = pair_loss(s_a, s_b, labels, cfg.loss_form)
                opt.zero_grad()
                loss.backward()
                opt.step()
                lr = opt.param_groups[0]["lr"]
                sched.step()
                step += 1
                losses.append(loss.item())
                rec = {"step": step, "loss": losses[-1], "lr": lr}
                result.log.append(rec)
                if log_path is not None:
                    with open(log_path, "a") as fh:
                        fh.write(json.dumps(rec) + "\n")
            model.model.eval()
            result.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
            acc = heldout_pair_accuracy(model, held_samples) if held_samples else None
            result.heldout_acc.append(acc)
            epoch_rec = {"step": step, "epoch": epoch + 1, "loss": result.epoch_losses[-1],
                         "lr": opt.param_groups[0]["lr"]}
            if acc is not None:
                epoch_rec["heldout_pair_acc"] = acc
            result.log.append(epoch_rec)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(epoch_rec) + "\n")
            log.info("epoch %d loss %.4f heldout_pair_acc %s", epoch + 1, result.epoch_losses[-1], acc)
            improved = best is None or (acc is not None and acc > best)
            if improved:
                best = acc if acc is not None else best
                if out_dir is not None:
                    model.save(out_dir / "best.pt", meta={"epoch": epoch + 1, "heldout_pair_acc": acc,
                                                          "train_config": asdict(cfg)})
                result.best_state = copy.deepcopy(model.model.state_dict())
            if out_dir is not None:
                tmp = out_dir / "last.pt.tmp"
                torch.save({"model": model.model.state_dict(), "optimizer": opt.state_dict(),
                            "scheduler": sched.state_dict(), "epoch": epoch + 1, "step": step,
                            "best": best, "epoch_losses": result.epoch_losses,
                            "heldout_acc": result.heldout_acc}, tmp)
                tmp.replace(out_dir / "last.pt")

    if result.best_state is not None:
        model.model.load_state_dict(result.best_state)
    model.model.eval()
    result.best_heldout_acc = best
    if out_dir is not None:
        if not (out_dir / "best.pt").exists():
            model.save(out_dir / "best.pt", meta={"epoch": 0, "train_config": asdict(cfg)})
        result.best_path = out_dir / "best.pt"
    return result


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                            step: float = 1e-4, floor: float = 1e-6) -> float:
    """Max relative error between autograd and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                num = (up - down) / (2 * step)
                a = gflat[i].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def gradient_check(model: PairReranker, sample: PairSample, step: float = 1e-4,
                   form: str = "symmetric") -> float:
    """Check the pair-loss gradient w.r.t. the head parameters in float64."""
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    if model.config.width > 32:
        raise ValueError("gradient_check is meant for tiny models (width <= 32)")
    scorer = copy.deepcopy(model.model).double().eval()
    ids, mask, anchors = model.collate([model.assemble(sample.source, sample.cand_a, sample.cand_b)])
    with torch.no_grad():
        states = scorer.anchor_states(ids, mask, anchors)
    labels = torch.tensor(sample.labels, dtype=torch.float64)

    def loss_fn():
        s_a, s_b = scorer.head_scores(*states)
        return pair_loss(s_a[0], s_b[0], labels, form)
    return finite_difference_check(loss_fn, list(scorer.head.parameters()), step)
