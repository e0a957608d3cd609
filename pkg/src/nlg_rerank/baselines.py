"""Pointwise baselines: a cosine-similarity scorer and a per-metric binary classifier.

Both reuse the pair model's encoder family, vocabulary, truncation limits and
checkpoint format so that comparisons isolate the objective.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import ScoredPool
from .encoder import (
    BOS,
    CAND1,
    SEP,
    SOURCE,
    ModelConfig,
    ScoreHead,
    TextEncoder,
    Vocab,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ConfigError, DataError
from .metrics import tokenize
from .trainer import (
    TrainConfig,
    _optimizer,
    aggregate_ranks,
    finite_difference_check,
    linear_warmup_decay,
    select_training_pairs,
    split_heldout,
)

log = logging.getLogger(__name__)

VARIANTS = ("simcls", "summareranker")
EPS = 1e-7
DISPLAY_NAMES = {"simcls": "SimCLS", "summareranker": "SummaReranker (our setup)",
                 "pairreranker": "PairReranker"}


def cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; zero-norm rows are an error."""
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if bool((nu == 0).any() or (nv == 0).any()):
        raise DataError("zero-norm embedding in cosine similarity")
    return (u * v).sum(-1) / (nu * nv)


class PointwiseScorer(nn.Module):
    def __init__(self, encoder: nn.Module, width: int, n_metrics: int, variant: str):
        super().__init__()
        self.encoder = encoder
        self.variant = variant
        self.head = ScoreHead(width, width, n_metrics) if variant == "summareranker" else None

    def first_token(self, ids, mask):
        return self.encoder(ids, mask)[:, 0]

    def forward(self, ids, mask):
        h = self.first_token(ids, mask)
        return h if self.head is None else self.head(h)


class PointwiseReranker:
    """Scores each (source, candidate) independently; selection is an argmax."""

    def __init__(self, config: ModelConfig, vocab: Vocab, variant: str, seed: int = 0):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown baseline variant {variant!r}; expected one of {VARIANTS}")
        self.config = config.validate()
        self.vocab = vocab
        self.variant = variant
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            enc = TextEncoder(len(vocab), config.width, config.layers, config.heads, config.ff_mult,
                              config.dropout, config.capacity, config.use_positions)
            self.model = PointwiseScorer(enc, config.width, len(config.metrics), variant)
        self.model.eval()
        self.meta: dict = {}

    @property
    def metrics(self) -> list[str]:
        return list(self.config.metrics)

    def _batch(self, seqs: Sequence[list[str]]):
        longest = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), longest), self.vocab.pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = torch.tensor(self.vocab.encode(s))
        return ids, ids != self.vocab.pad_id

    def _text_seq(self, text: str, limit: int) -> list[str]:
        toks = tokenize(text)
        if not toks:
            raise DataError("empty text cannot be encoded")
        return [BOS, *toks[:limit], SEP]

    def _joint_seq(self, source: str, cand: str) -> list[str]:
        lim = self.config.limits
        src, c = tokenize(source), tokenize(cand)
        if not src or not c:
            raise DataError("empty source or candidate cannot be encoded")
        return [BOS, SOURCE, *src[:lim.source_max], SEP, CAND1, *c[:lim.cand_max], SEP]

    def embed(self, texts: Sequence[str], limit: int) -> torch.Tensor:
        """First-token final-layer states of texts encoded on their own."""
        return self.model(*self._batch([self._text_seq(t, limit) for t in texts]))

    def forward_pool(self, source: str, candidates: Sequence[str], target: str | None = None):
        """Differentiable scores for one pool.

        simcls: (cosine per candidate, cosine of the target or None).
        summareranker: (per-metric logits of shape (m, |metrics|), None).
        """
        lim = self.config.limits
        if self.variant == "simcls":
            texts = [source, *candidates] + ([target] if target else [])
            h = self.model(*self._batch([self._text_seq(texts[0], lim.source_max)] +
                                        [self._text_seq(t, lim.cand_max) for t in texts[1:]]))
            sims = cosine(h[1:], h[:1].expand(len(texts) - 1, -1))
            if target:
                return sims[:-1], sims[-1]
            return sims, None
        return self.model(*self._batch([self._joint_seq(source, c) for c in candidates])), None

    @torch.no_grad()
    def score_candidates(self, source: str, candidates: Sequence[str]) -> np.ndarray:
        """Selection score per candidate: cosine, or mean probability over metric heads."""
        self.model.eval()
        out, _ = self.forward_pool(source, candidates)
        if self.variant == "summareranker":
            out = torch.sigmoid(out.double()).mean(-1)
        return out.double().numpy()

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, self.variant, self.config, self.vocab, self.model.state_dict(), meta)

    @classmethod
    def load(cls, path, variant: str | None = None, metrics: Sequence[str] | None = None):
        ckpt = load_checkpoint(path, variant, metrics)
        if ckpt["variant"] not in VARIANTS:
            raise ConfigError(f"{path} holds a {ckpt['variant']!r} model, not a pointwise baseline")
        obj = cls(ModelConfig(**ckpt["model_config"]), Vocab(ckpt["vocab"]), ckpt["variant"])
        obj.model.load_state_dict(ckpt["state_dict"])
        obj.model.eval()
        obj.meta = ckpt.get("meta", {})
        return obj


def simcls_score(model: PointwiseReranker, source: str, candidate: str) -> float:
    if model.variant != "simcls":
        raise ConfigError("simcls_score needs a simcls model")
    return float(model.score_candidates(source, [candidate])[0])


def simcls_loss(scores, ref_score, lam: float, metric_scores=None) -> torch.Tensor:
    """Reference hinge plus rank-scaled pairwise hinges over candidates sorted best first.

    ``metric_scores`` (same order as ``scores``) is used to verify the sort.
    """
    if lam < 0:
        raise ValueError("margin lambda must be >= 0")
    scores = torch.as_tensor(scores, dtype=torch.float64) if not torch.is_tensor(scores) else scores
    ref = torch.as_tensor(ref_score, dtype=scores.dtype)
    if metric_scores is not None:
        ms = np.asarray(metric_scores, dtype=np.float64)
        if np.any(np.diff(ms) > 0):
            raise ValueError("candidates must be sorted by metric score, best first")
    n = scores.shape[0]
    loss = torch.clamp(scores - ref, min=0).sum()
    if n > 1:
        i, j = torch.triu_indices(n, n, offset=1)
        loss = loss + torch.clamp(scores[j] - scores[i] + (j - i).to(scores.dtype) * lam, min=0).sum()
    return loss


def summareranker_loss(probs, best_index, eps: float = EPS) -> torch.Tensor:
    """``-log p* - sum_{i != *} log(1 - p_i)`` per metric, averaged over metrics.

    ``probs`` is (m,) or (m, |metrics|); ``best_index`` an int or one index per metric.
    Probabilities at exactly 0 or 1 are clamped to [eps, 1 - eps] with a warning.
    """
    p = torch.as_tensor(probs, dtype=torch.float64) if not torch.is_tensor(probs) else probs
    if p.dim() == 1:
        p = p[:, None]
    m, k = p.shape
    best = [int(best_index)] * k if np.ndim(best_index) == 0 else [int(b) for b in best_index]
    if len(best) != k or not all(0 <= b < m for b in best):
        raise ValueError(f"best_index {best_index!r} invalid for {m} candidates x {k} metrics")
    if bool(((p < 0) | (p > 1)).any()):
        raise ValueError("probabilities must lie in [0, 1]")
    if bool(((p <= 0) | (p >= 1)).any()):
        warnings.warn(f"probabilities at 0 or 1 clamped to [{eps}, 1 - {eps}]", RuntimeWarning)
    p = p.clamp(eps, 1 - eps)
    target = torch.zeros_like(p)
    target[best, torch.arange(k)] = 1
    per_metric = -(target * p.log() + (1 - target) * (1 - p).log()).sum(0)
    return per_metric.mean()


def rank_pointwise(model, pool: ScoredPool) -> int:
    """Argmax of the selection score; ties go to the lowest index."""
    if len(pool) == 0:
        raise DataError(f"pool {pool.example_id!r} is empty")
    scores = np.asarray(model.score_candidates(pool.source, pool.texts), dtype=np.float64)
    return int(np.argmax(scores))


def _sorted_pool(pool: ScoredPool, metrics):
    mat = pool.score_matrix(metrics)
    order = np.argsort(aggregate_ranks(mat), kind="stable")
    return [pool.candidates[i].text for i in order], -aggregate_ranks(mat)[order]


def pool_loss(model: PointwiseReranker, pool: ScoredPool, lam: float = 0.01) -> torch.Tensor:
    metrics = model.metrics
    if model.variant == "simcls":
        texts, key = _sorted_pool(pool, metrics)
        sims, ref = model.forward_pool(pool.source, texts, pool.target)
        return simcls_loss(sims, ref, lam, key)
    logits, _ = model.forward_pool(pool.source, pool.texts)
    best = np.argmax(pool.score_matrix(metrics), axis=0)
    return summareranker_loss(torch.sigmoid(logits), best)


def heldout_pair_accuracy(model: PointwiseReranker, pools: Sequence[ScoredPool], k: int, seed: int) -> float:
    """Pair accuracy on the same held-out pairs the pair model is judged on, from pointwise scores."""
    hits, total = 0, 0
    for pool in pools:
        scores = model.score_candidates(pool.source, pool.texts)
        for s in select_training_pairs(pool, k, np.random.default_rng([seed, 1]), model.metrics):
            for a, b, z in ((s.index_a, s.index_b, s.labels), (s.index_b, s.index_a, 1 - s.labels)):
                hits += int(np.sum((scores[a] - scores[b] > 0) == (z == 1)))
                total += len(z)
    return hits / total if total else float("nan")


def train_pointwise(model: PointwiseReranker, pools: Sequence[ScoredPool], cfg: TrainConfig,
                    out_dir=None, lam: float = 0.01, pools_per_step: int | None = None) -> dict:
    """Same schedule, optimizer and held-out rule as the pair trainer; one loss per pool.

    ``pools_per_step`` defaults to ``batch_size // k_pairs`` so one step sees as many
    pools as the pair trainer does.
    """
    cfg.validate()
    if not pools:
        raise DataError("no training pools")
    for p in pools:
        if not p.is_scored(model.metrics):
            raise ConfigError(f"pool {p.example_id!r} is not scored for {model.metrics}")
        if model.variant == "simcls" and p.transfer_mode:
            raise DataError(f"pool {p.example_id!r} has no target; simcls training needs references")
    per_step = pools_per_step or max(1, cfg.batch_size // cfg.k_pairs)
    train_pools, held = split_heldout(pools, cfg.heldout_fraction, cfg.seed)
    total = math.ceil(len(train_pools) / per_step) * cfg.epochs
    opt = _optimizer(cfg.optimizer, list(model.model.parameters()), cfg.max_learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, linear_warmup_decay(total, cfg.warmup_ratio))
    out_dir = Path(out_dir) if out_dir is not None else None
    log_lines, epoch_losses, accs = [], [], []
    best, best_state, step = None, None, 0
    with torch.random.fork_rng(devices=[]):
        for epoch in range(cfg.epochs):
            torch.manual_seed(cfg.seed * 100_003 + epoch)
            order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(len(train_pools))
            model.model.train()
            losses = []
            for start in range(0, len(order), per_step):
                batch = [train_pools[i] for i in order[start:start + per_step]]
                loss = torch.stack([pool_loss(model, p, lam) for p in batch]).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                lr = opt.param_groups[0]["lr"]
                sched.step()
                step += 1
                losses.append(loss.item())
                log_lines.append({"step": step, "loss": losses[-1], "lr": lr})
            model.model.eval()
            epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
            acc = heldout_pair_accuracy(model, held, cfg.k_pairs, cfg.seed) if held else None
            accs.append(acc)
            rec = {"step": step, "epoch": epoch + 1, "loss": epoch_losses[-1], "lr": opt.param_groups[0]["lr"]}
            if acc is not None:
                rec["heldout_pair_acc"] = acc
            log_lines.append(rec)
            log.info("%s epoch %d loss %.4f heldout_pair_acc %s", model.variant, epoch + 1,
                     epoch_losses[-1], acc)
            if best is None or (acc is not None and acc > best):
                best = acc if acc is not None else best
                best_state = copy.deepcopy(model.model.state_dict())
                if out_dir is not None:
                    model.save(out_dir / "best.pt", meta={"epoch": epoch + 1, "heldout_pair_acc": acc,
                                                          "train_config": asdict(cfg), "lambda": lam})
    if best_state is not None:
        model.model.load_state_dict(best_state)
    model.model.eval()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if not (out_dir / "best.pt").exists():
            model.save(out_dir / "best.pt", meta={"epoch": 0, "train_config": asdict(cfg)})
        (out_dir / "train_log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in log_lines))
    return {"log": log_lines, "epoch_losses": epoch_losses, "heldout_acc": accs, "best_heldout_acc": best}


def gradient_check_pointwise(model: PointwiseReranker, pool: ScoredPool, step: float = 1e-4,
                             lam: float = 0.01) -> float:
    """Finite-difference check of the baseline loss on a float64 copy of a tiny model.

    Checks the scoring head for the classifier and the final encoder norm for the
    cosine scorer, which has no head.
    """
    if model.config.width > 32:
        raise ValueError("gradient check is meant for tiny models (width <= 32)")
    twin = copy.copy(model)
    twin.model = copy.deepcopy(model.model).double().eval()
    params = list((twin.model.head or twin.model.encoder.norm).parameters())
    return finite_difference_check(lambda: pool_loss(twin, pool, lam), params, step)
