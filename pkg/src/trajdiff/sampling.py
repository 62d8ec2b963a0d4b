"""Reverse-process inference: generate trajectory latents, rank items.

History slots are pinned to their clean embeddings for every denoiser call;
only the k trajectory slots start from Gaussian noise and walk backwards
through an evenly strided subset of the training steps. The final predicted
clean latent is scored against the full catalogue and the top K ids per
position form the output lists. Earlier positions' picks are not excluded
from later lists unless exclude_previous is set.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
import torch

from .data import Batch, make_batch
from .exceptions import ConfigError
from .metrics import EvalReport, aggregate, hit_ndcg_matrices, nll_from_scores
from .model import PreferenceDenoiser
from .schedule import NoiseSchedule, posterior_step, strided_steps
from .validation import check_positive_int


def sample_scores(
    model: PreferenceDenoiser,
    sched: NoiseSchedule,
    history: torch.Tensor,
    history_mask: torch.Tensor,
    n_steps: int,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Run the reverse process for one batch.

    Returns (scores [B, k, M], trajectory latents [B, k, d], denoiser call
    count). Deterministic for a fixed generator state.
    """
    cfg = model.config
    steps = strided_steps(sched.n_steps, n_steps)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            h0 = model.embed_history(history)
            batch = history.shape[0]
            z = torch.randn(
                batch, cfg.k, cfg.embed_dim, generator=generator, dtype=h0.dtype
            )
            n_calls = 0
            for i, t in enumerate(steps):
                x_t = torch.cat([h0, z], dim=1)
                x0_hat = model.denoise(x_t, t, h0, history_mask)
                n_calls += 1
                z_hat = x0_hat[:, cfg.n_max :, :]
                t_prev = steps[i + 1] if i + 1 < len(steps) else 0
                if t_prev == 0:
                    z = z_hat
                else:
                    noise = torch.randn(
                        batch, cfg.k, cfg.embed_dim, generator=generator, dtype=h0.dtype
                    )
                    z = posterior_step(z, z_hat, t, sched, noise, t_prev=t_prev)
            scores = model.score_items(z)
    finally:
        model.train(was_training)
    return scores, z, n_calls


def topk_lists(
    scores: torch.Tensor, topk: int, exclude_previous: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Ranked ids and their scores per position: [B, k, M] -> [B, k, topk].

    With exclude_previous the rank-1 pick of each earlier position is barred
    from later positions' lists.
    """
    check_positive_int(topk, "topk")
    if topk > scores.shape[-1]:
        raise ConfigError(f"topk {topk} exceeds catalogue size {scores.shape[-1]}")
    if not exclude_previous:
        top = scores.topk(topk, dim=-1)
        return top.indices + 1, top.values
    scores = scores.clone()
    batch, k, _ = scores.shape
    ids = torch.zeros(batch, k, topk, dtype=torch.long)
    vals = torch.zeros(batch, k, topk, dtype=scores.dtype)
    rows = torch.arange(batch)
    for j in range(k):
        top = scores[:, j, :].topk(topk, dim=-1)
        ids[:, j] = top.indices + 1
        vals[:, j] = top.values
        for later in range(j + 1, k):
            scores[rows, later, top.indices[:, 0]] = float("-inf")
    return ids, vals


def sample_trajectory(
    history,
    model: PreferenceDenoiser,
    sched: NoiseSchedule,
    n_steps: int = 1,
    topk: int = 10,
    generator: torch.Generator | None = None,
    exclude_previous: bool = False,
):
    """Predict ranked lists for a single history.

    history may be shorter than n_max; it is left-padded here. Returns
    (ranked ids [k, topk], scores [k, topk]).
    """
    cfg = model.config
    items = [int(i) for i in history if int(i) != 0]
    if not items:
        raise ConfigError("history must contain at least one real item")
    padded = [0] * (cfg.n_max - len(items[-cfg.n_max :])) + items[-cfg.n_max :]
    hist = torch.tensor([padded], dtype=torch.long)
    scores, _, _ = sample_scores(
        model, sched, hist, hist != 0, n_steps, generator
    )
    ids, vals = topk_lists(scores, topk, exclude_previous)
    return ids[0], vals[0]


@dataclass(frozen=True)
class PredictionSet:
    """Per-example ranked lists plus inference timing."""

    records: list[dict]
    wall_clock: float
    n_steps: int
    topk: int

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
            for r in self.records
        )


def batch_predict(
    examples,
    model: PreferenceDenoiser,
    sched: NoiseSchedule,
    n_steps: int = 1,
    topk: int = 10,
    batch_size: int = 256,
    seed: int = 0,
    exclude_previous: bool = False,
    out_path=None,
) -> PredictionSet:
    """Predict ranked lists for every example and optionally persist them
    as line-delimited JSON records {user, topk, ids, scores, elapsed}."""
    generator = torch.Generator().manual_seed(seed)
    records: list[dict] = []
    total = 0.0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = make_batch(chunk)
        begin = time.perf_counter()
        scores, _, _ = sample_scores(
            model,
            sched,
            torch.from_numpy(batch.history),
            torch.from_numpy(batch.history_mask),
            n_steps,
            generator,
        )
        ids, vals = topk_lists(scores, topk, exclude_previous)
        elapsed = time.perf_counter() - begin
        per_example = elapsed / len(chunk)
        for row, ex in enumerate(chunk):
            records.append(
                {
                    "user": ex.user,
                    "n_steps": n_steps,
                    "topk": topk,
                    "ids": ids[row].tolist(),
                    "scores": [[round(float(v), 8) for v in pos] for pos in vals[row].tolist()],
                    "elapsed": per_example,
                }
            )
        total += elapsed
    pred = PredictionSet(records=records, wall_clock=total, n_steps=n_steps, topk=topk)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(pred.to_jsonl())
    return pred


def evaluate_examples(
    model: PreferenceDenoiser,
    examples,
    sched: NoiseSchedule,
    n_steps: int = 1,
    topk_values=(5, 10, 20),
    batch_size: int = 256,
    seed: int = 0,
) -> EvalReport:
    """Full inference-then-metrics pass over a split, streamed per batch."""
    if not examples:
        raise ConfigError("cannot evaluate an empty example list")
    generator = torch.Generator().manual_seed(seed)
    hit_parts: dict[int, list[np.ndarray]] = {K: [] for K in topk_values}
    ndcg_parts: dict[int, list[np.ndarray]] = {K: [] for K in topk_values}
    nll_parts: list[np.ndarray] = []
    for start in range(0, len(examples), batch_size):
        batch = make_batch(examples[start : start + batch_size])
        scores, _, _ = sample_scores(
            model,
            sched,
            torch.from_numpy(batch.history),
            torch.from_numpy(batch.history_mask),
            n_steps,
            generator,
        )
        scores_np = scores.double().numpy()
        hits, ndcgs = hit_ndcg_matrices(scores_np, batch.target, topk_values)
        for K in topk_values:
            hit_parts[K].append(hits[K])
            ndcg_parts[K].append(ndcgs[K])
        nll_parts.append(nll_from_scores(scores_np, batch.target))
    hits = {K: np.concatenate(hit_parts[K], axis=0) for K in topk_values}
    ndcgs = {K: np.concatenate(ndcg_parts[K], axis=0) for K in topk_values}
    return aggregate(hits, ndcgs, np.concatenate(nll_parts, axis=0))
