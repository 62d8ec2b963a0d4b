"""Trajectory-level evaluation: position-wise hit/NDCG rates, their
arithmetic and geometric sequence aggregates, exact-sequence match, and
full-vocabulary perplexity.

Per-position rates average over examples first; the sequence-level numbers
then combine the k per-position rates (arithmetic mean for Mean*, geometric
mean for Seq*). SeqMatch@K counts trajectories whose every position is hit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ConfigError


def rank_of(target: int, ranked) -> int | None:
    """1-based rank of target inside a ranked id list, None if absent."""
    for pos, item in enumerate(ranked, start=1):
        if item == target:
            return pos
    return None


def position_hit(target: int, ranked, topk: int) -> int:
    rank = rank_of(target, ranked[:topk])
    return 0 if rank is None else 1


def position_ndcg(target: int, ranked, topk: int) -> float:
    """1 / log2(rank + 1) when the target appears in the top K, else 0."""
    rank = rank_of(target, ranked[:topk])
    return 0.0 if rank is None else 1.0 / np.log2(rank + 1.0)


def nll_from_scores(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Full-vocabulary softmax negative log-likelihood per position.

    scores: [N, k, M] with column i scoring item id i + 1; targets: [N, k].
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.ndim != 3 or targets.shape != scores.shape[:2]:
        raise ConfigError(
            f"scores [N, k, M] and targets [N, k] required, got "
            f"{scores.shape} and {targets.shape}"
        )
    m = scores.max(axis=-1)
    log_z = np.log(np.exp(scores - m[..., None]).sum(axis=-1)) + m
    n, k = targets.shape
    picked = scores[np.arange(n)[:, None], np.arange(k)[None, :], targets - 1]
    return log_z - picked


@dataclass(frozen=True)
class EvalReport:
    """Aggregated metrics for one evaluation pass.

    Dict-valued fields are keyed by the cutoff K; per-position vectors have
    one entry per trajectory slot.
    """

    k: int
    topk_values: tuple[int, ...]
    n_examples: int
    per_position_hr: dict[int, tuple[float, ...]]
    per_position_ndcg: dict[int, tuple[float, ...]]
    mean_hr: dict[int, float]
    seq_hr: dict[int, float]
    mean_ndcg: dict[int, float]
    seq_ndcg: dict[int, float]
    seq_match: dict[int, float]
    ppl: float | None = None
    ln_ppl: float | None = None

    def to_records(self) -> list[dict]:
        """One flat record per cutoff, plus one perplexity record."""
        records = []
        for topk in self.topk_values:
            records.append(
                {
                    "topk": topk,
                    "n_examples": self.n_examples,
                    "per_position_hr": list(self.per_position_hr[topk]),
                    "per_position_ndcg": list(self.per_position_ndcg[topk]),
                    "mean_hr": self.mean_hr[topk],
                    "seq_hr": self.seq_hr[topk],
                    "mean_ndcg": self.mean_ndcg[topk],
                    "seq_ndcg": self.seq_ndcg[topk],
                    "seq_match": self.seq_match[topk],
                }
            )
        records.append(
            {"topk": None, "n_examples": self.n_examples, "ppl": self.ppl, "ln_ppl": self.ln_ppl}
        )
        return records

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
            for r in self.to_records()
        )

    def format_table(self) -> str:
        header = f"{'K':>4}  {'MeanHR':>8}  {'SeqHR':>8}  {'MeanNDCG':>8}  {'SeqNDCG':>8}  {'SeqMatch':>8}"
        lines = [header, "-" * len(header)]
        for topk in self.topk_values:
            lines.append(
                f"{topk:>4}  {self.mean_hr[topk]:>8.4f}  {self.seq_hr[topk]:>8.4f}  "
                f"{self.mean_ndcg[topk]:>8.4f}  {self.seq_ndcg[topk]:>8.4f}  "
                f"{self.seq_match[topk]:>8.4f}"
            )
        if self.ppl is not None:
            lines.append(f"ppl {self.ppl:.6f}  ln_ppl {self.ln_ppl:.6f}")
        lines.append(f"n_examples {self.n_examples}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "topk_values": list(self.topk_values),
            "n_examples": self.n_examples,
            "per_position_hr": {str(K): list(v) for K, v in self.per_position_hr.items()},
            "per_position_ndcg": {str(K): list(v) for K, v in self.per_position_ndcg.items()},
            "mean_hr": {str(K): v for K, v in self.mean_hr.items()},
            "seq_hr": {str(K): v for K, v in self.seq_hr.items()},
            "mean_ndcg": {str(K): v for K, v in self.mean_ndcg.items()},
            "seq_ndcg": {str(K): v for K, v in self.seq_ndcg.items()},
            "seq_match": {str(K): v for K, v in self.seq_match.items()},
            "ppl": self.ppl,
            "ln_ppl": self.ln_ppl,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            k=data["k"],
            topk_values=tuple(data["topk_values"]),
            n_examples=data["n_examples"],
            per_position_hr={int(K): tuple(v) for K, v in data["per_position_hr"].items()},
            per_position_ndcg={int(K): tuple(v) for K, v in data["per_position_ndcg"].items()},
            mean_hr={int(K): v for K, v in data["mean_hr"].items()},
            seq_hr={int(K): v for K, v in data["seq_hr"].items()},
            mean_ndcg={int(K): v for K, v in data["mean_ndcg"].items()},
            seq_ndcg={int(K): v for K, v in data["seq_ndcg"].items()},
            seq_match={int(K): v for K, v in data["seq_match"].items()},
            ppl=data.get("ppl"),
            ln_ppl=data.get("ln_ppl"),
        )


def _geometric_mean(rates: np.ndarray) -> float:
    # a zero rate legally zeroes the whole product
    return float(np.prod(rates) ** (1.0 / len(rates)))


def aggregate(
    hits: dict[int, np.ndarray],
    ndcgs: dict[int, np.ndarray],
    nll: np.ndarray | None = None,
) -> EvalReport:
    """Combine per-example, per-position outcomes into an EvalReport.

    hits[K] and ndcgs[K] are [N, k] arrays for cutoff K; nll is [N, k].
    """
    topk_values = tuple(sorted(hits))
    if tuple(sorted(ndcgs)) != topk_values:
        raise ConfigError("hits and ndcgs must cover the same cutoffs")
    first = hits[topk_values[0]]
    if first.ndim != 2 or first.size == 0:
        raise ConfigError("hit matrices must be non-empty [N, k] arrays")
    n_examples, k = first.shape

    per_hr, per_ndcg = {}, {}
    mean_hr, seq_hr, mean_ndcg, seq_ndcg, seq_match = {}, {}, {}, {}, {}
    for topk in topk_values:
        h = np.asarray(hits[topk], dtype=np.float64)
        g = np.asarray(ndcgs[topk], dtype=np.float64)
        if h.shape != (n_examples, k) or g.shape != (n_examples, k):
            raise ConfigError("metric matrices disagree on [N, k]")
        hr = h.mean(axis=0)
        nd = g.mean(axis=0)
        per_hr[topk] = tuple(float(v) for v in hr)
        per_ndcg[topk] = tuple(float(v) for v in nd)
        mean_hr[topk] = float(hr.mean())
        seq_hr[topk] = _geometric_mean(hr)
        mean_ndcg[topk] = float(nd.mean())
        seq_ndcg[topk] = _geometric_mean(nd)
        seq_match[topk] = float(h.all(axis=1).mean())

    ppl = ln_ppl = None
    if nll is not None:
        nll = np.asarray(nll, dtype=np.float64)
        if nll.shape != (n_examples, k):
            raise ConfigError("nll must be [N, k]")
        ln_ppl = float(nll.mean())
        ppl = float(np.exp(ln_ppl))
    return EvalReport(
        k=k,
        topk_values=topk_values,
        n_examples=n_examples,
        per_position_hr=per_hr,
        per_position_ndcg=per_ndcg,
        mean_hr=mean_hr,
        seq_hr=seq_hr,
        mean_ndcg=mean_ndcg,
        seq_ndcg=seq_ndcg,
        seq_match=seq_match,
        ppl=ppl,
        ln_ppl=ln_ppl,
    )


def hit_ndcg_matrices(
    scores: np.ndarray,
    targets: np.ndarray,
    topk_values=(5, 10, 20),
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Per-example, per-position hit and NDCG matrices for each cutoff.

    scores: [N, k, M]; targets: [N, k] item ids in [1, M].
    """
    scores_t = torch.as_tensor(np.asarray(scores))
    targets = np.asarray(targets)
    top = max(topk_values)
    if top > scores_t.shape[-1]:
        raise ConfigError(
            f"topk {top} exceeds catalogue size {scores_t.shape[-1]}"
        )
    ranked = (scores_t.topk(top, dim=-1).indices + 1).numpy()  # [N, k, top]
    hit_at = ranked == targets[..., None]  # [N, k, top]
    found = hit_at.argmax(axis=-1)  # first position of the target, if any
    present = hit_at.any(axis=-1)
    ranks = np.where(present, found + 1, 0)  # 1-based; 0 means absent
    hits, ndcgs = {}, {}
    safe_ranks = np.maximum(ranks, 1)  # absent targets never contribute anyway
    discounts = 1.0 / np.log2(safe_ranks + 1.0)
    for topk in topk_values:
        within = present & (ranks <= topk)
        hits[topk] = within.astype(np.float64)
        ndcgs[topk] = np.where(within, discounts, 0.0)
    return hits, ndcgs


def report_from_scores(
    scores: np.ndarray,
    targets: np.ndarray,
    topk_values=(5, 10, 20),
) -> EvalReport:
    """Build a report straight from full score tensors."""
    hits, ndcgs = hit_ndcg_matrices(scores, targets, topk_values)
    return aggregate(hits, ndcgs, nll_from_scores(scores, targets))
