"""Scikit-learn style facade over the diffusion trajectory recommender.

The estimator takes raw per-user item-id sequences, carves supervised
windows out of them, trains the denoiser, and predicts the next k items
as ranked lists. All constructor arguments are stored verbatim so
get_params / set_params / clone behave the sklearn way.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import by_split, corpus_from_sequences, filter_and_split
from .losses import LossWeights
from .model import DenoiserConfig, PreferenceDenoiser
from .sampling import evaluate_examples, sample_trajectory
from .schedule import linear_schedule
from .training import (
    TrainConfig,
    fit as run_training,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    schedule_from_checkpoint,
    train_config_from_dict,
)
from .validation import check_sequences


class TrajectoryDiffusionRecommender(BaseEstimator):
    """Multi-step next-item recommender trained as a denoising diffusion model.

    fit(X) expects an iterable of per-user item-id sequences (ids >= 1).
    Each sufficiently long user contributes one train, one validation and
    one test window; validation sequence-NDCG drives early stopping.

    predict(X) treats every sequence as a history and returns the top-1
    item for each of the k future positions; predict_topk returns full
    ranked lists.
    """

    def __init__(
        self,
        k: int = 5,
        n_max: int = 50,
        embed_dim: int = 128,
        n_blocks: int = 4,
        n_heads: int = 4,
        dropout: float = 0.1,
        mask_mode: str = "causal",
        cosine_scores: bool = False,
        timesteps: int = 50,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        lam: float = 0.1,
        gamma: float = 0.0,
        reg_weight: float = 1.0,
        learning_rate: float = 1e-3,
        batch_size: int = 256,
        max_epochs: int = 1000,
        patience: int = 5,
        eval_every: int = 1,
        inference_steps: int = 1,
        topk: int = 10,
        seed: int = 0,
        n_items: int | None = None,
        no_listpref: bool = False,
        no_simple: bool = False,
        no_reg: bool = False,
        trajectory_loss_only: bool = False,
        exclude_previous: bool = False,
    ):
        self.k = k
        self.n_max = n_max
        self.embed_dim = embed_dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.dropout = dropout
        self.mask_mode = mask_mode
        self.cosine_scores = cosine_scores
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.lam = lam
        self.gamma = gamma
        self.reg_weight = reg_weight
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.eval_every = eval_every
        self.inference_steps = inference_steps
        self.topk = topk
        self.seed = seed
        self.n_items = n_items
        self.no_listpref = no_listpref
        self.no_simple = no_simple
        self.no_reg = no_reg
        self.trajectory_loss_only = trajectory_loss_only
        self.exclude_previous = exclude_previous

    # ------------------------------------------------------------ internals

    def _denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            n_max=self.n_max,
            k=self.k,
            embed_dim=self.embed_dim,
            n_blocks=self.n_blocks,
            n_heads=self.n_heads,
            dropout=self.dropout,
            mask_mode=self.mask_mode,
            cosine_scores=self.cosine_scores,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            eval_every=self.eval_every,
            seed=self.seed,
            infer_steps=self.inference_steps,
            weights=LossWeights(lam=self.lam, gamma=self.gamma, reg_weight=self.reg_weight),
            no_listpref=self.no_listpref,
            no_simple=self.no_simple,
            no_reg=self.no_reg,
            trajectory_loss_only=self.trajectory_loss_only,
        )

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this TrajectoryDiffusionRecommender instance is not fitted yet; "
                "call fit(X) or load(path) first"
            )

    # ------------------------------------------------------------------ api

    def fit(self, X, y=None):
        """Train on raw sequences; y is ignored (targets come from X)."""
        sequences = check_sequences(X)
        corpus = corpus_from_sequences(sequences, n_items=self.n_items)
        splits = by_split(filter_and_split(corpus, k=self.k, n_max=self.n_max))

        torch.manual_seed(self.seed)  # reproducible parameter init
        model = PreferenceDenoiser(corpus.n_items, self._denoiser_config())
        sched = linear_schedule(self.timesteps, self.beta_start, self.beta_end)
        result = run_training(
            model,
            sched,
            splits["train"],
            splits["valid"],
            self._train_config(),
            vocab_hash=corpus.vocab_hash(),
        )

        self.model_ = model
        self.schedule_ = sched
        self.n_items_ = corpus.n_items
        self.vocab_hash_ = corpus.vocab_hash()
        self.fit_result_ = result
        self.train_log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.best_metric_ = result.best_metric
        return self

    def predict(self, X) -> np.ndarray:
        """Top-1 item id per future position: [n_sequences, k] int array."""
        return self.predict_topk(X, topk=1)[:, :, 0]

    def predict_topk(self, X, topk: int | None = None) -> np.ndarray:
        """Ranked item-id lists per future position: [n_sequences, k, topk]."""
        self._check_fitted()
        sequences = check_sequences(X)
        topk = self.topk if topk is None else topk
        out = np.zeros((len(sequences), self.k, topk), dtype=np.int64)
        generator = torch.Generator().manual_seed(self.seed)
        for row, seq in enumerate(sequences):
            ids, _ = sample_trajectory(
                seq,
                self.model_,
                self.schedule_,
                n_steps=self.inference_steps,
                topk=topk,
                generator=generator,
                exclude_previous=self.exclude_previous,
            )
            out[row] = ids.numpy()
        return out

    def evaluate(self, X, topk_values=(5, 10, 20), split: str = "test"):
        """Score one held-out window per user; returns the full report.

        Windows are carved with the same rule as fit, so sequences too short
        to split are ignored here as well.
        """
        self._check_fitted()
        sequences = check_sequences(X)
        corpus = corpus_from_sequences(sequences, n_items=self.n_items_)
        examples = by_split(filter_and_split(corpus, k=self.k, n_max=self.n_max))[split]
        return evaluate_examples(
            self.model_,
            examples,
            self.schedule_,
            n_steps=self.inference_steps,
            topk_values=tuple(topk_values),
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def score(self, X, y=None) -> float:
        """Fraction of test windows predicted fully correctly at self.topk."""
        report = self.evaluate(X, topk_values=(self.topk,))
        return float(report.seq_match[self.topk])

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(
            path,
            self.model_,
            train_config=self._train_config(),
            vocab_hash=self.vocab_hash_,
            epoch=getattr(self, "best_epoch_", 0),
            metric=getattr(self, "best_metric_", None),
            sched=self.schedule_,
        )

    @classmethod
    def load(cls, path, expected_vocab_hash: str | None = None):
        """Rebuild a fitted estimator from a checkpoint file."""
        payload = load_checkpoint(path, expected_vocab_hash=expected_vocab_hash)
        model = model_from_checkpoint(payload)
        cfg = model.config

        est = cls(
            k=cfg.k,
            n_max=cfg.n_max,
            embed_dim=cfg.embed_dim,
            n_blocks=cfg.n_blocks,
            n_heads=cfg.n_heads,
            dropout=cfg.dropout,
            mask_mode=cfg.mask_mode,
            cosine_scores=cfg.cosine_scores,
            n_items=payload["n_items"],
        )
        if payload.get("train_config") is not None:
            train = train_config_from_dict(payload["train_config"])
            est.set_params(
                learning_rate=train.learning_rate,
                batch_size=train.batch_size,
                max_epochs=train.max_epochs,
                patience=train.patience,
                eval_every=train.eval_every,
                seed=train.seed,
                inference_steps=train.infer_steps,
                lam=train.weights.lam,
                gamma=train.weights.gamma,
                reg_weight=train.weights.reg_weight,
                no_listpref=train.no_listpref,
                no_simple=train.no_simple,
                no_reg=train.no_reg,
                trajectory_loss_only=train.trajectory_loss_only,
            )
        sched = schedule_from_checkpoint(payload)
        if sched is None:
            sched = linear_schedule(est.timesteps, est.beta_start, est.beta_end)
        else:
            est.set_params(
                timesteps=sched.n_steps,
                beta_start=float(sched.beta[0]),
                beta_end=float(sched.beta[-1]),
            )
        est.model_ = model
        est.schedule_ = sched
        est.n_items_ = payload["n_items"]
        est.vocab_hash_ = payload.get("vocab_hash")
        est.best_epoch_ = payload.get("epoch", 0)
        est.best_metric_ = payload.get("metric")
        return est
