"""Training loop: noised-latent reconstruction plus listwise ranking.

Every step draws one diffusion timestep per example, noises the
concatenated clean latents in closed form, and asks the denoiser for the
clean latents back. The composite objective blends the reconstruction
error, the listwise likelihood of the target items under scores taken from
the predicted trajectory latents, and the output-norm regularizer; a single
Adam step updates the network and the embedding table together.

Model selection tracks the validation sequence-NDCG at a fixed cutoff
through the real inference path; training stops after `patience`
evaluations without improvement.
"""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field

import torch

from .data import batch_iterator
from .exceptions import ConfigError, NumericsError, VocabularyError
from .losses import (
    LossWeights,
    listwise_preference_loss,
    reg_loss,
    simple_loss,
)
from .model import DenoiserConfig, PreferenceDenoiser
from .sampling import evaluate_examples
from .schedule import NoiseSchedule, q_sample
from .validation import check_positive_int


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and model-selection settings."""

    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 1000
    patience: int = 5
    eval_every: int = 1
    seed: int = 0
    select_topk: int = 5
    infer_steps: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    no_listpref: bool = False
    no_simple: bool = False
    no_reg: bool = False
    trajectory_loss_only: bool = False

    def __post_init__(self):
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.max_epochs, "max_epochs")
        check_positive_int(self.patience, "patience")
        check_positive_int(self.eval_every, "eval_every")
        check_positive_int(self.select_topk, "select_topk")
        check_positive_int(self.infer_steps, "infer_steps")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")


def _epoch_seed(seed: int, epoch: int, salt: int = 0) -> int:
    return (seed * 1_000_003 + epoch * 97 + salt) % (2**31 - 1)


def train_step(
    batch,
    model: PreferenceDenoiser,
    sched: NoiseSchedule,
    weights: LossWeights,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    no_listpref: bool = False,
    no_simple: bool = False,
    no_reg: bool = False,
    trajectory_loss_only: bool = False,
) -> dict:
    """One optimizer step on one batch; returns the loss components."""
    cfg = model.config
    history = torch.from_numpy(batch.history)
    target = torch.from_numpy(batch.target)
    history_mask = torch.from_numpy(batch.history_mask)
    n = history.shape[0]

    h_clean, z0 = model.embed_examples(history, target)
    x0 = torch.cat([h_clean, z0], dim=1)
    t = torch.randint(1, sched.n_steps + 1, (n,), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, noise, sched)
    x0_hat = model.denoise(x_t, t, h_clean, history_mask)

    if trajectory_loss_only:
        loss_mask = torch.cat(
            [torch.zeros_like(history_mask), torch.ones(n, cfg.k, dtype=torch.bool)], dim=1
        )
    else:
        loss_mask = torch.cat(
            [history_mask, torch.ones(n, cfg.k, dtype=torch.bool)], dim=1
        )
    simple = simple_loss(x0_hat, x0, loss_mask)
    reg = reg_loss(x0_hat, loss_mask)
    scores = model.score_items(x0_hat[:, cfg.n_max :, :])
    list_pref = listwise_preference_loss(scores, target, weights.gamma)

    total = x0.new_zeros(())
    if not no_simple:
        total = total + weights.lam * simple
    if not no_listpref:
        total = total + (1.0 - weights.lam) * list_pref
    if not no_reg:
        total = total + weights.reg_weight * reg
    if not torch.isfinite(total):
        raise NumericsError(
            f"non-finite loss (simple={simple.item():.4g}, "
            f"list_pref={list_pref.item():.4g}, reg={reg.item():.4g})"
        )

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return {
        "total": total.item(),
        "simple": simple.item(),
        "list_pref": list_pref.item(),
        "reg": reg.item(),
    }


@dataclass
class FitResult:
    """Outcome of one training run; the model is left holding best_state."""

    best_state: dict
    best_metric: float
    best_epoch: int
    n_epochs: int
    stopped_early: bool
    log: list[dict]


def fit(
    model: PreferenceDenoiser,
    sched: NoiseSchedule,
    train_examples,
    valid_examples,
    config: TrainConfig,
    start_epoch: int = 0,
    checkpoint_path=None,
    vocab_hash: str | None = None,
) -> FitResult:
    """Train until max_epochs or until validation stops improving.

    The best-so-far parameters (by validation sequence-NDCG) are restored
    into the model before returning. When checkpoint_path is given the best
    state is persisted on every improvement, so an aborted run still leaves
    its last good checkpoint behind.
    """
    if not train_examples:
        raise ConfigError("train split is empty")
    if not valid_examples:
        raise ConfigError("valid split is empty")
    torch.manual_seed(config.seed)  # pins dropout draws for exact reruns
    generator = torch.Generator().manual_seed(_epoch_seed(config.seed, 0, salt=1))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    best_state = copy.deepcopy(model.state_dict())
    best_metric = float("-inf")
    best_epoch = start_epoch
    evals_since_best = 0
    stopped_early = False
    log: list[dict] = []

    epoch = start_epoch
    for epoch in range(start_epoch, start_epoch + config.max_epochs):
        model.train()
        sums = {"total": 0.0, "simple": 0.0, "list_pref": 0.0, "reg": 0.0}
        n_batches = 0
        epoch_start = time.perf_counter()
        for batch in batch_iterator(
            train_examples, config.batch_size, shuffle=True, seed=_epoch_seed(config.seed, epoch)
        ):
            try:
                components = train_step(
                    batch,
                    model,
                    sched,
                    config.weights,
                    optimizer,
                    generator,
                    no_listpref=config.no_listpref,
                    no_simple=config.no_simple,
                    no_reg=config.no_reg,
                    trajectory_loss_only=config.trajectory_loss_only,
                )
            except NumericsError as err:
                if checkpoint_path is not None:
                    raise NumericsError(
                        f"{err}; last good checkpoint from epoch {best_epoch} "
                        f"at {checkpoint_path}"
                    ) from err
                raise
            for key in sums:
                sums[key] += components[key]
            n_batches += 1

        entry = {
            "epoch": epoch,
            "loss_total": sums["total"] / n_batches,
            "loss_simple": sums["simple"] / n_batches,
            "loss_list_pref": sums["list_pref"] / n_batches,
            "loss_reg": sums["reg"] / n_batches,
            "seconds": time.perf_counter() - epoch_start,
            "valid_seq_ndcg": None,
            "improved": False,
        }

        if (epoch - start_epoch + 1) % config.eval_every == 0:
            report = evaluate_examples(
                model,
                valid_examples,
                sched,
                n_steps=config.infer_steps,
                topk_values=(config.select_topk,),
                batch_size=config.batch_size,
                seed=_epoch_seed(config.seed, epoch, salt=2),
            )
            metric = report.seq_ndcg[config.select_topk]
            entry["valid_seq_ndcg"] = metric
            if metric > best_metric:
                best_metric = metric
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
                evals_since_best = 0
                entry["improved"] = True
                if checkpoint_path is not None:
                    save_checkpoint(
                        checkpoint_path,
                        model,
                        train_config=config,
                        vocab_hash=vocab_hash,
                        epoch=epoch,
                        metric=metric,
                        state=best_state,
                        sched=sched,
                    )
            else:
                evals_since_best += 1
            log.append(entry)
            if evals_since_best >= config.patience:
                stopped_early = True
                break
        else:
            log.append(entry)

    model.load_state_dict(best_state)
    return FitResult(
        best_state=best_state,
        best_metric=best_metric,
        best_epoch=best_epoch,
        n_epochs=epoch - start_epoch + 1,
        stopped_early=stopped_early,
        log=log,
    )


# -------------------------------------------------------------- checkpoints


def save_checkpoint(
    path,
    model: PreferenceDenoiser,
    train_config: TrainConfig | None = None,
    vocab_hash: str | None = None,
    epoch: int = 0,
    metric: float | None = None,
    state: dict | None = None,
    sched: NoiseSchedule | None = None,
) -> None:
    """Persist parameters together with the architecture, the vocabulary
    digest, and the training settings that produced them."""
    payload = {
        "model_state": state if state is not None else model.state_dict(),
        "denoiser_config": asdict(model.config),
        "n_items": model.n_items,
        "vocab_hash": vocab_hash,
        "train_config": None if train_config is None else _train_config_dict(train_config),
        "schedule_beta": None if sched is None else [float(b) for b in sched.beta],
        "epoch": epoch,
        "metric": metric,
    }
    torch.save(payload, path)


def _train_config_dict(config: TrainConfig) -> dict:
    data = asdict(config)
    data["weights"] = asdict(config.weights)
    return data


def train_config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    weights = data.pop("weights", None)
    if weights is not None:
        data["weights"] = LossWeights(**weights)
    return TrainConfig(**data)


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> dict:
    """Read a checkpoint; refuse it when the vocabulary digest disagrees."""
    payload = torch.load(path, weights_only=True)
    stored = payload.get("vocab_hash")
    if (
        expected_vocab_hash is not None
        and stored is not None
        and stored != expected_vocab_hash
    ):
        raise VocabularyError(
            f"checkpoint vocabulary {stored[:12]}... does not match the "
            f"current corpus {expected_vocab_hash[:12]}..."
        )
    return payload


def model_from_checkpoint(payload: dict) -> PreferenceDenoiser:
    config = DenoiserConfig(**payload["denoiser_config"])
    model = PreferenceDenoiser(payload["n_items"], config)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


def schedule_from_checkpoint(payload: dict) -> NoiseSchedule | None:
    beta = payload.get("schedule_beta")
    if beta is None:
        return None
    return NoiseSchedule(torch.tensor(beta, dtype=torch.float64))
