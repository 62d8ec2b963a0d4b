"""Acceptance suite: ten verifiable claims about the implementation, from
closed-form loss identities through end-to-end learnability on planted
structure. Each test prints one pass line; run with -v for per-criterion
pass/fail reporting."""

import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from trajdiff.cli import main as cli_main
from trajdiff.data import by_split, filter_and_split, load_interactions
from trajdiff.estimator import TrajectoryDiffusionRecommender
from trajdiff.losses import (
    LossWeights,
    listwise_preference_loss,
    reg_loss,
    simple_loss,
    soft_listmle,
    total_loss,
)
from trajdiff.metrics import report_from_scores
from trajdiff.model import DenoiserConfig, PreferenceDenoiser
from trajdiff.schedule import NoiseSchedule, posterior_step, q_sample

from _toy import motif_sequences


def _announce(number, label):
    print(f"criterion {number:02d} PASS: {label}")


def _rel_close(a, b, tol):
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-12)


# ------------------------------------------------------- 1: loss identities


def test_criterion_01_loss_limit_identities():
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    for _ in range(1000):
        m = int(rng.integers(2, 51))
        k = int(rng.integers(1, 6))
        scores = torch.tensor(rng.normal(0.0, 3.0, (1, k, m)))
        targets = torch.tensor(rng.integers(1, m + 1, (1, k)))

        # full softening weight turns the loss into summed per-position CE
        loss = float(listwise_preference_loss(scores, targets, gamma=1.0))
        ce = float(F.cross_entropy(scores[0], targets[0] - 1, reduction="sum"))
        assert _rel_close(loss, ce, 1e-6)

        # a single position is plain CE no matter the softening weight
        ce1 = float(F.cross_entropy(scores[0, :1], targets[0, :1] - 1, reduction="sum"))
        for gamma in (0.0, float(rng.uniform(0, 1)), 1.0):
            loss1 = float(listwise_preference_loss(scores[:, :1], targets[:, :1], gamma))
            assert _rel_close(loss1, ce1, 1e-6)
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0
    _announce(1, f"limit identities on 1000 tensors in {elapsed:.1f}s")


# ------------------------------------------- 2: permutation-mass normalization


def test_criterion_02_plackett_luce_normalization():
    rng = np.random.default_rng(202)
    started = time.perf_counter()
    cases = [(6, 3)] + [
        (int(rng.integers(2, 7)), int(rng.integers(1, 4))) for _ in range(30)
    ]
    for m, k in cases:
        k = min(k, m)
        scores = torch.tensor(rng.normal(0.0, 2.0, (m,)))
        tuples = list(itertools.permutations(range(1, m + 1), k))
        batch_scores = scores.expand(len(tuples), k, m)
        batch_targets = torch.tensor(tuples)
        losses = listwise_preference_loss(
            batch_scores, batch_targets, gamma=0.0, reduction="none"
        )
        mass = float(torch.exp(-losses).sum())
        assert abs(mass - 1.0) <= 1e-9
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0
    _announce(2, f"ordered-tuple probability mass sums to 1 in {elapsed:.1f}s")


# ------------------------------------------------------------ 3: gradients


def _fd_grad(fn, tensor, coords, h=1e-5):
    grads = {}
    for coord in coords:
        saved = tensor[coord].item()
        with torch.no_grad():
            tensor[coord] = saved + h
            up = fn()
            tensor[coord] = saved - h
            down = fn()
            tensor[coord] = saved
        grads[coord] = (up - down) / (2 * h)
    return grads


def _check_grads(fn, tensor, coords, tol=1e-3):
    tensor.requires_grad_(True)
    if tensor.grad is not None:
        tensor.grad = None
    fn().backward()
    analytic = tensor.grad.detach().clone()
    tensor.requires_grad_(False)
    fd = _fd_grad(lambda: float(fn()), tensor, coords)
    a = np.array([float(analytic[coord]) for coord in coords])
    f = np.array([fd[coord] for coord in coords])
    err = float(np.linalg.norm(a - f)) / max(float(np.linalg.norm(f)), 1e-12)
    assert err <= tol, f"gradient mismatch {err:.2e}"


def test_criterion_03_gradient_suite():
    started = time.perf_counter()
    d = 8
    rng = np.random.default_rng(303)

    scores = torch.tensor(rng.normal(0.0, 1.5, (d,)))
    _check_grads(
        lambda: soft_listmle(scores, (3, 1, 6), gamma=0.3),
        scores,
        [(i,) for i in range(d)],
    )

    x0_hat = torch.tensor(rng.normal(0.0, 1.0, (2, 3, d)))
    x0 = torch.tensor(rng.normal(0.0, 1.0, (2, 3, d)))
    mask = torch.tensor([[True, True, False], [True, True, True]])
    coords = [(0, 0, 2), (0, 1, 5), (1, 2, 7), (1, 0, 0)]
    _check_grads(lambda: simple_loss(x0_hat, x0, mask), x0_hat, coords)
    _check_grads(lambda: reg_loss(x0_hat, mask), x0_hat, coords)

    # blended objective through item scoring, as a function of the latents
    emb = torch.tensor(rng.normal(0.0, 1.0, (6, d)))
    latents = torch.tensor(rng.normal(0.0, 1.0, (1, 2, d)))
    targets = torch.tensor([[4, 2]])
    weights = LossWeights(lam=0.1, gamma=0.3, reg_weight=1.0)

    def blended():
        return total_loss(
            simple_loss(latents, x0[:1, :2]),
            listwise_preference_loss(latents @ emb.T, targets, weights.gamma),
            reg_loss(latents),
            weights,
        )

    _check_grads(blended, latents, [(0, j, i) for j in range(2) for i in range(d)])

    # same objective through the full denoiser, in double precision
    torch.manual_seed(303)
    config = DenoiserConfig(
        n_max=4, k=2, embed_dim=d, n_blocks=1, n_heads=2, dropout=0.0
    )
    model = PreferenceDenoiser(6, config).double().eval()
    history = torch.tensor([[0, 3, 1, 5]])
    target = torch.tensor([[4, 2]])
    history_mask = history != 0
    sched = NoiseSchedule(torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
    noise = torch.tensor(rng.normal(0.0, 1.0, (1, 6, d)))

    def through_denoiser():
        h_clean, z0 = model.embed_examples(history, target)
        x_0 = torch.cat([h_clean, z0], dim=1)
        x_t = q_sample(x_0, 2, noise, sched)
        x0_pred = model.denoise(x_t, 2, h_clean, history_mask)
        return total_loss(
            simple_loss(x0_pred, x_0),
            listwise_preference_loss(
                model.score_items(x0_pred[:, 4:]), target, weights.gamma
            ),
            reg_loss(x0_pred),
            weights,
        )

    table = model.item_emb.weight
    emb_coords = [(3, 1), (3, 6), (4, 0), (1, 2), (5, 7), (2, 4)]
    _check_grads(through_denoiser, table, emb_coords)
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0
    _announce(3, f"analytic vs central differences in {elapsed:.1f}s")


# ------------------------------------------------------ 4: diffusion algebra


def test_criterion_04_diffusion_algebra():
    sched = NoiseSchedule(torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
    abar3 = float(sched.alpha_bar_at(3))
    assert _rel_close(abar3, 0.504, 1e-12)

    x0 = torch.tensor(np.random.default_rng(404).normal(0.0, 1.0, (5,)))
    closed = q_sample(x0, 3, torch.zeros_like(x0), sched)
    composed = x0.clone()
    for beta in (0.1, 0.2, 0.3):
        composed = math.sqrt(1.0 - beta) * composed
    np.testing.assert_allclose(closed.numpy(), composed.numpy(), rtol=1e-12)

    n = 100_000
    generator = torch.Generator().manual_seed(404)
    samples = torch.zeros(n, dtype=torch.float64)
    for beta in (0.1, 0.2, 0.3):
        eps = torch.randn(n, generator=generator, dtype=torch.float64)
        samples = math.sqrt(1.0 - beta) * samples + math.sqrt(beta) * eps
    target_var = 1.0 - abar3
    sigma = target_var * math.sqrt(2.0 / (n - 1))
    assert abs(samples.var(unbiased=True).item() - target_var) <= 3 * sigma

    x0_hat = torch.tensor(np.random.default_rng(405).normal(0.0, 1.0, (2, 3)))
    stepped = posterior_step(
        torch.randn(2, 3, dtype=torch.float64), x0_hat, 1, sched, torch.randn(2, 3)
    )
    assert torch.equal(stepped, x0_hat)
    _announce(4, "closed form matches composed transitions; final step is exact")


# ------------------------------------------------------------- 5: causality


def test_criterion_05_causal_mask_blocks_future():
    torch.manual_seed(505)
    config = DenoiserConfig(
        n_max=6, k=5, embed_dim=128, n_blocks=4, n_heads=4, dropout=0.0,
        mask_mode="causal",
    )
    model = PreferenceDenoiser(40, config).eval()
    history = torch.randint(1, 41, (1, 6))
    history_mask = history != 0
    h_clean = model.embed_history(history)
    x_t = torch.randn(1, config.seq_len, 128)

    with torch.no_grad():
        base = model.denoise(x_t, 3, h_clean, history_mask)
        for j in range(5):
            slot = 6 + j
            bumped = x_t.clone()
            # single-coordinate bump: a uniform shift would vanish in LayerNorm
            bumped[0, slot, 0] += 1.0
            out = model.denoise(bumped, 3, h_clean, history_mask)
            drift = (out[0, :slot] - base[0, :slot]).abs().max().item()
            assert drift <= 1e-6, f"slot {slot} leaked {drift:.2e} backwards"
    _announce(5, "trajectory perturbations never reach earlier slots")


# -------------------------------------------------------- 6: metric oracles


def _oracle_report(scores, targets, topk):
    n, k, m = scores.shape
    hr = [[] for _ in range(k)]
    ndcg = [[] for _ in range(k)]
    seq_hits = 0
    nlls = []
    for i in range(n):
        all_hit = True
        for j in range(k):
            row = list(scores[i, j])
            order = sorted(range(m), key=lambda c: -row[c])
            ranked_ids = [c + 1 for c in order]
            target = int(targets[i, j])
            hit = target in ranked_ids[:topk]
            hr[j].append(1.0 if hit else 0.0)
            if hit:
                rank = ranked_ids.index(target) + 1
                ndcg[j].append(1.0 / math.log2(rank + 1))
            else:
                ndcg[j].append(0.0)
                all_hit = False
            lse = math.log(sum(math.exp(v - max(row)) for v in row)) + max(row)
            nlls.append(lse - row[target - 1])
        seq_hits += 1 if all_hit else 0
    hr_rates = [sum(col) / n for col in hr]
    ndcg_rates = [sum(col) / n for col in ndcg]
    prod_hr = math.prod(hr_rates)
    prod_ndcg = math.prod(ndcg_rates)
    return {
        "mean_hr": sum(hr_rates) / k,
        "seq_hr": prod_hr ** (1.0 / k),
        "mean_ndcg": sum(ndcg_rates) / k,
        "seq_ndcg": prod_ndcg ** (1.0 / k),
        "seq_match": seq_hits / n,
        "ppl": math.exp(sum(nlls) / len(nlls)),
    }


def test_criterion_06_metric_oracle_equivalence():
    rng = np.random.default_rng(606)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(1, 5))
        m = int(rng.integers(2, 11))
        topk = int(rng.integers(1, min(m, 5) + 1))
        scores = rng.normal(0.0, 2.0, (n, k, m))
        targets = rng.integers(1, m + 1, (n, k))
        report = report_from_scores(scores, targets, topk_values=(topk,))
        oracle = _oracle_report(scores, targets, topk)

        assert report.mean_hr[topk] == oracle["mean_hr"]
        assert report.seq_match[topk] == oracle["seq_match"]
        assert abs(report.seq_hr[topk] - oracle["seq_hr"]) <= 1e-12
        assert abs(report.mean_ndcg[topk] - oracle["mean_ndcg"]) <= 1e-12
        assert abs(report.seq_ndcg[topk] - oracle["seq_ndcg"]) <= 1e-12
        assert abs(report.ppl - oracle["ppl"]) <= 1e-9 * oracle["ppl"]
        assert report.seq_hr[topk] <= report.mean_hr[topk] + 1e-12
        assert report.seq_ndcg[topk] <= report.mean_ndcg[topk] + 1e-12
    _announce(6, "1000 instances match brute force; AM-GM ordering holds")


# ------------------------------------------------------- 7: data-prep counts


def _ml1m_path():
    candidate = os.environ.get("TRAJDIFF_ML1M", "")
    if candidate and Path(candidate).exists():
        return candidate
    fallback = Path(__file__).resolve().parent.parent / "data" / "ml-1m" / "ratings.dat"
    return str(fallback) if fallback.exists() else None


def test_criterion_07_data_prep_counts(tmp_path):
    ml1m = _ml1m_path()
    if ml1m is not None:
        corpus = load_interactions(ml1m, usecols=(0, 1, 3), delimiter="::")
        for k, expected in ((5, 6040), (10, 5231)):
            splits = by_split(filter_and_split(corpus, k=k))
            assert len(splits["train"]) == expected
        _announce(7, "MovieLens-1M filtered sequence counts reproduced")
        return

    # hand-countable synthetic corpus: k=2 keeps raw length > 7 only
    lengths = [4, 6, 7, 8, 9, 12, 7, 8, 30]
    data_file = tmp_path / "interactions.tsv"
    with open(data_file, "w", encoding="utf-8") as fh:
        for user, length in enumerate(lengths):
            for ts in range(length):
                fh.write(f"u{user}\t{ts % 9 + 1}\t{ts}\n")
    out = tmp_path / "prepared"
    code = cli_main(
        [
            "prepare",
            "--set",
            f"dataset.path={data_file}",
            "--set",
            "traj.k=2",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["valid_sequences"] == 5  # lengths 8, 9, 12, 8, 30
    assert stats["examples_per_split"] == {"train": 5, "valid": 5, "test": 5}

    # k=3 moves the bar to length > 10: only 12 and 30 survive
    assert (
        cli_main(
            [
                "prepare",
                "--set",
                f"dataset.path={data_file}",
                "--set",
                "traj.k=3",
                "--out",
                str(tmp_path / "prepared3"),
            ]
        )
        == 0
    )
    stats3 = json.loads((tmp_path / "prepared3" / "stats.json").read_text())
    assert stats3["valid_sequences"] == 2
    _announce(7, "synthetic threshold counts reproduced (no MovieLens-1M present)")


# --------------------------------------------- 8 + 9: learnability, stepping

MOTIF_PARAMS = dict(
    k=2,
    n_max=6,
    embed_dim=32,
    n_blocks=2,
    n_heads=4,
    timesteps=20,
    beta_end=0.3,
    learning_rate=1e-2,
    batch_size=32,
    dropout=0.1,
    max_epochs=10,
    patience=10,
    topk=5,
    n_items=100,
)
MAIN_SEED = 2


@pytest.fixture(scope="module")
def motif_world():
    corpus = motif_sequences(500, 100, length=12, seed=11)
    train_seqs, held_out = corpus[:400], corpus[400:]
    started = time.perf_counter()
    main = TrajectoryDiffusionRecommender(**MOTIF_PARAMS, seed=MAIN_SEED).fit(train_seqs)
    fit_seconds = time.perf_counter() - started
    return {
        "train": train_seqs,
        "held_out": held_out,
        "main": main,
        "fit_seconds": fit_seconds,
    }


def _held_out_seq_match(world, est, n_steps=1):
    est.set_params(inference_steps=n_steps)
    report = est.evaluate(world["held_out"], topk_values=(5,))
    est.set_params(inference_steps=1)
    return report.seq_match[5]


def test_criterion_08_end_to_end_learnability(motif_world):
    main_sm = _held_out_seq_match(motif_world, motif_world["main"])
    assert motif_world["fit_seconds"] < 600.0
    assert main_sm >= 0.9, f"held-out SeqMatch@5 {main_sm:.3f}"

    def fitted(seed, **kw):
        params = {**MOTIF_PARAMS, **kw, "seed": seed}
        return TrajectoryDiffusionRecommender(**params).fit(motif_world["train"])

    seeds = (0, 1, 2)
    listwise = [
        main_sm if seed == MAIN_SEED else _held_out_seq_match(motif_world, fitted(seed))
        for seed in seeds
    ]
    positionwise = [
        _held_out_seq_match(motif_world, fitted(seed, gamma=1.0)) for seed in seeds
    ]
    assert sum(listwise) / len(seeds) >= sum(positionwise) / len(seeds), (
        f"listwise {listwise} vs position-wise {positionwise}"
    )

    ablated = _held_out_seq_match(
        motif_world, fitted(MAIN_SEED, no_listpref=True)
    )
    assert ablated < 0.05, f"ranking ablation scored {ablated:.3f}"
    _announce(
        8,
        f"SeqMatch@5 {main_sm:.2f}; listwise mean {sum(listwise) / 3:.3f} >= "
        f"{sum(positionwise) / 3:.3f}; ablation at {ablated:.2f}",
    )


def test_criterion_09_inference_step_insensitivity(motif_world):
    results = {}
    walls = []
    for n_steps in (1, 5, 20):
        started = time.perf_counter()
        results[n_steps] = _held_out_seq_match(
            motif_world, motif_world["main"], n_steps=n_steps
        )
        walls.append(time.perf_counter() - started)
    assert abs(results[1] - results[20]) <= 0.02, f"step sweep {results}"
    assert walls[0] < walls[1] < walls[2], f"wall clocks {walls}"
    _announce(
        9,
        f"SeqMatch@5 gap {abs(results[1] - results[20]):.3f}; "
        f"wall clock {walls[0]:.3f}s < {walls[1]:.3f}s < {walls[2]:.3f}s",
    )


# ------------------------------------------------------- 10: reproducibility


def test_criterion_10_reproducible_runs():
    corpus = motif_sequences(100, 30, length=12, seed=21)
    logs, reports, predictions = [], [], []
    for _ in range(2):
        est = TrajectoryDiffusionRecommender(
            k=2, n_max=6, embed_dim=16, n_blocks=1, n_heads=2, timesteps=5,
            learning_rate=5e-3, batch_size=16, max_epochs=3, patience=5,
            topk=5, seed=7, n_items=30,
        ).fit(corpus)
        logs.append(
            [
                (entry["loss_total"], entry["loss_simple"], entry["loss_list_pref"],
                 entry["loss_reg"], entry["valid_seq_ndcg"])
                for entry in est.train_log_
            ]
        )
        reports.append(est.evaluate(corpus, topk_values=(5, 10)).to_dict())
        predictions.append(est.predict(corpus[:10]))
    assert logs[0] == logs[1]
    assert reports[0] == reports[1]
    np.testing.assert_array_equal(predictions[0], predictions[1])
    _announce(10, "identical config and seed give identical logs and reports")
