"""Acceptance gate: one group of tests per criterion, summarised at the end of the run.

The training-based criteria share one synthetic corpus, one codebook and one
set of standardization stats, and cache trained runs for the session so that
a run needed by several criteria is trained once.
"""

import math
import subprocess
import sys

import mpmath
import numpy as np
import pytest
import torch
from conftest import nano_config
from scipy import stats

from varspeech.decoder import GaussianDecoder
from varspeech.distributions import DiagGaussian, kl_divergence, log_prob
from varspeech.flow import FlowStack
from varspeech.model import build_model
from varspeech.objective import (
    Batch,
    BetaSchedule,
    compute_loss,
    importance_weighted_bound,
    joint_sequence_kl_samples,
    latent_log_weights,
    stepwise_kl_samples,
)
from varspeech.config import micro_config
from varspeech.data import SynthCorpusSpec, generate_synth_corpus
from varspeech.inference import continue_speech
from varspeech.runtime import load_checkpoint, save_checkpoint, train


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def gen(seed):
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------------------
# 1. distributions


@pytest.mark.criterion(1, "Gaussian KL vs Monte Carlo, log_prob vs high precision")
def test_kl_matches_monte_carlo(request):
    rng = np.random.default_rng(0)
    n = 1_000_000
    zs = []
    for draw in range(100):
        d = int(rng.integers(1, 5))
        mq, mp = rng.normal(0, 1, d), rng.normal(0, 1, d)
        lq, lp = rng.uniform(-1, 0.7, d), rng.uniform(-1, 0.7, d)
        q = DiagGaussian(torch.tensor(mq), torch.tensor(lq))
        p = DiagGaussian(torch.tensor(mp), torch.tensor(lp))
        closed = kl_divergence(q, p).sum().item()
        x = mq + np.exp(lq) * np.random.default_rng(1000 + draw).standard_normal((n, d))
        integrand = (stats.norm.logpdf(x, mq, np.exp(lq)) - stats.norm.logpdf(x, mp, np.exp(lp))).sum(1)
        zs.append((integrand.mean() - closed) / (integrand.std() / math.sqrt(n)))
    zs = np.array(zs)
    # a correct closed form makes the z-scores standard normal
    ks = stats.kstest(zs, "norm").pvalue
    detail(request, f"max |z| {np.abs(zs).max():.2f}, {int((np.abs(zs) > 3).sum())}/100 beyond 3 SE, "
                    f"KS p {ks:.2f}")
    assert np.abs(zs).max() <= 3.0


@pytest.mark.criterion(1, "Gaussian KL vs Monte Carlo, log_prob vs high precision")
def test_log_prob_matches_high_precision(request):
    rng = np.random.default_rng(1)
    mpmath.mp.dps = 40
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 9))
        mean, log_std, x = rng.normal(0, 2, d), rng.uniform(-3, 3, d), rng.normal(0, 3, d)
        got = log_prob(DiagGaussian(torch.tensor(mean), torch.tensor(log_std)), torch.tensor(x)).sum().item()
        ref = mpmath.mpf(0)
        for m, ls, v in zip(mean, log_std, x):
            s = mpmath.exp(mpmath.mpf(ls))
            ref += -mpmath.log(s) - mpmath.log(2 * mpmath.pi) / 2 - (mpmath.mpf(v) - m) ** 2 / (2 * s ** 2)
        rel = abs(got - float(ref)) / abs(float(ref))
        worst = max(worst, rel)
    assert worst < 1e-10
    detail(request, f"log_prob max rel err {worst:.1e}")


# ---------------------------------------------------------------------------
# 2. flow


def random_flow(seed, dtype, d=4, d_ctx=6):
    """Randomly initialised conditioners whose zero-initialised output layers are drawn at random too."""
    torch.manual_seed(seed)
    fs = FlowStack(d, d_ctx, 4, hidden=16).to(dtype)
    g = gen(seed)
    with torch.no_grad():
        for blk in fs.blocks:
            for p in blk.out.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=dtype) * 0.3)
    return fs


@pytest.mark.criterion(2, "flow round trip and log-determinant")
@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-5), (torch.float64, 1e-10)])
def test_flow_round_trip(request, dtype, tol):
    worst = 0.0
    for trial in range(100):
        fs = random_flow(trial, dtype)
        g = gen(500 + trial)
        z = torch.randn(16, 4, generator=g, dtype=dtype)
        ctx = torch.randn(16, 6, generator=g, dtype=dtype)
        with torch.no_grad():
            u, _ = fs(z, ctx)
            back = fs.inverse(u, ctx)
        worst = max(worst, (back - z).abs().max().item())
    assert worst < tol
    detail(request, f"{str(dtype).split('.')[-1]} round trip {worst:.1e}")


@pytest.mark.criterion(2, "flow round trip and log-determinant")
def test_flow_log_det_matches_finite_differences(request):
    eps = 1e-6
    worst = 0.0
    for trial in range(100):
        fs = random_flow(trial, torch.float64)
        g = gen(900 + trial)
        z, ctx = torch.randn(4, generator=g, dtype=torch.float64), torch.randn(6, generator=g, dtype=torch.float64)
        with torch.no_grad():
            cols = []
            for i in range(4):
                e = torch.zeros(4, dtype=torch.float64)
                e[i] = eps
                cols.append((fs((z + e)[None], ctx[None])[0][0] - fs((z - e)[None], ctx[None])[0][0]) / (2 * eps))
            ref = torch.linalg.slogdet(torch.stack(cols, 1))[1].item()
            ld = fs(z[None], ctx[None])[1].item()
        rel = abs(ld - ref) / max(abs(ref), 1e-2)
        worst = max(worst, rel)
    assert worst < 1e-4
    detail(request, f"log-det max rel err {worst:.1e}")


# ---------------------------------------------------------------------------
# 3. gradient integrity


@pytest.mark.criterion(3, "compute_loss gradient vs finite differences")
def test_full_loss_gradient(request):
    cfg = micro_config(k=5, d_z=2, enc_width=8, enc_blocks=1, kernel=3, utt_widths=(4, 8, 8), prior_layers=2,
                       prior_heads=2, prior_width=16, prior_ff=32, prior_token_emb=8, flow_blocks=2, flow_hidden=8,
                       dec_width=8, dec_blocks=2, dec_token_emb=4, diffusion_steps=20, ddim_steps=5, dtype="float64")
    model = build_model(cfg, 8, seed=0)
    g = gen(0)
    with torch.no_grad():
        for blk in model.flow.blocks:  # leave the identity start so the flow contributes
            blk.out.weight.copy_(torch.randn(blk.out.weight.shape, generator=g, dtype=torch.float64) * 0.3)
    x = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    batch = Batch(x, torch.randint(5, (3, 8), generator=g), x)
    sched = BetaSchedule(0.5)

    def loss():
        return compute_loss(batch, model, sched, 0.7, 10, gen(11), diffusion_generator=gen(12)).total

    model.zero_grad()
    loss().backward()
    pick = np.random.default_rng(0)
    eps = 1e-6
    errors = {}
    for name, params in model.parameter_groups().items():
        assert params, name
        analytic, numeric = [], []
        flat = [(p, i) for p in params for i in range(p.numel())]
        for j in pick.choice(len(flat), size=min(30, len(flat)), replace=False):
            p, i = flat[j]
            view = p.data.view(-1)
            orig = view[i].item()
            with torch.no_grad():
                view[i] = orig + eps
                up = loss().item()
                view[i] = orig - eps
                down = loss().item()
                view[i] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(p.grad.view(-1)[i].item())
        a, n = np.array(analytic), np.array(numeric)
        errors[name] = np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12)
        assert np.linalg.norm(n) > 0, name
    detail(request, ", ".join(f"{k} {v:.1e}" for k, v in errors.items()))
    assert all(v < 1e-4 for v in errors.values()), errors


# ---------------------------------------------------------------------------
# 4. sequence KL and importance-weighted bound


def tiny_model(d_x=5, flow_blocks=1):
    cfg = micro_config(k=6, d_z=2, enc_width=8, enc_blocks=1, kernel=3, utt_widths=(4, 8, 8), prior_layers=1,
                       prior_heads=2, prior_width=16, prior_ff=32, prior_token_emb=8, flow_blocks=flow_blocks,
                       flow_hidden=8, dec_width=8, dec_blocks=2, dec_token_emb=4, diffusion_steps=20, ddim_steps=5, dtype="float64")
    return build_model(cfg, d_x, seed=0)


def tiny_batch(B, T, d_x=5, k=6, seed=0):
    g = gen(seed)
    x = torch.randn(B, T, d_x, generator=g, dtype=torch.float64)
    return Batch(x, torch.randint(k, (B, T), generator=g), x)


@pytest.mark.criterion(4, "sequence KL equals stepwise sum; IWAE-64 >= ELBO")
def test_sequence_kl_equals_stepwise_sum(request):
    model = tiny_model(flow_blocks=0)
    with torch.no_grad():
        model.encoder.mean_head.bias.add_(0.7)
    batch = tiny_batch(4, 6)
    n = 20_000
    with torch.no_grad():
        joint = joint_sequence_kl_samples(model, batch.x, n, gen(1), batch.tokens)
        step = stepwise_kl_samples(model, batch.x, n, gen(2), batch.tokens)
    zs = []
    for b in range(4):
        se = math.sqrt(joint[:, b].var().item() / n + step[:, b].var().item() / n)
        zs.append(abs(joint[:, b].mean().item() - step[:, b].mean().item()) / se)
    detail(request, f"KL |z| max {max(zs):.2f}")
    assert max(zs) <= 3.0


@pytest.mark.criterion(4, "sequence KL equals stepwise sum; IWAE-64 >= ELBO")
def test_importance_weighted_bound_dominates_elbo(request):
    model = tiny_model()
    dec = GaussianDecoder(d_x=5, k=6, d_z=2, d_u=model.utt_encoder.d_u, variant="full").double()
    gaps = []
    for b in range(20):
        batch = tiny_batch(4, 8, seed=100 + b)
        with torch.no_grad():
            utt = model.utt_encoder(batch.x)

            def loglik(z):
                return dec.log_likelihood(batch.x, batch.tokens, z, utt)

            elbo = latent_log_weights(model, batch.x, batch.tokens, 1024, gen(b), loglik).mean().item()
            w = latent_log_weights(model, batch.x, batch.tokens, 64 * 16, gen(1000 + b), loglik)
            iwae = importance_weighted_bound(w.reshape(16, 64, -1).transpose(0, 1)).mean().item()
        gaps.append(iwae - elbo)
    detail(request, f"min IWAE-ELBO gap {min(gaps):.3f} over 20 batches")
    assert min(gaps) >= 0.0


# ---------------------------------------------------------------------------
# 10. determinism and persistence


@pytest.mark.criterion(10, "resume, checkpoint and continuation determinism")
def test_resume_reproduces_loss_trajectory(request, small_corpus, tmp_path):
    cfg = nano_config(steps=80, checkpoint_every=20)
    full = train(cfg, small_corpus)
    part = train(cfg, small_corpus, out_dir=tmp_path, stop_after=33)
    resumed = train(cfg, small_corpus, resume=tmp_path / "last.vsk")
    a = [r["total"] for r in full.history]
    b = [r["total"] for r in part.history] + [r["total"] for r in resumed.history]
    assert a == b
    assert all(torch.equal(p, q) for p, q in zip(full.model.parameters(), resumed.model.parameters()))
    detail(request, "80-step trajectory identical after resume at 33")


@pytest.mark.criterion(10, "resume, checkpoint and continuation determinism")
def test_checkpoint_round_trip_bitwise(small_corpus, tmp_path):
    bundle = train(nano_config(steps=30), small_corpus, out_dir=tmp_path / "run")
    path = tmp_path / "run" / "last.vsk"
    loaded = load_checkpoint(path)
    for (k, a), (k2, b) in zip(bundle.model.state_dict().items(), loaded.model.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    st_a, st_b = bundle.optimizer.state_dict()["state"], loaded.optimizer.state_dict()["state"]
    assert set(st_a) == set(st_b)
    assert all(torch.equal(st_a[i][key], st_b[i][key]) for i in st_a for key in st_a[i])
    assert all(torch.equal(bundle.rngs[n].get_state(), loaded.rngs[n].get_state())
               for n in ("data", "posterior", "diffusion", "sampling"))
    save_checkpoint(tmp_path / "again.vsk", loaded)
    assert (tmp_path / "again.vsk").read_bytes() == path.read_bytes()


@pytest.mark.criterion(10, "resume, checkpoint and continuation determinism")
def test_seeded_continuation_identical_across_runs(request, small_corpus, tmp_path):
    bundle = train(nano_config(steps=30), small_corpus)
    ckpt = tmp_path / "m.vsk"
    save_checkpoint(ckpt, bundle)
    prompt = small_corpus.utterances[0]
    a = continue_speech(bundle, prompt, target_seconds=0.6, seed=5, prompt_seconds=0.4)
    b = continue_speech(load_checkpoint(ckpt), prompt, target_seconds=0.6, seed=5, prompt_seconds=0.4)
    assert np.array_equal(a.frames, b.frames)

    feat = tmp_path / "prompt.f32"
    from varspeech.data import write_feature_file, read_feature_file

    write_feature_file(feat, prompt.frames)
    outs = []
    for i in range(2):
        out = tmp_path / f"cont{i}.f32"
        cmd = [sys.executable, "-m", "varspeech.cli", "continue", "--ckpt", str(ckpt), "--prompt", str(feat),
               "--seconds", "0.6", "--prompt-seconds", "0.4", "--seed", "5", "--out", str(out)]
        res = subprocess.run(cmd, capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert np.array_equal(read_feature_file(tmp_path / "cont0.f32"), a.frames)
    detail(request, "continuation identical in-process, after reload and across 2 processes")


# ---------------------------------------------------------------------------
# 8. diffusion decoder sanity


@pytest.mark.criterion(8, "DDIM determinism, clean-data reconstruction, validation loss")
def test_deterministic_ddim_is_bitwise_reproducible(request, small_corpus):
    from varspeech.decoder import ddim_sample

    bundle = train(nano_config(steps=20), small_corpus)
    dec = bundle.model.decoder
    cond = torch.randn(3, 40, dec.net.cond_proj[0].in_features, generator=gen(0))
    x_T = torch.randn(3, 40, dec.d_x, generator=gen(1))
    a = ddim_sample(dec.net, cond, dec.schedule, 10, eta=0.0, generator=gen(2), x_T=x_T)
    b = ddim_sample(dec.net, cond, dec.schedule, 10, eta=0.0, generator=gen(3), x_T=x_T)
    assert torch.equal(a, b)


@pytest.mark.slow
@pytest.mark.criterion(8, "DDIM determinism, clean-data reconstruction, validation loss")
def test_clean_data_training(request):
    from varspeech.inference import reconstruct_batch, validation_ddpm_loss
    from varspeech.data import split_corpus
    from varspeech.runtime import init_bundle

    corpus = generate_synth_corpus(SynthCorpusSpec(noise_scale=0.0, num_utterances=40, seed=5))
    train_c, valid_c = split_corpus(corpus, 8)
    cfg = micro_config(steps=2000)
    # one epoch: as many steps as it takes to draw the training frames once
    per_epoch = math.ceil(sum(len(u) for u in train_c.utterances) / (cfg.batch_size * cfg.crop_frames))
    bundle, losses = None, []
    for epoch in range(1, 21):
        bundle = train(cfg, train_c, stop_after=epoch * per_epoch, resume=bundle)
        losses.append(validation_ddpm_loss(bundle, valid_c, draws=8, seed=0))
    moving = np.convolve(losses, np.ones(5) / 5, mode="valid")
    detail(request, f"val loss MA {moving[0]:.3f} -> {moving[-1]:.3f} over 20 epochs of {per_epoch} steps")
    assert np.all(np.diff(moving) < 0), moving

    bundle = train(cfg, train_c, resume=bundle)
    untrained = init_bundle(cfg, train_c, bundle.codebook, bundle.stats)
    refs = [u.frames for u in valid_c.utterances]

    def rmse(b):
        return float(np.sqrt(np.mean((reconstruct_batch(b, refs) - np.stack(refs)) ** 2)))

    trained_err, untrained_err = rmse(bundle), rmse(untrained)
    detail(request, f"RMSE {trained_err:.3f} vs untrained {untrained_err:.3f} ({untrained_err / trained_err:.1f}x)")
    assert untrained_err >= 5 * trained_err


# ---------------------------------------------------------------------------
# trained runs shared by criteria 5, 6, 7 and 9

TREND_STEPS = 2000
BETA_SWEEP_STEPS = 4000
BETAS = (0.01, 0.02, 0.04)
GAMMA_BETA = 0.04
GAMMAS = (0.5, 1.0, 2.0)
SEEDS = (0, 1, 2)
KL_TAIL = 200


@pytest.fixture(scope="session")
def trend_data():
    """Default synthetic corpus, 16 held-out utterances, one codebook and one set of stats."""
    from varspeech.data import split_corpus
    from varspeech.runtime import init_bundle

    corpus = generate_synth_corpus(SynthCorpusSpec())
    train_c, valid_c = split_corpus(corpus, 16)
    base = init_bundle(micro_config(), train_c)
    return {"train": train_c, "valid": valid_c, "codebook": base.codebook, "stats": base.stats, "runs": {}}


def trained_run(data, variant="full", beta=0.04, gamma=0.5, seed=0, steps=TREND_STEPS):
    """Train (once per session) and evaluate on the held-out utterances."""
    from varspeech.evaluate import eval_report

    key = (variant, beta, gamma, seed, steps)
    if key not in data["runs"]:
        cfg = micro_config(variant=variant, beta=beta, gamma=gamma, seed=seed, steps=steps)
        bundle = train(cfg, data["train"], codebook=data["codebook"], stats=data["stats"])
        report = eval_report(bundle, data["valid"], seed=0)
        assert report.n_failed == 0
        final_kl = float(np.mean([r["kl_c"] for r in bundle.history[-KL_TAIL:]]))
        data["runs"][key] = {"bundle": bundle, "report": report, "kl_c": final_kl}
    return data["runs"][key]


def nondecreasing(values):
    return all(b >= a for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# 5. beta trend


@pytest.mark.slow
@pytest.mark.criterion(5, "beta trend: reconstruction error up, final KL down")
def test_beta_trend(request, trend_data):
    runs = [trained_run(trend_data, beta=b, steps=BETA_SWEEP_STEPS) for b in BETAS]
    mcd = [r["report"].mcd for r in runs]
    prosody = [r["report"].f0_rmse for r in runs]
    kl = [r["kl_c"] for r in runs]
    for name, vals in (("mcd", mcd), ("prosody", prosody), ("kl_c", kl)):
        detail(request, f"{name} " + " / ".join(f"{v:.3f}" for v in vals))
    assert nondecreasing(mcd), mcd
    assert nondecreasing(prosody), prosody
    assert nondecreasing(kl[::-1]), kl


# ---------------------------------------------------------------------------
# 6. gamma trend


@pytest.mark.slow
@pytest.mark.criterion(6, "gamma trend: prosody error up, content error down")
def test_gamma_trend(request, trend_data):
    prosody = np.array([[trained_run(trend_data, beta=GAMMA_BETA, gamma=g, seed=s)["report"].f0_rmse
                         for s in SEEDS] for g in GAMMAS])
    content = np.array([[trained_run(trend_data, beta=GAMMA_BETA, gamma=g, seed=s)["report"].token_content_error
                         for s in SEEDS] for g in GAMMAS])
    ok = True
    for name, table, sign in (("prosody", prosody, 1), ("content", content, -1)):
        mean = table.mean(1)
        noise = table.std(1, ddof=1).max()
        lo, hi = sorted((mean[0], mean[-1]))
        endpoints = sign * (mean[-1] - mean[0]) > 0
        middle = lo - noise <= mean[1] <= hi + noise
        detail(request, f"{name} " + " / ".join(f"{m:.3f}" for m in mean) + f" (seed sd {noise:.3f})")
        ok = ok and endpoints and middle
    assert ok, (prosody, content)


# ---------------------------------------------------------------------------
# 7. token removal


@pytest.mark.slow
@pytest.mark.criterion(7, "token removal raises content error by >= 1.5x")
def test_token_removal_raises_content_error(request, trend_data):
    full = trained_run(trend_data, beta=GAMMA_BETA)["report"].token_content_error
    free = trained_run(trend_data, "token_free", beta=GAMMA_BETA)["report"].token_content_error
    ratio = free / full if full > 0 else math.inf
    detail(request, f"content error full {full:.4f}, token-free {free:.4f}, ratio {ratio:.1f}")
    assert free > full and free >= 1.5 * full


# ---------------------------------------------------------------------------
# 9. paired discrimination


@pytest.mark.slow
@pytest.mark.criterion(9, "paired discrimination accuracy")
def test_paired_discrimination(request, trend_data):
    from varspeech.data import make_discrimination_pairs
    from varspeech.inference import score_pairs
    from varspeech.runtime import init_bundle

    pairs = make_discrimination_pairs(trend_data["valid"], num_pairs=500, seed=0)
    full = trained_run(trend_data, beta=GAMMA_BETA)["bundle"]
    free = trained_run(trend_data, "token_free", beta=GAMMA_BETA)["bundle"]
    untrained = init_bundle(micro_config(), trend_data["train"], trend_data["codebook"], trend_data["stats"])
    acc_full = score_pairs(full, pairs, "tokens_only")
    acc_free = score_pairs(free, pairs, "latents_only")
    acc_untrained = score_pairs(untrained, pairs, "tokens_only")
    ci = stats.binomtest(round(acc_untrained * 500), 500).proportion_ci(0.95)
    detail(request, f"full {acc_full:.3f}, token-free {acc_free:.3f}, untrained {acc_untrained:.3f} "
                    f"(95% CI {ci.low:.3f}-{ci.high:.3f})")
    assert acc_full >= 0.60
    assert acc_free >= 0.55
    assert ci.low <= 0.5 <= ci.high
