import numpy as np
import pytest

from conftest import SMALL_CFG, randomize_params
from glyphflow.atlas import NULL_TOKEN, default_atlas, vocab_for
from glyphflow.backbone import Model
from glyphflow.corpus import CorpusConfig, generate_corpus
from glyphflow.flow import (AdamW, RegimeDraw, RegimeProbs, TimestepTriplet,
                            TrainConfig, TrainData, compute_loss, format_log_line,
                            interpolate, parse_log_line, perturb_box_latent,
                            run_training, sample_regime, sample_t_logitnormal,
                            train_step, velocity_target)


def test_interpolate_endpoints_exact(rng):
    clean = rng.standard_normal((8, 8)).astype(np.float32)
    noise = rng.standard_normal((8, 8)).astype(np.float32)
    assert np.array_equal(interpolate(clean, noise, 0.0), clean)
    assert np.array_equal(interpolate(clean, noise, 1.0), noise)
    quarter = interpolate(np.zeros(4, np.float64), np.ones(4, np.float64), 0.25)
    assert np.allclose(quarter, 0.25)
    with pytest.raises(ValueError):
        interpolate(clean, noise[:4], 0.5)


def test_velocity_identity(rng):
    for _ in range(100):
        x0 = rng.standard_normal(20)
        eps = rng.standard_normal(20)
        t = rng.uniform(0, 1)
        u = velocity_target(x0, eps)
        assert np.abs(interpolate(x0, eps, t) - t * u - x0).max() < 1e-6


def test_logit_normal_statistics(rng):
    draws = np.array([sample_t_logitnormal(rng) for _ in range(100_000)])
    assert np.all((draws > 0) & (draws < 1))
    assert abs(np.median(draws) - 0.5) < 0.01
    frac = np.mean((draws > 0.25) & (draws < 0.75))
    assert abs(frac - 0.7286) < 0.01


def test_regime_pinning_rules(rng):
    probs = RegimeProbs()
    for _ in range(2000):
        d = sample_regime(probs, 0.1, rng)
        t = d.t
        if d.regime == "S1":
            assert t.t_img == 1.0 and t.t_cond == 0.0 and 0 < t.t_box < 1
            assert d.delta is None
        elif d.regime == "S2":
            assert t.t_box == 0.0 and t.t_cond == 0.0 and 0 < t.t_img < 1
            assert 0.0 <= d.delta <= 0.1
        elif d.regime == "joint":
            assert t.t_img == t.t_box == t.t_cond
        else:
            assert t.t_box == 1.0 and t.t_cond == 1.0


def test_regime_degenerate_distributions(rng):
    only_s1 = RegimeProbs(1.0, 0.0, 0.0, 0.0)
    assert all(sample_regime(only_s1, 0.1, rng).regime == "S1" for _ in range(50))
    only_joint = RegimeProbs(0.0, 0.0, 1.0, 0.0)
    for _ in range(50):
        d = sample_regime(only_joint, 0.1, rng)
        assert d.regime == "joint" and d.t.t_img == d.t.t_box == d.t.t_cond


def test_regime_frequencies(rng):
    probs = RegimeProbs()
    n = 20_000
    counts = {}
    for _ in range(n):
        r = sample_regime(probs, 0.1, rng).regime
        counts[r] = counts.get(r, 0) + 1
    for name, p in (("S1", 0.35), ("S2", 0.35), ("joint", 0.25), ("uncond", 0.05)):
        assert abs(counts.get(name, 0) / n - p) < 0.02


def test_regime_probs_validation():
    with pytest.raises(ValueError):
        RegimeProbs(0.5, 0.5, 0.5, 0.0).validate()
    with pytest.raises(ValueError):
        RegimeProbs(-0.1, 0.6, 0.25, 0.25).validate()
    with pytest.raises(ValueError):
        TimestepTriplet(1.2, 0.0, 0.0)


def test_perturb_box_latent(rng):
    b0 = rng.standard_normal((16, 16)).astype(np.float64)
    assert np.array_equal(perturb_box_latent(b0, 0.0, rng), b0)
    pure = perturb_box_latent(b0, 1.0, np.random.default_rng(0))
    expected = np.random.default_rng(0).standard_normal(b0.shape)
    assert np.allclose(pure, expected)
    # Monte Carlo second moment: for b0 = 0, E|b~ - b0|^2 = delta^2 * numel
    zeros = np.zeros(12288)
    delta = 0.3
    total = 0.0
    for _ in range(1000):
        diff = perturb_box_latent(zeros, delta, rng) - zeros
        total += float(diff @ diff)
    mean = total / 1000
    assert abs(mean - delta ** 2 * zeros.size) / (delta ** 2 * zeros.size) < 0.03


def _const_pred(val, shape=(2, 4)):
    return np.full(shape, val, dtype=np.float64)


def test_compute_loss_zero_and_regimes():
    zero = {m: _const_pred(0.0) for m in ("img", "box", "cond")}
    total, comps = compute_loss(zero, zero, "joint", 0.01)
    assert total == 0.0 and all(v == 0.0 for v in comps.values())

    preds = {"img": _const_pred(np.sqrt(0.2)), "box": _const_pred(np.sqrt(0.3)),
             "cond": _const_pred(np.sqrt(0.5))}
    targets = {m: _const_pred(0.0) for m in preds}
    total, comps = compute_loss(preds, targets, "joint", 0.01)
    assert abs(total - 1.0) < 1e-9

    total_s1, comps_s1 = compute_loss(preds, targets, "S1", 0.0)
    assert total_s1 == comps_s1["box"]

    total_s2, _ = compute_loss(preds, targets, "S2", 0.01)
    assert abs(total_s2 - (0.2 + 0.01 * (0.3 + 0.5))) < 1e-9


@pytest.fixture(scope="module")
def small_world():
    atlas = default_atlas()
    cfg = CorpusConfig(canvas_size=32, font_size=10, k_min=1, k_max=3, seed=2)
    trips = generate_corpus(cfg, atlas, 8)
    model_cfg = SMALL_CFG
    data = TrainData(trips, model_cfg, vocab_for(atlas))
    return atlas, trips, model_cfg, data


def test_train_step_lr_zero_keeps_params(small_world):
    atlas, trips, model_cfg, data = small_world
    model = Model(model_cfg, seed=3)
    randomize_params(model, np.random.default_rng(5), 0.05)
    before = {k: v.copy() for k, v in model.params.items()}
    tcfg = TrainConfig(total_steps=1, batch_size=2, seed=1, learning_rate=1e-30)
    opt = AdamW(model.params)
    rec = train_step(model, opt, data, tcfg, 0)
    worst = max(np.abs(model.params[k] - before[k]).max() for k in before)
    assert worst < 1e-25
    assert np.isfinite(rec["total"])


def test_train_loss_decreases_on_smoke_run(small_world):
    atlas, trips, model_cfg, data = small_world
    model = Model(model_cfg, seed=3)
    tcfg = TrainConfig(total_steps=200, batch_size=2, seed=4,
                       learning_rate=1e-3)
    opt = AdamW(model.params)
    losses = [train_step(model, opt, data, tcfg, s)["total"] for s in range(200)]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_training_deterministic_across_runs(small_world, tmp_path):
    atlas, trips, model_cfg, _ = small_world
    tcfg = TrainConfig(total_steps=12, batch_size=2, seed=9, save_every=100)
    logs = []
    for run in range(2):
        model = Model(model_cfg, seed=1)
        run_training(model, trips, tcfg, tmp_path / f"run{run}",
                     vocab_for(atlas), corpus_seed=2)
        logs.append((tmp_path / f"run{run}" / "train.log").read_text())
    assert logs[0] == logs[1]


def test_resume_reproduces_loss_curve(small_world, tmp_path):
    atlas, trips, model_cfg, _ = small_world
    vocab = vocab_for(atlas)
    full_cfg = TrainConfig(total_steps=12, batch_size=2, seed=13, save_every=6)
    model_a = Model(model_cfg, seed=1)
    run_training(model_a, trips, full_cfg, tmp_path / "full", vocab, corpus_seed=2)
    full_log = [parse_log_line(l)
                for l in (tmp_path / "full" / "train.log").read_text().splitlines()]

    half_cfg = TrainConfig(total_steps=6, batch_size=2, seed=13, save_every=100)
    model_b = Model(model_cfg, seed=1)
    run_training(model_b, trips, half_cfg, tmp_path / "resumed", vocab, corpus_seed=2)
    model_c, opt_state, step, _ = Model.load(tmp_path / "resumed" / "ckpt.cmck")
    assert step == 6
    run_training(model_c, trips, full_cfg, tmp_path / "resumed", vocab,
                 opt_state=opt_state, start_step=step, corpus_seed=2)
    resumed_log = [parse_log_line(l)
                   for l in (tmp_path / "resumed" / "train.log").read_text().splitlines()]
    assert len(resumed_log) == len(full_log) == 12
    for a, b in zip(full_log, resumed_log):
        assert a == b
    # and the final weights agree bitwise
    final_a = Model.load(tmp_path / "full" / "ckpt.cmck")[0]
    final_b = Model.load(tmp_path / "resumed" / "ckpt.cmck")[0]
    for k in final_a.params:
        assert np.array_equal(final_a.params[k], final_b.params[k])


def test_uncond_regime_nulls_prompt(small_world):
    atlas, trips, model_cfg, data = small_world
    from glyphflow.flow import build_batch
    draw = RegimeDraw("uncond", TimestepTriplet(0.5, 1.0, 1.0))
    tcfg = TrainConfig(seed=0)
    _, _, prompts = build_batch(data, tcfg, draw, np.array([0, 1]), step=0)
    for row, idx in zip(prompts, (0, 1)):
        n_real = int(data.prompt_lens[idx])
        assert np.all(row[:n_real] == NULL_TOKEN)
        assert np.all(row[n_real:] == 0)


def test_log_line_roundtrip():
    rec = dict(step=12, total=1.25, L_img=0.5, L_box=0.25, L_cond=0.125,
               regime="S2", t_img=0.4, t_box=0.0, t_cond=0.0)
    line = format_log_line(rec)
    assert line.split("\t")[5] == "S2"
    parsed = parse_log_line(line)
    assert parsed["step"] == 12 and parsed["regime"] == "S2"
    assert parsed["total"] == pytest.approx(1.25)


def test_non_finite_loss_aborts(small_world):
    atlas, trips, model_cfg, data = small_world
    model = Model(model_cfg, seed=3)
    randomize_params(model, np.random.default_rng(5), 0.05)
    model.params["out_img_w"][:] = 1e30  # velocity overflows in float32
    tcfg = TrainConfig(total_steps=1, batch_size=2, seed=1)
    opt = AdamW(model.params)
    from glyphflow.flow import NonFiniteLossError
    with pytest.raises(NonFiniteLossError):
        train_step(model, opt, data, tcfg, 0)
