import csv
import math

import numpy as np
import pytest

from grabdae import nn
from grabdae.config import TrainConfig
from grabdae.data import load_checkpoint
from grabdae.grabmask import apply_mask_blur, grabcut_segment
from grabdae.model import ModelConfig, StudentModel, StudentOutput, TeacherModel, DISCRIMINATOR_KEYS
from grabdae.nn import Tensor
from grabdae.train import (
    METRICS_COLUMNS,
    CyclingSampler,
    LossBreakdown,
    MaskCache,
    NonFiniteLossError,
    StepRngs,
    classification_loss,
    domain_adversarial_loss,
    evaluate,
    grl_value,
    ls_ramp_value,
    report_from_predictions,
    self_supervised_loss,
    student_forward,
    train,
    train_step,
)

from conftest import TINY_NET

SMALL = dict(image_side=8, conv1=4, conv2=4, feature_dim=8, disc_hidden=8)


def small_model(num_classes=3, seed=0, **kw):
    return StudentModel(ModelConfig(num_classes=num_classes, **{**SMALL, **kw}), seed=seed)


def images(rng, n=4, side=8):
    return rng.uniform(0, 1, (n, 3, side, side)).astype(np.float32)


def snapshot(model):
    return {k: v.data.copy() for k, v in model.params.items()}


# -- classification_loss ----------------------------------------------------

def test_classification_loss_near_ln_k_at_init(rng):
    m = small_model(num_classes=4)
    loss, _ = classification_loss(m, images(rng, 16), rng.integers(0, 4, 16), rng, training=False)
    assert abs(loss.item() - math.log(4)) <= 0.2


def test_classification_loss_is_mean_of_both_paths(rng):
    m = small_model()
    x, y = images(rng), np.array([0, 1, 2, 1])
    loss, out = classification_loss(m, x, y, np.random.default_rng(3))
    hand = 0.5 * (nn.softmax_cross_entropy(out.logits_orig, y).item() + nn.softmax_cross_entropy(out.logits_recon, y).item())
    assert loss.item() == pytest.approx(hand, abs=1e-6)


def test_classification_loss_overfits_separable_batch():
    r = np.random.default_rng(0)
    x = np.zeros((4, 3, 8, 8), np.float32)
    y = np.array([0, 1, 2, 0])
    for i, k in enumerate(y):
        x[i, k] = 1.0  # class = lit channel
    x += r.uniform(0, 0.05, x.shape).astype(np.float32)
    m = small_model(dropout=0.0)
    opt = nn.SGD(m.parameters(), lr=0.01, momentum=0.9, weight_decay=0.0)
    for _ in range(200):
        loss, _ = classification_loss(m, x, y, r)
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
    final, _ = classification_loss(m, x, y, r)
    assert final.item() < 0.05


def test_classification_loss_needs_labels(rng):
    with pytest.raises(ValueError):
        classification_loss(small_model(), images(rng), None, rng)


# -- self_supervised_loss ---------------------------------------------------

def test_self_supervised_degenerate_consistency(rng):
    m = small_model(dropout=0.0)
    t = TeacherModel(m)
    x = images(rng, 6)
    ls = self_supervised_loss(m, t, x, x, rng, training=False)
    logits = m.classify(m.extract_features(x), False)
    hand = nn.softmax_cross_entropy(logits, logits.data.argmax(axis=1)).item()
    assert np.isfinite(ls.item()) and ls.item() == pytest.approx(hand, abs=1e-6)


def test_self_supervised_misaligned(rng):
    m = small_model()
    with pytest.raises(ValueError):
        self_supervised_loss(m, TeacherModel(m), images(rng, 4), images(rng, 3), rng)


def test_self_supervised_non_negative_and_teacher_untouched(rng):
    m = small_model()
    t = TeacherModel(m)
    ls = self_supervised_loss(m, t, images(rng), images(rng), rng)
    assert ls.item() >= 0.0
    nn.backward(ls)
    assert all(p.grad is None for p in t.params.values())


def test_self_supervised_threshold_filters_everything(rng):
    m = small_model()
    ls = self_supervised_loss(m, TeacherModel(m), images(rng), images(rng), rng, threshold=1.0)
    assert ls.item() == 0.0


# -- domain_adversarial_loss ------------------------------------------------

def _outputs(m, rng, n=4):
    return (student_forward(m, images(rng, n), True, rng), student_forward(m, images(rng, n), True, rng))


def test_domain_loss_near_ln2_at_init(rng):
    m = small_model()
    s, t = _outputs(m, rng, 8)
    assert abs(domain_adversarial_loss(m, s, t, 1.0).item() - math.log(2)) <= 0.2


def test_domain_loss_lambda_zero_no_extractor_gradient(rng):
    m = small_model()
    s, t = _outputs(m, rng)
    nn.backward(domain_adversarial_loss(m, s, t, 0.0))
    for k in ("g.conv1.k", "g.fc.W"):
        g = m.params[k].grad
        assert g is None or not g.any()
    assert m.params["D.W1"].grad.any()


def test_domain_loss_empty_batch(rng):
    m = small_model()
    s, _ = _outputs(m, rng)
    empty = StudentOutput(*(Tensor(np.zeros((0, 8), np.float32)) for _ in range(2)),
                          *(Tensor(np.zeros((0, 3), np.float32)) for _ in range(2)), Tensor(np.zeros(())))
    with pytest.raises(ValueError):
        domain_adversarial_loss(m, s, empty, 1.0)


def test_discriminator_alone_separates_features():
    r = np.random.default_rng(0)
    m = small_model()
    n, d = 16, 8

    def out(shift):
        f = Tensor((r.normal(size=(n, d)) + shift).astype(np.float32))
        logits = Tensor(r.normal(size=(n, 3)).astype(np.float32))
        return StudentOutput(f, f, logits, logits, Tensor(np.zeros((), np.float32)))

    s, t = out(+2.0), out(-2.0)
    opt = nn.SGD([m.params[k] for k in DISCRIMINATOR_KEYS], lr=0.05, momentum=0.9, weight_decay=0.0)
    for _ in range(300):
        loss = domain_adversarial_loss(m, s, t, 1.0)
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
    assert domain_adversarial_loss(m, s, t, 1.0).item() < 0.1


# -- schedules --------------------------------------------------------------

def test_grl_schedules():
    assert grl_value(TrainConfig(grl_lambda=0.5), 0.3) == 0.5
    dann = TrainConfig(grl_schedule="dann")
    assert grl_value(dann, 0.0) == 0.0
    assert grl_value(dann, 1.0) == pytest.approx(2 / (1 + math.exp(-10)) - 1)


def test_ls_ramp():
    assert ls_ramp_value(TrainConfig(), 0.0) == 1.0
    cfg = TrainConfig(ls_rampup=0.5)
    assert ls_ramp_value(cfg, 0.0) == pytest.approx(math.exp(-5))
    assert ls_ramp_value(cfg, 0.5) == 1.0
    vals = [ls_ramp_value(cfg, p) for p in np.linspace(0, 1, 11)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_cycling_sampler_covers_each_index_per_pass():
    s = CyclingSampler(5, np.random.default_rng(0))
    assert sorted(np.concatenate([s.take(2), s.take(3)]).tolist()) == list(range(5))


# -- train_step -------------------------------------------------------------

def _step_inputs(seed=0):
    r = np.random.default_rng(seed)
    return images(r), r.integers(0, 3, 4), images(r), images(r)


def _run_steps(cfg, steps=3, seed=0):
    m = small_model(seed=seed, dropout=cfg.dropout)
    t = TeacherModel(m)
    opt = nn.SGD(m.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    rngs = StepRngs.from_seed(seed)
    out = []
    for i in range(steps):
        xs, ys, xt, xm = _step_inputs(i)
        out.append(train_step(m, t, opt, xs, ys, xt, xm, cfg, rngs))
    return m, t, out


def test_train_step_additivity():
    cfg = TrainConfig(lr=0.01, lambda_s=0.7, lambda_re=1.3, lambda_d=0.4)
    _, _, hist = _run_steps(cfg, steps=5)
    for br in hist:
        assert abs(br.total - br.weighted_sum(cfg)) <= 1e-6


def test_train_step_deterministic():
    cfg = TrainConfig(lr=0.01)
    m1, t1, h1 = _run_steps(cfg)
    m2, t2, h2 = _run_steps(cfg)
    assert h1 == h2
    assert all(m1.params[k].data.tobytes() == m2.params[k].data.tobytes() for k in m1.params)
    assert all(t1.params[k].data.tobytes() == t2.params[k].data.tobytes() for k in t1.params)


def _reference_step(cfg, keep, seed=0):
    """One step built only from the named loss terms, mirroring train_step's streams."""
    m = small_model(seed=seed, dropout=cfg.dropout)
    t = TeacherModel(m)
    opt = nn.SGD(m.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    rngs = StepRngs.from_seed(seed)
    xs, ys, xt, xm = _step_inputs(0)
    L_cls, out_s = classification_loss(m, xs, ys, rngs.source)
    out_t = student_forward(m, xt, True, rngs.target)
    total = L_cls
    if "s" in keep:
        total = total + self_supervised_loss(m, t, xt, xm, rngs.masked) * cfg.lambda_s
    if "re" in keep:
        total = total + (out_s.L_re + out_t.L_re) * (0.5 * cfg.lambda_re)
    if "d" in keep:
        total = total + domain_adversarial_loss(m, out_s, out_t, cfg.grl_lambda) * cfg.lambda_d
    opt.zero_grad()
    nn.backward(total)
    opt.step()
    return m


@pytest.mark.parametrize("zeroed", ["lambda_s", "lambda_re", "lambda_d", "all"])
def test_zeroed_lambda_removes_contribution(zeroed):
    names = ["lambda_s", "lambda_re", "lambda_d"] if zeroed == "all" else [zeroed]
    cfg = TrainConfig(lr=0.05, **{n: 0.0 for n in names})
    keep = {"s", "re", "d"} - {n.split("_")[1] for n in names}
    m_ref = _reference_step(cfg, keep)
    m, _, _ = _run_steps(cfg, steps=1)
    for k in m.params:
        np.testing.assert_allclose(m.params[k].data, m_ref.params[k].data, rtol=0, atol=1e-7)


def test_train_step_non_finite_names_component():
    cfg = TrainConfig()
    m = small_model()
    m.params["C.W"].data[...] = np.inf
    xs, ys, xt, xm = _step_inputs()
    with pytest.raises(NonFiniteLossError, match="L_cls"):
        train_step(m, TeacherModel(m), nn.SGD(m.parameters(), 0.01), xs, ys, xt, xm, cfg, StepRngs.from_seed(0))


def test_loss_breakdown_weighted_sum():
    br = LossBreakdown(1.0, 2.0, 3.0, 4.0, 0.0, s_ramp=0.5)
    cfg = TrainConfig(lambda_s=2.0, lambda_re=0.5, lambda_d=0.25)
    assert br.weighted_sum(cfg) == 1.0 + 2.0 + 1.5 + 1.0


# -- evaluate ---------------------------------------------------------------

def test_report_perfect():
    r = report_from_predictions([0, 1, 2, 1], [0, 1, 2, 1], ["a", "b", "c"])
    assert r.per_class == [100.0, 100.0, 100.0] and r.average == 100.0


def test_report_known_confusion():
    r = report_from_predictions([0, 0, 0, 1, 1, 1], [0, 0, 0, 0, 1, 1], ["a", "b"])
    assert r.per_class[0] == 75.0 and r.per_class[1] == 100.0


def test_report_unweighted_average_and_absent_class():
    r = report_from_predictions([0] * 9 + [0], [0] * 9 + [1], ["a", "b", "c"])
    assert r.per_class == [100.0, 0.0, None]
    assert r.counts == [9, 1, 0]
    assert r.average == 50.0


def test_evaluate_deterministic_and_side_effect_free(rng):
    m = small_model()
    x, y = images(rng, 10), rng.integers(0, 3, 10)
    before = snapshot(m)
    a = evaluate(m, x, y, ["a", "b", "c"])
    b = evaluate(m, x, y, ["a", "b", "c"])
    assert a == b
    assert all(before[k].tobytes() == m.params[k].data.tobytes() for k in before)
    assert all(p.grad is None for p in m.parameters())


def test_evaluate_needs_labels(rng):
    with pytest.raises(ValueError):
        evaluate(small_model(), images(rng), None, ["a", "b", "c"])


# -- mask cache -------------------------------------------------------------

def test_mask_cache_matches_recomputation(tiny_domains, tmp_path):
    _, target = tiny_domains
    xt = target.load_images()[:4]
    params = TrainConfig(**{k: v for k, v in TINY_NET.items() if k.startswith("gm_")}).grabmask(16)
    cache = MaskCache(tmp_path / "mc")
    first, _ = cache.masked_images(xt, params, seed=0)
    second, _ = cache.masked_images(xt, params, seed=0)  # served from disk
    for img, a, b in zip(xt, first, second):
        direct = apply_mask_blur(img, grabcut_segment(img, None, params, 0).mask, params.blur_sigma).astype(np.float32)
        assert a.tobytes() == direct.tobytes() == b.tobytes()
    assert len(list((tmp_path / "mc").glob("*.pgm"))) == 4


# -- train ------------------------------------------------------------------

def tiny_cfg(**kw):
    return TrainConfig(**{**TINY_NET, "batch_size": 16, "lr": 0.01, **kw})


def test_train_one_epoch_smoke(tiny_domains, tmp_path):
    source, target = tiny_domains
    assert len(source) == len(target) == 64
    res = train(tiny_cfg(epochs=1), source, target, tmp_path / "run")
    with open(tmp_path / "run" / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert len(rows) == 2
    assert all(math.isfinite(float(v)) for v in rows[1][1:])
    assert (tmp_path / "run" / "checkpoint.gdae").exists()
    assert (tmp_path / "run" / "config.json").exists()
    assert res.history[0]["epoch"] == 1


def test_train_zero_epochs_checkpoint_is_init(tiny_domains, tmp_path):
    source, target = tiny_domains
    cfg = tiny_cfg(epochs=0, seed=11)
    res = train(cfg, source, target, tmp_path / "run")
    student, teacher, meta = load_checkpoint(res.checkpoint)
    init = StudentModel(cfg.model_config(2, 16), seed=11)
    for k, t in init.params.items():
        assert student.params[k].data.tobytes() == t.data.tobytes()
        if k in teacher.params:
            assert teacher.params[k].data.tobytes() == t.data.tobytes()
    assert meta["class_names"] == source.class_names


def test_train_unwritable_run_dir(tiny_domains, tmp_path):
    source, target = tiny_domains
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        train(tiny_cfg(epochs=1), source, target, blocker / "run")
    assert not (tmp_path / "mask_cache").exists()


def test_train_rejects_unlabelled_source(tiny_domains, tmp_path):
    from grabdae.data import load_dataset

    source, target = tiny_domains
    with pytest.raises(ValueError):
        train(tiny_cfg(epochs=1), load_dataset(source.root, labeled=False), target, tmp_path / "run")
