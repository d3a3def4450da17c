import math

import numpy as np
import pytest

from npsemiseg.errors import ConfigError, FormatError
from npsemiseg.head import IGNORE_INDEX, bank_insert
from npsemiseg.model import DropoutSegModel, NPSegModel
from npsemiseg.rng import Rng
from npsemiseg.segmodel import EncoderConfig
from npsemiseg.synthdata import generate
from npsemiseg.tensor import Tensor
from npsemiseg.trainer import (SGD, Batch, TrainConfig, build_model, checkpoint_bytes,
                               checkpoint_from_bytes, fit, load_checkpoint, mc_dropout_predict,
                               pseudo_label, pseudo_label_from_probs, train_step)

TINY = dict(feature_channels=8, decoder_hidden=8, latent_hidden=8, latent_dim=4, context_dim=4,
            reduced_dim=4, encoder_depth=2, n_samples=3, batch_labeled=2, batch_unlabeled=2)


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def toy():
    return generate(seed=5, n_labeled=4, n_unlabeled=4, n_val=2, height=8, width=8)


def toy_batch(ds, split="labeled", n=2):
    s = ds.split(split)[:n]
    return Batch(np.stack([x.image for x in s]), np.stack([x.mask for x in s]).astype(np.int64))


def clone(model, cfg):
    return checkpoint_from_bytes(checkpoint_bytes(model, cfg))[0]


def full_clone(model, cfg):
    """Parameters, centers and bank contents."""
    twin = clone(model, cfg)
    for src, dst in ((model.head.context_banks, twin.head.context_banks),
                     (model.head.target_banks, twin.head.target_banks)):
        for c in range(cfg.n_class):
            if len(src[c].vectors()):
                dst[c].insert(src[c].vectors())
    twin.head.import_centers(model.head.export_centers())
    return twin


# pseudo-labels ----------------------------------------------------------------

def test_pseudo_label_rules():
    p = np.zeros((4, 1, 3))
    p[2, 0, 0] = 1.0                       # one-hot class 2
    p[1, 0, 1] = p[3, 0, 1] = 0.5          # tie between 1 and 3
    p[:, 0, 2] = [0.5, 0.2, 0.2, 0.1]
    assert pseudo_label_from_probs(p).tolist() == [[2, 1, 0]]
    assert pseudo_label_from_probs(p, threshold=0.9).tolist() == [[2, IGNORE_INDEX, IGNORE_INDEX]]


def test_pseudo_label_cold_and_warm(toy):
    model = build_model(tiny_cfg())
    imgs = toy_batch(toy, "unlabeled").images
    labels, unc = pseudo_label(model, imgs, Rng(0))
    assert labels.shape == (2, 8, 8) and unc.shape == (2, 8, 8)
    assert labels.min() >= 0 and labels.max() < 4
    assert np.all(unc >= -1e-6) and np.all(unc <= math.log(4) + 1e-5)


# train_step ------------------------------------------------------------------

def test_frozen_step_replays_identically(toy):
    cfg = tiny_cfg(learning_rate=0.0, kl_weight=0.0)
    model = build_model(cfg)
    opt = SGD(model.parameters(), 0.0, cfg.momentum)
    lab, unl = toy_batch(toy), toy_batch(toy, "unlabeled")
    train_step(model, lab, unl, opt, Rng(9), cfg)       # leaves the cold start behind
    twin = full_clone(model, cfg)
    a = train_step(model, lab, unl, opt, Rng(9), cfg)
    b = train_step(twin, lab, unl, SGD(twin.parameters(), 0.0), Rng(9), cfg)
    assert (a.l_c, a.l_kl, a.total) == (b.l_c, b.l_kl, b.total)


def test_single_image_overfits(toy):
    cfg = tiny_cfg(learning_rate=0.05, kl_weight=0.0, n_samples=1)
    model = build_model(cfg)
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    lab = toy_batch(toy, n=1)
    losses = [train_step(model, lab, None, opt, Rng(1), cfg).l_c for _ in range(50)]
    assert losses[-1] < 0.5 * losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_mean_aggregator_steps(toy):
    cfg = tiny_cfg(aggregator="mean")
    model = build_model(cfg)
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    for k in range(2):
        out = train_step(model, toy_batch(toy), toy_batch(toy, "unlabeled"), opt, Rng(k), cfg)
        assert np.isfinite(out.total)
    assert out.l_kl >= 0


def test_bank_insertion_counts(toy):
    cfg = tiny_cfg(bank_capacity=10_000, pseudo_label_threshold=0.99)
    model = build_model(cfg)
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    lab, unl = toy_batch(toy), toy_batch(toy, "unlabeled")
    lab.labels[0, :2] = IGNORE_INDEX
    # the step pseudo-labels from this exact state, so mirror it on a copy
    pl, _ = pseudo_label(clone(model, cfg), unl.images, Rng(4).child("pseudo"), 0.99)
    train_step(model, lab, unl, opt, Rng(4), cfg)
    n_lab = int(np.sum(lab.labels != IGNORE_INDEX))
    n_unl = int(np.sum(pl != IGNORE_INDEX))
    assert sum(model.head.context_banks.counts()) == n_lab
    assert sum(model.head.target_banks.counts()) == n_lab + n_unl


def supervised_oracle(model, lab, rng, T):
    """Pooled -log p over all valid pixels and samples, computed in float64 by hand."""
    head = model.head
    feats = model.encode(Tensor(lab.images))
    reduced = head.reduce(feats)
    for i in range(len(lab.images)):
        bank_insert(head.context_banks, reduced.data[i], lab.labels[i])
        bank_insert(head.target_banks, reduced.data[i], lab.labels[i])
    head.refresh_centers()
    total, n = 0.0, 0
    for i in range(len(lab.images)):
        out = head.forward(feats[i], rng.child(f"target/{i}"), T, reduced=reduced[i], allow_cold_start=True)
        p = out.probs.data.astype(np.float64)
        for y, x in zip(*np.nonzero(lab.labels[i] != IGNORE_INDEX)):
            total += -np.mean(np.log(np.maximum(p[:, lab.labels[i][y, x], y, x], 1e-12)))
            n += 1
    return total / n


def test_supervised_step_matches_oracle(toy):
    cfg = tiny_cfg(kl_weight=0.0)
    model = build_model(cfg)
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    lab = toy_batch(toy)
    lab.labels[1, 3:] = IGNORE_INDEX
    for k in range(2):             # second step runs with populated centers
        twin = full_clone(model, cfg)
        expected = supervised_oracle(twin, lab, Rng(k), cfg.n_samples)
        out = train_step(model, lab, None, opt, Rng(k), cfg)
        assert abs(out.l_c - expected) <= 1e-6
        assert out.total == out.l_c


def test_mc_dropout_step(toy):
    cfg = tiny_cfg(head="mc_dropout")
    model = build_model(cfg)
    assert isinstance(model, DropoutSegModel)
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    out = train_step(model, toy_batch(toy), toy_batch(toy, "unlabeled"), opt, Rng(0), cfg)
    assert np.isfinite(out.total) and out.l_kl == 0.0


def test_sgd_heavy_ball_update():
    from npsemiseg.tensor import Parameter
    p = Parameter(np.array([1.0, 2.0], np.float32))
    opt = SGD([p], lr=0.1, momentum=0.5)
    p.grad = np.array([1.0, -1.0], np.float32)
    opt.step()
    p.grad = np.array([1.0, -1.0], np.float32)
    opt.step()
    # v1 = g, v2 = 0.5 g + g
    np.testing.assert_allclose(p.data, [1.0 - 0.1 - 0.15, 2.0 + 0.1 + 0.15], atol=1e-6)


def test_config_validation():
    for bad in (dict(aggregator="max"), dict(head="crf"), dict(batch_labeled=0),
                dict(pseudo_label_threshold=1.5), dict(momentum=1.0), dict(dropout=1.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"seed": 1, "warmup": 3})
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)


# fit -------------------------------------------------------------------------

def test_fit_zero_epochs(toy):
    res = fit(tiny_cfg(epochs=0), toy)
    assert res.log == [] and res.optimizer.steps == 0
    fresh = build_model(tiny_cfg())
    assert all(np.array_equal(a.data, b.data) for a, b in zip(res.model.parameters(), fresh.parameters()))


def test_fit_same_seed_bitwise(toy, tmp_path):
    cfg = tiny_cfg(epochs=2)
    fit(cfg, toy, tmp_path / "a")
    fit(cfg, toy, tmp_path / "b")
    assert (tmp_path / "a" / "model.npck").read_bytes() == (tmp_path / "b" / "model.npck").read_bytes()
    assert (tmp_path / "a" / "centers.npss").read_bytes() == (tmp_path / "b" / "centers.npss").read_bytes()
    assert (tmp_path / "a" / "train_log.csv").exists()


def test_fit_labeled_only(toy):
    ds = generate(seed=5, n_labeled=3, n_unlabeled=0, n_val=1, height=8, width=8)
    res = fit(tiny_cfg(epochs=1), ds)
    assert len(res.log) == 1 and res.log[0].val_miou is not None
    assert res.optimizer.steps == 2


def test_fit_rejects_class_mismatch(toy):
    with pytest.raises(ConfigError):
        fit(tiny_cfg(n_class=6), toy)


# MC dropout ------------------------------------------------------------------

def dropout_model(p, seed=0):
    return DropoutSegModel(EncoderConfig(feature_channels=8, depth=2), 8, 4, p, seed)


def test_mc_dropout_without_dropout_is_deterministic(toy):
    img = toy.samples[0].image
    b = mc_dropout_predict(dropout_model(0.0), img, 4, Rng(1))
    assert all(np.array_equal(b.per_sample_probs[0], s) for s in b.per_sample_probs)
    p = b.per_sample_probs[0]
    np.testing.assert_allclose(b.uncertainty, -(p * np.log(np.maximum(p, 1e-12))).sum(axis=0), atol=1e-6)


def test_mc_dropout_single_pass_and_simplex(toy):
    img = toy.samples[1].image
    one = mc_dropout_predict(dropout_model(0.5), img, 1, Rng(2))
    assert np.array_equal(one.avg_probs, one.per_sample_probs[0])
    for p in (0.1, 0.3, 0.7, 0.9):
        m = dropout_model(p)
        calls = m.decoder.calls
        b = mc_dropout_predict(m, img, 5, Rng(3))
        assert m.decoder.calls - calls == 5
        assert np.abs(b.avg_probs.sum(axis=0) - 1).max() <= 1e-5 and b.avg_probs.min() >= 0
    with pytest.raises(ValueError):
        mc_dropout_predict(dropout_model(0.5), img, 0, Rng(0))


# checkpoints -----------------------------------------------------------------

@pytest.mark.parametrize("head", ["np", "mc_dropout"])
def test_checkpoint_round_trip_is_bitwise(toy, tmp_path, head):
    cfg = tiny_cfg(epochs=1, head=head)
    res = fit(cfg, toy, tmp_path)
    model, cfg2, steps = load_checkpoint(tmp_path / "model.npck")
    assert cfg2 == cfg and steps == res.optimizer.steps
    img = toy.split("val")[0].image
    if head == "np":
        a = res.model.predict(img, Rng(7)).per_sample_probs
        b = model.predict(img, Rng(7)).per_sample_probs
    else:
        a = mc_dropout_predict(res.model, img, 3, Rng(7)).per_sample_probs
        b = mc_dropout_predict(model, img, 3, Rng(7)).per_sample_probs
    assert np.array_equal(a, b)


def test_checkpoint_rejects_corruption(toy):
    cfg = tiny_cfg()
    buf = checkpoint_bytes(build_model(cfg), cfg, 3)
    for bad in (b"XXXX" + buf[4:], buf[:-5], buf + b"\0", buf[:10],
                buf[:4] + (7).to_bytes(2, "little") + buf[6:]):
        with pytest.raises(FormatError):
            checkpoint_from_bytes(bad)
    model, _, steps = checkpoint_from_bytes(buf)
    assert steps == 3 and isinstance(model, NPSegModel)
