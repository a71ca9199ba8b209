import hashlib
import math

import pytest
import torch

from cueseg import train as train_mod
from cueseg.attention import AttentionConfig
from cueseg.dataio import SegSample
from cueseg.errors import ConfigError, NumericFailure, ShapeError
from cueseg.metrics import MetricReport
from cueseg.model import ModelConfig, build_model
from cueseg.synthetic import make_synthetic_corpus
from cueseg.train import (TrainConfig, load_checkpoint, load_config, prepare,
                          predict_logits, run_ablation_grid, save_checkpoint,
                          segmentation_loss, train)

import oracles as ref


def toy_cfg(**kw):
    base = dict(image_size=(32, 32), pyramid_channels=(8, 8, 16, 16),
                attention=AttentionConfig(num_heads=2, channels_per_layer=(8, 8, 8),
                                          channel_attn_reduction=2),
                text_vocab_size=64, text_dim=8, text_max_len=8, text_heads=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def toy_data():
    corpus = make_synthetic_corpus(6, seed=0, size=32, min_blobs=1)
    samples = [SegSample(s.id, s.image, s.text, s.mask) for s in corpus]
    cfg = toy_cfg()
    return prepare(samples[:4], cfg), prepare(samples[4:], cfg)


def quick(**kw):
    base = dict(epochs=2, batch_size=2, lr=1e-3, early_stop_patience=None)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_saturated_perfect_prediction_has_tiny_loss():
    target = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    logits = torch.where(target > 0, 20.0, -20.0).double()
    assert segmentation_loss(logits[None], target[None].double()).item() < 1e-6


def test_zero_logits_give_ln2_bce():
    target = torch.tensor([[[1.0, 0.0], [1.0, 0.0]]])
    loss = segmentation_loss(torch.zeros(1, 2, 2), target, "bce")
    assert loss.item() == pytest.approx(math.log(2), abs=1e-7)


def test_loss_matches_elementwise_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 1, 4, 4, generator=g, dtype=torch.float64) * 2
    target = (torch.rand(2, 1, 4, 4, generator=g) > 0.5).double()
    bce, dl = ref.bce_dice(logits.reshape(2, -1).numpy(), target.reshape(2, -1).numpy())
    assert segmentation_loss(logits, target, "bce").item() == pytest.approx(bce, abs=1e-12)
    assert segmentation_loss(logits, target, "dice").item() == pytest.approx(dl, abs=1e-12)
    assert segmentation_loss(logits, target).item() == pytest.approx(bce + dl, abs=1e-12)


def test_loss_is_nonnegative_and_checks_shapes():
    g = torch.Generator().manual_seed(1)
    for _ in range(20):
        logits = torch.randn(1, 1, 5, 5, generator=g) * 5
        target = (torch.rand(1, 1, 5, 5, generator=g) > 0.5).float()
        assert segmentation_loss(logits, target).item() >= 0
    with pytest.raises(ShapeError):
        segmentation_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1e-3})


def test_load_config_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("model:\n  image_size: [64, 64]\n  ablation: no_ca\n"
                    "train:\n  epochs: 3\n  lr: 0.001\ndata:\n  n: 8\n")
    m, t, d = load_config(path)
    assert m.image_size == (64, 64) and m.ablation == "no_ca"
    assert t.epochs == 3 and t.lr == 1e-3 and d == {"n": 8}
    path.write_text("optimizer: {}\n")
    with pytest.raises(ConfigError, match="optimizer"):
        load_config(path)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_plateau_halves_lr_after_exactly_patience_epochs(toy_data, monkeypatch):
    flat = MetricReport(per_image=[], miou=0.5, mdice=0.5, n=1)
    monkeypatch.setattr(train_mod, "evaluate_model", lambda *a, **k: flat)
    model = build_model(toy_cfg(), seed=0)
    res = train(model, *toy_data, quick(epochs=7, plateau_patience=2, lr=1e-3))
    lrs = [row["lr"] for row in res.history]
    # epoch 1 sets the best; epochs 2 and 3 do not improve -> epoch 4 runs at half
    assert lrs == pytest.approx([1e-3] * 3 + [5e-4] * 2 + [2.5e-4] * 2)


def test_lr_is_non_increasing(toy_data):
    res = train(build_model(toy_cfg(), seed=0), *toy_data, quick(epochs=4, plateau_patience=1))
    lrs = [row["lr"] for row in res.history]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert set(res.history[0]) == {"epoch", "loss", "miou", "mdice", "lr"}


def test_epoch_one_loss_is_reproducible(toy_data):
    losses = []
    for _ in range(2):
        res = train(build_model(toy_cfg(), seed=5), *toy_data, quick(epochs=1, seed=5))
        losses.append(res.history[0]["loss"])
    assert abs(losses[0] - losses[1]) <= 1e-6


def _digest(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def test_frozen_text_digest_unchanged(toy_data):
    model = build_model(toy_cfg(), seed=0)
    before = _digest(model.text_encoder)
    train(model, *toy_data, quick(epochs=2))
    assert _digest(model.text_encoder) == before


def test_nan_loss_aborts_naming_batch(toy_data):
    model = build_model(toy_cfg(), seed=0)
    with torch.no_grad():
        model.decoder.head.proj.bias.fill_(float("nan"))
    with pytest.raises(NumericFailure, match="epoch 1, batch 0"):
        train(model, *toy_data, quick())


def test_empty_split_is_config_error(toy_data):
    tr, va = toy_data
    empty = train_mod.PreparedData([], va.images[:0], va.token_ids[:0], va.masks[:0])
    with pytest.raises(ConfigError):
        train(build_model(toy_cfg()), tr, empty, quick())


def test_best_checkpoint_and_history_written(toy_data, tmp_path):
    res = train(build_model(toy_cfg(), seed=0), *toy_data, quick(epochs=2), out_dir=tmp_path)
    assert (tmp_path / "best.ckpt").exists()
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,miou,mdice,lr" and len(lines) == 3
    assert load_checkpoint(tmp_path / "best.ckpt").epoch == res.best_epoch


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_identical(toy_data, tmp_path):
    tr, va = toy_data
    res = train(build_model(toy_cfg(), seed=0), tr, va, quick(epochs=1))
    before = predict_logits(res.model, va)
    save_checkpoint(tmp_path / "m.ckpt", res.model, res.optimizer, 1, quick(epochs=1),
                    {"mdice": res.best_mdice})
    ck = load_checkpoint(tmp_path / "m.ckpt")
    after = predict_logits(ck.build_model(), va)
    assert torch.equal(before, after)
    assert ck.metrics == {"mdice": res.best_mdice}
    assert len(ck.config_digest) == 64
    # optimizer state restores into a fresh Adam
    model = ck.build_model()
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad])
    opt.load_state_dict(ck.optimizer_state)
    ref_state = res.optimizer.state_dict()["state"]
    for k, st in opt.state_dict()["state"].items():
        assert torch.equal(st["exp_avg"], ref_state[k]["exp_avg"])


def test_bad_checkpoint_file(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nope")
    with pytest.raises(Exception, match="cannot open"):
        load_checkpoint(tmp_path / "x.ckpt")


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

def test_ablation_grid_reports_all_variants(toy_data, tmp_path):
    report = run_ablation_grid(toy_cfg(), quick(epochs=1), *toy_data, out_dir=tmp_path)
    assert [r.variant for r in report.rows] == ["full", "no_tvha", "no_cma", "no_ca"]
    for r in report.rows:
        assert r.status == "ok" and 0 <= r.miou <= 1 and 0 <= r.mdice <= 1
    assert report.row("no_tvha").params < report.row("full").params
    md = report.to_markdown()
    assert "82.47" in md and "full minus no_tvha" in md
    assert report.to_csv().splitlines()[0].startswith("variant,params")


def test_ablation_grid_continues_past_failed_variant(toy_data):
    report = run_ablation_grid(toy_cfg(), quick(epochs=1), *toy_data,
                               variants=["bogus", "no_tvha"])
    assert report.rows[0].status == "failed" and "ablation" in report.rows[0].error
    assert report.rows[1].status == "ok"
    assert report.ranking() == ["no_tvha"]
