import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cueseg.attention import AttentionConfig
from cueseg.errors import ConfigError, ShapeError, TokenizationError
from cueseg.model import (ABLATIONS, ConvPyramidEncoder, Decoder, ModelConfig, SubpixelHead,
                          TextEncoder, build_model, count_parameters, images_to_tensor,
                          predict_mask)
from cueseg.text import batch_token_ids, tokenize

import oracles as ref

# Regression values for the default config; the ordering is what matters, the
# exact numbers catch accidental architecture changes.
DEFAULT_PARAMS = {"full": 1098153, "no_tvha": 1007009, "no_cma": 1007913, "no_ca": 1097249}


def small_cfg(**kw):
    base = dict(image_size=(32, 32), pyramid_channels=(8, 8, 16, 16),
                attention=AttentionConfig(num_heads=2, channels_per_layer=(8, 8, 8),
                                          channel_attn_reduction=2),
                text_vocab_size=64, text_dim=8, text_max_len=8, text_heads=2)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_rejects_indivisible_size_and_unknown_ablation():
    with pytest.raises(ConfigError, match="32"):
        ModelConfig(image_size=(100, 96))
    with pytest.raises(ConfigError, match="ablation"):
        ModelConfig(ablation="no_text")


def test_config_dict_round_trip():
    cfg = small_cfg(ablation="no_ca")
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({**cfg.to_dict(), "depth": 3})


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("hw, expected", [
    ((384, 384), [(96, 96), (48, 48), (24, 24), (12, 12)]),
    ((32, 32), [(8, 8), (4, 4), (2, 2), (1, 1)]),
    ((384, 320), [(96, 80), (48, 40), (24, 20), (12, 10)]),
])
def test_encode_image_pyramid_shapes(hw, expected):
    model = build_model(ModelConfig(), seed=0).eval()
    with torch.no_grad():
        pyr = model.encode_image(torch.rand(1, 3, *hw))
    assert [tuple(f.shape[-2:]) for f in pyr] == expected
    assert [f.shape[1] for f in pyr] == [32, 64, 128, 256]


def test_encode_image_rejects_indivisible_size():
    model = build_model(small_cfg(), seed=0)
    with pytest.raises(ShapeError, match="divisible by 32"):
        model.encode_image(torch.rand(1, 3, 48, 32))


def test_encode_text_shapes():
    enc = TextEncoder(vocab_size=100, dim=768, max_len=16, num_layers=1, num_heads=8).eval()
    ids = torch.tensor([[1, 5, 6, 7, 8, 9, 10]])
    assert enc(ids).shape == (1, 7, 768)
    assert enc(torch.tensor([[1]])).shape == (1, 1, 768)


def test_encode_text_reports_offending_index():
    enc = TextEncoder(vocab_size=10, dim=8, max_len=8, num_heads=2)
    with pytest.raises(TokenizationError, match=r"token id 12 at index \(0, 2\)"):
        enc(torch.tensor([[1, 3, 12, 4]]))
    with pytest.raises(TokenizationError, match="length"):
        enc(torch.ones(1, 9, dtype=torch.long))


def test_tokenizer_is_stable_and_bounded():
    ids = tokenize("A polyp near the fold", vocab_size=50, max_len=8)
    assert ids[0] == 1 and len(ids) == 6
    assert all(2 <= i < 50 for i in ids[1:])
    assert ids == tokenize("a  POLYP near the fold", vocab_size=50, max_len=8)
    batch = batch_token_ids(["polyp", "two words"], vocab_size=50, max_len=8)
    assert batch.shape == (2, 3) and batch[0, 2] == 0


def test_frozen_text_encoder_is_bit_identical_after_two_steps():
    model = build_model(small_cfg(), seed=0)
    model.freeze_text(True)
    model.train()
    before = {k: v.clone() for k, v in model.text_encoder.state_dict().items()}
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-2)
    x = torch.rand(2, 3, 32, 32)
    ids = model.tokenize(["polyp", "a round lesion"])
    for _ in range(2):
        opt.zero_grad()
        model(x, ids).mean().backward()
        opt.step()
    assert not model.text_encoder.training
    for k, v in model.text_encoder.state_dict().items():
        assert torch.equal(v, before[k]), k


# ---------------------------------------------------------------------------
# decoder and head
# ---------------------------------------------------------------------------

def test_decode_384_with_768_channel_text():
    # one head keeps the 96x96 self-attention map within a few hundred MB
    cfg = ModelConfig(image_size=(384, 384), pyramid_channels=(8, 8, 8, 8),
                      attention=AttentionConfig(num_heads=1, channels_per_layer=(8, 8, 8),
                                                channel_attn_reduction=2))
    dec = Decoder(cfg.pyramid_channels, 768, cfg.attention).eval()
    pyr = [torch.rand(1, 8, 384 // s, 384 // s) for s in (4, 8, 16, 32)]
    with torch.no_grad():
        out = dec(pyr, torch.rand(1, 7, 768))
    assert out.shape == (1, 1, 384, 384)
    assert torch.isfinite(out).all()


def test_decode_names_failing_layer_on_channel_mismatch():
    cfg = small_cfg()
    dec = Decoder(cfg.pyramid_channels, cfg.text_dim, cfg.attention)
    pyr = [torch.rand(1, c, 32 // s, 32 // s) for c, s in zip((8, 8, 16, 16), (4, 8, 16, 32))]
    pyr[1] = torch.rand(1, 5, 4, 4)
    with pytest.raises(ShapeError, match="decoder layer 2"):
        dec(pyr, torch.rand(1, 3, 8))


def test_pixel_shuffle_matches_index_oracle():
    head = SubpixelHead(1)
    x = torch.arange(16 * 2 * 2, dtype=torch.float64).reshape(1, 16, 2, 2)
    got = head.shuffle(x)[0].numpy()
    assert got.shape == (1, 8, 8)
    np.testing.assert_array_equal(got, ref.pixel_shuffle(x[0].numpy(), 4))
    # top-left 4x4 tile is input pixel (0,0)'s 16 channels, row-major
    np.testing.assert_array_equal(got[0, :4, :4].ravel(), x[0, :, 0, 0].numpy())


def test_head_identity_projection_yields_shuffled_block():
    head = SubpixelHead(1).double()
    with torch.no_grad():
        head.proj.weight.fill_(1.0)
        head.proj.bias.zero_()
    x = torch.randn(1, 16, 2, 2, dtype=torch.float64)
    out = head.shuffle_and_project(x)
    np.testing.assert_array_equal(out[0].detach().numpy(), ref.pixel_shuffle(x[0].numpy(), 4))


def test_no_tvha_has_same_output_shape_and_fewer_params():
    full = build_model(small_cfg(), seed=0)
    plain = build_model(small_cfg(ablation="no_tvha"), seed=0)
    x = torch.rand(1, 3, 32, 32)
    ids = full.tokenize(["polyp"])
    assert plain(x, ids).shape == full(x, ids).shape == (1, 1, 32, 32)
    assert count_parameters(plain) < count_parameters(full)


def test_parameter_count_ordering_and_regression_values():
    counts = {a: count_parameters(build_model(ModelConfig(ablation=a))) for a in ABLATIONS}
    assert counts == DEFAULT_PARAMS
    assert counts["no_tvha"] < counts["no_cma"] < counts["full"]
    assert counts["no_ca"] < counts["full"]


# ---------------------------------------------------------------------------
# forward contract
# ---------------------------------------------------------------------------

def test_forward_is_deterministic_in_eval_mode():
    x = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    outs = []
    for _ in range(2):
        model = build_model(small_cfg(image_size=(64, 64)), seed=3).eval()
        with torch.no_grad():
            outs.append(model(x, model.tokenize(["polyp", "polyp"])))
    assert torch.equal(outs[0], outs[1])


def test_batch_matches_single_forwards():
    model = build_model(small_cfg(image_size=(64, 64)), seed=1).eval()
    x = torch.rand(2, 3, 64, 64)
    ids = model.tokenize(["polyp", "small flat lesion"])
    with torch.no_grad():
        both = model(x, ids)
        singles = torch.cat([model(x[i:i + 1], model.tokenize([t]))
                             for i, t in enumerate(["polyp", "small flat lesion"])])
    assert torch.allclose(both, singles, atol=1e-5, rtol=0)


def test_text_changes_logits_in_full_variant():
    model = build_model(small_cfg(), seed=2).eval()
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        a = model(x, model.tokenize(["polyp"]))
        b = model(x, model.tokenize(["a flat red lesion"]))
    assert (a - b).abs().max() > 0


def test_every_trainable_parameter_receives_gradient():
    model = build_model(small_cfg(), seed=0).double()
    model.freeze_text(True)
    model.train()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    ids = model.tokenize(["polyp", "a round lesion"])
    target = (torch.rand(2, 1, 32, 32) > 0.5).double()
    loss = torch.nn.functional.binary_cross_entropy_with_logits(model(x, ids), target)
    loss.backward()
    dead = [n for n, p in model.named_parameters()
            if p.requires_grad and (p.grad is None or not p.grad.abs().max() > 0)]
    assert dead == []


def test_toy_model_loss_decreases_over_50_steps():
    torch.manual_seed(0)
    model = build_model(small_cfg(), seed=0)
    model.freeze_text(True)
    model.train()
    x = torch.rand(1, 3, 32, 32)
    target = torch.zeros(1, 1, 32, 32)
    target[..., 8:20, 10:24] = 1
    ids = model.tokenize(["polyp"])
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-3)
    curve = []
    for _ in range(50):
        opt.zero_grad()
        loss = torch.nn.functional.binary_cross_entropy_with_logits(model(x, ids), target)
        loss.backward()
        opt.step()
        curve.append(loss.item())
    print("loss curve:", " ".join(f"{v:.4f}" for v in curve[::5]), f"{curve[-1]:.4f}")
    assert curve[-1] < 0.5 * curve[0]


@settings(max_examples=15, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4))
def test_output_matches_input_size_for_any_multiple_of_32(h, w):
    torch.manual_seed(0)
    model = build_model(small_cfg()).eval()
    with torch.no_grad():
        out = model(torch.rand(1, 3, 32 * h, 32 * w), model.tokenize(["polyp"]))
    assert out.shape == (1, 1, 32 * h, 32 * w)


# ---------------------------------------------------------------------------
# predict_mask / helpers
# ---------------------------------------------------------------------------

def test_predict_mask_examples():
    assert predict_mask(torch.zeros(3, 3)).sum() == 0
    assert predict_mask(torch.full((3, 3), 10.0)).all()
    np.testing.assert_array_equal(predict_mask(torch.tensor([[-1.0, 1.0], [0.0, 3.0]])),
                                  [[0, 1], [0, 1]])
    with pytest.raises(ConfigError):
        predict_mask(torch.zeros(2, 2), threshold=1.0)


def test_images_to_tensor_layout():
    img = np.zeros((4, 6, 3), dtype=np.float32)
    img[1, 2] = [0.1, 0.2, 0.3]
    t = images_to_tensor([img])
    assert t.shape == (1, 3, 4, 6)
    assert torch.allclose(t[0, :, 1, 2], torch.tensor([0.1, 0.2, 0.3]))


def test_encoder_is_swappable():
    cfg = small_cfg()
    custom = ConvPyramidEncoder(cfg.pyramid_channels)
    model = type(build_model(cfg))(cfg, image_encoder=custom)
    assert model.image_encoder is custom
