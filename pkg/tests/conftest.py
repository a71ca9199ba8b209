import numpy as np
import pytest
import torch

from cueseg.attention import AttentionConfig
from cueseg.model import ModelConfig


def randomize_(module, seed=0, scale=0.5):
    """Overwrite every parameter with N(0, scale^2) so biases and norm
    affine terms are exercised too."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def fd_relative_error(loss_fn, tensors, eps=1e-6, floor=1e-4):
    """Worst per-tensor relative error ||analytic - numeric|| / max(norms, floor)
    between autograd gradients and central finite differences.

    ``floor`` keeps tensors whose true gradient is identically zero (e.g. key
    biases, which softmax cancels) from dividing finite-difference noise by ~0.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            num = torch.zeros_like(t)
            flat = t.data.view(-1)
            nflat = num.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = loss_fn().item()
                flat[i] = orig - eps
                lm = loss_fn().item()
                flat[i] = orig
                nflat[i] = (lp - lm) / (2 * eps)
            denom = max(g.norm().item(), num.norm().item(), floor)
            worst = max(worst, (g - num).norm().item() / denom)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_attention_cfg():
    return AttentionConfig(num_heads=2, channels_per_layer=(8, 4, 4),
                           channel_attn_reduction=2)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(image_size=(64, 64), pyramid_channels=(8, 16, 16, 32),
                       attention=AttentionConfig(num_heads=2, channels_per_layer=(16, 8, 8),
                                                 channel_attn_reduction=4),
                       text_vocab_size=256, text_dim=16, text_max_len=16, text_heads=2)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion in the terminal report
# ---------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}"
    if detail:
        line += f" -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
