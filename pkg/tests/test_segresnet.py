import json
from pathlib import Path

import numpy as np
import pytest
import torch

from strokeseg.segresnet import (
    NetworkConfig,
    WeightsError,
    build,
    load_weights,
    parameter_count,
    parameter_inventory,
    save_weights,
)

GOLDEN = Path(__file__).parent / "data" / "segresnet_default_inventory.json"
TINY = NetworkConfig(init_filters=4, blocks_down=(1, 2), blocks_up=(1,), ds_heads=1)


def closed_form_count(cfg: NetworkConfig) -> int:
    """Parameter count derived by hand from the block layout."""
    w = [cfg.init_filters * 2**s for s in range(len(cfg.blocks_down))]
    norm = lambda c: 2 * c  # noqa: E731
    block = lambda c: 2 * (27 * c * c + norm(c))  # noqa: E731
    total = 27 * cfg.in_channels * w[0]
    for s, n in enumerate(cfg.blocks_down):
        total += (27 * w[s - 1] * w[s] if s else 0) + n * block(w[s])
    for s, n in enumerate(cfg.blocks_up):
        total += w[s + 1] * w[s] + n * block(w[s])
    total += sum(norm(w[i]) + (w[i] + 1) * cfg.out_channels for i in range(cfg.ds_heads + 1))
    return total


def test_default_widths_and_blocks():
    cfg = NetworkConfig()
    assert cfg.widths == [32, 64, 128, 256, 512]
    assert cfg.blocks_down == (2, 4, 4, 4, 4) and cfg.blocks_up == (1, 1, 1, 1)
    with torch.device("meta"):
        net = build(cfg)
    assert [len(s.blocks) for s in net.encoder] == [2, 4, 4, 4, 4]
    assert [s.blocks[0].conv1.in_channels for s in net.encoder] == [32, 64, 128, 256, 512]
    assert [s.down.stride for s in net.encoder[1:]] == [(2, 2, 2)] * 4
    assert [len(s.blocks) for s in net.decoder] == [1, 1, 1, 1]
    assert len(net.heads) == 4


@pytest.mark.parametrize("cfg", [NetworkConfig(), NetworkConfig(init_filters=8, blocks_down=(1, 2, 2), blocks_up=(1, 1), ds_heads=2), TINY])
def test_parameter_count_matches_closed_form(cfg):
    with torch.device("meta"):
        net = build(cfg)
    assert parameter_count(net) == closed_form_count(cfg)


def test_inventory_matches_golden_file():
    with torch.device("meta"):
        net = build(NetworkConfig())
    inv = [[name, list(shape)] for name, shape in parameter_inventory(net)]
    golden = json.loads(GOLDEN.read_text())
    assert inv == golden["parameters"]
    assert sum(int(np.prod(s)) for _, s in inv) == golden["total"]


def test_inventory_deterministic():
    a = parameter_inventory(build(TINY))
    b = parameter_inventory(build(TINY))
    assert a == b


def test_default_spatial_contract_meta():
    with torch.device("meta"):
        net = build(NetworkConfig())
        out = net(torch.empty(1, 2, 192, 192, 128))
    assert [tuple(o.shape) for o in out] == [
        (1, 2, 192, 192, 128), (1, 2, 96, 96, 64), (1, 2, 48, 48, 32), (1, 2, 24, 24, 16)
    ]


def test_spatial_contract_tiny():
    net = build(NetworkConfig(init_filters=4, blocks_down=(1, 1, 1), blocks_up=(1, 1), ds_heads=2)).eval()
    out = net(torch.randn(2, 2, 16, 24, 8))
    assert [tuple(o.shape[2:]) for o in out] == [(16, 24, 8), (8, 12, 4), (4, 6, 2)]
    probs = torch.softmax(out[0], 1).sum(1)
    assert torch.allclose(probs, torch.ones_like(probs), atol=1e-5)


def test_single_stage_network():
    cfg = NetworkConfig(init_filters=4, blocks_down=(1,), blocks_up=(), ds_heads=0)
    net = build(cfg).eval()
    out = net(torch.randn(1, 2, 5, 6, 7))
    assert len(out) == 1 and out[0].shape == (1, 2, 5, 6, 7)
    with torch.no_grad():
        expected = net.heads[0](net.encoder[0](net.conv_init(torch.zeros(1, 2, 5, 6, 7))))
        got = net(torch.zeros(1, 2, 5, 6, 7))[0]
    assert torch.equal(expected, got)


def test_wrong_channels_and_indivisible_dims():
    net = build(TINY)
    with pytest.raises(ValueError, match="channels"):
        net(torch.randn(1, 3, 8, 8, 8))
    with pytest.raises(ValueError, match="axis Y"):
        net(torch.randn(1, 2, 8, 7, 8))


def test_zero_heads_give_half_probability():
    net = build(TINY).eval()
    for head in net.heads:
        torch.nn.init.zeros_(head.conv.weight)
        torch.nn.init.zeros_(head.conv.bias)
    with torch.no_grad():
        p = torch.softmax(net(torch.randn(1, 2, 8, 8, 8))[0], 1)
    assert torch.all(p == 0.5)


def test_eval_mode_deterministic():
    net = build(TINY).eval()
    x = torch.randn(1, 2, 8, 8, 8)
    with torch.no_grad():
        a, b = net(x), net(x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_invalid_configs():
    with pytest.raises(ValueError):
        NetworkConfig(blocks_down=(1, 1), blocks_up=(1, 1))
    with pytest.raises(ValueError):
        NetworkConfig(blocks_down=(1, 1), blocks_up=(1,), ds_heads=2)
    with pytest.raises(ValueError):
        NetworkConfig(init_filters=0)
    with pytest.raises(ValueError):
        NetworkConfig(kernel=(5, 5, 5))


def test_gradients_match_finite_differences():
    torch.manual_seed(3)
    cfg = NetworkConfig(init_filters=4, blocks_down=(1, 1), blocks_up=(1,), ds_heads=1)
    net = build(cfg).double()
    x = torch.randn(1, 2, 16, 16, 16, dtype=torch.float64)
    proj = [torch.randn(1, 2, 16, 16, 16, dtype=torch.float64), torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)]

    def scalar():
        out = net(x)
        return sum((o * w).sum() for o, w in zip(out, proj))

    net.zero_grad()
    scalar().backward()
    rng = np.random.default_rng(0)
    h = 1e-6
    worst = 0.0
    with torch.no_grad():
        for name, p in net.named_parameters():
            flat = p.view(-1)
            grad = p.grad.view(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = scalar().item()
                flat[idx] = orig - h
                down = scalar().item()
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = grad[idx].item()
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
                worst = max(worst, rel)
    assert worst < 1e-3


# --------------------------------------------------------------------------
# weights archive


def test_save_load_strict_bit_identical(tmp_path):
    net = build(TINY).eval()
    save_weights(net, tmp_path / "w.pt")
    back, skipped = load_weights(tmp_path / "w.pt", TINY, strict=True)
    back.eval()
    assert skipped == []
    x = torch.randn(1, 2, 8, 8, 8)
    with torch.no_grad():
        assert all(torch.equal(a, b) for a, b in zip(net(x), back(x)))
    # config can come from the archive header
    again, _ = load_weights(tmp_path / "w.pt")
    assert again.cfg == TINY


def test_lenient_load_skips_first_conv(tmp_path):
    src_cfg = TINY.model_copy(update={"in_channels": 4})
    src = build(src_cfg)
    save_weights(src, tmp_path / "brats.pt")
    with pytest.raises(WeightsError, match="conv_init.weight"):
        load_weights(tmp_path / "brats.pt", TINY, strict=True)
    net, skipped = load_weights(tmp_path / "brats.pt", TINY, strict=False)
    assert skipped == ["conv_init.weight"]
    src_state = src.state_dict()
    for k, v in net.state_dict().items():
        if k != "conv_init.weight":
            assert torch.equal(v, src_state[k])
    assert net.conv_init.weight.shape == (4, 2, 3, 3, 3)


def test_truncated_archive_rejected(tmp_path):
    save_weights(build(TINY), tmp_path / "w.pt")
    raw = (tmp_path / "w.pt").read_bytes()
    (tmp_path / "t.pt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(WeightsError):
        load_weights(tmp_path / "t.pt", TINY, strict=True)


def test_archive_header(tmp_path):
    save_weights(build(TINY), tmp_path / "w.pt")
    doc = torch.load(tmp_path / "w.pt", weights_only=True)
    assert doc["format_version"] == 1
    assert doc["config"]["init_filters"] == 4
    names = [m[0] for m in doc["manifest"]]
    assert names == list(doc["state_dict"])
