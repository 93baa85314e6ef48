import pytest
import torch

from cartseg.blocks import AttentionGate, EncoderDecoder, ResidualBlock, build_encoder_decoder, plain_concat
from cartseg.errors import CartsegError
from oracles import gradient_error

GRAD_TOL = 1e-4


def _zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_residual_block_shape():
    block = ResidualBlock(3)
    x = torch.randn(2, 3, 4, 5, 6)
    assert block(x).shape == x.shape


def test_residual_block_zero_convs_is_prelu_of_input():
    block = ResidualBlock(2).eval()
    with torch.no_grad():
        for conv in (block.conv1, block.conv2):
            conv.weight.zero_()
            conv.bias.zero_()
    x = torch.randn(1, 2, 3, 3, 3)
    expected = torch.where(x >= 0, x, 0.25 * x)
    torch.testing.assert_close(block(x), expected)


def test_residual_block_channel_mismatch():
    with pytest.raises(CartsegError, match="channel-mismatch"):
        ResidualBlock(3)(torch.zeros(1, 2, 4, 4, 4))


def test_attention_gate_shapes_and_range():
    gate = AttentionGate(8, 16)
    low, high = torch.randn(1, 8, 4, 4, 4), torch.randn(1, 16, 4, 4, 4)
    alpha = gate.mask(low, high)
    assert alpha.shape == (1, 1, 4, 4, 4)
    assert torch.all((alpha > 0) & (alpha < 1))
    assert gate(low, high).shape == (1, 24, 4, 4, 4)


def test_attention_gate_zero_weights_halves_low_features():
    gate = AttentionGate(2, 3)
    _zero_(gate)
    low, high = torch.randn(1, 2, 3, 3, 3), torch.randn(1, 3, 3, 3, 3)
    out = gate(low, high)
    torch.testing.assert_close(out[:, :2], 0.5 * low)
    torch.testing.assert_close(out[:, 2:], high)


def test_attention_gate_matches_formula():
    gate = AttentionGate(2, 3, 4)
    low, high = torch.randn(1, 2, 3, 3, 3), torch.randn(1, 3, 3, 3, 3)
    alpha = torch.sigmoid(gate.m(torch.relu(gate.c_l(low) + gate.c_h(high))))
    torch.testing.assert_close(gate(low, high), torch.cat([alpha * low, high], dim=1))


def test_skip_shape_mismatch():
    with pytest.raises(CartsegError, match="skip-shape-mismatch"):
        AttentionGate(2, 2)(torch.zeros(1, 2, 4, 4, 4), torch.zeros(1, 2, 2, 4, 4))
    with pytest.raises(CartsegError, match="skip-shape-mismatch"):
        plain_concat(torch.zeros(1, 2, 4, 4, 4), torch.zeros(1, 2, 2, 4, 4))


@pytest.mark.parametrize("levels,out", [(1, 1), (2, 1), (3, 4)])
def test_encoder_decoder_shape(levels, out):
    net = build_encoder_decoder(levels, 2, 1, out, attention=True)
    assert net(torch.randn(1, 1, 16, 16, 16)).shape == (1, out, 16, 16, 16)


def test_encoder_decoder_channel_doubling():
    net = EncoderDecoder(3, 4, 1, 4)
    assert net.enc0.down.conv.out_channels == 8
    assert net.enc2.down.conv.out_channels == 32
    assert net.bottom.channels == 32


def test_encoder_decoder_rejects_indivisible():
    with pytest.raises(CartsegError, match="dims-not-divisible"):
        build_encoder_decoder(2, 2, 1, 1)(torch.zeros(1, 1, 6, 8, 8))


def test_residual_block_gradcheck():
    torch.manual_seed(0)
    block = ResidualBlock(2).double().train()
    x = torch.randn(2, 2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 2, 4, 4, 4, dtype=torch.float64)
    params = [x, block.conv1.weight, block.conv2.bias, block.act1.weight]
    assert gradient_error(lambda: (block(x) * w).sum(), params) < GRAD_TOL


def test_attention_gate_gradcheck():
    torch.manual_seed(1)
    gate = AttentionGate(2, 3, 2).double()
    low = torch.randn(1, 2, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    high = torch.randn(1, 3, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 5, 3, 3, 3, dtype=torch.float64)
    params = [low, high, gate.c_l.weight, gate.m.weight, gate.m.bias]
    assert gradient_error(lambda: (gate(low, high) * w).sum(), params) < GRAD_TOL
