import numpy as np
import pytest

from comnet.baseline_rx import build_lmmse_weights, lmmse_estimate, ls_estimate, zf_detect
from comnet.channel import ChannelModel, channel_frequency_correlation
from comnet.comnet_rx import (
    BiLstmSdSubnet,
    CeSubnet,
    ComnetReceiver,
    FcDnnReceiver,
    FcSdSubnet,
    build_fcdnn_baseline,
    ce_forward,
    comnet_receive,
    count_flops,
    count_params,
    decide_bits,
    flops_breakdown,
    memory_bytes,
    sd_forward_bilstm,
    sd_forward_fc,
)
from comnet.ofdm_phy import InputError, OfdmConfig, qam_demap_hard
from comnet.training import Scenario, generate_batch, init_weights
from gradcheck import check_module

PILOT = OfdmConfig().pilot_symbol


def _cvec(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def _randomise(module, rng, scale=0.3):
    for t in module.parameters().values():
        t.data[...] = rng.normal(0.0, scale, t.shape)
    return module


# -------------------------------------------------------------------- CE

def test_ce_init_equals_lmmse():
    w = build_lmmse_weights(channel_frequency_correlation(ChannelModel()), 40.0, PILOT)
    ce = CeSubnet(w.real_matrix)
    h = _cvec(np.random.default_rng(0), 100, 64)
    assert np.max(np.abs(ce_forward(ce, h) - lmmse_estimate(w, h))) < 1e-6


def test_ce_identity_weights():
    h = _cvec(np.random.default_rng(1), 64)
    np.testing.assert_allclose(ce_forward(CeSubnet(np.eye(128)), h), h, rtol=1e-15)


def test_ce_real_linearity():
    rng = np.random.default_rng(2)
    ce = _randomise(CeSubnet(), rng)
    u, v = _cvec(rng, 64), _cvec(rng, 64)
    np.testing.assert_allclose(ce_forward(ce, 0.7 * u - 1.3 * v), 0.7 * ce_forward(ce, u) - 1.3 * ce_forward(ce, v),
                               atol=1e-9)


def test_ce_params_and_shape_check():
    assert count_params(CeSubnet()) == 128 * 128
    assert CeSubnet().refine_layer.bias is None
    with pytest.raises(InputError):
        CeSubnet().forward(np.zeros(32, complex))


def test_ce_gradient():
    rng = np.random.default_rng(3)
    ce = CeSubnet()
    x = _cvec(rng, 3, 64)
    err, _ = check_module(ce.refine_layer, np.concatenate([x.real, x.imag], -1), rng)
    assert err < 1e-4


# ------------------------------------------------------------------ FC-SD

def _sd_inputs(rng, n=4):
    return _cvec(rng, n, 64), _cvec(rng, n, 64), _cvec(rng, n, 64)


def test_fc_sd_zero_weights_give_half():
    out = sd_forward_fc(FcSdSubnet(), *_sd_inputs(np.random.default_rng(4)))
    assert out.shape == (4, 384) and np.all(out == 0.5)


def test_fc_sd_group_locality():
    rng = np.random.default_rng(5)
    sd = _randomise(FcSdSubnet(), rng)
    x, h, y = _sd_inputs(rng, 1)
    base = sd_forward_fc(sd, x, h, y)
    x2 = x.copy()
    x2[0, 0] += 0.5 - 0.2j
    moved = sd_forward_fc(sd, x2, h, y)
    np.testing.assert_array_equal(moved[0, 48:], base[0, 48:])
    assert not np.array_equal(moved[0, :48], base[0, :48])


def test_fc_sd_extended_features_locality():
    rng = np.random.default_rng(6)
    sd = _randomise(FcSdSubnet(extended_features=True), rng)
    assert sd.hidden.in_dim == 48
    x, h, y = _sd_inputs(rng, 1)
    base = sd_forward_fc(sd, x, h, y)
    h2 = h.copy()
    h2[0, 63] += 1.0
    moved = sd_forward_fc(sd, x, h2, y)
    np.testing.assert_array_equal(moved[0, :336], base[0, :336])


def test_fc_sd_batch_determinism_and_single_frame():
    rng = np.random.default_rng(7)
    sd = _randomise(FcSdSubnet(), rng)
    x, h, y = _sd_inputs(rng, 1)
    two = sd_forward_fc(sd, np.repeat(x, 2, 0), np.repeat(h, 2, 0), np.repeat(y, 2, 0))
    np.testing.assert_array_equal(two[0], two[1])
    np.testing.assert_allclose(sd_forward_fc(sd, x[0], h[0], y[0]), two[0], rtol=1e-13)


def test_sd_dimension_errors():
    rng = np.random.default_rng(8)
    x, h, y = _sd_inputs(rng)
    with pytest.raises(InputError):
        sd_forward_fc(FcSdSubnet(), x[:, :60], h, y)
    with pytest.raises(InputError):
        sd_forward_bilstm(BiLstmSdSubnet(), x, h[:, :10], y)


def test_fc_sd_gradients():
    rng = np.random.default_rng(9)
    sd = FcSdSubnet(hidden=5)
    x, h, y = _sd_inputs(rng, 3)
    err, _ = check_module(sd, x, rng, forward=lambda v, record=True: sd.forward(v, h, y, record=record),
                          backward=sd.backward, limit=40)
    assert err < 1e-4


# -------------------------------------------------------------- BiLSTM-SD

def test_bilstm_sd_shapes():
    sd = BiLstmSdSubnet()
    assert sd.step_width == 12 and sd.heads.in_dim == 96 and sd.heads.out_dim == 48
    assert sd.lstm.groups == 8 and BiLstmSdSubnet(shared=True).lstm.groups is None


def test_bilstm_sd_zero_weights_give_half():
    out = sd_forward_bilstm(BiLstmSdSubnet(), *_sd_inputs(np.random.default_rng(10), 2))
    assert out.shape == (2, 384) and np.all(out == 0.5)


@pytest.mark.parametrize("shared", [False, True])
def test_bilstm_sd_cross_group_sensitivity(shared):
    rng = np.random.default_rng(11)
    sd = _randomise(BiLstmSdSubnet(shared=shared), rng)
    x, h, y = _sd_inputs(rng, 1)
    base = sd_forward_bilstm(sd, x, h, y)
    x2 = x.copy()
    x2[0, 0] += 0.5
    moved = sd_forward_bilstm(sd, x2, h, y)
    assert np.any(moved[0, 48:] != base[0, 48:])


def test_bilstm_sd_order_sensitivity():
    rng = np.random.default_rng(12)
    sd = _randomise(BiLstmSdSubnet(), rng)
    x, h, y = _sd_inputs(rng, 1)
    fwd = sd_forward_bilstm(sd, x, h, y)
    rev = sd_forward_bilstm(sd, x[:, ::-1], h[:, ::-1], y[:, ::-1])
    assert not np.allclose(fwd, rev)


def test_bilstm_sd_head_reads_own_steps():
    # without recurrent weights and with the forget gate shut (tanh(-30) is
    # exactly -1, so f == 0), head g can only see subcarriers 8g..8g+7
    rng = np.random.default_rng(13)
    sd = BiLstmSdSubnet()
    for name, t in sd.parameters().items():
        if "recurrent" not in name:
            t.data[...] = rng.normal(0, 0.3, t.shape)
    for fw, bw in sd.lstm.layers:
        for cell in (fw, bw):
            h = cell.hidden_size
            cell.bias.data[..., h:2 * h] = -60.0
    x, h, y = _sd_inputs(rng, 1)
    base = sd_forward_bilstm(sd, x, h, y)
    x2 = x.copy()
    x2[0, 20] += 1.0  # group 2
    moved = sd_forward_bilstm(sd, x2, h, y)
    changed = np.flatnonzero(moved[0] != base[0])
    assert changed.size and np.all((changed >= 96) & (changed < 144))


@pytest.mark.parametrize("shared", [False, True])
def test_bilstm_sd_gradients(shared):
    rng = np.random.default_rng(14)
    sd = BiLstmSdSubnet(shared=shared, hidden_sizes=(2, 1))
    x, h, y = _sd_inputs(rng, 2)
    err, _ = check_module(sd, x, rng, forward=lambda v, record=True: sd.forward(v, h, y, record=record),
                          backward=sd.backward, limit=25)
    assert err < 1e-4


def test_soft_bits_strictly_inside_unit_interval():
    rng = np.random.default_rng(15)
    for sd in (FcSdSubnet(), BiLstmSdSubnet()):
        init_weights(sd, rng)
        out = sd.forward(*_sd_inputs(rng, 3))
        assert np.all((out > 0) & (out < 1))


# --------------------------------------------------------------- decisions

def test_decide_bits():
    assert decide_bits(0.51) == 1
    assert decide_bits(0.5) == 0
    np.testing.assert_array_equal(decide_bits([0.1, 0.9, 0.5]), [0, 1, 0])


def test_short_path_recovers_bits_on_flat_noiseless_channel():
    sc = Scenario(num_taps=1)
    b = generate_batch(sc, np.random.default_rng(16), 1000, None)
    rx = ComnetReceiver(CeSubnet(np.eye(128)), FcSdSubnet())
    bits, h_hat, diag = comnet_receive(rx, b.y_pilot, b.y_data, b.x_pilot)
    assert np.all(diag["soft_bits"] == 0.5) and np.all(bits == 0)
    np.testing.assert_array_equal(diag["short_path_bits"], b.bits)
    np.testing.assert_allclose(h_hat, b.h_true, atol=1e-9)
    assert not diag["zf_flags"].any()


def test_comnet_receive_single_frame_and_determinism():
    rng = np.random.default_rng(17)
    rx = ComnetReceiver(CeSubnet(np.eye(128)), _randomise(FcSdSubnet(), rng))
    b = generate_batch(Scenario(), rng, 3, 20.0)
    many = comnet_receive(rx, b.y_pilot, b.y_data, b.x_pilot)
    one = comnet_receive(rx, b.y_pilot[1], b.y_data[1], b.x_pilot)
    np.testing.assert_array_equal(one[0], many[0][1])
    assert one[2]["soft_bits"].shape == (384,)
    again = comnet_receive(rx, b.y_pilot, b.y_data, b.x_pilot)
    np.testing.assert_array_equal(again[0], many[0])


def test_receiver_mode_and_parameter_names():
    assert ComnetReceiver(CeSubnet(), FcSdSubnet()).mode == "fc"
    rx = ComnetReceiver(CeSubnet(), BiLstmSdSubnet())
    assert rx.mode == "bilstm"
    assert "ce.refine_layer.weights" in rx.parameters()
    assert "sd.lstm.layer0.forward.input_weights" in rx.parameters()


# ------------------------------------------------------------------ FC-DNN

def test_fcdnn_parameter_count():
    per = 256 * 500 + 500 + 500 * 250 + 250 + 250 * 120 + 120 + 120 * 48 + 48
    assert per == 289_678
    assert count_params(build_fcdnn_baseline()) == 8 * per


def test_fcdnn_zero_weights_and_untrained_ber():
    rng = np.random.default_rng(18)
    b = generate_batch(Scenario(), rng, 200, 20.0)
    bits, soft = FcDnnReceiver().receive(b.y_pilot, b.y_data)
    assert np.all(soft == 0.5)
    net = init_weights(FcDnnReceiver(), rng)
    bits, _ = net.receive(b.y_pilot, b.y_data)
    assert abs(np.mean(bits != b.bits) - 0.5) < 0.05


def test_fcdnn_gradients():
    rng = np.random.default_rng(19)
    net = FcDnnReceiver(hidden=(3, 2))
    yp, yd = _cvec(rng, 2, 64), _cvec(rng, 2, 64)
    err, _ = check_module(net, yd, rng, scale=0.1,
                          forward=lambda v, record=True: net.forward(yp, v, record=record), backward=net.backward,
                          limit=40)
    assert err < 1e-4


# -------------------------------------------------------------- complexity

def test_complexity_counts():
    fc = ComnetReceiver(CeSubnet(), FcSdSubnet())
    bi = ComnetReceiver(CeSubnet(), BiLstmSdSubnet())
    dnn = FcDnnReceiver()
    assert count_params(fc) == 16384 + 8 * (16 * 120 + 120 + 120 * 48 + 48)
    assert memory_bytes(fc) == 4 * count_params(fc)
    # dense matmul FLOPs of the FC-DNN: 2 * sum(in * out) * 8
    assert flops_breakdown(dnn)["matmul"] == 2 * 8 * (256 * 500 + 500 * 250 + 250 * 120 + 120 * 48)
    assert memory_bytes(dnn) / memory_bytes(fc) >= 4
    assert 1.1 <= count_flops(bi) / count_flops(dnn) <= 4.5
    assert count_flops(fc) < count_flops(dnn) / 5


def test_bilstm_flops_hand_count():
    # per step and direction: 2 * 4h(in + h) MACs-as-FLOPs + 13h elementwise
    per = sum(2 * 4 * h * (i + h) + 13 * h for i, h in ((6, 20), (40, 10), (20, 6)))
    sd = BiLstmSdSubnet()
    stack_flops = 8 * 2 * 64 * per
    heads = 8 * (2 * 96 * 48 + 2 * 48)
    ce = 2 * 128 * 128
    front = 2 * 64 * 11
    assert count_flops(ComnetReceiver(CeSubnet(), sd)) == stack_flops + heads + ce + front
