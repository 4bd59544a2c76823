import numpy as np
import pytest
import torch

import oracles
from deeplight.exceptions import ConfigError
from deeplight.network import (
    CellState, CStem, DeepLight, Fusion, MBConvLSTMCell, ModelConfig, MultiBranchConv, UpScaler,
    count_parameters, load_checkpoint, pool_halve, read_checkpoint_meta, save_checkpoint,
)
from deeplight.schemas import validate

torch.set_default_dtype(torch.float32)


def _randomize(module, gen, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * scale)
        for m in module.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.copy_(torch.randn(m.running_mean.shape, generator=gen) * 0.3)
                m.running_var.copy_(torch.rand(m.running_var.shape, generator=gen) + 0.5)
    return module


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


# -- multi-branch block --------------------------------------------------

@pytest.mark.parametrize("mode", ["cstem", "lstm"])
def test_multibranch_matches_oracle(mode):
    gen = torch.Generator().manual_seed(11)
    for trial in range(8):
        cin, cb, cout = 1 + trial % 3, 2, 3 + trial % 2
        block = _randomize(MultiBranchConv(cin, cb, cout, mode=mode), gen).double().eval()
        x = torch.randn(1, cin, 5 + trial % 3, 6, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            got = block(x)[0].numpy()
        ref = oracles.multibranch(x[0].numpy(), block)
        assert np.abs(got - ref).max() < 1e-10


def test_multibranch_zero_params_zero_output():
    block = _zero(MultiBranchConv(3, 4, 5, mode="lstm"))
    assert not block(torch.randn(2, 3, 7, 7)).any()


def test_multibranch_identity_wiring_is_relu():
    block = _zero(MultiBranchConv(1, 1, 1, mode="lstm"))
    with torch.no_grad():
        block.branches[0].weight[0, 0, 1, 1] = 1.0  # centre tap of the 3x3 branch
        block.fuse.weight[0, 0] = 1.0
    x = torch.randn(1, 1, 6, 6)
    torch.testing.assert_close(block(x), torch.relu(x))


def test_multibranch_structure():
    cstem = MultiBranchConv(2, 8, 16, mode="cstem")
    lstm = MultiBranchConv(2, 8, 16, mode="lstm")
    assert [c.kernel_size for c in cstem.branches] == [(3, 3), (5, 5), (7, 7), (11, 11)]
    assert cstem.norms is not None and lstm.norms is None
    assert lstm.fuse.bias is None and cstem.fuse.bias is not None
    x = torch.randn(1, 2, 9, 13)
    assert lstm(x).shape == (1, 16, 9, 13)


def test_multibranch_shape_mismatch():
    with pytest.raises(ConfigError):
        MultiBranchConv(3, 2, 2)(torch.zeros(1, 4, 5, 5))
    with pytest.raises(ConfigError):
        MultiBranchConv(3, 2, 2, mode="other")


# -- stem, pooling, upscaler ----------------------------------------------

@pytest.mark.parametrize("n,stages,latent", [(159, 2, 40), (32, 2, 8), (33, 1, 17), (8, 3, 1)])
def test_cstem_output_size(n, stages, latent):
    cfg = ModelConfig(rows=n, cols=n, cstem_stages=stages, branch_channels=2, stem_channels=3, hidden_channels=4)
    stem = CStem(2, cfg).eval()
    assert stem(torch.randn(1, 2, n, n)).shape == (1, 3, latent, latent)
    assert cfg.latent_shape == (latent, latent)


def test_cstem_zero_input_zero_output():
    cfg = ModelConfig(rows=12, cols=12, branch_channels=2, stem_channels=3)
    stem = CStem(1, cfg).eval()
    for m in stem.modules():
        if isinstance(m, torch.nn.Conv2d) and m.bias is not None:
            torch.nn.init.zeros_(m.bias)
    assert not stem(torch.zeros(1, 1, 12, 12)).any()


def test_pool_pads_odd_edges_with_zero():
    x = -torch.ones(1, 1, 3, 3)
    out = pool_halve(x)
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0, 0, 0] == -1 and out[0, 0, 1, 1] == 0


@pytest.mark.parametrize("latent,stages,out", [(8, 2, 32), (40, 2, 159), (17, 1, 33)])
def test_upscaler_shapes(latent, stages, out):
    up = UpScaler(4, stages, (out, out))
    assert up(torch.randn(2, 4, latent, latent)).shape == (2, out, out)


def test_upscaler_halves_channels():
    up = UpScaler(32, 2, (32, 32))
    assert [(u.in_channels, u.out_channels) for u in up.ups] == [(32, 16), (16, 8)]
    assert all(u.kernel_size == (4, 4) and u.stride == (2, 2) for u in up.ups)


def test_upscaler_zero_weights_constant_bias():
    up = _zero(UpScaler(4, 2, (10, 10)))
    with torch.no_grad():
        up.head.bias.fill_(0.7)
    torch.testing.assert_close(up(torch.randn(1, 4, 3, 3)), torch.full((1, 10, 10), 0.7))


def test_upscaler_too_small_raises():
    with pytest.raises(ConfigError):
        UpScaler(4, 1, (20, 20))(torch.zeros(1, 4, 4, 4))


# -- recurrent cell -------------------------------------------------------

def test_cell_matches_oracle():
    gen = torch.Generator().manual_seed(5)
    for trial in range(6):
        hid, R, C = 2 + trial % 2, 4, 3 + trial % 3
        cell = _randomize(MBConvLSTMCell(3, hid, (R, C), 2), gen, 0.3).double()
        x = torch.randn(1, 3, R, C, generator=gen, dtype=torch.float64)
        H = torch.randn(1, hid, R, C, generator=gen, dtype=torch.float64)
        Cs = torch.randn(1, hid, R, C, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            new = cell(x, CellState(H, Cs))
        H_ref, C_ref = oracles.lstm_step(x[0].numpy(), H[0].numpy(), Cs[0].numpy(), cell)
        assert np.abs(new.H[0].numpy() - H_ref).max() < 1e-10
        assert np.abs(new.C[0].numpy() - C_ref).max() < 1e-10


def test_cell_zero_weights_closed_form():
    cell = _zero(MBConvLSTMCell(2, 3, (4, 4), 2))
    c = torch.full((1, 3, 4, 4), 0.8)
    new, gates = cell(torch.randn(1, 2, 4, 4), CellState(torch.randn(1, 3, 4, 4), c), return_gates=True)
    for g in gates.values():
        torch.testing.assert_close(g, torch.full_like(g, 0.5))
    torch.testing.assert_close(new.C, 0.5 * c)
    torch.testing.assert_close(new.H, 0.5 * torch.tanh(0.5 * c))


def test_cell_saturated_forget_gate_keeps_memory():
    cell = _zero(MBConvLSTMCell(2, 3, (4, 4), 2))
    with torch.no_grad():
        cell.b_f.fill_(50.0)
        cell.b_i.fill_(-50.0)
    c = torch.randn(1, 3, 4, 4)
    new = cell(torch.randn(1, 2, 4, 4), CellState(torch.zeros_like(c), c))
    torch.testing.assert_close(new.C, c)


def test_gates_in_open_unit_interval():
    gen = torch.Generator().manual_seed(0)
    cell = _randomize(MBConvLSTMCell(2, 4, (5, 5), 2), gen, 0.2)
    state = cell.init_state(3, torch.zeros(1))
    for _ in range(3):
        state, gates = cell(torch.randn(3, 2, 5, 5, generator=gen), state, return_gates=True)
        for g in gates.values():
            assert (g > 0).all() and (g < 1).all()
    assert torch.isfinite(state.H).all() and torch.isfinite(state.C).all()


def test_cell_peephole_and_bias_shapes():
    cell = MBConvLSTMCell(8, 6, (5, 7), 2)
    assert cell.W_cf.shape == cell.W_ci.shape == cell.W_co.shape == (6, 5, 7)
    assert cell.b_o.shape == (6,)
    assert cell.input_block.fuse.out_channels == 24 == cell.hidden_block.fuse.out_channels


def test_cell_rejects_wrong_state():
    cell = MBConvLSTMCell(2, 3, (4, 4), 2)
    with pytest.raises(ConfigError):
        cell(torch.zeros(1, 2, 4, 4), CellState(torch.zeros(1, 3, 5, 5), torch.zeros(1, 3, 5, 5)))


# -- fusion -----------------------------------------------------------------

def test_fusion_matches_oracle():
    gen = torch.Generator().manual_seed(2)
    fusion = _randomize(Fusion(3), gen).double()
    light = CellState(*(torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64) for _ in range(2)))
    aux = CellState(*(torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64) for _ in range(2)))
    with torch.no_grad():
        out = fusion(light, aux)
    H, C = oracles.fuse(light.H[0].numpy(), light.C[0].numpy(), aux.H[0].numpy(), aux.C[0].numpy(), fusion)
    assert np.abs(out.H[0].numpy() - H).max() < 1e-6
    assert np.abs(out.C[0].numpy() - C).max() < 1e-6


def test_fusion_identity_on_light_half():
    fusion = _zero(Fusion(2))
    with torch.no_grad():
        for conv in (fusion.conv_c, fusion.conv_h):
            conv.weight[0, 0] = 1.0
            conv.weight[1, 1] = 1.0
    light = CellState(torch.randn(1, 2, 3, 3), torch.randn(1, 2, 3, 3))
    zero = CellState(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 3))
    out = fusion(light, zero)
    torch.testing.assert_close(out.H, torch.relu(light.H))
    torch.testing.assert_close(out.C, torch.relu(light.C))
    fusion = _zero(Fusion(2))
    assert not fusion(zero, zero).H.any()


# -- full model -------------------------------------------------------------

SMALL = dict(rows=12, cols=12, s=3, h=2, branch_channels=2, hidden_channels=4, stem_channels=4)


def test_forward_shape_and_range():
    model = DeepLight(ModelConfig(**SMALL)).eval()
    out = model(torch.randn(2, 3, 7, 12, 12))
    assert out.shape == (2, 2, 12, 12)
    assert ((out > 0) & (out < 1)).all()
    assert model(torch.randn(1, 3, 7, 12, 12), h=5).shape == (1, 5, 12, 12)


def test_forward_rejects_bad_input():
    model = DeepLight(ModelConfig(**SMALL))
    with pytest.raises(ConfigError):
        model(torch.randn(1, 3, 6, 12, 12))
    with pytest.raises(ConfigError):
        model(torch.randn(1, 3, 7, 11, 12))


def test_zero_head_gives_constant_sigmoid():
    model = DeepLight(ModelConfig(**SMALL)).eval()
    _zero(model.decoder.upscaler)
    with torch.no_grad():
        model.decoder.upscaler.head.bias.fill_(-1.3)
    out = model(torch.randn(1, 3, 7, 12, 12))
    torch.testing.assert_close(out, torch.full_like(out, torch.sigmoid(torch.tensor(-1.3)).item()))


def test_all_features_masked_output_ignores_input():
    cfg = ModelConfig(**SMALL, use_lightning=False, use_radar=False, use_cloud=False)
    model = DeepLight(cfg).eval()
    a = model(torch.randn(1, 3, 7, 12, 12))
    b = model(torch.randn(1, 3, 7, 12, 12) * 5)
    torch.testing.assert_close(a, b)


def test_cloud_mask_zeros_three_channels():
    model = DeepLight(ModelConfig(**SMALL, use_cloud=False))
    light, aux = model.apply_masks(torch.ones(1, 3, 3, 12, 12), torch.ones(1, 3, 4, 12, 12))
    assert light.all()
    assert aux[:, :, 0].all() and not aux[:, :, 1:].any()
    model = DeepLight(ModelConfig(**SMALL, use_radar=False))
    _, aux = model.apply_masks(torch.ones(1, 3, 3, 12, 12), torch.ones(1, 3, 4, 12, 12))
    assert not aux[:, :, 0].any() and aux[:, :, 1:].all()


def test_encoders_never_share_weights():
    model = DeepLight(ModelConfig(**SMALL))
    light = {id(p) for p in model.light_encoder.parameters()}
    aux = {id(p) for p in model.aux_encoder.parameters()}
    assert not light & aux
    assert model.light_encoder.stem.blocks[0].in_channels == 3
    assert model.aux_encoder.stem.blocks[0].in_channels == 4


def test_forward_is_deterministic():
    torch.manual_seed(3)
    a = DeepLight(ModelConfig(**SMALL)).eval()
    torch.manual_seed(3)
    b = DeepLight(ModelConfig(**SMALL)).eval()
    x = torch.randn(2, 3, 7, 12, 12)
    assert torch.equal(a(x), b(x))


def test_differentiable_end_to_end():
    model = DeepLight(ModelConfig(**SMALL))
    model(torch.randn(1, 3, 7, 12, 12)).sum().backward()
    grads = [p.grad for p in model.parameters()]
    assert all(g is not None for g in grads)


def test_single_branch_config():
    model = DeepLight(ModelConfig(**SMALL, kernel_sizes=(3,)))
    assert all(len(m.branches) == 1 for m in model.modules() if isinstance(m, MultiBranchConv))


@pytest.mark.parametrize("kw", [{"cstem_stages": 0}, {"kernel_sizes": (4,)}, {"hidden_channels": 0}, {"h": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_default_parameter_count():
    assert count_parameters(DeepLight(ModelConfig())) == 547_809


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(1)
    model = DeepLight(ModelConfig(**SMALL)).eval()
    x = torch.randn(1, 3, 7, 12, 12)
    path = save_checkpoint(tmp_path / "ck", model, {"epoch": 3})
    loaded, meta = load_checkpoint(path)
    assert loaded.config == model.config
    assert meta["metadata"]["epoch"] == 3
    assert torch.equal(loaded.eval()(x), model(x))
    validate(read_checkpoint_meta(path), "checkpoint")
    blob = (tmp_path / "ck.bin").read_bytes()
    first = meta["tensors"][0]
    arr = np.frombuffer(blob, "<f4", count=first["count"], offset=first["offset"])
    np.testing.assert_array_equal(arr, dict(model.state_dict())[first["name"]].numpy().ravel())


def test_checkpoint_truncated_blob(tmp_path):
    path = save_checkpoint(tmp_path / "ck", DeepLight(ModelConfig(**SMALL)))
    blob = tmp_path / "ck.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(Exception):
        load_checkpoint(path)


# -- behaviour of a trained model -------------------------------------------

def _moving_blob_windows(manifest, n=60):
    from deeplight.grid import build_windows, stack_windows

    X, _ = stack_windows(build_windows(manifest, 6, 6, split="train")[:n])
    return torch.from_numpy(X)


@pytest.mark.slow
def test_trained_model_is_sensitive_to_temporal_order(run_cache, synth_fixture):
    model, _ = load_checkpoint(run_cache.get("hazy", 0))
    model.eval()
    X = _moving_blob_windows(synth_fixture)
    with torch.no_grad():
        delta = (model(X) - model(X.flip(1))).abs().amax(dim=(1, 2, 3))
    assert (delta > 1e-3).float().mean() > 0.5


@pytest.mark.slow
def test_widest_branch_matters_more_for_wide_storms(run_cache, synth_fixture):
    """Zeroing every 11x11 branch moves outputs more for wide blobs than for narrow ones."""
    from deeplight.synthetic import StormParams, generate_dataset

    model, _ = load_checkpoint(run_cache.get("hazy", 0))
    model.eval()
    ablated, _ = load_checkpoint(run_cache.get("hazy", 0))
    ablated.eval()
    with torch.no_grad():
        for m in ablated.modules():
            if isinstance(m, MultiBranchConv):
                k = m.kernel_sizes.index(11)
                m.branches[k].weight.zero_()
                if m.branches[k].bias is not None:
                    m.branches[k].bias.zero_()
    deltas = {}
    for name, sigma in (("narrow", (1.2, 1.5)), ("wide", (4.0, 4.5))):
        root = synth_fixture.root.parent / f"extent_{name}"
        m = generate_dataset(root, synth_fixture.grid, 120, StormParams(seed=21, blob_sigma=sigma, split_fractions=(1, 0, 0)))
        # score in the reference data's scaling so both inputs mean the same thing
        m.normalization_stats = synth_fixture.normalization_stats
        X = _moving_blob_windows(m, 60)
        with torch.no_grad():
            deltas[name] = float(((model(X) - ablated(X)) ** 2).sum(dim=(1, 2, 3)).sqrt().mean())
    assert deltas["wide"] > deltas["narrow"]
