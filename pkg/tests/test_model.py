import numpy as np
import pytest

from surt.checks import tiny_config
from surt.functional import ConfigError
from surt.model import ModelConfig, SURTModel, latency_budget_check, lookahead_frames
from surt.tensor import Tensor, no_grad


def feats(rng, T=12, F=27):
    return np.abs(rng.standard_normal((3, T, F))) * 2.0


@pytest.fixture
def mask_model():
    return SURTModel(tiny_config("mask"), seed=1)


def test_mask_streams_are_complementary(mask_model):
    x = mask_model.prepare_input(feats(np.random.default_rng(0)))
    um = mask_model.unmix(x)
    H1, H2 = um["streams"]
    assert np.allclose(H1.data + H2.data, um["xbar"].data, atol=1e-12)
    assert np.all((um["mask"].data > 0) & (um["mask"].data < 1))


def test_zero_mask_logits_split_evenly(mask_model):
    mask_model.tree["maskenc"]["W"].data[:] = 0.0
    mask_model.tree["maskenc"]["b"].data[:] = 0.0
    um = mask_model.unmix(mask_model.prepare_input(feats(np.random.default_rng(1))))
    H1, H2 = um["streams"]
    assert np.allclose(um["mask"].data, 0.5)
    assert np.allclose(H1.data, um["xbar"].data / 2) and np.allclose(H2.data, H1.data)


def test_saturated_mask_routes_everything_to_first_stream(mask_model):
    mask_model.tree["maskenc"]["W"].data[:] = 0.0
    mask_model.tree["maskenc"]["b"].data[:] = 60.0
    um = mask_model.unmix(mask_model.prepare_input(feats(np.random.default_rng(2))))
    H1, H2 = um["streams"]
    assert np.allclose(H1.data, um["xbar"].data) and np.allclose(H2.data, 0.0)


def test_mask_shape_mismatch_is_dimension_error(mask_model):
    from surt.tensor import DimensionError

    x = mask_model.prepare_input(feats(np.random.default_rng(3)))
    xbar = mask_model.mix_encode(x)
    with pytest.raises(DimensionError):
        mask_model.mask_unmix(x, xbar[..., :-1])


def test_mask_encoder_gets_gradient_through_both_branches(mask_model):
    rng = np.random.default_rng(4)
    x = mask_model.prepare_input(feats(rng))
    H1, H2 = mask_model.unmix(x)["streams"]
    for pick in (0, 1):
        for p in mask_model.params.values():
            p.grad = None
        w = rng.standard_normal(H1.shape)
        um = mask_model.unmix(x)
        (um["streams"][pick] * w).sum().backward()
        assert np.abs(mask_model.tree["maskenc"]["W"].grad).sum() > 0


def test_sd_tied_parameters_give_identical_streams():
    m = SURTModel(tiny_config("sd"), seed=2)
    for a, b in zip(m.tree["sd1"], m.tree["sd2"]):
        for k in a:
            b[k].data[...] = a[k].data
    H1, H2 = m.unmix(m.prepare_input(feats(np.random.default_rng(5))))["streams"]
    assert H1.shape == H2.shape and np.array_equal(H1.data, H2.data)


def test_sd_branches_have_isolated_gradients():
    m = SURTModel(tiny_config("sd"), seed=3)
    H1, H2 = m.unmix(m.prepare_input(feats(np.random.default_rng(6))))["streams"]
    H1.sum().backward()
    assert all(p.grad is None or not np.any(p.grad) for n, p in m.params.items() if n.startswith("sd2."))
    assert any(p.grad is not None and np.any(p.grad) for n, p in m.params.items() if n.startswith("sd1."))


def test_audio_encoder_reduces_time_and_shares_weights(mask_model):
    rng = np.random.default_rng(7)
    H = Tensor(rng.standard_normal((1, 10, mask_model.cfg.feat_dim)))
    f = mask_model.audio_encode(H)
    assert f.shape[1] == 5
    assert mask_model.audio_encode(Tensor(H.data[:, :9])).shape[1] == 5
    both = mask_model.audio_encode(Tensor(np.concatenate([H.data, H.data])))
    assert np.array_equal(both.data[0], both.data[1])


def test_label_encoder_contract(mask_model):
    g, U = mask_model.label_encode([[]])
    assert g.shape[1] == 1 and U.tolist() == [0]
    a, _ = mask_model.label_encode([[0, 1, 2]])
    b, _ = mask_model.label_encode([[0, 1, 0]])
    assert np.array_equal(a.data[0, :3], b.data[0, :3]) and not np.allclose(a.data[0, 3], b.data[0, 3])
    with pytest.raises(ValueError):
        mask_model.label_encode([[3]])


@pytest.mark.parametrize("unmix", ["mask", "sd"])
def test_lattice_shapes(unmix):
    m = SURTModel(tiny_config(unmix), seed=4)
    lat = m.surt_forward(feats(np.random.default_rng(8), T=9), [[0, 1], [2]])
    V = m.cfg.vocab_size
    assert [l.shape for l in lat] == [(5, 3, V + 1), (5, 2, V + 1)]


def test_latency_accounting():
    assert latency_budget_check(tiny_config()) == 150.0
    assert latency_budget_check(tiny_config().replace(conv_lookahead=[0, 0, 0, 0])) == 0.0
    with pytest.raises(ConfigError, match="conv3"):
        latency_budget_check(tiny_config().replace(conv_lookahead=[1, 1, 1, 3]))
    with pytest.raises(ConfigError, match="conv3"):
        latency_budget_check(tiny_config().replace(conv_lookahead=[2, 2, 1, 1]))
    with pytest.raises(ConfigError):
        ModelConfig(latency_ms=120.0).validate()


@pytest.mark.parametrize("unmix", ["mask", "sd", "none"])
def test_streams_depend_on_at_most_budget_future_frames(unmix):
    # wide enough that dead ReLUs cannot cut the t + k path
    m = SURTModel(tiny_config(unmix).replace(conv_channels=[8, 8, 8, 8]), seed=5)
    k = lookahead_frames(m.cfg)
    rng = np.random.default_rng(9)
    x = feats(rng, T=20)
    with no_grad():
        base = [h.data for h in m.unmix(m.prepare_input(x))["streams"]]
        for t in rng.choice(20 - k - 1, size=10, replace=False):
            y = x.copy()
            y[:, t + k + 1 :] += 3.0
            out = [h.data for h in m.unmix(m.prepare_input(y))["streams"]]
            for a, b in zip(base, out):
                assert np.array_equal(a[:, : t + 1], b[:, : t + 1])
            # the budget is used in full: frame t + k does move frame t
            z = x.copy()
            z[:, t + k] += 3.0
            moved = [h.data for h in m.unmix(m.prepare_input(z))["streams"]]
            assert any(not np.allclose(a[:, t], b[:, t]) for a, b in zip(base, moved))


def test_padded_batch_matches_single(mask_model):
    rng = np.random.default_rng(10)
    a, b = feats(rng, T=8), feats(rng, T=12)
    batch = np.zeros((2, 3, 12, 27))
    batch[0, :, :8], batch[1] = a, b
    f, lens = mask_model.infer_f(batch, [8, 12])
    fa, _ = mask_model.infer_f(a)
    fb, _ = mask_model.infer_f(b)
    assert lens.tolist() == [4, 6]
    assert np.allclose(f[:, 0, :4], fa[:, 0], atol=1e-12)
    assert np.allclose(f[:, 1], fb[:, 0], atol=1e-12)


def test_config_text_round_trip(tmp_path):
    cfg = tiny_config("sd", mixenc=False)
    again = ModelConfig.from_text(cfg.to_text())
    assert again == cfg
    with pytest.raises(ConfigError, match="line 1"):
        ModelConfig.from_text("nonsense = 3\n")
    with pytest.raises(ConfigError):
        ModelConfig.from_text("unmix = both\n")


def test_state_arrays_round_trip():
    a, b = SURTModel(tiny_config(), seed=1), SURTModel(tiny_config(), seed=2)
    b.load_arrays({k: v.copy() for k, v in a.state_arrays().items()})
    x = feats(np.random.default_rng(11))
    assert np.array_equal(a.infer_f(x)[0], b.infer_f(x)[0])
    with pytest.raises(ValueError):
        b.load_arrays({})


def test_small_frequency_extent_is_config_error():
    with pytest.raises(ConfigError):
        tiny_config().replace(n_freq=20).validate()
