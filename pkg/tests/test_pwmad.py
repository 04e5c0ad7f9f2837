import math

import numpy as np
import pwmad_helpers
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from morphmad import pwmad
from morphmad.pwmad import ConfigError, PwMadConfig, PwMadOutput

SMALL = dict(input_size=32, block_config=(2, 2), growth_rate=8, num_init_features=16, bn_size=2)


# ------------------------------------------------------------ architecture


def test_default_shapes():
    model = pwmad.build_model(seed=0).eval()
    with torch.no_grad():
        out = model(torch.randn(2, 3, 224, 224))
    assert out.pixel_map.shape == (2, 14, 14)
    assert out.binary_score.shape == (2,)
    assert torch.all((out.pixel_map > 0) & (out.pixel_map < 1))


def test_stride_rule_160():
    cfg = PwMadConfig(input_size=160)
    assert cfg.map_size == (10, 10)
    with torch.no_grad():
        out = pwmad.build_model(cfg, seed=0).eval()(torch.randn(1, 3, 160, 160))
    assert out.pixel_map.shape == (1, 10, 10)


def test_indivisible_input_size():
    with pytest.raises(ConfigError):
        pwmad.build_model(PwMadConfig(input_size=225))


def test_wrong_input_size_at_forward():
    model = pwmad.build_model(PwMadConfig(**SMALL), seed=0)
    with pytest.raises(ValueError):
        model(torch.randn(1, 3, 40, 40))


def test_torchvision_weights_load():
    from torchvision.models import densenet121

    model = pwmad.build_model(seed=0)
    ref = densenet121(weights=None).state_dict()
    loaded = pwmad.load_densenet_weights(model, ref)
    assert "features.conv0.weight" in loaded
    assert "features.transition2.conv.weight" in loaded
    assert not any(k.startswith("features.denseblock3") for k in loaded)
    assert torch.equal(model.state_dict()["features.conv0.weight"], ref["features.conv0.weight"])


def test_config_round_trip():
    cfg = PwMadConfig(**SMALL)
    assert PwMadConfig.from_json(cfg.to_json()) == cfg


# ------------------------------------------------------------------- losses


def test_bce_values():
    assert pwmad.bce(1, 1 - 1e-12) == pytest.approx(0.0, abs=1e-9)
    assert pwmad.bce(1, 0.5) == pytest.approx(0.693147, abs=1e-6)
    assert pwmad.bce(0, 0.9) == pytest.approx(2.302585, abs=1e-6)


@pytest.mark.parametrize("x", [0.0, 1.0, -0.1, 1.5])
def test_bce_domain(x):
    with pytest.raises(ValueError):
        pwmad.bce(1, x)


@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
def test_bce_decreasing_for_positive_label(a, b):
    if a < b:
        assert pwmad.bce(1, a) > pwmad.bce(1, b)


def test_loss_example_half_lambda():
    pm = torch.full((1, 14, 14), math.exp(-0.6), dtype=torch.float64)  # per-cell BCE 0.6
    score = torch.tensor([math.exp(-0.2)], dtype=torch.float64)  # BCE 0.2
    loss = pwmad.overall_loss(PwMadOutput(pm, score), torch.ones(1, 14, 14), torch.ones(1), 0.5)
    assert float(loss) == pytest.approx(0.4, abs=1e-6)


def test_loss_perfect_prediction():
    out = PwMadOutput(torch.tensor([[[1.0]], [[0.0]]]), torch.tensor([1.0, 0.0]))
    loss = pwmad.overall_loss(out, torch.tensor([[[1.0]], [[0.0]]]), torch.tensor([1.0, 0.0]))
    assert float(loss) == pytest.approx(0.0, abs=1e-6)


def test_loss_decomposition_random():
    worst, exact = pwmad_helpers.loss_contract(n_cases=200, seed=1)
    assert worst <= 1e-6 and exact


def test_loss_shape_mismatch():
    out = PwMadOutput(torch.full((2, 3, 3), 0.5), torch.full((2,), 0.5))
    with pytest.raises(ValueError):
        pwmad.overall_loss(out, torch.zeros(2, 4, 4), torch.zeros(2))


def test_loss_sample_weights():
    out = PwMadOutput(torch.tensor([[[0.3]], [[0.6]]]), torch.tensor([0.3, 0.6]))
    y = torch.tensor([1.0, 0.0])
    plain = pwmad.overall_loss(out, y[:, None, None], y)
    weighted = pwmad.overall_loss(out, y[:, None, None], y, weights=[2.0, 0.0])
    first = pwmad.overall_loss(PwMadOutput(out.pixel_map[:1], out.binary_score[:1]), y[:1, None, None], y[:1])
    assert float(weighted) == pytest.approx(float(first))
    assert float(weighted) != pytest.approx(float(plain))


def test_gradient_check_miniature():
    frac, n = pwmad_helpers.gradient_check(seed=3)
    assert n > 500 and frac >= 0.95


# ---------------------------------------------------------------- scoring


def test_zero_init_scores_half():
    model = pwmad.build_model(PwMadConfig(**SMALL, zero_init_heads=True), seed=0)
    s = pwmad.score(model, torch.randn(3, 3, 32, 32))
    assert np.all(s == 0.5)
    with torch.no_grad():
        assert torch.all(model.eval()(torch.randn(1, 3, 32, 32)).pixel_map == 0.5)


def test_score_deterministic_and_single():
    model = pwmad.build_model(PwMadConfig(**SMALL), seed=0)
    x = torch.randn(3, 32, 32)
    a, b = pwmad.score(model, x), pwmad.score(model, x)
    assert isinstance(a, float) and a == b and 0 < a < 1
    assert model.training  # score restores the previous mode


def test_batch_equivariance():
    model = pwmad.build_model(PwMadConfig(**SMALL), seed=0).eval()
    x = torch.randn(5, 3, 32, 32)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        a, b = model(x), model(x[perm])
    assert torch.allclose(a.pixel_map[perm], b.pixel_map, atol=1e-6)
    assert torch.allclose(a.binary_score[perm], b.binary_score, atol=1e-6)


def test_preprocess_resizes_and_normalises():
    img = np.full((50, 40, 3), 255, np.uint8)
    x = pwmad.preprocess_images(img, 32)
    assert x.shape == (1, 3, 32, 32)
    want = (1.0 - np.array(pwmad.IMAGENET_MEAN)) / np.array(pwmad.IMAGENET_STD)
    assert np.allclose(x[0, :, 0, 0].numpy(), want, atol=1e-5)


def test_checkpoint_round_trip(tmp_path):
    model = pwmad.build_model(PwMadConfig(**SMALL), seed=0)
    path = tmp_path / "m.ckpt"
    pwmad.save_checkpoint(path, model, {"note": "x"})
    header = pwmad.read_checkpoint_header(path)
    assert header["config"]["input_size"] == 32 and header["extra"] == {"note": "x"}
    assert header["preprocessing"]["mean"] == list(pwmad.IMAGENET_MEAN)
    back = pwmad.load_checkpoint(path)
    x = torch.randn(2, 3, 32, 32)
    assert np.array_equal(pwmad.score(model, x), pwmad.score(back, x))


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        pwmad.load_checkpoint(tmp_path / "x")
