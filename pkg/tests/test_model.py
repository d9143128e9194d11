import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, relative_error
from ocreid.exceptions import ConfigurationError, NumericError, ShapeError
from ocreid.model import (
    QualityPredictor,
    T2MGSNet,
    fuse_global,
    load_checkpoint,
    partition,
    pool_global,
    quality_predict,
    read_checkpoint_header,
    save_checkpoint,
    screen_and_embed,
    weighted_pool,
)


def toy_head_model(C=8, H=6, k=3):
    """Model with a C-channel 1x1 backbone; tests feed feature maps straight into the head."""
    model = T2MGSNet(4, 6, k=k, reduction=4, backbone=torch.nn.Conv2d(3, C, 1), input_size=(H, 4))
    return model.double()


def test_toy_backbone_shape():
    model = T2MGSNet(4, 8)
    out = model.extract_features(torch.rand(5, 3, 64, 32))
    assert tuple(out.shape) == (5, 64, 12, 4)


def test_bad_k_is_construction_error():
    with pytest.raises(ConfigurationError):
        T2MGSNet(4, 8, k=5)


def test_tall_backbone_profile():
    assert T2MGSNet(4, 8, k=8, feature_height=24).feature_shape == (64, 24, 4)


def test_partition_six_two_row_slabs():
    F = torch.rand(2, 64, 12, 4)
    parts = partition(F, 6)
    assert len(parts) == 6 and all(p.shape == (2, 64, 2, 4) for p in parts)
    assert torch.equal(torch.cat(parts, dim=-2), F)
    assert torch.equal(partition(F, 1)[0], F)
    with pytest.raises(ShapeError):
        partition(F, 5)


def test_quality_half_at_zero_weights():
    qp = QualityPredictor(8, 4)
    for m in (qp.conv1, qp.conv2):
        torch.nn.init.zeros_(m.weight)
        torch.nn.init.zeros_(m.bias)
    qp.train()
    assert torch.equal(qp(torch.randn(3, 8, 2, 4)), torch.full((3, 8), 0.5))
    qp.eval()
    assert torch.equal(qp(torch.randn(3, 8, 2, 4)), torch.full((3, 8), 0.5))


def test_quality_strictly_inside_unit_interval():
    qp = QualityPredictor(16, 4)
    for mode in (True, False):
        qp.train(mode)
        q = qp(torch.randn(10, 16, 2, 4) * 3)
        assert (q > 0).all() and (q < 1).all()


def test_quality_non_finite_names_partition():
    x = torch.randn(2, 8, 2, 4)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError, match="partition 3"):
        quality_predict(x, QualityPredictor(8, 4), index=3)


def test_weighted_pool_identities():
    f = torch.randn(3, 8, 2, 4, dtype=torch.float64)
    assert torch.allclose(weighted_pool(f, torch.ones(3, 8, dtype=torch.float64)), f.mean(dim=(-2, -1)))
    assert not weighted_pool(f, torch.zeros(3, 8, dtype=torch.float64)).any()
    c = torch.randn(8, dtype=torch.float64)
    phi = torch.rand(8, dtype=torch.float64)
    const = c[:, None, None].expand(8, 2, 4)
    assert torch.allclose(weighted_pool(const, phi), c * phi)
    assert torch.allclose(weighted_pool(f, phi), f.mean(dim=(-2, -1)) * phi)
    with pytest.raises(ShapeError):
        weighted_pool(f, torch.ones(3, 7))


def test_fuse_global_mean():
    v = torch.randn(8)
    assert torch.allclose(fuse_global([v] * 6), v)
    a, b = torch.randn(8, dtype=torch.float64), torch.randn(8, dtype=torch.float64)
    assert torch.allclose(fuse_global([a, b]), (a + b) / 2)
    with pytest.raises(ConfigurationError):
        fuse_global([])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.randoms(use_true_random=False))
def test_fuse_global_permutation_invariant(k, rnd):
    vs = [torch.randn(5, dtype=torch.float64) for _ in range(k)]
    perm = list(vs)
    rnd.shuffle(perm)
    assert torch.allclose(fuse_global(vs), fuse_global(perm), rtol=0, atol=1e-12)


def test_pool_global():
    assert torch.equal(pool_global(torch.full((3, 6, 4), 2.5)), torch.full((3,), 2.5))
    assert not pool_global(torch.zeros(3, 6, 4)).any()
    F = torch.randn(2, 8, 12, 4, dtype=torch.float64)
    per_part = torch.stack([p.mean(dim=(-2, -1)) for p in partition(F, 6)]).mean(0)
    assert torch.allclose(pool_global(F), per_part)


def test_screen_two_channel_toy():
    part = torch.ones(2, 1, 1)
    out = screen_and_embed([part], [torch.tensor([0.2, 0.4])], 0.35)
    assert out.tolist() == [0.0, pytest.approx(0.4)]


def test_screen_ties_survive():
    out = screen_and_embed([torch.ones(2, 1, 1)], [torch.tensor([0.35, 0.3])], 0.35)
    assert out.tolist() == [pytest.approx(0.35), 0.0]


def test_screen_lambda_bounds():
    with pytest.raises(ConfigurationError):
        screen_and_embed([torch.ones(2, 1, 1)], [torch.tensor([0.5, 0.5])], 1.5)


def test_screening_endpoints_on_model():
    model = T2MGSNet(4, 8).eval()
    x = torch.rand(6, 3, 64, 32)
    bundle = model(x)
    assert torch.equal(model.embed(x, 0.0), bundle.f_gw)
    assert not model.embed(x, 1.0).any()


def test_forward_train_heads():
    model = T2MGSNet(4, 8)
    bundle, g, p, c = model.forward_train(torch.rand(8, 3, 64, 32))
    assert g.shape == (8, 4) and p.shape == (8, 4) and c.shape == (8, 8)
    assert len(bundle.quality) == 6 and bundle.part_embeddings.shape == (8, 6, 64)
    assert all(((q > 0) & (q < 1)).all() for q in bundle.quality)


def test_frozen_eval_forward_is_pure():
    model = T2MGSNet(4, 8).eval()
    x = torch.rand(8, 3, 64, 32)
    with torch.no_grad():
        a, b = model.forward_train(x), model.forward_train(x)
    for u, v in zip(a[1:], b[1:]):
        assert torch.equal(u, v)


def test_baseline_model_has_no_part_branch():
    model = T2MGSNet(4, 8, t2mgs=False)
    bundle, g, p, c = model.forward_train(torch.rand(4, 3, 64, 32))
    assert p is None and bundle.f_gw is None
    assert not hasattr(model, "quality_predictors")


def test_checkpoint_roundtrip(tmp_path):
    model = T2MGSNet(4, 8).eval()
    path = save_checkpoint(tmp_path / "c.npz", model, 0.35, epoch=3)
    header = read_checkpoint_header(path)
    assert header["k"] == 6 and header["C"] == 64 and header["r"] == 4 and header["epoch"] == 3
    assert header["lambda"] == 0.35 and header["input_size"] == [64, 32]
    loaded, _ = load_checkpoint(path, expect={"num_identities": 4})
    x = torch.rand(3, 3, 64, 32)
    assert torch.equal(loaded.embed(x, 0.35), model.embed(x, 0.35))
    from ocreid.exceptions import VocabularyMismatchError
    with pytest.raises(VocabularyMismatchError):
        load_checkpoint(path, expect={"num_clothes": 9})


# ---------------------------------------------------------------- gradient checks (C=8, H=6, W=4, k=3)

@pytest.mark.parametrize("train_mode", [True, False])
@pytest.mark.parametrize("layer", ["conv1", "conv2"])
def test_quality_mean_score_gradient(layer, train_mode):
    torch.manual_seed(1)
    qp = QualityPredictor(8, 4).double().train(train_mode)
    if not train_mode:
        qp.bn.running_mean.normal_()
        qp.bn.running_var.uniform_(0.5, 2.0)
    part = torch.randn(5, 8, 2, 4, dtype=torch.float64)
    weight = getattr(qp, layer).weight
    qp.zero_grad()
    qp(part).mean().backward()
    analytic = weight.grad.clone()
    with torch.no_grad():
        numeric = central_difference(lambda: qp(part).mean(), weight, h=1e-5)
    assert relative_error(analytic, numeric) < 1e-4


def test_part_embedding_gradient_wrt_backbone_activations():
    torch.manual_seed(2)
    model = toy_head_model()
    model.train()
    F = torch.randn(4, 8, 6, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(4, 8, dtype=torch.float64)
    (model.head_features(F).f_gw * w).sum().backward()
    analytic = F.grad.clone()
    G = F.detach().clone()
    with torch.no_grad():
        numeric = central_difference(lambda: (model.head_features(G).f_gw * w).sum(), G)
    assert relative_error(analytic, numeric) < 1e-4
