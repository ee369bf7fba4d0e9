import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from audioclust.model import (
    EncoderConfig,
    HeadConfig,
    PretrainModel,
    cross_entropy,
    init_model,
    load_checkpoint,
    model_from_checkpoint,
    prepare_batch,
    reinit_prediction_head,
    save_checkpoint,
)

TINY_ENC = EncoderConfig(conv_blocks=((8, 3, 2),), embedding_dim=8)
TINY_HEAD = HeadConfig(projection_width=8, num_clusters=4)


def tiny_model(seed=0, dtype=torch.float64):
    return init_model(TINY_ENC, TINY_HEAD, seed=seed, dtype=dtype)


def test_encode_deterministic_for_identical_inputs():
    net = tiny_model()
    x = torch.randn(1, 1, 12, 10, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    batch = torch.cat([x, x])
    h = net.encode(batch)
    assert torch.equal(h[0], h[1])


def test_encode_constant_input_finite():
    net = tiny_model()
    x = torch.full((1, 1, 9, 7), 3.25, dtype=torch.float64)
    h = net.encode(x)
    assert torch.isfinite(h).all()


def test_encode_rejects_non_finite():
    net = tiny_model()
    x = torch.full((1, 1, 9, 7), float("nan"), dtype=torch.float64)
    with pytest.raises(ValueError):
        net.encode(x)


@pytest.mark.parametrize("activation", ["identity", "relu"])
def test_encode_maxpool_monotone_under_input_decrease(activation):
    # non-negative conv weights + monotone activations make the whole
    # mel -> h map monotone; decreasing one time frame cannot raise h
    net = PretrainModel(
        EncoderConfig(conv_blocks=((4, 3, 1),), embedding_dim=6, activation=activation),
        TINY_HEAD,
        dtype=torch.float64,
    )
    gen = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, (torch.nn.Conv2d, torch.nn.Linear)):
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen))
                mod.bias.zero_()
    x = torch.rand(1, 1, 10, 8, dtype=torch.float64, generator=gen) + 0.5
    lowered = x.clone()
    lowered[0, 0, 4, :] -= 0.3
    h_full = net.encode(x)
    h_low = net.encode(lowered)
    assert torch.all(h_low <= h_full + 1e-12)


def test_project_matches_matmul_oracle():
    net = tiny_model(seed=3)
    gen = torch.Generator().manual_seed(4)
    h = torch.randn(5, 8, dtype=torch.float64, generator=gen)
    z = net.project(h)
    W = net.projection.weight.detach().numpy()
    b = net.projection.bias.detach().numpy()
    expected = np.maximum(h.numpy() @ W.T + b, 0.0)
    np.testing.assert_allclose(z.detach().numpy(), expected, atol=1e-6)
    assert np.all(z.detach().numpy() >= 0.0)


def test_project_zero_weights():
    net = tiny_model()
    with torch.no_grad():
        net.projection.weight.zero_()
        net.projection.bias.zero_()
    z = net.project(torch.randn(3, 8, dtype=torch.float64))
    assert torch.all(z == 0)


def test_project_large_negative_bias_clamps():
    net = tiny_model()
    with torch.no_grad():
        net.projection.bias.fill_(-1e6)
    z = net.project(torch.randn(3, 8, dtype=torch.float64))
    assert torch.all(z == 0)


def test_predict_identity_weights_passthrough():
    net = PretrainModel(TINY_ENC, HeadConfig(projection_width=8, num_clusters=8),
                        dtype=torch.float64)
    with torch.no_grad():
        net.head.weight.copy_(torch.eye(8, dtype=torch.float64))
        net.head.bias.zero_()
    z = torch.rand(4, 8, dtype=torch.float64)
    assert torch.allclose(net.predict(z), z)


def test_predict_zero_weights_uniform_softmax():
    net = tiny_model()
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    logits = net.predict(torch.randn(3, 8, dtype=torch.float64))
    probs = torch.softmax(logits, dim=1)
    assert torch.allclose(probs, torch.full_like(probs, 0.25))


def test_predict_matches_matmul_oracle():
    net = tiny_model(seed=5)
    z = torch.randn(6, 8, dtype=torch.float64)
    expected = z.numpy() @ net.head.weight.detach().numpy().T + net.head.bias.detach().numpy()
    np.testing.assert_allclose(net.predict(z).detach().numpy(), expected, atol=1e-6)


def longdouble_cross_entropy(logits, labels):
    x = np.asarray(logits, dtype=np.longdouble)
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    picked = x[np.arange(x.shape[0]), labels]
    return float((lse - picked).mean())


def test_cross_entropy_saturated_case():
    logits = torch.tensor([[100.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    loss = cross_entropy(logits, torch.tensor([0]))
    assert float(loss) == pytest.approx(0.0, abs=1e-8)


def test_cross_entropy_uniform_case():
    logits = torch.zeros(3, 4, dtype=torch.float64)
    loss = cross_entropy(logits, torch.tensor([0, 1, 3]))
    assert float(loss) == pytest.approx(np.log(4.0), abs=1e-12)


def test_cross_entropy_matches_longdouble_oracle():
    rng = np.random.default_rng(6)
    logits = rng.normal(scale=5.0, size=(16, 7))
    labels = rng.integers(0, 7, size=16)
    loss = cross_entropy(torch.tensor(logits), torch.tensor(labels))
    assert float(loss) == pytest.approx(longdouble_cross_entropy(logits, labels), abs=1e-10)


def test_cross_entropy_rejects_out_of_range_labels():
    logits = torch.zeros(2, 3, dtype=torch.float64)
    with pytest.raises(ValueError):
        cross_entropy(logits, torch.tensor([0, 3]))


def test_softmax_rows_sum_to_one_loss_nonneg():
    rng = np.random.default_rng(7)
    logits = torch.tensor(rng.normal(scale=30.0, size=(8, 5)))
    probs = torch.softmax(logits, dim=1)
    np.testing.assert_allclose(probs.sum(dim=1).numpy(), 1.0, atol=1e-12)
    labels = torch.tensor(rng.integers(0, 5, size=8))
    assert float(cross_entropy(logits, labels)) >= 0.0


def test_reinit_head_deterministic_and_isolated():
    net = tiny_model(seed=8)
    enc_before = {k: v.clone() for k, v in net.encoder.state_dict().items()}
    proj_before = net.projection.weight.clone()
    reinit_prediction_head(net, seed=99)
    w1 = net.head.weight.clone()
    reinit_prediction_head(net, seed=99)
    assert torch.equal(net.head.weight, w1)
    for k, v in net.encoder.state_dict().items():
        assert torch.equal(v, enc_before[k])
    assert torch.equal(net.projection.weight, proj_before)


def test_reinit_head_no_class_bias():
    # over many reinits the argmax class on a fixed z should be uniform
    net = tiny_model(seed=9)
    gen = torch.Generator().manual_seed(10)
    z = torch.rand(1, 8, dtype=torch.float64, generator=gen)
    counts = np.zeros(4, dtype=int)
    for seed in range(10_000):
        reinit_prediction_head(net, seed=seed)
        counts[int(net.predict(z).argmax())] += 1
    assert chisquare(counts).pvalue > 0.01


def test_full_chain_gradients_match_finite_differences():
    net = tiny_model(seed=11)
    gen = torch.Generator().manual_seed(12)
    x = torch.randn(2, 1, 9, 7, dtype=torch.float64, generator=gen)
    labels = torch.tensor([1, 3])

    def loss_value():
        return cross_entropy(net(x), labels)

    loss = loss_value()
    loss.backward()
    step = 1e-3
    for name, param in net.named_parameters():
        grad = param.grad
        assert grad is not None, name
        numeric = torch.zeros_like(param)
        flat = param.data.view(-1)
        num_flat = numeric.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + step
                up = float(loss_value())
                flat[i] = orig - step
                down = float(loss_value())
                flat[i] = orig
            num_flat[i] = (up - down) / (2 * step)
        denom = max(float(grad.norm()), float(numeric.norm()), 1e-12)
        rel_err = float((grad - numeric).norm()) / denom
        assert rel_err <= 1e-4, f"{name}: rel err {rel_err:.2e}"


def test_inference_bitwise_deterministic():
    net = tiny_model(seed=13, dtype=torch.float32)
    x = torch.randn(4, 1, 12, 10, generator=torch.Generator().manual_seed(14))
    with torch.no_grad():
        a = net(x)
        b = net(x)
    assert torch.equal(a, b)


def test_prepare_batch_standardization():
    rng = np.random.default_rng(15)
    mels = rng.normal(loc=-14.0, scale=5.0, size=(3, 20, 8)).astype(np.float32)
    x = prepare_batch(mels, standardize=True)
    assert x.shape == (3, 1, 20, 8)
    means = x.mean(dim=(2, 3)).squeeze(1)
    assert torch.allclose(means, torch.zeros(3), atol=1e-5)
    raw = prepare_batch(mels, standardize=False)
    np.testing.assert_allclose(raw.squeeze(1).numpy(), mels, atol=0)


def test_prepare_batch_constant_input_finite():
    mels = np.full((2, 10, 6), -23.0, dtype=np.float32)
    x = prepare_batch(mels, standardize=True)
    assert torch.isfinite(x).all()


def test_checkpoint_roundtrip_exact(tmp_path):
    net = tiny_model(seed=16, dtype=torch.float32)
    opt = torch.optim.SGD(net.parameters(), lr=0.05, momentum=0.9)
    x = torch.randn(2, 1, 9, 7, generator=torch.Generator().manual_seed(17))
    loss = cross_entropy(net(x), torch.tensor([0, 2]))
    loss.backward()
    opt.step()
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, net, epoch=3, cfg_hash="abc", optimizer=opt,
                    last_labels=np.array([0, 1, 0]))
    payload = load_checkpoint(path)
    assert payload["epoch"] == 3
    assert payload["config_hash"] == "abc"
    assert payload["last_labels"].tolist() == [0, 1, 0]
    restored = model_from_checkpoint(payload)
    with torch.no_grad():
        assert torch.equal(restored(x), net(x))
